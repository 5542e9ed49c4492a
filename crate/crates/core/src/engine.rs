//! Round orchestration: broadcast, local training, aggregation.
//!
//! Each round every client starts from the current global weights, trains on
//! its shard (optionally regularized by the server's impression batch, or by
//! a proximal term for FedProx) and the server averages the results in
//! client-id order. Clients may train concurrently; they share only
//! immutable inputs.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SeedPool, ShardSet};
use crate::error::{Error, Result};
use crate::impression::{self, ImpressionBatch, SynthesisConfig};
use crate::metrics::{self, ClientRecord, CrossAccuracyMatrix, ImpressionStats, RoundRecord};
use crate::nn::{GradientSet, Model};
use crate::par;
use crate::seeds::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
    FedImpres,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedImpres => "fedimpres",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedprox" => Ok(Algorithm::FedProx),
            "fedimpres" => Ok(Algorithm::FedImpres),
            other => Err(format!("unknown algorithm {other:?} (fedavg | fedprox | fedimpres)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Uniform,
    Weighted,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Uniform => "uniform",
            Aggregation::Weighted => "weighted",
        })
    }
}

impl FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Aggregation::Uniform),
            "weighted" => Ok(Aggregation::Weighted),
            other => Err(format!("unknown aggregation {other:?} (uniform | weighted)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub algorithm: Algorithm,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub batch_size: usize,
    /// Weight of the impression-batch loss in local training.
    pub beta: f64,
    /// FedProx proximal coefficient.
    pub mu: f64,
    pub warmup_rounds: usize,
    pub total_rounds: usize,
    pub aggregation: Aggregation,
    pub master_seed: u64,
    pub parallel: bool,
    /// Sample cross-client accuracies at every local epoch boundary.
    pub track_forgetting: bool,
    /// Start each synthesis from the previous round's impression instead of
    /// the seed pool. Experimental.
    pub warm_start: bool,
    pub synthesis: SynthesisConfig,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedImpres,
            local_epochs: 5,
            local_lr: 0.01,
            batch_size: 16,
            beta: 1.0,
            mu: 0.01,
            warmup_rounds: 2,
            total_rounds: 8,
            aggregation: Aggregation::Uniform,
            master_seed: 0,
            parallel: true,
            track_forgetting: false,
            warm_start: false,
            synthesis: SynthesisConfig::default(),
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1".into());
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return bad(format!("mu must be non-negative, got {}", self.mu));
        }
        if !(self.local_lr > 0.0) {
            return bad(format!("train_lr must be positive, got {}", self.local_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.total_rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.warmup_rounds >= self.total_rounds {
            return bad(format!(
                "warmup_rounds ({}) must be below rounds ({})",
                self.warmup_rounds, self.total_rounds
            ));
        }
        self.synthesis.validate()
    }

    /// Total local epochs a client runs over the experiment.
    pub fn local_epoch_budget(&self) -> usize {
        self.total_rounds * self.local_epochs
    }

    fn synthesizes_in(&self, round: usize) -> bool {
        self.algorithm == Algorithm::FedImpres && round >= self.warmup_rounds
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Indices into the parent training set.
    pub shard: Vec<usize>,
    pub data: Dataset,
    /// Local model; overwritten by the global model at every broadcast.
    pub model: Model,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub client: usize,
    pub model: Model,
    pub n_samples: usize,
    /// Accuracy of the model on each probe shard at every local epoch
    /// boundary; empty when no probe shards were given.
    pub probes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: Vec<Tensor>,
    pub n_samples: usize,
}

/// Forgetting-penalized local training: each step minimizes
/// `CE(local batch) + beta * CE(impression batch)`.
pub fn local_train(
    client: &ClientState,
    global: &Model,
    impression: Option<&ImpressionBatch>,
    cfg: &RoundConfig,
    round: usize,
    probe: Option<&[Dataset]>,
) -> Result<LocalOutcome> {
    train_loop(client, global, impression, None, cfg, round, probe)
}

/// FedProx local training: each step adds `mu/2 ‖w - w_G‖²` to the loss.
pub fn fedprox_local_train(
    client: &ClientState,
    global: &Model,
    cfg: &RoundConfig,
    round: usize,
    probe: Option<&[Dataset]>,
) -> Result<LocalOutcome> {
    train_loop(client, global, None, Some(cfg.mu), cfg, round, probe)
}

/// Gradient of `mu/2 ‖w - w_G‖²`.
pub fn proximal_gradient(model: &Model, global: &Model, mu: f64) -> GradientSet {
    GradientSet {
        tensors: model
            .params()
            .iter()
            .zip(global.params())
            .map(|(w, g)| {
                let mut d = w.clone();
                d.axpy(-1.0, g);
                d.scale(mu);
                d
            })
            .collect(),
    }
}

fn train_loop(
    client: &ClientState,
    global: &Model,
    impression: Option<&ImpressionBatch>,
    mu: Option<f64>,
    cfg: &RoundConfig,
    round: usize,
    probe: Option<&[Dataset]>,
) -> Result<LocalOutcome> {
    let n = client.data.len();
    if n == 0 {
        return Err(Error::config(None, format!("client {} has an empty shard", client.id)));
    }
    if global.params().len() != client.model.params().len() {
        return Err(Error::Protocol {
            client: client.id,
            msg: "local model is not congruent with the global model".into(),
        });
    }
    let mut model = global.clone();
    let mut rng = seeds::rng(cfg.master_seed, Stream::Client, client.id as u64, round as u64);
    let mut order: Vec<usize> = (0..n).collect();
    let mut probes = Vec::new();
    let mut record_probe = |m: &Model| -> Result<()> {
        if let Some(shards) = probe {
            probes.push(metrics::accuracy_row(m, shards)?);
        }
        Ok(())
    };
    record_probe(&model)?;

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = client.data.images.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| client.data.labels[i]).collect();
            let (mut grads, _) = model.backward(&x, &y)?;
            if let Some(imp) = impression {
                let (g_imp, _) = model.backward(&imp.images, &imp.pseudo_labels)?;
                grads.axpy(cfg.beta, &g_imp);
            }
            if let Some(mu) = mu {
                grads.axpy(1.0, &proximal_gradient(&model, global, mu));
            }
            model.apply_sgd(&grads, cfg.local_lr)?;
        }
        record_probe(&model)?;
    }
    Ok(LocalOutcome {
        client: client.id,
        model,
        n_samples: n,
        probes,
    })
}

/// Average client parameters.
///
/// Updates are summed in client-id order regardless of input order, and the
/// result is clamped coordinatewise to the inputs' range.
pub fn aggregate(updates: &[ClientUpdate], mode: Aggregation) -> Result<Vec<Tensor>> {
    let Some(first) = updates.first() else {
        return Err(Error::Input("no updates to aggregate".into()));
    };
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client);
    for u in &sorted {
        let congruent = u.params.len() == first.params.len()
            && u.params.iter().zip(&first.params).all(|(a, b)| a.same_shape(b));
        if !congruent {
            return Err(Error::Protocol {
                client: u.client,
                msg: "update shapes differ from the other clients".into(),
            });
        }
    }
    let weights: Vec<f64> = match mode {
        Aggregation::Uniform => vec![1.0; sorted.len()],
        Aggregation::Weighted => sorted.iter().map(|u| u.n_samples as f64).collect(),
    };
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Input("aggregation weights sum to zero".into()));
    }

    let mut out = Vec::with_capacity(first.params.len());
    for p in 0..first.params.len() {
        let len = first.params[p].len();
        let mut acc = vec![0.0; len];
        let mut lo = vec![f64::INFINITY; len];
        let mut hi = vec![f64::NEG_INFINITY; len];
        for (u, &w) in sorted.iter().zip(&weights) {
            for (i, &v) in u.params[p].data().iter().enumerate() {
                acc[i] += w * v;
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        let data = acc
            .iter()
            .zip(lo.iter().zip(&hi))
            .map(|(a, (l, h))| (a / total).clamp(*l, *h))
            .collect();
        out.push(Tensor::new(first.params[p].shape().to_vec(), data)?);
    }
    Ok(out)
}

/// A set of clients plus the server-side resources for one experiment.
#[derive(Debug, Clone)]
pub struct Federation {
    pub cfg: RoundConfig,
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    pub pool: Option<SeedPool>,
    last_impression: Option<ImpressionBatch>,
}

impl Federation {
    pub fn new(
        cfg: RoundConfig,
        train: &Dataset,
        shards: &ShardSet,
        test: Dataset,
        pool: Option<SeedPool>,
        global: &Model,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.algorithm == Algorithm::FedImpres && pool.is_none() {
            return Err(Error::Validation("fedimpres needs a synthesis seed pool".into()));
        }
        let clients = shards
            .shards
            .iter()
            .enumerate()
            .map(|(id, shard)| {
                Ok(ClientState {
                    id,
                    shard: shard.clone(),
                    data: train
                        .subset(shard)
                        .map_err(|_| Error::config(None, format!("client {id} has an empty shard")))?,
                    model: global.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            clients,
            test,
            pool,
            last_impression: None,
        })
    }

    fn synthesize(&self, global: &Model) -> Result<ImpressionBatch> {
        let syn = &self.cfg.synthesis;
        match (&self.last_impression, self.cfg.warm_start) {
            (Some(prev), true) => {
                let labels = impression::predict(global, &prev.images)?;
                impression::synthesize_from(global, prev.images.clone(), labels, syn)
            }
            _ => {
                let pool = self
                    .pool
                    .as_ref()
                    .ok_or_else(|| Error::Validation("fedimpres needs a synthesis seed pool".into()))?;
                impression::synthesize(global, pool, syn)
            }
        }
    }

    /// Broadcast, train every client, aggregate, evaluate.
    pub fn run_round(&mut self, global: &Model, round: usize) -> Result<(Model, RoundRecord)> {
        let cfg = self.cfg.clone();
        if round >= cfg.total_rounds {
            return Err(Error::Input(format!(
                "round {round} beyond configured {} rounds",
                cfg.total_rounds
            )));
        }
        for c in &mut self.clients {
            c.model = global.clone();
        }

        let impression = if cfg.synthesizes_in(round) {
            Some(self.synthesize(global)?)
        } else {
            None
        };

        let probe_shards: Option<Vec<Dataset>> = cfg
            .track_forgetting
            .then(|| self.clients.iter().map(|c| c.data.clone()).collect());
        let probe = probe_shards.as_deref();
        let outcomes = par::map(&self.clients, cfg.parallel, |c| {
            let r = match cfg.algorithm {
                Algorithm::FedProx => fedprox_local_train(c, global, &cfg, round, probe),
                _ => local_train(c, global, impression.as_ref(), &cfg, round, probe),
            };
            r.map_err(|e| Error::Client {
                client: c.id,
                source: Box::new(e),
            })
        });
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        let updates: Vec<ClientUpdate> = outcomes
            .iter()
            .map(|o| ClientUpdate {
                client: o.client,
                params: o.model.params().to_vec(),
                n_samples: o.n_samples,
            })
            .collect();
        let next = global.with_params(aggregate(&updates, cfg.aggregation)?)?;

        let client_records = par::map(&outcomes, cfg.parallel, |o| {
            let (acc, loss) = metrics::evaluate(&o.model, &self.clients[o.client].data)?;
            Ok(ClientRecord {
                client: o.client,
                n_samples: o.n_samples,
                local_loss: loss,
                local_acc: acc,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let (global_acc, global_loss) = metrics::evaluate(&next, &self.test)?;

        let (cross, probes) = if let Some(shards) = &probe_shards {
            let models: Vec<Model> = outcomes.iter().map(|o| o.model.clone()).collect();
            let cross = metrics::cross_matrix(&models, shards, cfg.parallel)?;
            let points = outcomes[0].probes.len();
            let probes = (0..points)
                .map(|t| CrossAccuracyMatrix {
                    entries: outcomes.iter().map(|o| o.probes[t].clone()).collect(),
                })
                .collect();
            (Some(cross), probes)
        } else {
            (None, Vec::new())
        };

        let impression_stats = impression.as_ref().map(|imp| {
            let last = imp.history.last();
            ImpressionStats {
                initial_ce: imp.history.first().map_or(0.0, |h| h.ce),
                final_ce: impression::ce_sum(global, &imp.images, &imp.pseudo_labels).unwrap_or(f64::MAX),
                final_penalty: last.map_or(0.0, |h| h.penalty),
                constraint_norm: impression::head_gradient_sum(global, &imp.images, &imp.pseudo_labels)
                    .map(|g| g.norm())
                    .unwrap_or(f64::MAX),
            }
        });

        for (c, o) in self.clients.iter_mut().zip(&outcomes) {
            c.model = o.model.clone();
        }
        if impression.is_some() {
            self.last_impression = impression;
        }

        let record = RoundRecord {
            round,
            algorithm: cfg.algorithm.to_string(),
            clients: client_records,
            global_acc,
            global_loss,
            cross,
            probes,
            impression: impression_stats,
        };
        Ok((next, record))
    }

    pub fn last_impression(&self) -> Option<&ImpressionBatch> {
        self.last_impression.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub records: Vec<RoundRecord>,
    pub global: Model,
    pub client_models: Vec<Model>,
}

/// Run every configured round starting from `global`.
pub fn run_experiment(fed: &mut Federation, global: Model) -> Result<Experiment> {
    fed.cfg.validate()?;
    let mut global = global;
    let mut records = Vec::with_capacity(fed.cfg.total_rounds);
    for round in 0..fed.cfg.total_rounds {
        let (next, rec) = fed.run_round(&global, round)?;
        global = next;
        records.push(rec);
    }
    Ok(Experiment {
        records,
        global,
        client_models: fed.clients.iter().map(|c| c.model.clone()).collect(),
    })
}
