//! Helpers shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedimpres::config::ExperimentConfig;
use fedimpres::data::{self, Dataset, SeedPool, ShardSet, ToySpec};
use fedimpres::engine::{Algorithm, Federation, RoundConfig};
use fedimpres::impression::{self, SynthesisConfig};
use fedimpres::metrics::RoundRecord;
use fedimpres::nn::loss::{ce_grad_logits, ce_loss, classifier_grad};
use fedimpres::nn::{pack_head, LayerSpec, Model};
use fedimpres::Tensor;

pub const FD_EPS: f64 = 1e-6;

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, with a floor so two zero vectors compare equal.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + FD_EPS;
            let up = f(&x);
            x[i] = v - FD_EPS;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Worst relative error over every parameter tensor and the input, for mean
/// cross-entropy through `layers`.
fn check_network(layers: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(layers, seed).unwrap();
    let x = random_tensor(&mut rng, input_shape, -1.0, 1.0);
    let y = random_labels(&mut rng, input_shape[0], model.n_classes());
    let (grads, dx) = model.backward(&x, &y).unwrap();
    let loss_at = |m: &Model, x: &Tensor| ce_loss(&m.forward(x).unwrap(), &y).unwrap();

    let mut worst = 0.0f64;
    for (p, g) in grads.tensors.iter().enumerate() {
        let num = numeric_grad(model.params()[p].data(), |v| {
            let mut params = model.params().to_vec();
            params[p] = Tensor::new(params[p].shape().to_vec(), v.to_vec()).unwrap();
            loss_at(&model.with_params(params).unwrap(), &x)
        });
        worst = worst.max(rel_err(g.data(), &num));
    }
    let num = numeric_grad(x.data(), |v| loss_at(&model, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()));
    worst.max(rel_err(dx.data(), &num))
}

pub struct GradCase {
    pub name: &'static str,
    /// Goes through the quadratic penalty of the synthesis objective.
    pub second_order: bool,
    pub err: f64,
}

/// Finite-difference checks for every layer kind, the loss, the head
/// gradient, and the full synthesis objective.
pub fn gradient_suite(seed: u64) -> Vec<GradCase> {
    let first = |name, err| GradCase {
        name,
        second_order: false,
        err,
    };
    let mut out = vec![
        first("dense", check_network(vec![LayerSpec::Dense { input: 5, output: 3 }], &[4, 5], seed)),
        first(
            "relu",
            check_network(
                vec![
                    LayerSpec::Dense { input: 6, output: 5 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { input: 5, output: 4 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { input: 4, output: 3 },
                ],
                &[4, 6],
                seed,
            ),
        ),
        first(
            "conv",
            check_network(
                vec![
                    LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, pad: 1, in_h: 5, in_w: 5 },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d { in_ch: 3, out_ch: 2, kernel: 3, stride: 2, pad: 0, in_h: 5, in_w: 5 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { input: 8, output: 3 },
                ],
                &[3, 2, 5, 5],
                seed,
            ),
        ),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCE);
    let logits = random_tensor(&mut rng, &[4, 5], -3.0, 3.0);
    let y = random_labels(&mut rng, 4, 5);
    let analytic = ce_grad_logits(&logits, &y).unwrap();
    let num = numeric_grad(logits.data(), |v| ce_loss(&Tensor::new(vec![4, 5], v.to_vec()).unwrap(), &y).unwrap());
    out.push(first("ce_loss", rel_err(analytic.data(), &num)));

    let model = Model::mlp(6, &[5], 4, seed).unwrap();
    let x = random_tensor(&mut rng, &[5, 6], 0.0, 1.0);
    let y = random_labels(&mut rng, 5, 4);
    let trace = model.forward_trace(&x).unwrap();
    let analytic = classifier_grad(&trace.features(), trace.logits(), &y).unwrap();
    let head = pack_head(model.classifier_weight(), model.classifier_bias());
    let (k, f1) = (head.shape()[0], head.shape()[1]);
    let num = numeric_grad(head.data(), |v| {
        let mut params = model.params().to_vec();
        let n = params.len();
        let w: Vec<f64> = (0..k).flat_map(|c| v[c * f1..c * f1 + f1 - 1].to_vec()).collect();
        let b: Vec<f64> = (0..k).map(|c| v[c * f1 + f1 - 1]).collect();
        params[n - 2] = Tensor::new(vec![k, f1 - 1], w).unwrap();
        params[n - 1] = Tensor::new(vec![k], b).unwrap();
        ce_loss(&model.with_params(params).unwrap().forward(&x).unwrap(), &y).unwrap()
    });
    out.push(first("classifier_grad", rel_err(analytic.data(), &num)));

    let server = Model::mlp(2 * 4 * 4, &[6], 3, seed).unwrap();
    let v = random_tensor(&mut rng, &[4, 2, 4, 4], 0.0, 1.0);
    let y = random_labels(&mut rng, 4, 3);
    let dual = random_tensor(&mut rng, &[3, 7], -0.5, 0.5);
    let obj = impression::impression_objective(&server, &v, &y, &dual, 0.2).unwrap();
    let num = numeric_grad(v.data(), |p| {
        let img = Tensor::new(v.shape().to_vec(), p.to_vec()).unwrap();
        impression::impression_objective(&server, &img, &y, &dual, 0.2).unwrap().value
    });
    out.push(GradCase {
        name: "synthesis_objective",
        second_order: true,
        err: rel_err(obj.grad.data(), &num),
    });
    out
}

pub fn tolerance(case: &GradCase) -> f64 {
    if case.second_order {
        1e-3
    } else {
        1e-4
    }
}

/// Plain minibatch SGD on mean cross-entropy, in dataset order.
pub fn train_central(m: &mut Model, ds: &Dataset, epochs: usize, lr: f64, bs: usize) {
    let n = ds.len();
    for _ in 0..epochs {
        for s in (0..n).step_by(bs) {
            let idx: Vec<usize> = (s..(s + bs).min(n)).collect();
            let x = ds.images.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let (g, _) = m.backward(&x, &y).unwrap();
            m.apply_sgd(&g, lr).unwrap();
        }
    }
}

/// Two-class 8x8 toy server trained to high training accuracy.
pub fn toy_server(seed: u64) -> (Model, Dataset) {
    let ds = data::make_toy_task(&ToySpec::balanced(2, 8, 100, 0.3, seed)).unwrap();
    let mut m = Model::mlp(64, &[32], 2, seed).unwrap();
    train_central(&mut m, &ds, 20, 0.05, 16);
    (m, ds)
}

pub struct DescentOutcome {
    pub train_acc: f64,
    pub ce_init: f64,
    pub ce_admm: f64,
    pub ce_plain: f64,
    pub norm_admm: f64,
    pub norm_plain: f64,
}

/// Paired synthesis runs from one random-noise pool.
pub fn descent_run(seed: u64) -> DescentOutcome {
    let (server, ds) = toy_server(seed);
    let pool = SeedPool::random([1, 8, 8], 16, seed + 100).unwrap();
    let cfg = SynthesisConfig::default();
    let admm = impression::admm_synthesize(&server, &pool, &cfg).unwrap();
    let plain = impression::ce_only_synthesize(&server, &pool, &cfg).unwrap();
    let (v0, y) = impression::pseudo_label(&server, &pool, cfg.batch_size).unwrap();
    assert_eq!(admm.pseudo_labels, y);
    assert_eq!(plain.pseudo_labels, y);
    let ce = |v: &Tensor| impression::ce_sum(&server, v, &y).unwrap();
    let norm = |v: &Tensor| impression::head_gradient_sum(&server, v, &y).unwrap().norm();
    DescentOutcome {
        train_acc: fedimpres::metrics::accuracy(&server, &ds).unwrap(),
        ce_init: ce(&v0),
        ce_admm: ce(&admm.images),
        ce_plain: ce(&plain.images),
        norm_admm: norm(&admm.images),
        norm_plain: norm(&plain.images),
    }
}

/// Mean off-diagonal cross accuracy at the start and end of one round of
/// heavy local training, for two clients holding disjoint class pairs.
pub fn forgetting_run(seed: u64, algorithm: Algorithm) -> (f64, f64, RoundRecord) {
    let train = data::make_toy_task(&ToySpec::balanced(4, 8, 100, 0.6, seed)).unwrap();
    let mut test_spec = ToySpec::balanced(4, 8, 50, 0.6, seed);
    test_spec.sample_seed = seed + 1000;
    let test = data::make_toy_task(&test_spec).unwrap();
    let mut global = Model::mlp(64, &[32], 4, seed).unwrap();
    train_central(&mut global, &train, 10, 0.05, 16);

    let low: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] < 2).collect();
    let high: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] >= 2).collect();
    let shards = ShardSet {
        shards: vec![low, high],
        alpha: 0.0,
        seed: 0,
    };
    let mut pool_spec = ToySpec::balanced(4, 8, 20, 0.6, seed);
    pool_spec.sample_seed = seed + 2000;
    let pool = SeedPool::from_dataset(&data::make_toy_task(&pool_spec).unwrap(), 32).unwrap();
    let cfg = RoundConfig {
        algorithm,
        local_epochs: 10,
        local_lr: 0.1,
        batch_size: 16,
        beta: 1.0,
        warmup_rounds: 0,
        total_rounds: 1,
        master_seed: seed,
        track_forgetting: true,
        synthesis: SynthesisConfig {
            batch_size: 32,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut fed = Federation::new(cfg, &train, &shards, test, Some(pool), &global).unwrap();
    let (_, rec) = fed.run_round(&global, 0).unwrap();
    let start = rec.probes.first().unwrap().mean_off_diagonal();
    let end = rec.probes.last().unwrap().mean_off_diagonal();
    (start, end, rec)
}

/// Small toy configuration used by determinism, golden and CLI tests.
pub fn small_config(algorithm: &str, seed: u64) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "algorithm = {algorithm}\nmaster_seed = {seed}\nrounds = 3\nwarmup_rounds = 1\nlocal_epochs = 2\n\
         toy_per_class = 30\ntoy_test_per_class = 10\nn_clients = 2\nsynth_batch_size = 8\nhidden = 16\n"
    ))
    .unwrap()
}

/// Round-by-round globals and records of a configured run.
pub fn run_rounds(cfg: &ExperimentConfig) -> (Vec<Model>, Vec<RoundRecord>) {
    let setup = cfg.prepare().unwrap();
    let mut fed = Federation::new(
        cfg.round.clone(),
        &setup.train,
        &setup.shards,
        setup.test,
        setup.pool,
        &setup.model,
    )
    .unwrap();
    let mut global = setup.model;
    let mut globals = Vec::new();
    let mut records = Vec::new();
    for r in 0..cfg.round.total_rounds {
        let (next, rec) = fed.run_round(&global, r).unwrap();
        globals.push(next.clone());
        records.push(rec);
        global = next;
    }
    (globals, records)
}

pub fn bitwise_same(a: &Model, b: &Model) -> bool {
    a.params().len() == b.params().len() && a.params().iter().zip(b.params()).all(|(x, y)| x.bit_eq(y))
}

/// fedimpres with beta = 0 after warm-up, fedprox with mu = 0, and fedavg
/// agree bit for bit on every round's global model and client metrics.
pub fn reduction_chain(seed: u64) -> bool {
    let mut imp = small_config("fedimpres", seed);
    imp.round.beta = 0.0;
    let mut prox = small_config("fedprox", seed);
    prox.round.mu = 0.0;
    let avg = small_config("fedavg", seed);
    let (gi, ri) = run_rounds(&imp);
    let (gp, rp) = run_rounds(&prox);
    let (ga, ra) = run_rounds(&avg);
    let models_match = gi.iter().zip(&gp).zip(&ga).all(|((i, p), a)| bitwise_same(i, a) && bitwise_same(p, a));
    let strip = |r: &RoundRecord| {
        let mut r = r.clone();
        r.algorithm.clear();
        r.impression = None;
        r
    };
    let records_match = ri
        .iter()
        .zip(&rp)
        .zip(&ra)
        .all(|((i, p), a)| strip(i) == strip(a) && strip(p) == strip(a));
    // the fedimpres run must actually have synthesized after warm-up
    let synthesized = ri.iter().skip(1).all(|r| r.impression.is_some());
    models_match && records_match && synthesized
}

/// Final global accuracies of paired fedavg / fedimpres runs on the four-client
/// toy task at alpha = 0.01 with a 40-epoch local budget.
pub fn end_to_end(seed: u64) -> (f64, f64) {
    let run = |alg: &str| {
        let cfg = ExperimentConfig::parse(&format!(
            "algorithm = {alg}\nmaster_seed = {seed}\nrounds = 4\nwarmup_rounds = 1\nlocal_epochs = 10\n\
             train_lr = 0.1\nsynth_batch_size = 32\nbalance_labels = true\nn_clients = 4\nalpha = 0.01\n\
             toy_classes = 4\ntoy_per_class = 200\ntoy_sigma = 0.6\nhidden = 64\ninit_mode = holdout\n"
        ))
        .unwrap();
        assert_eq!(cfg.round.local_epoch_budget(), 40);
        let (_, records) = run_rounds(&cfg);
        records.last().unwrap().global_acc
    };
    (run("fedavg"), run("fedimpres"))
}

/// Mean per-shard majority fraction for an 8-class, 8-client split.
pub fn majority_fraction(alpha: f64, seed: u64) -> f64 {
    let labels: Vec<usize> = (0..800).map(|i| i % 8).collect();
    let all: Vec<usize> = (0..labels.len()).collect();
    let s = data::partition_indices(&labels, 8, &all, 8, alpha, seed).unwrap();
    s.mean_majority_fraction(&labels, 8)
}

pub fn conserves(s: &ShardSet, n: usize) -> bool {
    let mut all: Vec<usize> = s.shards.concat();
    all.sort_unstable();
    all == (0..n).collect::<Vec<_>>()
}
