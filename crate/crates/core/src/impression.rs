//! Server-side impression synthesis.
//!
//! Pixels `V` are optimized against a frozen server model so that the server
//! classifies them confidently as their pseudo-labels while the head gradient
//! of the cross-entropy vanishes. The constraint is handled with an augmented
//! Lagrangian, alternating projected pixel descent with dual ascent on a
//! single dual matrix `Λ` shaped like the packed head gradient `[K x (F+1)]`:
//!
//! ```text
//! L(V, Λ) = Σ_i [ CE_i + <Λ, G_i> + ρ/2 ‖G_i‖² ],   G_i = ∇_head CE_i
//! Λ ← Λ + ρ Σ_i G_i
//! ```

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SeedPool};
use crate::error::{Error, Result};
use crate::nn::loss::{ce_per_sample, classifier_grad_vjp, per_sample_classifier_grad};
use crate::nn::Model;
use crate::tensor::{argmax, softmax_rows, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub admm_epochs: usize,
    pub pixel_steps_per_epoch: usize,
    pub pixel_lr: f64,
    pub rho: f64,
    pub batch_size: usize,
    /// Drop the constraint terms and optimize cross-entropy alone.
    pub ce_only: bool,
    /// Reassign labels round-robin when some class is missing from the
    /// pseudo-labels.
    pub balance_labels: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            admm_epochs: 5,
            pixel_steps_per_epoch: 10,
            pixel_lr: 0.1,
            rho: 0.2,
            batch_size: 16,
            ce_only: false,
            balance_labels: false,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Validation(
                "pixel_steps_per_epoch and synth_batch_size must be at least 1".into(),
            ));
        }
        if !(self.pixel_lr > 0.0) {
            return Err(Error::Validation("synth_lr must be positive".into()));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::Validation("rho must be non-negative".into()));
        }
        Ok(())
    }
}

/// One pixel step's objective breakdown, evaluated before the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub trace_term: f64,
    pub penalty: f64,
    pub dual_norm: f64,
}

/// Dual ascent bookkeeping for one ADMM epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStep {
    pub before: Tensor,
    /// Summed head gradient at the post-descent pixels.
    pub constraint: Tensor,
    pub after: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionBatch {
    /// `[S x C x H x W]`, every entry in `[0, 1]`.
    pub images: Tensor,
    pub pseudo_labels: Vec<usize>,
    /// `[K x (F+1)]`
    pub dual: Tensor,
    pub rho: f64,
    pub n_classes: usize,
    pub history: Vec<StepRecord>,
    pub dual_steps: Vec<DualStep>,
}

impl ImpressionBatch {
    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.images.clone(), self.pseudo_labels.clone(), self.n_classes)
    }

    pub fn len(&self) -> usize {
        self.pseudo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_labels.is_empty()
    }
}

/// Objective value, its parts, and its gradient with respect to the pixels.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub ce: f64,
    pub trace_term: f64,
    pub penalty: f64,
    pub grad: Tensor,
    /// `Σ_i G_i`, packed `[K x (F+1)]`.
    pub constraint: Tensor,
}

/// First `s` pool images and the server's argmax predictions on them.
pub fn pseudo_label(server: &Model, pool: &SeedPool, s: usize) -> Result<(Tensor, Vec<usize>)> {
    if pool.len() < s {
        return Err(Error::Input(format!(
            "seed pool exhausted: {} images, batch needs {s}",
            pool.len()
        )));
    }
    let v0 = pool.images.select_rows(&(0..s).collect::<Vec<_>>());
    let labels = predict(server, &v0)?;
    Ok((v0, labels))
}

pub fn predict(model: &Model, images: &Tensor) -> Result<Vec<usize>> {
    let logits = model.forward(images)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

/// Evaluate the augmented-Lagrangian objective and its pixel gradient.
pub fn impression_objective(
    server: &Model,
    images: &Tensor,
    labels: &[usize],
    dual: &Tensor,
    rho: f64,
) -> Result<Objective> {
    objective(server, images, labels, Some(dual), rho)
}

/// With `dual == None` only the cross-entropy term is formed.
fn objective(
    server: &Model,
    images: &Tensor,
    labels: &[usize],
    dual: Option<&Tensor>,
    rho: f64,
) -> Result<Objective> {
    let k = server.n_classes();
    let f = server.feature_dim();
    if let Some(d) = dual {
        if d.shape() != [k, f + 1] {
            return Err(Error::shape(
                server.layers().len() - 1,
                format!("dual {:?} does not match head gradient [{k}, {}]", d.shape(), f + 1),
            ));
        }
    }
    if !(rho >= 0.0) {
        return Err(Error::Input(format!("rho must be non-negative, got {rho}")));
    }
    let trace = server.forward_trace(images)?;
    let logits = trace.logits();
    let features = trace.features();
    let ce_i = ce_per_sample(logits, labels)?;
    let g_i = per_sample_classifier_grad(&features, logits, labels)?;

    let probs = softmax_rows(logits.data(), k);
    let w = server.classifier_weight();
    let s = labels.len();
    let mut constraint = Tensor::zeros(&[k, f + 1]);
    let mut d_features = vec![0.0; s * f];
    let (mut trace_term, mut penalty) = (0.0, 0.0);

    for i in 0..s {
        constraint.axpy(1.0, &g_i[i]);
        // d CE_i / d z_i = p_i - onehot(y_i)
        let mut dz: Vec<f64> = probs[i * k..(i + 1) * k].to_vec();
        dz[labels[i]] -= 1.0;
        let mut dh = vec![0.0; f];
        if let Some(dual) = dual {
            trace_term += dual.data().iter().zip(g_i[i].data()).map(|(a, b)| a * b).sum::<f64>();
            penalty += 0.5 * rho * g_i[i].sum_sq();
            // cotangent on G_i of <Λ, G_i> + ρ/2 ‖G_i‖²
            let mut cot = dual.clone();
            cot.axpy(rho, &g_i[i]);
            let (vh, vz) = classifier_grad_vjp(features.row(i), logits.row(i), labels[i], cot.data());
            for (a, b) in dz.iter_mut().zip(vz) {
                *a += b;
            }
            dh = vh;
        }
        let row = &mut d_features[i * f..(i + 1) * f];
        for (j, r) in row.iter_mut().enumerate() {
            let mut acc = dh[j];
            for (c, dzc) in dz.iter().enumerate() {
                acc += w.data()[c * f + j] * dzc;
            }
            *r = acc;
        }
    }

    let (_, dx) = server.backprop_features(&trace, &d_features)?;
    let grad = Tensor::new(images.shape().to_vec(), dx)?;
    let ce: f64 = ce_i.iter().sum();
    let value = ce + trace_term + penalty;
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::Numeric {
            layer: server.layers().len() - 1,
            msg: "impression objective is not finite".into(),
        });
    }
    Ok(Objective {
        value,
        ce,
        trace_term,
        penalty,
        grad,
        constraint,
    })
}

/// Full augmented-Lagrangian synthesis from the first pool images.
pub fn admm_synthesize(server: &Model, pool: &SeedPool, cfg: &SynthesisConfig) -> Result<ImpressionBatch> {
    cfg.validate()?;
    let (v0, labels) = pseudo_label(server, pool, cfg.batch_size)?;
    let mut cfg = cfg.clone();
    cfg.ce_only = false;
    synthesize_from(server, v0, labels, &cfg)
}

/// Ablation: the same loop minimizing cross-entropy only.
pub fn ce_only_synthesize(server: &Model, pool: &SeedPool, cfg: &SynthesisConfig) -> Result<ImpressionBatch> {
    cfg.validate()?;
    let (v0, labels) = pseudo_label(server, pool, cfg.batch_size)?;
    let mut cfg = cfg.clone();
    cfg.ce_only = true;
    synthesize_from(server, v0, labels, &cfg)
}

/// Dispatch on `cfg.ce_only`.
pub fn synthesize(server: &Model, pool: &SeedPool, cfg: &SynthesisConfig) -> Result<ImpressionBatch> {
    cfg.validate()?;
    let (v0, labels) = pseudo_label(server, pool, cfg.batch_size)?;
    synthesize_from(server, v0, labels, cfg)
}

/// Run the synthesis loop from given starting pixels and fixed labels.
pub fn synthesize_from(
    server: &Model,
    v0: Tensor,
    mut labels: Vec<usize>,
    cfg: &SynthesisConfig,
) -> Result<ImpressionBatch> {
    cfg.validate()?;
    let k = server.n_classes();
    let f = server.feature_dim();
    if cfg.balance_labels {
        let mut seen = vec![false; k];
        labels.iter().for_each(|&y| seen[y] = true);
        if seen.iter().any(|s| !s) {
            labels.iter_mut().enumerate().for_each(|(i, y)| *y = i % k);
        }
    }

    let mut images = v0;
    let mut dual = Tensor::zeros(&[k, f + 1]);
    let mut history = Vec::new();
    let mut dual_steps = Vec::new();
    let mut initial_ce = None;
    // absolute floor keeps an already-confident start from tripping the guard
    let floor = 1e-2 * labels.len() as f64;

    for epoch in 0..cfg.admm_epochs {
        for step in 0..cfg.pixel_steps_per_epoch {
            let obj = if cfg.ce_only {
                objective(server, &images, &labels, None, 0.0)?
            } else {
                objective(server, &images, &labels, Some(&dual), cfg.rho)?
            };
            let init = *initial_ce.get_or_insert(obj.ce);
            if obj.ce > 10.0 * init.max(floor) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    ce: obj.ce,
                    initial: init,
                });
            }
            history.push(StepRecord {
                epoch,
                step,
                ce: obj.ce,
                trace_term: obj.trace_term,
                penalty: obj.penalty,
                dual_norm: dual.norm(),
            });
            images.axpy(-cfg.pixel_lr, &obj.grad);
            images.clamp(0.0, 1.0);
        }
        if !cfg.ce_only {
            let constraint = head_gradient_sum(server, &images, &labels)?;
            let before = dual.clone();
            dual.axpy(cfg.rho, &constraint);
            dual_steps.push(DualStep {
                before,
                constraint,
                after: dual.clone(),
            });
        }
    }

    Ok(ImpressionBatch {
        images,
        pseudo_labels: labels,
        dual,
        rho: cfg.rho,
        n_classes: k,
        history,
        dual_steps,
    })
}

/// `Σ_i ∇_head CE(v_i, y_i)`, packed `[K x (F+1)]`.
pub fn head_gradient_sum(server: &Model, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let trace = server.forward_trace(images)?;
    let g = per_sample_classifier_grad(&trace.features(), trace.logits(), labels)?;
    let mut acc = Tensor::zeros(g[0].shape());
    for gi in &g {
        acc.axpy(1.0, gi);
    }
    Ok(acc)
}

/// Summed cross-entropy of the server on `(images, labels)`.
pub fn ce_sum(server: &Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(ce_per_sample(&server.forward(images)?, labels)?.iter().sum())
}
