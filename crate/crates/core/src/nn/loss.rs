//! Softmax cross-entropy and the closed-form gradient of the classifier head.
//!
//! For one sample with features `h`, logits `z = W h + b`, probabilities
//! `p = softmax(z)` and label `y`, the head gradient of `-log p[y]` is the
//! outer product `r ⊗ [h, 1]` with residual `r = p - onehot(y)`. Keeping it
//! in this form lets callers differentiate functions of the head gradient
//! with ordinary first-order reverse mode: see [`classifier_grad_vjp`].

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax_rows, Tensor};

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let b = logits.rows();
    let k = logits.row_len();
    if labels.len() != b {
        return Err(Error::Input(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    Ok(k)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(ce_per_sample(logits, labels)?.iter().sum::<f64>() / labels.len() as f64)
}

pub fn ce_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let z = logits.row(i);
            log_sum_exp(z) - z[y]
        })
        .collect())
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn ce_grad_logits(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let k = check_labels(logits, labels)?;
    let b = labels.len() as f64;
    let mut r = softmax_rows(logits.data(), k);
    for (i, &y) in labels.iter().enumerate() {
        r[i * k + y] -= 1.0;
    }
    r.iter_mut().for_each(|v| *v /= b);
    Tensor::new(logits.shape().to_vec(), r)
}

fn check_features(features: &Tensor, logits: &Tensor) -> Result<()> {
    if features.rows() != logits.rows() {
        return Err(Error::shape(
            0,
            format!("{} feature rows vs {} logit rows", features.rows(), logits.rows()),
        ));
    }
    Ok(())
}

/// Head gradient of the mean cross-entropy, packed `[K x (F+1)]` with the
/// bias column last.
pub fn classifier_grad(features: &Tensor, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let per = per_sample_classifier_grad(features, logits, labels)?;
    let mut acc = Tensor::zeros(per[0].shape());
    for g in &per {
        acc.axpy(1.0, g);
    }
    acc.scale(1.0 / labels.len() as f64);
    Ok(acc)
}

/// Head gradient of each sample's own cross-entropy, each `[K x (F+1)]`.
pub fn per_sample_classifier_grad(
    features: &Tensor,
    logits: &Tensor,
    labels: &[usize],
) -> Result<Vec<Tensor>> {
    let k = check_labels(logits, labels)?;
    check_features(features, logits)?;
    let f = features.row_len();
    let p = softmax_rows(logits.data(), k);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let h = features.row(i);
            let mut g = Vec::with_capacity(k * (f + 1));
            for c in 0..k {
                let r = p[i * k + c] - if c == y { 1.0 } else { 0.0 };
                g.extend(h.iter().map(|hj| r * hj));
                g.push(r);
            }
            Tensor::new(vec![k, f + 1], g).unwrap()
        })
        .collect())
}

/// Vector-Jacobian product of one sample's head gradient.
///
/// Given features `h`, logits `z`, label `y` and a cotangent `c` of shape
/// `[K x (F+1)]` on `G = r ⊗ [h, 1]`, returns `(dh, dz)`:
/// `dh = (cᵀ r)[..F]`, `dz = J (c [h, 1])` where `J = diag(p) - p pᵀ`.
pub fn classifier_grad_vjp(h: &[f64], z: &[f64], y: usize, cot: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = z.len();
    let f = h.len();
    debug_assert_eq!(cot.len(), k * (f + 1));
    let p = softmax_rows(z, k);
    let mut r = p.clone();
    r[y] -= 1.0;

    let mut dh = vec![0.0; f];
    let mut dr = vec![0.0; k];
    for c in 0..k {
        let row = &cot[c * (f + 1)..(c + 1) * (f + 1)];
        let mut s = row[f];
        for j in 0..f {
            s += row[j] * h[j];
            dh[j] += row[j] * r[c];
        }
        dr[c] = s;
    }
    let pd: f64 = p.iter().zip(&dr).map(|(a, b)| a * b).sum();
    let dz = p.iter().zip(&dr).map(|(pc, dc)| pc * (dc - pd)).collect();
    (dh, dz)
}
