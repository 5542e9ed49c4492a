//! Minimal differentiable network: a feature extractor followed by a final
//! affine classifier head, with reverse-mode gradients for parameters and
//! inputs.

mod layers;
pub mod loss;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::LayerSpec;
pub use loss::{ce_loss, classifier_grad, classifier_grad_vjp, per_sample_classifier_grad};

pub use crate::tensor::Tensor;
use crate::error::{Error, Result};

/// Network parameters plus their layer layout.
///
/// The last layer is always `Dense`; its weight and bias are the classifier
/// head, everything before it is the feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<LayerSpec>,
    params: Vec<Tensor>,
}

/// Per-parameter gradients, index-aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub tensors: Vec<Tensor>,
}

/// Saved layer inputs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    batch: usize,
    /// `inputs[i]` is the flat input to layer `i`.
    inputs: Vec<Vec<f64>>,
    logits: Tensor,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Input to the classifier head, `[B x F]`.
    pub fn features(&self) -> Tensor {
        let f = self.inputs.last().unwrap();
        Tensor::new(vec![self.batch, f.len() / self.batch], f.clone()).unwrap()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Model {
    pub fn new(layers: Vec<LayerSpec>, params: Vec<Tensor>) -> Result<Self> {
        validate_layers(&layers)?;
        let expected: Vec<Vec<usize>> = layers.iter().flat_map(LayerSpec::param_shapes).collect();
        if expected.len() != params.len() {
            return Err(Error::shape(
                0,
                format!("expected {} parameter tensors, got {}", expected.len(), params.len()),
            ));
        }
        for (i, (s, p)) in expected.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                let layer = owning_layer(&layers, i);
                return Err(Error::shape(
                    layer,
                    format!("parameter {i} has shape {:?}, expected {s:?}", p.shape()),
                ));
            }
        }
        Ok(Self { layers, params })
    }

    /// All-zero parameters.
    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        let params = layers
            .iter()
            .flat_map(LayerSpec::param_shapes)
            .map(|s| Tensor::zeros(&s))
            .collect();
        Self::new(layers, params)
    }

    /// He-uniform weights, zero biases, from a seeded stream.
    pub fn init(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_layers(&layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &layers {
            let bound = (6.0 / layer.fan_in() as f64).sqrt();
            for (j, shape) in layer.param_shapes().into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = if j == 0 {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                } else {
                    vec![0.0; n]
                };
                params.push(Tensor::new(shape, data)?);
            }
        }
        Self::new(layers, params)
    }

    /// Dense stack `input -> hidden... -> classes` with ReLU between layers.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        Self::init(mlp_layers(input, hidden, classes), seed)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    /// Replace every parameter, keeping the layout.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        Self::new(self.layers.clone(), params)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.iter().find_map(LayerSpec::input_dim).unwrap_or(0)
    }

    pub fn n_classes(&self) -> usize {
        self.params.last().unwrap().len()
    }

    /// Width of the features fed to the classifier head.
    pub fn feature_dim(&self) -> usize {
        self.classifier_weight().shape()[1]
    }

    pub fn classifier_weight(&self) -> &Tensor {
        &self.params[self.params.len() - 2]
    }

    pub fn classifier_bias(&self) -> &Tensor {
        &self.params[self.params.len() - 1]
    }

    /// Index of the first parameter tensor of each layer.
    fn param_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            off.push(acc);
            acc += l.param_shapes().len();
        }
        off
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(batch)?.logits)
    }

    pub fn forward_trace(&self, batch: &Tensor) -> Result<Trace> {
        let b = batch.rows();
        if batch.row_len() != self.input_dim() {
            return Err(Error::shape(
                0,
                format!(
                    "input rows have {} values, layer 0 expects {}",
                    batch.row_len(),
                    self.input_dim()
                ),
            ));
        }
        let offsets = self.param_offsets();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = batch.data().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let n = layer.param_shapes().len();
            let y = layer.forward(&self.params[offsets[i]..offsets[i] + n], &x, b);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: i,
                    msg: "forward produced a non-finite activation".into(),
                });
            }
            inputs.push(std::mem::replace(&mut x, y));
        }
        let k = self.n_classes();
        Ok(Trace {
            batch: b,
            inputs,
            logits: Tensor::new(vec![b, k], x)?,
        })
    }

    /// Gradients of mean cross-entropy with respect to every parameter and
    /// every input value.
    pub fn backward(&self, batch: &Tensor, labels: &[usize]) -> Result<(GradientSet, Tensor)> {
        let trace = self.forward_trace(batch)?;
        let d_logits = loss::ce_grad_logits(trace.logits(), labels)?;
        let (grads, dx) = self.backprop(&trace, d_logits.data(), self.layers.len())?;
        Ok((grads, Tensor::new(batch.shape().to_vec(), dx)?))
    }

    /// Pull a cotangent on the output of layer `end - 1` back to the input.
    ///
    /// With `end == layers.len()` the cotangent is on the logits; with
    /// `end == layers.len() - 1` it is on the features and the head gradient
    /// stays zero.
    pub fn backprop(&self, trace: &Trace, d_out: &[f64], end: usize) -> Result<(GradientSet, Vec<f64>)> {
        let offsets = self.param_offsets();
        let mut grads = GradientSet::zeros_like(self);
        let mut dy = d_out.to_vec();
        for i in (0..end).rev() {
            let layer = &self.layers[i];
            let n = layer.param_shapes().len();
            let range = offsets[i]..offsets[i] + n;
            dy = layer.backward(
                &self.params[range.clone()],
                &trace.inputs[i],
                &dy,
                trace.batch,
                &mut grads.tensors[range.clone()],
            );
            if dy.iter().any(|v| !v.is_finite())
                || grads.tensors[range].iter().any(|t| !t.is_finite())
            {
                return Err(Error::Numeric {
                    layer: i,
                    msg: "backward produced a non-finite gradient".into(),
                });
            }
        }
        Ok((grads, dy))
    }

    /// Pull a cotangent on the features back through the extractor only.
    pub fn backprop_features(&self, trace: &Trace, d_features: &[f64]) -> Result<(GradientSet, Vec<f64>)> {
        self.backprop(trace, d_features, self.layers.len() - 1)
    }

    /// Apply `p -= lr * g` in place.
    pub fn apply_sgd(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        check_congruent(self, grads)?;
        for (p, g) in self.params.iter_mut().zip(&grads.tensors) {
            p.axpy(-lr, g);
        }
        Ok(())
    }
}

/// Plain SGD step returning new parameters.
pub fn sgd_step(model: &Model, grads: &GradientSet, lr: f64) -> Result<Model> {
    if !(lr > 0.0) {
        return Err(Error::Input(format!("learning rate must be positive, got {lr}")));
    }
    let mut next = model.clone();
    next.apply_sgd(grads, lr)?;
    Ok(next)
}

fn check_congruent(model: &Model, grads: &GradientSet) -> Result<()> {
    if model.params.len() != grads.tensors.len() {
        return Err(Error::shape(0, "gradient set does not match model parameters"));
    }
    for (i, (p, g)) in model.params.iter().zip(&grads.tensors).enumerate() {
        if !p.same_shape(g) {
            return Err(Error::shape(
                owning_layer(&model.layers, i),
                format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
            ));
        }
    }
    Ok(())
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            tensors: model.params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn axpy(&mut self, c: f64, other: &GradientSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(c, b);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    /// Head gradient packed as `[K x (F+1)]`, bias in the last column.
    pub fn classifier_packed(&self) -> Tensor {
        let n = self.tensors.len();
        pack_head(&self.tensors[n - 2], &self.tensors[n - 1])
    }
}

/// Pack a `[K x F]` weight and `[K]` bias into `[K x (F+1)]`.
pub fn pack_head(weight: &Tensor, bias: &Tensor) -> Tensor {
    let (k, f) = (weight.shape()[0], weight.shape()[1]);
    let mut out = Vec::with_capacity(k * (f + 1));
    for r in 0..k {
        out.extend_from_slice(weight.row(r));
        out.push(bias.data()[r]);
    }
    Tensor::new(vec![k, f + 1], out).unwrap()
}

pub fn mlp_layers(input: usize, hidden: &[usize], classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = input;
    for &h in hidden {
        layers.push(LayerSpec::Dense { input: prev, output: h });
        layers.push(LayerSpec::Relu);
        prev = h;
    }
    layers.push(LayerSpec::Dense {
        input: prev,
        output: classes,
    });
    layers
}

fn owning_layer(layers: &[LayerSpec], param_index: usize) -> usize {
    let mut acc = 0;
    for (i, l) in layers.iter().enumerate() {
        acc += l.param_shapes().len();
        if param_index < acc {
            return i;
        }
    }
    layers.len().saturating_sub(1)
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    let Some(LayerSpec::Dense { .. }) = layers.last() else {
        return Err(Error::shape(
            layers.len().saturating_sub(1),
            "final layer must be a dense classifier head",
        ));
    };
    let mut width = layers[0]
        .input_dim()
        .ok_or_else(|| Error::shape(0, "first layer must fix the input width"))?;
    for (i, layer) in layers.iter().enumerate() {
        layer.check().map_err(|m| Error::shape(i, m))?;
        if let Some(d) = layer.input_dim() {
            if d != width {
                return Err(Error::shape(
                    i,
                    format!("layer expects width {d}, previous layer produces {width}"),
                ));
            }
        }
        width = layer.output_dim(width);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer() -> Model {
        Model::mlp(3, &[4], 2, 7).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = Model::zeros(mlp_layers(3, &[5], 4)).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.1, 0.0]).unwrap();
        let z = m.forward(&x).unwrap();
        assert_eq!(z.shape(), &[2, 4]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let layers = vec![LayerSpec::Dense { input: 2, output: 2 }];
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Model::new(layers, vec![w, Tensor::zeros(&[2])]).unwrap();
        let z = m.forward(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_matches_hand_matrix_product() {
        let m = two_layer();
        let x = [0.5, -0.25, 1.5];
        let p = m.params();
        // hidden = relu(W1 x + b1); logits = W2 hidden + b2, written out longhand
        let mut hidden = [0.0; 4];
        for (o, h) in hidden.iter_mut().enumerate() {
            let w = p[0].row(o);
            let s = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + p[1].data()[o];
            *h = if s > 0.0 { s } else { 0.0 };
        }
        let mut expect = [0.0; 2];
        for (o, e) in expect.iter_mut().enumerate() {
            let w = p[2].row(o);
            *e = w[0] * hidden[0] + w[1] * hidden[1] + w[2] * hidden[2] + w[3] * hidden[3]
                + p[3].data()[o];
        }
        let z = m.forward(&Tensor::new(vec![1, 3], x.to_vec()).unwrap()).unwrap();
        for (a, b) in z.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn input_width_mismatch_names_layer_zero() {
        let m = two_layer();
        let err = m.forward(&Tensor::zeros(&[1, 4])).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 0, .. }), "{err}");
    }

    #[test]
    fn inconsistent_layers_are_rejected() {
        let layers = vec![
            LayerSpec::Dense { input: 3, output: 4 },
            LayerSpec::Relu,
            LayerSpec::Dense { input: 5, output: 2 },
        ];
        let err = Model::zeros(layers).unwrap_err();
        assert!(matches!(err, Error::Shape { layer: 2, .. }), "{err}");
        assert!(Model::zeros(vec![LayerSpec::Dense { input: 2, output: 2 }, LayerSpec::Relu]).is_err());
    }

    #[test]
    fn conv_stack_validates() {
        let layers = vec![
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 2,
                kernel: 3,
                stride: 1,
                pad: 1,
                in_h: 4,
                in_w: 4,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { input: 32, output: 3 },
        ];
        let m = Model::init(layers, 1).unwrap();
        assert_eq!(m.feature_dim(), 32);
        assert_eq!(m.forward(&Tensor::zeros(&[2, 1, 4, 4])).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn sgd_step_examples() {
        let layers = vec![LayerSpec::Dense { input: 1, output: 1 }];
        let m = Model::new(layers, vec![Tensor::filled(&[1, 1], 1.0), Tensor::filled(&[1], 1.0)]).unwrap();
        let g = GradientSet {
            tensors: vec![Tensor::filled(&[1, 1], 0.5), Tensor::filled(&[1], 0.5)],
        };
        let next = sgd_step(&m, &g, 0.01).unwrap();
        assert!((next.params()[0].data()[0] - 0.995).abs() < 1e-15);

        let zero = GradientSet::zeros_like(&m);
        assert_eq!(sgd_step(&m, &zero, 0.01).unwrap(), m);
        assert!(sgd_step(&m, &g, 0.0).is_err());

        let mut g2 = g.clone();
        g2.tensors[0] = Tensor::filled(&[1, 1], 0.25);
        g2.tensors[1] = Tensor::filled(&[1], 0.25);
        let two = sgd_step(&sgd_step(&m, &g, 0.1).unwrap(), &g2, 0.1).unwrap();
        let mut sum = g.clone();
        sum.axpy(1.0, &g2);
        let one = sgd_step(&m, &sum, 0.1).unwrap();
        assert!(two.params()[0].max_abs_diff(&one.params()[0]) < 1e-15);
    }

    #[test]
    fn sgd_rejects_mismatched_shapes() {
        let m = two_layer();
        let mut g = GradientSet::zeros_like(&m);
        g.tensors[0] = Tensor::zeros(&[1, 1]);
        assert!(sgd_step(&m, &g, 0.1).is_err());
    }

    #[test]
    fn confident_separated_sample_has_vanishing_gradient() {
        let layers = vec![LayerSpec::Dense { input: 1, output: 2 }];
        let w = Tensor::new(vec![2, 1], vec![30.0, -30.0]).unwrap();
        let m = Model::new(layers, vec![w, Tensor::zeros(&[2])]).unwrap();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (g, dx) = m.backward(&x, &[0]).unwrap();
        assert!(g.norm() < 1e-6);
        assert!(dx.norm() < 1e-6);
    }

    #[test]
    fn forward_backward_are_deterministic() {
        let m = two_layer();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let (g1, d1) = m.backward(&x, &[0, 1]).unwrap();
        let (g2, d2) = m.backward(&x, &[0, 1]).unwrap();
        assert!(d1.bit_eq(&d2));
        assert!(g1.tensors.iter().zip(&g2.tensors).all(|(a, b)| a.bit_eq(b)));
    }
}
