//! Layer kernels. Activations are carried as flat `[B x d]` buffers; spatial
//! layers interpret each row as `C x H x W`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Relu,
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    },
    Flatten,
}

impl LayerSpec {
    /// Expected flat input width, or `None` if the layer accepts any width.
    pub fn input_dim(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { input, .. } => Some(input),
            LayerSpec::Conv2d {
                in_ch, in_h, in_w, ..
            } => Some(in_ch * in_h * in_w),
            LayerSpec::Relu | LayerSpec::Flatten => None,
        }
    }

    pub fn output_dim(&self, input: usize) -> usize {
        match *self {
            LayerSpec::Dense { output, .. } => output,
            LayerSpec::Conv2d { out_ch, .. } => {
                let (oh, ow) = self.conv_out_hw();
                out_ch * oh * ow
            }
            LayerSpec::Relu | LayerSpec::Flatten => input,
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { input, output } => vec![vec![output, input], vec![output]],
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]],
            LayerSpec::Relu | LayerSpec::Flatten => vec![],
        }
    }

    /// Fan-in used for weight initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { input, .. } => input,
            LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerSpec::Relu | LayerSpec::Flatten => 1,
        }
    }

    fn conv_out_hw(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d {
                kernel,
                stride,
                pad,
                in_h,
                in_w,
                ..
            } => {
                let oh = (in_h + 2 * pad).saturating_sub(kernel) / stride + 1;
                let ow = (in_w + 2 * pad).saturating_sub(kernel) / stride + 1;
                (oh, ow)
            }
            _ => (0, 0),
        }
    }

    /// Structural problems independent of neighbouring layers.
    pub(crate) fn check(&self) -> Result<(), String> {
        match *self {
            LayerSpec::Dense { input, output } if input == 0 || output == 0 => {
                Err("dense layer with zero width".into())
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                in_h,
                in_w,
            } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
                    return Err("conv2d with zero channels, kernel or stride".into());
                }
                if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
                    return Err(format!(
                        "kernel {kernel} larger than padded input {}x{}",
                        in_h + 2 * pad,
                        in_w + 2 * pad
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn forward(&self, params: &[super::Tensor], x: &[f64], batch: usize) -> Vec<f64> {
        match *self {
            LayerSpec::Dense { input, output } => {
                dense_forward(params[0].data(), params[1].data(), x, batch, input, output)
            }
            LayerSpec::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            LayerSpec::Flatten => x.to_vec(),
            LayerSpec::Conv2d { .. } => self.conv_forward(params[0].data(), params[1].data(), x, batch),
        }
    }

    /// Given the layer input `x` and the output cotangent `dy`, return the input
    /// cotangent and accumulate parameter gradients into `dparams`.
    pub(crate) fn backward(
        &self,
        params: &[super::Tensor],
        x: &[f64],
        dy: &[f64],
        batch: usize,
        dparams: &mut [super::Tensor],
    ) -> Vec<f64> {
        match *self {
            LayerSpec::Dense { input, output } => {
                let (dw, rest) = dparams.split_at_mut(1);
                dense_backward(
                    params[0].data(),
                    x,
                    dy,
                    batch,
                    input,
                    output,
                    dw[0].data_mut(),
                    rest[0].data_mut(),
                )
            }
            LayerSpec::Relu => x
                .iter()
                .zip(dy)
                .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
                .collect(),
            LayerSpec::Flatten => dy.to_vec(),
            LayerSpec::Conv2d { .. } => {
                let (dw, rest) = dparams.split_at_mut(1);
                self.conv_backward(
                    params[0].data(),
                    x,
                    dy,
                    batch,
                    dw[0].data_mut(),
                    rest[0].data_mut(),
                )
            }
        }
    }

    fn conv_forward(&self, w: &[f64], b: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
        let LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel: k,
            stride,
            pad,
            in_h,
            in_w,
        } = *self
        else {
            unreachable!()
        };
        let (oh, ow) = self.conv_out_hw();
        let in_len = in_ch * in_h * in_w;
        let out_len = out_ch * oh * ow;
        let mut y = vec![0.0; batch * out_len];
        for n in 0..batch {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let yn = &mut y[n * out_len..(n + 1) * out_len];
            for o in 0..out_ch {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[o];
                        for c in 0..in_ch {
                            for ki in 0..k {
                                let r = (i * stride + ki) as isize - pad as isize;
                                if r < 0 || r >= in_h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let s = (j * stride + kj) as isize - pad as isize;
                                    if s < 0 || s >= in_w as isize {
                                        continue;
                                    }
                                    acc += w[((o * in_ch + c) * k + ki) * k + kj]
                                        * xn[(c * in_h + r as usize) * in_w + s as usize];
                                }
                            }
                        }
                        yn[(o * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        y
    }

    fn conv_backward(
        &self,
        w: &[f64],
        x: &[f64],
        dy: &[f64],
        batch: usize,
        dw: &mut [f64],
        db: &mut [f64],
    ) -> Vec<f64> {
        let LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel: k,
            stride,
            pad,
            in_h,
            in_w,
        } = *self
        else {
            unreachable!()
        };
        let (oh, ow) = self.conv_out_hw();
        let in_len = in_ch * in_h * in_w;
        let out_len = out_ch * oh * ow;
        let mut dx = vec![0.0; batch * in_len];
        for n in 0..batch {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let dyn_ = &dy[n * out_len..(n + 1) * out_len];
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            for o in 0..out_ch {
                for i in 0..oh {
                    for j in 0..ow {
                        let g = dyn_[(o * oh + i) * ow + j];
                        db[o] += g;
                        for c in 0..in_ch {
                            for ki in 0..k {
                                let r = (i * stride + ki) as isize - pad as isize;
                                if r < 0 || r >= in_h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let s = (j * stride + kj) as isize - pad as isize;
                                    if s < 0 || s >= in_w as isize {
                                        continue;
                                    }
                                    let wi = ((o * in_ch + c) * k + ki) * k + kj;
                                    let xi = (c * in_h + r as usize) * in_w + s as usize;
                                    dw[wi] += g * xn[xi];
                                    dxn[xi] += g * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

fn dense_forward(
    w: &[f64],
    b: &[f64],
    x: &[f64],
    batch: usize,
    input: usize,
    output: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * output];
    for n in 0..batch {
        let xn = &x[n * input..(n + 1) * input];
        for o in 0..output {
            let wo = &w[o * input..(o + 1) * input];
            let mut acc = b[o];
            for (a, c) in wo.iter().zip(xn) {
                acc += a * c;
            }
            y[n * output + o] = acc;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    batch: usize,
    input: usize,
    output: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; batch * input];
    for n in 0..batch {
        let xn = &x[n * input..(n + 1) * input];
        let dxn = &mut dx[n * input..(n + 1) * input];
        for o in 0..output {
            let g = dy[n * output + o];
            db[o] += g;
            let wo = &w[o * input..(o + 1) * input];
            let dwo = &mut dw[o * input..(o + 1) * input];
            for i in 0..input {
                dwo[i] += g * xn[i];
                dxn[i] += g * wo[i];
            }
        }
    }
    dx
}
