//! Forward and backward passes of the individual layers.
//!
//! Activations are flat `f64` slices in channel-major (CHW) order. Backward
//! functions accumulate parameter gradients into caller-owned buffers and
//! return the gradient with respect to the layer input.

use super::ConvNetError;

/// Valid (unpadded), stride-1 convolution.
///
/// Weights are laid out `[filter][channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, filters: usize, kernel_h: usize, kernel_w: usize) -> Self {
        Self {
            in_channels,
            filters,
            kernel_h,
            kernel_w,
            weight: vec![0.0; filters * in_channels * kernel_h * kernel_w],
            bias: vec![0.0; filters],
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> Result<(usize, usize), ConvNetError> {
        if self.kernel_h > h || self.kernel_w > w || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(ConvNetError::Shape(format!(
                "{}x{} filter does not fit a {h}x{w} input",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((h - self.kernel_h + 1, w - self.kernel_w + 1))
    }

    #[inline]
    fn widx(&self, f: usize, c: usize, p: usize, q: usize) -> usize {
        ((f * self.in_channels + c) * self.kernel_h + p) * self.kernel_w + q
    }

    /// `out(f, i, j) = sum_{p,q,c} W(f, c, p, q) * x(c, i + p, j + q) + b(f)`
    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Result<Vec<f64>, ConvNetError> {
        let (oh, ow) = self.out_shape(h, w)?;
        if input.len() != self.in_channels * h * w {
            return Err(ConvNetError::Shape(format!(
                "conv input has {} values, expected {}",
                input.len(),
                self.in_channels * h * w
            )));
        }
        let mut out = vec![0.0; self.filters * oh * ow];
        for f in 0..self.filters {
            let plane = &mut out[f * oh * ow..(f + 1) * oh * ow];
            plane.fill(self.bias[f]);
            for c in 0..self.in_channels {
                let src = &input[c * h * w..(c + 1) * h * w];
                for p in 0..self.kernel_h {
                    for q in 0..self.kernel_w {
                        let k = self.weight[self.widx(f, c, p, q)];
                        for i in 0..oh {
                            let srow = &src[(i + p) * w + q..(i + p) * w + q + ow];
                            let orow = &mut plane[i * ow..(i + 1) * ow];
                            for (o, s) in orow.iter_mut().zip(srow) {
                                *o += k * s;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        grad_out: &[f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) -> Vec<f64> {
        let (oh, ow) = (h - self.kernel_h + 1, w - self.kernel_w + 1);
        let mut grad_in = vec![0.0; input.len()];
        for f in 0..self.filters {
            let g = &grad_out[f * oh * ow..(f + 1) * oh * ow];
            grad_bias[f] += g.iter().sum::<f64>();
            for c in 0..self.in_channels {
                let src = &input[c * h * w..(c + 1) * h * w];
                let dst = &mut grad_in[c * h * w..(c + 1) * h * w];
                for p in 0..self.kernel_h {
                    for q in 0..self.kernel_w {
                        let wi = self.widx(f, c, p, q);
                        let k = self.weight[wi];
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let grow = &g[i * ow..(i + 1) * ow];
                            let base = (i + p) * w + q;
                            for (j, &gv) in grow.iter().enumerate() {
                                acc += gv * src[base + j];
                                dst[base + j] += gv * k;
                            }
                        }
                        grad_weight[wi] += acc;
                    }
                }
            }
        }
        grad_in
    }
}

/// Per-channel batch normalisation with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Values saved by the training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Vec<Vec<f64>>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased batch variance per channel.
    pub var: Vec<f64>,
    pub spatial: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Normalises with statistics of the batch itself.
    pub fn forward_train(
        &self,
        batch: &[Vec<f64>],
        spatial: usize,
    ) -> (Vec<Vec<f64>>, BatchNormCache) {
        let n = batch.len();
        let count = (n * spatial) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for c in 0..self.channels {
            let mut s = 0.0;
            for x in batch {
                s += x[c * spatial..(c + 1) * spatial].iter().sum::<f64>();
            }
            let m = s / count;
            let mut v = 0.0;
            for x in batch {
                v += x[c * spatial..(c + 1) * spatial]
                    .iter()
                    .map(|a| (a - m).powi(2))
                    .sum::<f64>();
            }
            mean[c] = m;
            var[c] = v / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for x in batch {
            let mut xh = vec![0.0; x.len()];
            let mut y = vec![0.0; x.len()];
            for c in 0..self.channels {
                for s in c * spatial..(c + 1) * spatial {
                    xh[s] = (x[s] - mean[c]) * inv_std[c];
                    y[s] = self.gamma[c] * xh[s] + self.beta[c];
                }
            }
            xhat.push(xh);
            out.push(y);
        }
        (
            out,
            BatchNormCache {
                xhat,
                inv_std,
                mean,
                var,
                spatial,
            },
        )
    }

    /// Normalises with the running statistics.
    pub fn forward_infer(&self, x: &[f64], spatial: usize) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for c in 0..self.channels {
            let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
            for s in c * spatial..(c + 1) * spatial {
                y[s] = self.gamma[c] * (x[s] - self.running_mean[c]) * inv + self.beta[c];
            }
        }
        y
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache,
        grad_out: &[Vec<f64>],
        grad_gamma: &mut [f64],
        grad_beta: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let spatial = cache.spatial;
        let count = (grad_out.len() * spatial) as f64;
        let mut grad_in: Vec<Vec<f64>> = grad_out.iter().map(|g| vec![0.0; g.len()]).collect();
        for c in 0..self.channels {
            let range = c * spatial..(c + 1) * spatial;
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (g, xh) in grad_out.iter().zip(&cache.xhat) {
                for s in range.clone() {
                    sum_g += g[s];
                    sum_gx += g[s] * xh[s];
                }
            }
            grad_beta[c] += sum_g;
            grad_gamma[c] += sum_gx;
            let k = self.gamma[c] * cache.inv_std[c] / count;
            for ((g, xh), gi) in grad_out.iter().zip(&cache.xhat).zip(grad_in.iter_mut()) {
                for s in range.clone() {
                    gi[s] = k * (count * g[s] - sum_g - xh[s] * sum_gx);
                }
            }
        }
        grad_in
    }

    /// Folds batch statistics into the running estimates. The running
    /// variance uses the unbiased batch variance.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.channels {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
        }
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through ReLU given the pre-activation input.
pub fn relu_backward(pre: &[f64], grad_out: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
/// Returns the pooled map and, per output, the flat index of the winning input.
pub fn maxpool2(x: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(argmax: &[usize], grad_out: &[f64], input_len: usize) -> Vec<f64> {
    let mut g = vec![0.0; input_len];
    for (&i, &v) in argmax.iter().zip(grad_out) {
        g[i] += v;
    }
    g
}

/// Fully connected layer, `y = W x + b` with `W` stored `[output][input]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ConvNetError> {
        if x.len() != self.inputs {
            return Err(ConvNetError::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.inputs,
                x.len()
            )));
        }
        Ok(self
            .weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect())
    }

    pub fn backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            grad_bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad_weight[o * self.inputs..(o + 1) * self.inputs];
            for ((gw, gi), (&xi, &wi)) in grow
                .iter_mut()
                .zip(grad_in.iter_mut())
                .zip(x.iter().zip(row))
            {
                *gw += g * xi;
                *gi += g * wi;
            }
        }
        grad_in
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Applies inverted-dropout scale factors (0 or `1 / (1 - rate)`).
pub fn apply_mask(x: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter().zip(scale).map(|(a, s)| a * s).collect()
}
