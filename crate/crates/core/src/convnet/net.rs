use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::{
    apply_mask, maxpool2, maxpool2_backward, relu, relu_backward, softmax, BatchNorm2d, Conv2d,
    Dense,
};
use super::{ConvNetError, Image};

/// Layer sizes. Everything else in the stack is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvNetArch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ConvNetArch {
    /// 8 filters of 3x3 and a 400-unit feature layer.
    pub fn new(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            channels,
            filters: 8,
            kernel: 3,
            hidden: 400,
            classes,
        }
    }

    pub fn conv_shape(&self) -> Result<(usize, usize), ConvNetError> {
        if self.kernel == 0 || self.kernel > self.height || self.kernel > self.width {
            return Err(ConvNetError::Shape(format!(
                "{k}x{k} filter does not fit a {}x{} input",
                self.height,
                self.width,
                k = self.kernel
            )));
        }
        Ok((self.height - self.kernel + 1, self.width - self.kernel + 1))
    }

    pub fn pool_shape(&self) -> Result<(usize, usize), ConvNetError> {
        let (h, w) = self.conv_shape()?;
        if h < 2 || w < 2 {
            return Err(ConvNetError::Shape(format!(
                "{h}x{w} feature map is too small to pool"
            )));
        }
        Ok((h / 2, w / 2))
    }

    /// Length of the flattened pooled maps entering the first dense layer.
    pub fn flatten_len(&self) -> Result<usize, ConvNetError> {
        let (h, w) = self.pool_shape()?;
        Ok(h * w * self.filters)
    }

    pub fn validate(&self) -> Result<(), ConvNetError> {
        self.flatten_len()?;
        if self.channels == 0 || self.filters == 0 || self.hidden == 0 {
            return Err(ConvNetError::Shape("zero-sized layer".into()));
        }
        if self.classes < 2 {
            return Err(ConvNetError::Shape("need at least two classes".into()));
        }
        Ok(())
    }
}

pub const TENSOR_NAMES: [&str; 8] = [
    "conv.weight",
    "conv.bias",
    "bn.gamma",
    "bn.beta",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

/// Indices (into [`TENSOR_NAMES`]) of the tensors covered by the L2 penalty.
pub const WEIGHT_TENSORS: [usize; 3] = [0, 4, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetModel {
    pub arch: ConvNetArch,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub fc1: Dense,
    pub fc2: Dense,
    pub dropout: f64,
    pub(crate) trained: bool,
}

/// Per-sample inverted-dropout scale factors for the feature layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks(pub Vec<Vec<f64>>);

impl DropoutMasks {
    pub fn keep_all(samples: usize, units: usize) -> Self {
        Self(vec![vec![1.0; units]; samples])
    }

    pub fn sample<R: Rng + ?Sized>(samples: usize, units: usize, rate: f64, rng: &mut R) -> Self {
        if rate <= 0.0 {
            return Self::keep_all(samples, units);
        }
        let keep = 1.0 / (1.0 - rate);
        Self(
            (0..samples)
                .map(|_| {
                    (0..units)
                        .map(|_| {
                            if rng.random::<f64>() < rate {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect()
                })
                .collect(),
        )
    }
}

/// Gradients in [`TENSOR_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean cross-entropy plus the L2 penalty.
    pub loss: f64,
    pub data_loss: f64,
    pub grads: Gradients,
    pub probs: Vec<Vec<f64>>,
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    /// Number of values per channel that went into the batch statistics.
    pub bn_count: usize,
}

/// Inference-mode outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub features: Vec<f64>,
    pub probs: Vec<f64>,
}

fn check_finite(values: &[f64], layer: &'static str) -> Result<(), ConvNetError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ConvNetError::NonFinite { layer })
    }
}

impl ConvNetModel {
    /// He-normal weights, zero biases, identity batch norm.
    pub fn new(arch: ConvNetArch, dropout: f64, seed: u64) -> Result<Self, ConvNetError> {
        arch.validate()?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(ConvNetError::Shape(format!(
                "dropout {dropout} outside [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |buf: &mut [f64], fan_in: usize| {
            let sd = (2.0 / fan_in as f64).sqrt();
            for v in buf {
                *v = sd * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let mut conv = Conv2d::zeros(arch.channels, arch.filters, arch.kernel, arch.kernel);
        he(&mut conv.weight, arch.channels * arch.kernel * arch.kernel);
        let flat = arch.flatten_len()?;
        let mut fc1 = Dense::zeros(flat, arch.hidden);
        he(&mut fc1.weight, flat);
        let mut fc2 = Dense::zeros(arch.hidden, arch.classes);
        he(&mut fc2.weight, arch.hidden);
        Ok(Self {
            arch,
            conv,
            bn: BatchNorm2d::new(arch.filters),
            fc1,
            fc2,
            dropout,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.conv.weight,
            &self.conv.bias,
            &self.bn.gamma,
            &self.bn.beta,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    fn check_image(&self, img: &Image) -> Result<(), ConvNetError> {
        let a = &self.arch;
        if (img.height(), img.width(), img.channels()) != (a.height, a.width, a.channels) {
            return Err(ConvNetError::Shape(format!(
                "image is {}x{}x{}, network expects {}x{}x{}",
                img.height(),
                img.width(),
                img.channels(),
                a.height,
                a.width,
                a.channels
            )));
        }
        Ok(())
    }

    /// Inference pass: running batch-norm statistics, no dropout.
    pub fn forward(&self, img: &Image) -> Result<Forward, ConvNetError> {
        self.check_image(img)?;
        let a = &self.arch;
        let (ch, cw) = a.conv_shape()?;
        let x = self.conv.forward(img.data(), a.height, a.width)?;
        let x = self.bn.forward_infer(&x, ch * cw);
        let x = relu(&x);
        let (x, _) = maxpool2(&x, a.filters, ch, cw);
        let features = relu(&self.fc1.forward(&x)?);
        check_finite(&features, "fc1")?;
        let logits = self.fc2.forward(&features)?;
        check_finite(&logits, "fc2")?;
        Ok(Forward {
            probs: softmax(&logits),
            features,
        })
    }

    /// `gamma * sum of squared L2 norms of the weight tensors`.
    pub fn l2_penalty(&self, gamma: f64) -> f64 {
        let t = self.tensors();
        gamma
            * WEIGHT_TENSORS
                .iter()
                .map(|&i| t[i].iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
    }

    /// Training-mode loss and exact gradients over a mini-batch.
    ///
    /// Loss is the mean categorical cross-entropy plus
    /// `gamma * sum(|W|^2)` over the conv and dense weight tensors. Batch
    /// normalisation uses the statistics of this batch.
    pub fn training_loss(
        &self,
        batch: &[&Image],
        labels: &[usize],
        gamma: f64,
        masks: &DropoutMasks,
    ) -> Result<LossOutput, ConvNetError> {
        let n = batch.len();
        if n == 0 {
            return Err(ConvNetError::EmptyBatch);
        }
        if labels.len() != n || masks.0.len() != n {
            return Err(ConvNetError::Shape(format!(
                "{n} images, {} labels, {} dropout masks",
                labels.len(),
                masks.0.len()
            )));
        }
        let a = self.arch;
        if let Some(&label) = labels.iter().find(|&&l| l >= a.classes) {
            return Err(ConvNetError::Label {
                label,
                classes: a.classes,
            });
        }
        let (ch, cw) = a.conv_shape()?;
        let spatial = ch * cw;

        let mut conv_out = Vec::with_capacity(n);
        for img in batch {
            self.check_image(img)?;
            let y = self.conv.forward(img.data(), a.height, a.width)?;
            check_finite(&y, "conv")?;
            conv_out.push(y);
        }
        let (bn_out, bn_cache) = self.bn.forward_train(&conv_out, spatial);
        for y in &bn_out {
            check_finite(y, "batchnorm")?;
        }

        struct Sample {
            pool_arg: Vec<usize>,
            pooled: Vec<f64>,
            fc1_pre: Vec<f64>,
            dropped: Vec<f64>,
            probs: Vec<f64>,
        }
        let mut samples = Vec::with_capacity(n);
        let mut data_loss = 0.0;
        for i in 0..n {
            let act = relu(&bn_out[i]);
            let (pooled, pool_arg) = maxpool2(&act, a.filters, ch, cw);
            let fc1_pre = self.fc1.forward(&pooled)?;
            check_finite(&fc1_pre, "fc1")?;
            let dropped = apply_mask(&relu(&fc1_pre), &masks.0[i]);
            let logits = self.fc2.forward(&dropped)?;
            check_finite(&logits, "fc2")?;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            data_loss += lse - logits[labels[i]];
            samples.push(Sample {
                pool_arg,
                pooled,
                fc1_pre,
                dropped,
                probs: softmax(&logits),
            });
        }
        data_loss /= n as f64;
        let loss = data_loss + self.l2_penalty(gamma);

        let mut g: Vec<Vec<f64>> = self
            .tensor_sizes()
            .into_iter()
            .map(|s| vec![0.0; s])
            .collect();
        let mut grad_bn_out = Vec::with_capacity(n);
        for (i, s) in samples.iter().enumerate() {
            let mut dz = s.probs.clone();
            dz[labels[i]] -= 1.0;
            for v in &mut dz {
                *v /= n as f64;
            }
            let (g67, rest) = g.split_at_mut(7);
            let d_dropped = self
                .fc2
                .backward(&s.dropped, &dz, &mut g67[6], &mut rest[0]);
            let d_act = apply_mask(&d_dropped, &masks.0[i]);
            let d_fc1 = relu_backward(&s.fc1_pre, &d_act);
            let (g45, rest) = g.split_at_mut(5);
            let d_pooled = self
                .fc1
                .backward(&s.pooled, &d_fc1, &mut g45[4], &mut rest[0]);
            let d_act = maxpool2_backward(&s.pool_arg, &d_pooled, a.filters * spatial);
            grad_bn_out.push(relu_backward(&bn_out[i], &d_act));
        }
        let (g23, rest) = g.split_at_mut(3);
        let d_conv = self
            .bn
            .backward(&bn_cache, &grad_bn_out, &mut g23[2], &mut rest[0]);
        for (img, d) in batch.iter().zip(&d_conv) {
            let (g01, rest) = g.split_at_mut(1);
            self.conv
                .backward(img.data(), a.height, a.width, d, &mut g01[0], &mut rest[0]);
        }
        let tensors = self.tensors();
        for &w in &WEIGHT_TENSORS {
            for (gv, pv) in g[w].iter_mut().zip(tensors[w]) {
                *gv += 2.0 * gamma * pv;
            }
        }

        Ok(LossOutput {
            loss,
            data_loss,
            grads: Gradients { tensors: g },
            probs: samples.into_iter().map(|s| s.probs).collect(),
            bn_mean: bn_cache.mean,
            bn_var: bn_cache.var,
            bn_count: n * spatial,
        })
    }
}

/// Binary cross-entropy with an unsquared-norm weight penalty:
/// `-(1/M) sum[y ln(p) + (1-y) ln(1-p)] + gamma * sum_r |w_r|_2`.
/// Probabilities are clamped to `[1e-12, 1 - 1e-12]` before the logarithm.
pub fn regularized_bce(
    y: &[f64],
    yhat: &[f64],
    weights: &[&[f64]],
    gamma: f64,
) -> Result<f64, ConvNetError> {
    if y.is_empty() {
        return Err(ConvNetError::EmptyBatch);
    }
    if y.len() != yhat.len() {
        return Err(ConvNetError::Shape(format!(
            "{} labels vs {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    let m = y.len() as f64;
    let ce: f64 = y
        .iter()
        .zip(yhat)
        .map(|(&t, &p)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    let penalty: f64 = weights
        .iter()
        .map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    // Adding +0.0 turns the -0.0 of a perfect prediction into 0.0.
    Ok(-ce / m + gamma * penalty + 0.0)
}

/// Post-ReLU activations of the feature layer, one row per image.
pub fn extract_features(
    model: &ConvNetModel,
    images: &[Image],
) -> Result<Array2<f64>, ConvNetError> {
    if !model.is_trained() {
        return Err(ConvNetError::NotTrained);
    }
    let hidden = model.arch.hidden;
    let mut out = Array2::zeros((images.len(), hidden));
    for (mut row, img) in out.rows_mut().into_iter().zip(images) {
        let f = model.forward(img)?;
        row.iter_mut().zip(f.features).for_each(|(d, s)| *d = s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ConvNetModel {
        let arch = ConvNetArch {
            hidden: 6,
            ..ConvNetArch::new(6, 6, 1, 3)
        };
        ConvNetModel::new(arch, 0.5, 1).unwrap()
    }

    fn image(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(6, 6, 1, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn full_scale_shape_chain() {
        let arch = ConvNetArch::new(224, 224, 1, 3);
        assert_eq!(arch.conv_shape().unwrap(), (222, 222));
        assert_eq!(arch.pool_shape().unwrap(), (111, 111));
        assert_eq!(arch.flatten_len().unwrap(), 98_568);
        assert_eq!(arch.hidden, 400);
    }

    #[test]
    fn regularized_bce_examples() {
        // Clamping to 1 - 1e-12 leaves a residue of about 1e-12.
        assert!(regularized_bce(&[1.0], &[1.0], &[], 0.0).unwrap().abs() < 1e-11);
        let l = regularized_bce(&[1.0], &[0.5], &[], 0.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let with = regularized_bce(&[1.0], &[0.5], &[&[3.0, 4.0]], 0.1).unwrap();
        assert!((with - l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_softmax_loss_is_ln3() {
        let mut m = tiny();
        m.fc2.weight.fill(0.0);
        let img = image(3, 36);
        let out = m
            .training_loss(&[&img], &[1], 0.0, &DropoutMasks::keep_all(1, 6))
            .unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_loss_is_zero() {
        let mut m = tiny();
        m.fc2.weight.fill(0.0);
        m.fc2.bias = vec![0.0, 800.0, 0.0];
        let img = image(3, 36);
        let out = m
            .training_loss(&[&img], &[1], 0.0, &DropoutMasks::keep_all(1, 6))
            .unwrap();
        assert!(out.loss < 1e-9);
    }

    #[test]
    fn nonfinite_names_layer() {
        let mut m = tiny();
        m.fc1.weight[0] = f64::INFINITY;
        let imgs = [image(1, 36), image(2, 36)];
        let err = m
            .training_loss(
                &[&imgs[0], &imgs[1]],
                &[0, 1],
                0.0,
                &DropoutMasks::keep_all(2, 6),
            )
            .unwrap_err();
        assert_eq!(err, ConvNetError::NonFinite { layer: "fc1" });
    }

    #[test]
    fn extraction_requires_training() {
        let mut m = tiny();
        let imgs = vec![image(1, 36), image(1, 36)];
        assert_eq!(extract_features(&m, &imgs), Err(ConvNetError::NotTrained));
        m.mark_trained();
        let f = extract_features(&m, &imgs).unwrap();
        assert_eq!(f.dim(), (2, 6));
        assert!(f.iter().all(|&v| v >= 0.0));
        assert_eq!(f.row(0), f.row(1));
        let probs = m.forward(&imgs[0]).unwrap().probs;
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
