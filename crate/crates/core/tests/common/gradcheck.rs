//! Central finite-difference checks for the convnet layers and full loss.

use bdefs::convnet::layers::{
    apply_mask, maxpool2, maxpool2_backward, relu, relu_backward, softmax, BatchNorm2d, Conv2d,
    Dense,
};
use bdefs::convnet::{ConvNetArch, ConvNetModel, DropoutMasks, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that gradients that are zero up to rounding do not
/// blow up the relative error.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Numerical gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

pub fn conv(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (2, 6, 5);
    let mut layer = Conv2d::zeros(c, 3, 3, 3);
    layer.weight = uniform(&mut rng, layer.weight.len(), -1.0, 1.0);
    layer.bias = uniform(&mut rng, 3, -1.0, 1.0);
    let x = uniform(&mut rng, c * h * w, 0.0, 1.0);
    let out_len = layer.forward(&x, h, w).unwrap().len();
    let r = uniform(&mut rng, out_len, -1.0, 1.0);

    let mut gw = vec![0.0; layer.weight.len()];
    let mut gb = vec![0.0; 3];
    let gx = layer.backward(&x, h, w, &r, &mut gw, &mut gb);

    let nx = numeric_grad(&x, |x| dot(&layer.forward(x, h, w).unwrap(), &r));
    let nw = numeric_grad(&layer.weight, |wt| {
        let l = Conv2d {
            weight: wt.to_vec(),
            ..layer.clone()
        };
        dot(&l.forward(&x, h, w).unwrap(), &r)
    });
    let nb = numeric_grad(&layer.bias, |b| {
        let l = Conv2d {
            bias: b.to_vec(),
            ..layer.clone()
        };
        dot(&l.forward(&x, h, w).unwrap(), &r)
    });
    vec![
        ("conv.input".into(), worst(&gx, &nx)),
        ("conv.weight".into(), worst(&gw, &nw)),
        ("conv.bias".into(), worst(&gb, &nb)),
    ]
}

pub fn batchnorm(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (channels, spatial, n) = (2, 4, 3);
    let mut bn = BatchNorm2d::new(channels);
    bn.gamma = uniform(&mut rng, channels, 0.5, 1.5);
    bn.beta = uniform(&mut rng, channels, -0.5, 0.5);
    let len = channels * spatial;
    let flat = uniform(&mut rng, n * len, -2.0, 2.0);
    let r = uniform(&mut rng, n * len, -1.0, 1.0);
    let split = |v: &[f64]| v.chunks(len).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let objective = |bn: &BatchNorm2d, x: &[f64]| {
        let (out, _) = bn.forward_train(&split(x), spatial);
        dot(&out.concat(), &r)
    };

    let (_, cache) = bn.forward_train(&split(&flat), spatial);
    let mut gg = vec![0.0; channels];
    let mut gb = vec![0.0; channels];
    let gx = bn.backward(&cache, &split(&r), &mut gg, &mut gb).concat();

    let nx = numeric_grad(&flat, |x| objective(&bn, x));
    let ng = numeric_grad(&bn.gamma, |g| {
        let b = BatchNorm2d {
            gamma: g.to_vec(),
            ..bn.clone()
        };
        objective(&b, &flat)
    });
    let nb = numeric_grad(&bn.beta, |be| {
        let b = BatchNorm2d {
            beta: be.to_vec(),
            ..bn.clone()
        };
        objective(&b, &flat)
    });
    vec![
        ("batchnorm.input".into(), worst(&gx, &nx)),
        ("batchnorm.gamma".into(), worst(&gg, &ng)),
        ("batchnorm.beta".into(), worst(&gb, &nb)),
    ]
}

pub fn elementwise(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let x = off_zero(&mut rng, 20);
    let r = uniform(&mut rng, 20, -1.0, 1.0);
    let g_relu = relu_backward(&x, &r);
    let n_relu = numeric_grad(&x, |x| dot(&relu(x), &r));

    let (c, h, w) = (2, 5, 4);
    let x = uniform(&mut rng, c * h * w, -1.0, 1.0);
    let (pooled, arg) = maxpool2(&x, c, h, w);
    let r = uniform(&mut rng, pooled.len(), -1.0, 1.0);
    let g_pool = maxpool2_backward(&arg, &r, x.len());
    let n_pool = numeric_grad(&x, |x| dot(&maxpool2(x, c, h, w).0, &r));

    let x = uniform(&mut rng, 10, -1.0, 1.0);
    let mask: Vec<f64> = (0..10)
        .map(|i| if i % 3 == 0 { 0.0 } else { 2.0 })
        .collect();
    let r = uniform(&mut rng, 10, -1.0, 1.0);
    let g_drop = apply_mask(&r, &mask);
    let n_drop = numeric_grad(&x, |x| dot(&apply_mask(x, &mask), &r));

    // Softmax followed by cross-entropy: d/dz = p - onehot.
    let z = uniform(&mut rng, 4, -2.0, 2.0);
    let label = rng.random_range(0..4);
    let mut g_sm = softmax(&z);
    g_sm[label] -= 1.0;
    let n_sm = numeric_grad(&z, |z| -softmax(z)[label].ln());

    vec![
        ("relu".into(), worst(&g_relu, &n_relu)),
        ("maxpool".into(), worst(&g_pool, &n_pool)),
        ("dropout".into(), worst(&g_drop, &n_drop)),
        ("softmax+ce".into(), worst(&g_sm, &n_sm)),
    ]
}

pub fn dense(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = Dense::zeros(7, 4);
    layer.weight = uniform(&mut rng, 28, -1.0, 1.0);
    layer.bias = uniform(&mut rng, 4, -1.0, 1.0);
    let x = uniform(&mut rng, 7, -1.0, 1.0);
    let r = uniform(&mut rng, 4, -1.0, 1.0);
    let mut gw = vec![0.0; 28];
    let mut gb = vec![0.0; 4];
    let gx = layer.backward(&x, &r, &mut gw, &mut gb);
    let nx = numeric_grad(&x, |x| dot(&layer.forward(x).unwrap(), &r));
    let nw = numeric_grad(&layer.weight, |wt| {
        let l = Dense {
            weight: wt.to_vec(),
            ..layer.clone()
        };
        dot(&l.forward(&x).unwrap(), &r)
    });
    let nb = numeric_grad(&layer.bias, |b| {
        let l = Dense {
            bias: b.to_vec(),
            ..layer.clone()
        };
        dot(&l.forward(&x).unwrap(), &r)
    });
    vec![
        ("dense.input".into(), worst(&gx, &nx)),
        ("dense.weight".into(), worst(&gw, &nw)),
        ("dense.bias".into(), worst(&gb, &nb)),
    ]
}

/// Every parameter tensor of a small network through `training_loss`, with
/// fixed dropout masks and a nonzero L2 coefficient.
pub fn full_loss(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ConvNetArch {
        hidden: 16,
        ..ConvNetArch::new(8, 8, 1, 3)
    };
    let mut model = ConvNetModel::new(arch, 0.5, seed).unwrap();
    // Move batch norm away from the identity so its gradients are exercised.
    model.bn.gamma = uniform(&mut rng, arch.filters, 0.5, 1.5);
    model.bn.beta = uniform(&mut rng, arch.filters, -0.2, 0.2);
    let images: Vec<Image> = (0..4)
        .map(|_| Image::new(8, 8, 1, uniform(&mut rng, 64, 0.0, 1.0)).unwrap())
        .collect();
    let batch: Vec<&Image> = images.iter().collect();
    let labels = [0, 1, 2, 1];
    let masks = DropoutMasks::sample(4, arch.hidden, 0.5, &mut rng);
    let gamma = 1e-3;

    let out = model.training_loss(&batch, &labels, gamma, &masks).unwrap();
    let names = bdefs::convnet::TENSOR_NAMES;
    let mut results = Vec::new();
    for t in 0..names.len() {
        let base = model.tensors()[t].to_vec();
        let numeric = numeric_grad(&base, |vals| {
            let mut m = model.clone();
            m.tensors_mut()[t].copy_from_slice(vals);
            m.training_loss(&batch, &labels, gamma, &masks)
                .unwrap()
                .loss
        });
        results.push((
            format!("training_loss.{}", names[t]),
            worst(&out.grads.tensors[t], &numeric),
        ));
    }
    results
}

pub fn all(seed: u64) -> Vec<(String, f64)> {
    let mut v = conv(seed);
    v.extend(batchnorm(seed));
    v.extend(elementwise(seed));
    v.extend(dense(seed));
    v.extend(full_loss(seed));
    v
}
