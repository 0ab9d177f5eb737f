//! Brute-force reference implementations and fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use gain_core::attention::ExtraSupervision;
use gain_core::autodiff::{grad, Graph};
use gain_core::data::{Sample, SceneSpec, SplitKind};
use gain_core::gradcheck::relative_error;
use gain_core::model::{preprocess, ConvBlock, Model, ModelSpec};
use gain_core::trainer::{self, TrainConfig};
use gain_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Six nested loops over `[N,Ci,H,W]` x `[Co,Ci,kh,kw]`.
pub fn naive_conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((b * ci + c) * h + iy as usize) * w + ix as usize];
                                acc += xv * kd[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

/// Mean over the last two dims, one plain loop per leading index.
pub fn naive_gap(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let hw = s[s.len() - 2] * s[s.len() - 1];
    x.data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
}

/// Two passes: one backward to read out `d s_c / d f`, then explicit loops
/// for the channel means and the weighted sum.
pub fn two_pass_attention(model: &Model, image: &Tensor, class: usize) -> Tensor {
    let g = Graph::new();
    let bm = model.bind(&g);
    let fwd = bm.forward(&g.constant(image.clone())).unwrap();
    let score = fwd.logits.at(class).unwrap();
    let df = grad(&score, &[&fwd.features], false).unwrap().remove(0);
    let df = df.value();
    let f = fwd.features.value();
    let (k, h, w) = (f.shape()[1], f.shape()[2], f.shape()[3]);
    let mut weights = vec![0.0; k];
    for (c, wc) in weights.iter_mut().enumerate() {
        for i in 0..h * w {
            *wc += df.data()[c * h * w + i];
        }
        *wc /= (h * w) as f64;
    }
    let mut out = vec![0.0; h * w];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, wc) in weights.iter().enumerate() {
            acc += wc * f.data()[c * h * w + i];
        }
        *o = acc.max(0.0);
    }
    Tensor::new(vec![h, w], out).unwrap()
}

/// Cells at or above `fraction * max`, by exhaustive scan; nothing if max <= 0.
pub fn scan_cues(a: &Tensor, fraction: f64) -> Vec<bool> {
    let mut max = f64::NEG_INFINITY;
    for &v in a.data() {
        if v > max {
            max = v;
        }
    }
    a.data().iter().map(|&v| max > 0.0 && v >= fraction * max).collect()
}

pub fn count_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..a.len() {
        if a[i] && b[i] {
            inter += 1;
        }
        if a[i] || b[i] {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `|a - b| / max(|a|, |b|, 1)`: relative for large values, absolute near zero.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// 3x8x8 input, two small conv blocks, 4x4 attention maps.
pub fn small_spec(num_classes: usize) -> ModelSpec {
    ModelSpec {
        in_channels: 3,
        height: 8,
        width: 8,
        blocks: vec![ConvBlock { out_channels: 4, pool: true }, ConvBlock { out_channels: 4, pool: false }],
        num_classes,
    }
}

/// A sample with a random image and the given labels, no annotations.
pub fn random_sample(rng: &mut ChaCha8Rng, spec: &ModelSpec, labels: &[f64]) -> Sample {
    Sample {
        id: "r".into(),
        image: Tensor::from_fn(&[spec.in_channels, spec.height, spec.width], |_| rng.gen_range(0.0..1.0)),
        labels: labels.to_vec(),
        mask: None,
        bbox: None,
        focus: None,
        background: 0,
    }
}

/// Random targets in [0, 1] at attention resolution for every positive class.
pub fn random_targets(rng: &mut ChaCha8Rng, spec: &ModelSpec, sample: &Sample) -> Vec<ExtraSupervision> {
    let [_, h, w] = spec.feature_shape();
    sample
        .positive_classes()
        .into_iter()
        .map(|class| ExtraSupervision {
            class,
            target: Tensor::from_fn(&[h, w], |_| rng.gen_range(0.0..1.0)),
            source: gain_core::attention::SupervisionSource::PixelMask,
        })
        .collect()
}

/// Max relative error between the trainer's parameter gradient of the total
/// step loss and central differences of that loss.
pub fn step_gradient_error(model: &Model, sample: &Sample, sup: Option<&[ExtraSupervision]>, cfg: &TrainConfig, eps: f64) -> f64 {
    let analytic = trainer::step(model, sample, sup, cfg).unwrap().grads;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (p, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.params()[p].value.data()[i];
            probe.params_mut()[p].value.data_mut()[i] = orig + eps;
            let plus = trainer::step(&probe, sample, sup, cfg).unwrap().losses.total;
            probe.params_mut()[p].value.data_mut()[i] = orig - eps;
            let minus = trainer::step(&probe, sample, sup, cfg).unwrap().losses.total;
            probe.params_mut()[p].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(g.data()[i], numeric));
        }
    }
    worst
}

/// The network input for a `[0,1]` image, as the trainer feeds it.
pub fn net_input(image: &Tensor) -> Tensor {
    preprocess(image)
}

/// A few samples of the three-class toy scene.
pub fn toy_samples(split: SplitKind, count: usize, seed: u64) -> Vec<Sample> {
    SceneSpec::toy().split(split, count, seed).unwrap()
}

/// Small, fast training config on the toy scene.
pub fn quick_config(mode: trainer::Mode, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        seed,
        lr: 0.01,
        blocks: vec![ConvBlock { out_channels: 6, pool: true }, ConvBlock { out_channels: 8, pool: true }],
        ..TrainConfig::default()
    }
}
