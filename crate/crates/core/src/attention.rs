//! On-line attention maps and the guided-attention loss terms.
//!
//! For a ground-truth class `c` the attention map is built inside the live
//! graph: the class score is differentiated with respect to the last conv
//! activations, the gradient is spatially averaged into per-channel weights,
//! and the activations are combined by those weights (a 1x1 convolution)
//! followed by ReLU. When the gradient is recorded, losses on the map train
//! the network through that inner backward pass as well.

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, Forward};
use crate::tensor::Tensor;

/// Sigmoid masking parameters, applied to min-max normalized maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Threshold in (0, 1).
    pub sigma: f64,
    /// Sigmoid sharpness, > 0.
    pub scale: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams { sigma: 0.5, scale: 8.0 }
    }
}

impl MaskParams {
    pub fn new(sigma: f64, scale: f64) -> Result<Self> {
        let p = MaskParams { sigma, scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::Invalid(format!("mask sigma must lie in (0,1), got {}", self.sigma)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Invalid(format!("mask scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the attention-mining term.
    pub alpha: f64,
    /// Weight of the extra-supervision term.
    pub omega_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, omega_e: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("omega_e", self.omega_e)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which class score the attention-mining loss minimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// `sigmoid(logit)`, bounded in [0, 1].
    #[default]
    Probability,
    Logit,
}

/// A per-class attention map `[h, w]` living in a graph.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub map: Var,
    pub class: usize,
    pub normalized: bool,
}

/// Builds the attention map for `class` from a batch-of-one forward pass.
///
/// With `detach_weights` the channel weights are computed from a detached
/// gradient and act as constants; otherwise the inner backward pass is
/// recorded and second-order terms flow into the parameters.
pub fn attention_map(fwd: &Forward, class: usize, detach_weights: bool) -> Result<AttentionMap> {
    let ls = fwd.logits.shape();
    let fs = fwd.features.shape();
    if ls.len() != 2 || ls[0] != 1 || fs.len() != 4 || fs[0] != 1 {
        return Err(Error::shape(
            "attention_map",
            format!("needs a batch of one, got logits {ls:?} and features {fs:?}"),
        ));
    }
    if class >= ls[1] {
        return Err(Error::Invalid(format!("class {class} out of range for {} classes", ls[1])));
    }
    let score = fwd.logits.at(class)?;
    let g = grad(&score, &[&fwd.features], !detach_weights)?.remove(0);
    // [1, K] channel importances, used as a [1, K, 1, 1] kernel
    let weights = g.global_avg_pool()?;
    let kernel = weights.reshape(&[1, fs[1], 1, 1])?;
    let cam = fwd.features.conv2d(&kernel, 1, 0)?.relu()?;
    Ok(AttentionMap {
        map: cam.reshape(&[fs[2], fs[3]])?,
        class,
        normalized: false,
    })
}

/// `(A - min) / (max - min)`; a constant map becomes all zeros.
pub fn normalize_map(a: &AttentionMap) -> Result<AttentionMap> {
    if a.normalized {
        return Ok(a.clone());
    }
    let v = a.map.value();
    let (mut imin, mut imax) = (0, 0);
    for (i, &x) in v.data().iter().enumerate() {
        if x < v.data()[imin] {
            imin = i;
        }
        if x > v.data()[imax] {
            imax = i;
        }
    }
    let shape = v.shape().to_vec();
    let map = if v.data()[imax] - v.data()[imin] == 0.0 {
        a.map.graph().constant(Tensor::zeros(&shape))
    } else {
        let lo = a.map.at(imin)?;
        let hi = a.map.at(imax)?;
        let range = hi.sub(&lo)?.broadcast_to(&shape)?;
        a.map.sub(&lo.broadcast_to(&shape)?)?.div(&range)?
    };
    Ok(AttentionMap {
        map,
        class: a.class,
        normalized: true,
    })
}

/// `1 / (1 + exp(-scale (A - sigma)))`, elementwise.
pub fn soft_mask(a: &Var, p: &MaskParams) -> Result<Var> {
    a.shift(-p.sigma)?.scale(p.scale)?.sigmoid()
}

/// `I - T ⊙ I` with `mask` broadcast over the channel dim of `image` `[C,H,W]`.
pub fn apply_mask(image: &Var, mask: &Var) -> Result<Var> {
    let is = image.shape();
    let ms = mask.shape();
    if is.len() != 3 || ms.len() != 2 || is[1..] != ms[..] {
        return Err(Error::shape("masked_input", format!("image {is:?} vs mask {ms:?}")));
    }
    let t = mask.broadcast_to(&is)?;
    image.sub(&t.mul(image)?)
}

/// Erases the attended region of `image` `[C,H,W]`: the normalized map is
/// bilinearly upsampled to `H x W`, soft-thresholded and applied.
pub fn masked_input(image: &Var, a: &AttentionMap, p: &MaskParams) -> Result<Var> {
    let is = image.shape();
    if is.len() != 3 {
        return Err(Error::shape("masked_input", format!("expected [C,H,W] image, got {is:?}")));
    }
    let a = normalize_map(a)?;
    let up = a.map.upsample_bilinear(is[1], is[2])?;
    apply_mask(image, &soft_mask(&up, p)?)
}

fn check_labels(labels: &[f64], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("loss_cl", format!("{} labels for {n} scores", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Invalid(format!("labels must be 0 or 1, got {bad}")));
    }
    Ok(())
}

/// Multi-label soft-margin loss:
/// `-(1/C) Σ_c [y_c log σ(s_c) + (1 - y_c) log(1 - σ(s_c))]`.
pub fn loss_cl(logits: &Var, labels: &[f64]) -> Result<Var> {
    let n = logits.value().len();
    check_labels(labels, n)?;
    let s = logits.reshape(&[n])?;
    let g = s.graph();
    let y = g.constant(Tensor::from_parts(vec![n], labels.to_vec()));
    let not_y = g.constant(Tensor::from_parts(vec![n], labels.iter().map(|y| 1.0 - y).collect()));
    // -log σ(s) = softplus(-s);  -log(1 - σ(s)) = softplus(s)
    let pos = s.neg()?.softplus()?.mul(&y)?;
    let neg = s.softplus()?.mul(&not_y)?;
    pos.add(&neg)?.mean_all()
}

/// Mean over `maps` of the class score of the attention-masked image, one
/// forward pass per map.
pub fn loss_am(
    model: &BoundModel<'_>,
    image: &Var,
    maps: &[AttentionMap],
    p: &MaskParams,
    mode: ScoreMode,
) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::Invalid("attention mining needs at least one ground-truth class".into()));
    }
    let mut total: Option<Var> = None;
    for a in maps {
        let erased = masked_input(image, a, p)?;
        let logits = model.forward(&erased)?.logits;
        let mut s = logits.at(a.class)?;
        if mode == ScoreMode::Probability {
            s = s.sigmoid()?;
        }
        total = Some(match total {
            Some(t) => t.add(&s)?,
            None => s,
        });
    }
    total.unwrap().scale(1.0 / maps.len() as f64)
}

/// `L_cl + α L_am`.
pub fn loss_self(l_cl: &Var, l_am: &Var, w: &LossWeights) -> Result<Var> {
    l_cl.add(&l_am.scale(w.alpha)?)
}

/// `L_cl + α L_am + ω_e L_e`.
pub fn loss_ext(l_cl: &Var, l_am: &Var, l_e: &Var, w: &LossWeights) -> Result<Var> {
    loss_self(l_cl, l_am, w)?.add(&l_e.scale(w.omega_e)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionSource {
    PixelMask,
    BoundingBox,
}

/// Target map `H^c` at attention resolution, entries in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ExtraSupervision {
    pub class: usize,
    pub target: Tensor,
    pub source: SupervisionSource,
}

/// Axis-aligned box in pixel coordinates, inclusive-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<[usize; 4]> for BoundingBox {
    fn from([x0, y0, x1, y1]: [usize; 4]) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }
}

impl From<BoundingBox> for [usize; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Ones on attention cells whose centers fall inside `bbox`, zeros elsewhere.
pub fn supervision_from_box(
    class: usize,
    bbox: BoundingBox,
    image: (usize, usize),
    map: (usize, usize),
) -> Result<ExtraSupervision> {
    let (ih, iw) = image;
    let (mh, mw) = map;
    if bbox.area() == 0 {
        return Err(Error::Invalid(format!("degenerate box {:?}", <[usize; 4]>::from(bbox))));
    }
    if bbox.x1 > iw || bbox.y1 > ih {
        return Err(Error::Invalid(format!(
            "box {:?} exceeds {iw}x{ih} image",
            <[usize; 4]>::from(bbox)
        )));
    }
    if mh == 0 || mw == 0 {
        return Err(Error::Invalid("attention map must be at least 1x1".into()));
    }
    let target = Tensor::from_fn(&[mh, mw], |k| {
        let (i, j) = (k / mw, k % mw);
        let cy = (i as f64 + 0.5) * ih as f64 / mh as f64;
        let cx = (j as f64 + 0.5) * iw as f64 / mw as f64;
        let inside = cx >= bbox.x0 as f64 && cx < bbox.x1 as f64 && cy >= bbox.y0 as f64 && cy < bbox.y1 as f64;
        if inside {
            1.0
        } else {
            0.0
        }
    });
    Ok(ExtraSupervision {
        class,
        target,
        source: SupervisionSource::BoundingBox,
    })
}

/// Area-averaged downsampling of a pixel mask to attention resolution.
pub fn supervision_from_mask(class: usize, mask: &Tensor, map: (usize, usize)) -> Result<ExtraSupervision> {
    if mask.rank() != 2 {
        return Err(Error::shape("supervision_from_mask", format!("expected [H,W] mask, got {:?}", mask.shape())));
    }
    if mask.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Invalid("mask values must lie in [0,1]".into()));
    }
    Ok(ExtraSupervision {
        class,
        target: area_downsample(mask, map.0, map.1)?,
        source: SupervisionSource::PixelMask,
    })
}

/// Resamples `[H,W]` to `[h,w]` by averaging over each target cell's exact
/// (possibly fractional) footprint.
pub fn area_downsample(src: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let &[sh, sw] = src.shape() else {
        return Err(Error::shape("area_downsample", format!("expected rank 2, got {:?}", src.shape())));
    };
    if h == 0 || w == 0 || h > sh || w > sw {
        return Err(Error::Invalid(format!("cannot area-downsample {sh}x{sw} to {h}x{w}")));
    }
    let wy = footprint(sh, h);
    let wx = footprint(sw, w);
    let cell_area = (sh as f64 / h as f64) * (sw as f64 / w as f64);
    let mut out = vec![0.0; h * w];
    for (i, ry) in wy.iter().enumerate() {
        for (j, rx) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, fy) in ry {
                for &(x, fx) in rx {
                    acc += fy * fx * src.data()[y * sw + x];
                }
            }
            out[i * w + j] = acc / cell_area;
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// For each target index, the source indices it overlaps with their overlap lengths.
fn footprint(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let step = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * step, (o + 1) as f64 * step);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

/// `(1/n) Σ_c mean_ij (A^c - H^c)^2` over matching classes.
pub fn loss_e(maps: &[AttentionMap], targets: &[ExtraSupervision]) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::Invalid("extra-supervision loss needs at least one map".into()));
    }
    let mut map_classes: Vec<usize> = maps.iter().map(|m| m.class).collect();
    let mut target_classes: Vec<usize> = targets.iter().map(|t| t.class).collect();
    map_classes.sort_unstable();
    target_classes.sort_unstable();
    if map_classes != target_classes {
        return Err(Error::ClassSet(format!("maps cover {map_classes:?}, targets cover {target_classes:?}")));
    }
    let mut total: Option<Var> = None;
    for m in maps {
        let a = normalize_map(m)?.map;
        let t = targets.iter().find(|t| t.class == m.class).unwrap();
        if a.shape() != t.target.shape() {
            return Err(Error::shape(
                "loss_e",
                format!("map {:?} vs target {:?}", a.shape(), t.target.shape()),
            ));
        }
        let h = a.graph().constant(t.target.clone());
        let d = a.sub(&h)?;
        let term = d.mul(&d)?.mean_all()?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.unwrap().scale(1.0 / maps.len() as f64)
}
