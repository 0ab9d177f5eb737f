//! Procedural scenes: hard-edged foreground shapes on textured backgrounds,
//! with a per-class designated background that co-occurs with the class at a
//! configurable rate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    Plain { color: Rgb },
    Stripes { a: Rgb, b: Rgb, period: usize, #[serde(default)] vertical: bool },
    Checker { a: Rgb, b: Rgb, cell: usize },
    /// Per-pixel gray jitter of +-`amplitude` around `base`.
    Noise { base: Rgb, amplitude: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Triangle,
    Disk,
    Square,
    Cross,
    /// A disk and a square of similar area, at least 4 px apart. Either part
    /// alone identifies the class.
    TwoBlob,
    /// A symmetric body with a small marker on one side. Only the marker is
    /// foreground; the body is shared by every marked class.
    Marked { side: Side },
}

impl Shape {
    /// Default gap range between the two parts of a [`Shape::TwoBlob`].
    pub const BLOB_GAP: [usize; 2] = [4, 6];

    /// Bounding extent (width, height) of the shape at size `s`, worst case
    /// over orientations.
    fn max_extent(&self, s: usize, gap: [usize; 2]) -> usize {
        match self {
            Shape::TwoBlob => 2 * s + gap[1],
            _ => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    /// Index into [`SceneSpec::backgrounds`].
    pub correlated_background: usize,
    /// Foreground color of this class; the scene foreground if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Rgb>,
}

impl ClassSpec {
    /// A class made of two disjoint blobs.
    pub fn two_blob(name: impl Into<String>, correlated_background: usize) -> Self {
        ClassSpec {
            name: name.into(),
            shape: Shape::TwoBlob,
            correlated_background,
            color: None,
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_gap() -> [usize; 2] {
    Shape::BLOB_GAP
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

fn default_foreground() -> Rgb {
    [0.95, 0.85, 0.2]
}

fn default_body() -> Rgb {
    [0.55, 0.55, 0.6]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassSpec>,
    pub backgrounds: Vec<Background>,
    /// Background used for negatives and the foreground-only split.
    pub neutral_background: usize,
    /// Backgrounds of the shifted (second-regime) split.
    #[serde(default)]
    pub shift_backgrounds: Vec<usize>,
    /// Per-class probability that a training instance sits on its correlated background.
    pub bias: Vec<f64>,
    #[serde(default)]
    pub negative_fraction: f64,
    /// Fraction of training samples that carry a pixel mask and box.
    #[serde(default = "one")]
    pub mask_fraction: f64,
    /// Probability that a training instance of a two-part class shows only one part.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub part_dropout: f64,
    /// Inclusive gap range between the parts of two-part objects.
    #[serde(default = "default_gap")]
    pub blob_gap: [usize; 2],
    /// Inclusive size range of foreground objects, in pixels.
    pub object_size: [usize; 2],
    #[serde(default)]
    pub shifted_object_size: Option<[usize; 2]>,
    #[serde(default = "default_foreground")]
    pub foreground: Rgb,
    #[serde(default = "default_body")]
    pub body_color: Rgb,
    /// Color of the square part of two-part objects; the foreground color if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_color: Option<Rgb>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Biased training distribution.
    Train,
    /// Held-out draw from the training distribution.
    Val,
    /// Foreground on the neutral background.
    FgOnly,
    /// Correlated background with no foreground.
    BgOnly,
    /// Foreground on the shift backgrounds with shifted sizes.
    Shifted,
}

impl SplitKind {
    pub const ALL: [SplitKind; 5] = [
        SplitKind::Train,
        SplitKind::Val,
        SplitKind::FgOnly,
        SplitKind::BgOnly,
        SplitKind::Shifted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::FgOnly => "fg_only",
            SplitKind::BgOnly => "bg_only",
            SplitKind::Shifted => "shifted",
        }
    }

    fn stream(self) -> u64 {
        match self {
            SplitKind::Train => 1,
            SplitKind::Val => 2,
            SplitKind::FgOnly => 3,
            SplitKind::BgOnly => 4,
            SplitKind::Shifted => 5,
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown split {s:?}")))
    }
}

/// One generated image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` in [0, 1].
    pub image: Tensor,
    pub labels: Vec<f64>,
    /// `H x W` label map: 0 is background, `c + 1` marks class `c`.
    pub mask: Option<Vec<u8>>,
    pub bbox: Option<BoundingBox>,
    /// Class a bias-broken sample is about (positive or decoupled).
    pub focus: Option<usize>,
    /// Background index used to render the sample.
    pub background: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn positive_classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == 1.0)
            .map(|(c, _)| c)
            .collect()
    }

    /// Binary `[H, W]` mask of class `c`, if the sample carries masks.
    pub fn class_mask(&self, c: usize) -> Option<Tensor> {
        let m = self.mask.as_ref()?;
        let code = c as u8 + 1;
        let data = m.iter().map(|&v| if v == code { 1.0 } else { 0.0 }).collect();
        Some(Tensor::from_parts(vec![self.height(), self.width()], data))
    }
}

impl SceneSpec {
    /// Three classes (triangle, disk, two-part) on 32x32 images, each tied
    /// to its own textured background.
    pub fn toy() -> Self {
        SceneSpec {
            width: 32,
            height: 32,
            classes: vec![
                ClassSpec { name: "tri".into(), shape: Shape::Triangle, correlated_background: 1, color: None },
                ClassSpec { name: "disk".into(), shape: Shape::Disk, correlated_background: 2, color: None },
                ClassSpec::two_blob("pair", 3),
            ],
            backgrounds: vec![
                Background::Plain { color: [0.5; 3] },
                Background::Stripes { a: [0.1, 0.3, 0.8], b: [0.2, 0.5, 0.9], period: 2, vertical: false },
                Background::Noise { base: [0.3, 0.6, 0.3], amplitude: 0.15 },
                Background::Checker { a: [0.8, 0.4, 0.4], b: [0.6, 0.3, 0.3], cell: 4 },
            ],
            neutral_background: 0,
            shift_backgrounds: vec![0],
            bias: vec![1.0; 3],
            negative_fraction: 0.1,
            mask_fraction: 1.0,
            part_dropout: 0.0,
            blob_gap: Shape::BLOB_GAP,
            object_size: [8, 11],
            shifted_object_size: None,
            foreground: default_foreground(),
            body_color: default_body(),
            part_color: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("unsatisfiable scene spec: {msg}")));
        if self.classes.len() < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.classes.len() > 254 {
            return bad("at most 254 classes fit in a mask".into());
        }
        if self.backgrounds.len() < 2 {
            return bad("need at least 2 backgrounds".into());
        }
        if self.bias.len() != self.classes.len() {
            return bad(format!("{} bias values for {} classes", self.bias.len(), self.classes.len()));
        }
        if let Some(b) = self.bias.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return bad(format!("bias {b} outside [0,1]"));
        }
        for (name, f) in [("negative_fraction", self.negative_fraction), ("mask_fraction", self.mask_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} {f} outside [0,1]"));
            }
        }
        let nb = self.backgrounds.len();
        let bg_refs = self
            .classes
            .iter()
            .map(|c| c.correlated_background)
            .chain(self.shift_backgrounds.iter().copied())
            .chain([self.neutral_background]);
        for b in bg_refs {
            if b >= nb {
                return bad(format!("background index {b} out of range ({nb} backgrounds)"));
            }
        }
        for bg in &self.backgrounds {
            match bg {
                Background::Stripes { period: 0, .. } | Background::Checker { cell: 0, .. } => {
                    return bad("texture period must be positive".into())
                }
                _ => {}
            }
        }
        if self.blob_gap[0] < Shape::BLOB_GAP[0] || self.blob_gap[0] > self.blob_gap[1] {
            return bad(format!("bad blob gap range {:?}", self.blob_gap));
        }
        if self.width == 0 || self.height == 0 {
            return bad("empty image".into());
        }
        let side = self.width.min(self.height);
        for range in [Some(self.object_size), self.shifted_object_size].into_iter().flatten() {
            if range[0] < 3 || range[0] > range[1] {
                return bad(format!("bad object size range {range:?}"));
            }
            for c in &self.classes {
                let ext = c.shape.max_extent(range[1], self.blob_gap);
                if ext > side {
                    return bad(format!("{} at size {} needs {ext} px but the image is {side} px", c.name, range[1]));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the spec's JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene spec serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Renders sample `index` of `split`. Each sample's randomness comes from
    /// its own ChaCha stream keyed by `(seed, split, index)`.
    pub fn sample(&self, split: SplitKind, index: usize, seed: u64) -> Result<Sample> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((split.stream() << 40) | index as u64);
        let nc = self.classes.len();

        let (class, background) = match split {
            SplitKind::Train | SplitKind::Val => {
                if rng.gen::<f64>() < self.negative_fraction {
                    (None, self.neutral_background)
                } else {
                    let k = rng.gen_range(0..nc);
                    let corr = self.classes[k].correlated_background;
                    let bg = if rng.gen::<f64>() < self.bias[k] {
                        corr
                    } else {
                        let others: Vec<usize> = (0..self.backgrounds.len()).filter(|&b| b != corr).collect();
                        *others.choose(&mut rng).unwrap()
                    };
                    (Some(k), bg)
                }
            }
            SplitKind::FgOnly => (Some(index % nc), self.neutral_background),
            SplitKind::BgOnly => (None, self.classes[index % nc].correlated_background),
            SplitKind::Shifted => {
                let bg = self.shift_backgrounds.choose(&mut rng).copied().unwrap_or(self.neutral_background);
                (Some(index % nc), bg)
            }
        };
        let focus = match split {
            SplitKind::FgOnly | SplitKind::BgOnly => Some(index % nc),
            _ => None,
        };

        let (w, h) = (self.width, self.height);
        let mut canvas = vec![[0.0f64; 3]; w * h];
        paint_background(&self.backgrounds[background], &mut canvas, w, &mut rng);
        let mut labels = vec![0.0; nc];
        let mut label_map = vec![0u8; w * h];
        if let Some(k) = class {
            labels[k] = 1.0;
            let size_range = match (split, self.shifted_object_size) {
                (SplitKind::Shifted, Some(r)) => r,
                _ => self.object_size,
            };
            let s = rng.gen_range(size_range[0]..=size_range[1]);
            let code = k as u8 + 1;
            let shape = &self.classes[k].shape;
            let omit = if split == SplitKind::Train && *shape == Shape::TwoBlob && self.part_dropout > 0.0 {
                (rng.gen::<f64>() < self.part_dropout).then(|| rng.gen::<bool>())
            } else {
                None
            };
            for (px, region) in rasterize(shape, s, w, h, omit, self.blob_gap, &mut rng) {
                match region {
                    Region::Foreground => {
                        canvas[px] = self.classes[k].color.unwrap_or(self.foreground);
                        label_map[px] = code;
                    }
                    Region::Part => {
                        canvas[px] = self.part_color.unwrap_or(self.foreground);
                        label_map[px] = code;
                    }
                    Region::Body => canvas[px] = self.body_color,
                }
            }
        }

        let mut pixels = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for p in &canvas {
                pixels.push(quantize(p[c]));
            }
        }
        let image = Tensor::from_parts(vec![3, h, w], pixels.iter().map(|&v| v as f64 / 255.0).collect());

        let keep_mask = match split {
            SplitKind::Train => rng.gen::<f64>() < self.mask_fraction,
            _ => true,
        };
        let bbox = if keep_mask && class.is_some() { mask_bbox(&label_map, w) } else { None };
        Ok(Sample {
            id: format!("{}_{index:05}", split.name()),
            image,
            labels,
            mask: keep_mask.then_some(label_map),
            bbox,
            focus,
            background,
        })
    }

    pub fn split(&self, split: SplitKind, count: usize, seed: u64) -> Result<Vec<Sample>> {
        (0..count).map(|i| self.sample(split, i, seed)).collect()
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn paint_background(bg: &Background, canvas: &mut [Rgb], w: usize, rng: &mut ChaCha8Rng) {
    for (i, px) in canvas.iter_mut().enumerate() {
        let (y, x) = (i / w, i % w);
        *px = match bg {
            Background::Plain { color } => *color,
            Background::Stripes { a, b, period, vertical } => {
                let t = if *vertical { x } else { y };
                if (t / period) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
            Background::Checker { a, b, cell } => {
                if (x / cell + y / cell) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
            Background::Noise { base, amplitude } => {
                let d = rng.gen_range(-1.0..=1.0) * amplitude;
                [base[0] + d, base[1] + d, base[2] + d]
            }
        };
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Foreground,
    /// Foreground drawn in the part color.
    Part,
    Body,
}

/// Pixels covered by `shape` at size `s`, placed uniformly inside the image.
/// Later entries overwrite earlier ones.
/// `omit_disk` drops one part of a [`Shape::TwoBlob`]: the disk if true,
/// the square if false.
fn rasterize(
    shape: &Shape,
    s: usize,
    w: usize,
    h: usize,
    omit_disk: Option<bool>,
    gap: [usize; 2],
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Region)> {
    let mut out = Vec::new();
    let mut fill = |x0: usize, y0: usize, bw: usize, bh: usize, region: Region, inside: &dyn Fn(f64, f64) -> bool| {
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                // pixel-center coordinates relative to the box
                if inside(x as f64 + 0.5 - x0 as f64, y as f64 + 0.5 - y0 as f64) {
                    out.push((y * w + x, region));
                }
            }
        }
    };
    let sf = s as f64;
    let disk = move |x: f64, y: f64| {
        let r = sf / 2.0;
        (x - r).powi(2) + (y - r).powi(2) <= r * r
    };
    match shape {
        Shape::Disk | Shape::Square | Shape::Triangle | Shape::Cross => {
            let x0 = rng.gen_range(0..=w - s);
            let y0 = rng.gen_range(0..=h - s);
            let f: Box<dyn Fn(f64, f64) -> bool> = match shape {
                Shape::Disk => Box::new(disk),
                Shape::Square => Box::new(|_, _| true),
                Shape::Triangle => Box::new(move |x: f64, y: f64| {
                    // apex at top center, base along the bottom edge
                    let half = sf / 2.0 * (y / sf);
                    (x - sf / 2.0).abs() <= half
                }),
                _ => Box::new(move |x: f64, y: f64| {
                    let (lo, hi) = (sf / 3.0, 2.0 * sf / 3.0);
                    (x >= lo && x <= hi) || (y >= lo && y <= hi)
                }),
            };
            fill(x0, y0, s, s, Region::Foreground, &*f);
        }
        Shape::TwoBlob => {
            let gap = rng.gen_range(gap[0]..=gap[1]);
            // equal-area square for a disk of diameter s
            let side = ((s as f64) * (std::f64::consts::PI / 4.0).sqrt()).round().max(1.0) as usize;
            let horizontal = rng.gen::<bool>();
            let (bw, bh) = if horizontal { (2 * s + gap, s) } else { (s, 2 * s + gap) };
            let x0 = rng.gen_range(0..=w - bw);
            let y0 = rng.gen_range(0..=h - bh);
            let disk_first = rng.gen::<bool>();
            let (first, second) = if horizontal {
                ((x0, y0), (x0 + s + gap, y0))
            } else {
                ((x0, y0), (x0, y0 + s + gap))
            };
            let (dpos, spos) = if disk_first { (first, second) } else { (second, first) };
            if omit_disk != Some(true) {
                fill(dpos.0, dpos.1, s, s, Region::Foreground, &disk);
            }
            if omit_disk != Some(false) {
                let off = (s - side) / 2;
                fill(spos.0 + off, spos.1 + off, side, side, Region::Part, &|_, _| true);
            }
        }
        Shape::Marked { side } => {
            let x0 = rng.gen_range(0..=w - s);
            let y0 = rng.gen_range(0..=h - s);
            fill(x0, y0, s, s, Region::Body, &disk);
            let m = (s / 5).max(3);
            let my = y0 + (s - m) / 2;
            let inset = ((s as f64 * 0.22).round() as usize).saturating_sub(m / 2);
            let mx = match side {
                Side::Left => x0 + inset,
                Side::Right => x0 + s - inset - m,
            };
            fill(mx, my, m, m, Region::Foreground, &|_, _| true);
        }
    }
    out
}

fn mask_bbox(label_map: &[u8], w: usize) -> Option<BoundingBox> {
    let mut b: Option<BoundingBox> = None;
    for (i, &v) in label_map.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let (x, y) = (i % w, i / w);
        b = Some(match b {
            None => BoundingBox { x0: x, y0: y, x1: x + 1, y1: y + 1 },
            Some(bb) => BoundingBox {
                x0: bb.x0.min(x),
                y0: bb.y0.min(y),
                x1: bb.x1.max(x + 1),
                y1: bb.y1.max(y + 1),
            },
        });
    }
    b
}
