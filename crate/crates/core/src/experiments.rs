//! Desk-scale experiments: attention completeness on a two-part class, bias
//! robustness under full background correlation, and generalization across
//! two capture regimes.

use serde::{Deserialize, Serialize};

use crate::attention::{LossWeights, ScoreMode, SupervisionSource};
use crate::data::{Background, ClassSpec, Sample, SceneSpec, Shape, Side, SplitKind};
use crate::error::Result;
use crate::eval::{self, BiasTable, CUE_FRACTION};
use crate::model::{ConvBlock, Model};
use crate::tensor::Tensor;
use crate::trainer::{self, Mode, TrainConfig};

/// Sample counts and training length shared by the variants of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub train: usize,
    pub test: usize,
    pub epochs: usize,
    pub seed: u64,
    pub blocks: Vec<ConvBlock>,
    pub lr: f64,
    #[serde(default)]
    pub score_mode: ScoreMode,
    #[serde(default)]
    pub weights: LossWeights,
}

impl Scale {
    fn config(&self, mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: self.epochs,
            seed: self.seed,
            blocks: self.blocks.clone(),
            lr: self.lr,
            score_mode: self.score_mode,
            weights: self.weights,
            ..TrainConfig::default()
        }
    }
}

fn blocks(spec: &[(usize, bool)]) -> Vec<ConvBlock> {
    spec.iter()
        .map(|&(out_channels, pool)| ConvBlock { out_channels, pool })
        .collect()
}

fn plain(v: f64) -> Background {
    Background::Plain { color: [v, v, v] }
}

/// Connected components (4-neighbour) of a binary `h x w` grid.
pub fn components(cells: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; cells.len()];
    let mut out = Vec::new();
    for start in 0..cells.len() {
        if !cells[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if cells[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

// ---------------------------------------------------------------- completeness

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessSetup {
    pub scene: SceneSpec,
    pub scale: Scale,
    /// Index of the two-part class.
    pub target: usize,
}

impl Default for CompletenessSetup {
    /// A bright disk plus a dimmer square on a mean-gray background. Half
    /// the training instances show only one part, so each part alone is
    /// evidence for the class.
    fn default() -> Self {
        CompletenessSetup {
            scene: SceneSpec {
                width: 32,
                height: 32,
                classes: vec![
                    ClassSpec::two_blob("pair", 0),
                    ClassSpec {
                        name: "cross".into(),
                        shape: Shape::Cross,
                        correlated_background: 0,
                        color: Some([0.2, 0.8, 0.9]),
                    },
                ],
                backgrounds: vec![plain(0.5), plain(0.45)],
                neutral_background: 0,
                shift_backgrounds: vec![],
                bias: vec![0.5; 2],
                negative_fraction: 0.0,
                mask_fraction: 1.0,
                part_dropout: 0.5,
                blob_gap: [10, 12],
                object_size: [8, 10],
                shifted_object_size: None,
                foreground: [0.95, 0.85, 0.2],
                body_color: [0.55, 0.55, 0.6],
                part_color: Some([0.65, 0.6, 0.6]),
            },
            scale: Scale {
                train: 240,
                test: 120,
                epochs: 8,
                seed: 3,
                blocks: blocks(&[(16, true), (24, false), (24, false)]),
                lr: 0.01,
                score_mode: ScoreMode::Probability,
                weights: LossWeights::default(),
            },
            target: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessScores {
    pub iou: f64,
    /// Share of test samples whose cues reach both parts of the object.
    pub both_parts: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessResult {
    pub baseline: CompletenessScores,
    pub gain: CompletenessScores,
}

/// Cue IoU and part coverage of `model` on test samples of class `target`.
pub fn completeness_scores(model: &Model, samples: &[Sample], target: usize) -> Result<CompletenessScores> {
    let [_, h, w] = model.spec().feature_shape();
    let (mut ious, mut both) = (Vec::new(), 0usize);
    let mut n = 0usize;
    for s in samples.iter().filter(|s| s.labels[target] == 1.0) {
        let Some(mask) = s.class_mask(target) else { continue };
        let cues = eval::extract_cues(&eval::infer_attention(model, &s.image, target)?, CUE_FRACTION)?;
        let gt = eval::ground_truth_cells(s, target, (h, w))?.unwrap_or_default();
        ious.push(eval::attention_iou(&cues.cells, &gt));
        let parts = components(
            &mask.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>(),
            s.height(),
            s.width(),
        );
        let touched = parts
            .iter()
            .filter(|part| {
                let mut m = Tensor::zeros(&[s.height(), s.width()]);
                for &i in part.iter() {
                    m.data_mut()[i] = 1.0;
                }
                let small = crate::attention::area_downsample(&m, h, w).expect("valid sizes");
                small.data().iter().zip(&cues.cells).any(|(&v, &c)| c && v >= 0.5)
            })
            .count();
        both += (parts.len() >= 2 && touched == parts.len()) as usize;
        n += 1;
    }
    Ok(CompletenessScores {
        iou: eval::mean(&ious).unwrap_or(0.0),
        both_parts: if n == 0 { 0.0 } else { both as f64 / n as f64 },
        accuracy: eval::accuracy(model, samples)?.overall,
    })
}

pub fn completeness(setup: &CompletenessSetup) -> Result<CompletenessResult> {
    let sc = &setup.scale;
    let train = setup.scene.split(SplitKind::Train, sc.train, sc.seed)?;
    let test = setup.scene.split(SplitKind::Val, sc.test, sc.seed)?;
    let run = |mode| -> Result<CompletenessScores> {
        let out = trainer::train(&sc.config(mode), &train, &[], None)?;
        completeness_scores(&out.checkpoint.model, &test, setup.target)
    };
    Ok(CompletenessResult {
        baseline: run(Mode::Baseline)?,
        gain: run(Mode::Gain)?,
    })
}

// ------------------------------------------------------------------------ bias

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSetup {
    pub scene: SceneSpec,
    pub scale: Scale,
    pub val: usize,
    pub broken: usize,
    pub supervised_fractions: Vec<f64>,
}

impl Default for BiasSetup {
    fn default() -> Self {
        BiasSetup {
            scene: SceneSpec {
                width: 32,
                height: 32,
                classes: vec![
                    ClassSpec {
                        name: "boat".into(),
                        shape: Shape::Triangle,
                        correlated_background: 1,
                        color: Some([0.95, 0.85, 0.2]),
                    },
                    ClassSpec {
                        name: "kite".into(),
                        shape: Shape::Cross,
                        correlated_background: 2,
                        color: Some([0.9, 0.3, 0.8]),
                    },
                ],
                backgrounds: vec![
                    // Faint tints: a weak but perfectly correlated context cue.
                    plain(0.45),
                    Background::Plain { color: [0.5, 0.5, 0.58] },
                    Background::Plain { color: [0.5, 0.58, 0.5] },
                ],
                neutral_background: 0,
                shift_backgrounds: vec![],
                bias: vec![1.0, 1.0],
                negative_fraction: 0.2,
                mask_fraction: 1.0,
                part_dropout: 0.0,
                blob_gap: Shape::BLOB_GAP,
                object_size: [8, 12],
                shifted_object_size: None,
                foreground: [0.95, 0.85, 0.2],
                body_color: [0.55, 0.55, 0.6],
                part_color: None,
            },
            scale: Scale {
                train: 200,
                test: 0,
                epochs: 10,
                seed: 1,
                blocks: blocks(&[(8, true), (16, true), (16, false)]),
                lr: 0.01,
                score_mode: ScoreMode::Probability,
                weights: LossWeights::default(),
            },
            val: 60,
            broken: 60,
            supervised_fractions: vec![0.02, 0.10, 0.50],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasResult {
    pub table: BiasTable,
}

impl BiasResult {
    pub fn overall(&self, variant: &str) -> Option<f64> {
        self.table.cell(variant, eval::OVERALL)
    }
}

pub fn gain_ext_variant(fraction: f64) -> String {
    format!("gain-ext@{:.0}%", fraction * 100.0)
}

pub fn bias(setup: &BiasSetup) -> Result<BiasResult> {
    let sc = &setup.scale;
    let seed = sc.seed;
    let train = setup.scene.split(SplitKind::Train, sc.train, seed)?;
    let val = setup.scene.split(SplitKind::Val, setup.val, seed)?;
    let fg = setup.scene.split(SplitKind::FgOnly, setup.broken, seed)?;
    let bg = setup.scene.split(SplitKind::BgOnly, setup.broken, seed)?;

    let mut models: Vec<(String, Model)> = Vec::new();
    for mode in [Mode::Baseline, Mode::Gain] {
        let out = trainer::train(&sc.config(mode), &train, &[], None)?;
        models.push((mode.name().to_string(), out.checkpoint.model));
    }
    for &f in &setup.supervised_fractions {
        let cfg = TrainConfig {
            supervised_fraction: f,
            supervision: SupervisionSource::PixelMask,
            ..sc.config(Mode::GainExt)
        };
        let out = trainer::train(&cfg, &train, &[], None)?;
        models.push((gain_ext_variant(f), out.checkpoint.model));
    }
    let refs: Vec<(&str, &Model)> = models.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let table = eval::bias_table(
        &refs,
        &[("val", &val), (eval::FG_ONLY, &fg), (eval::BG_ONLY, &bg)],
    )?;
    Ok(BiasResult { table })
}

// ---------------------------------------------------------------------- camera

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSetup {
    pub scene: SceneSpec,
    pub scale: Scale,
    pub supervised_fraction: f64,
}

impl Default for CameraSetup {
    fn default() -> Self {
        CameraSetup {
            scene: SceneSpec {
                width: 32,
                height: 32,
                classes: vec![
                    ClassSpec {
                        name: "left".into(),
                        shape: Shape::Marked { side: Side::Left },
                        correlated_background: 1,
                        color: Some([0.95, 0.85, 0.2]),
                    },
                    ClassSpec {
                        name: "right".into(),
                        shape: Shape::Marked { side: Side::Right },
                        correlated_background: 2,
                        color: Some([0.9, 0.3, 0.8]),
                    },
                ],
                backgrounds: vec![
                    plain(0.45),
                    Background::Plain { color: [0.5, 0.5, 0.58] },
                    Background::Plain { color: [0.5, 0.58, 0.5] },
                ],
                neutral_background: 0,
                // Regime 2 draws either context for either class.
                shift_backgrounds: vec![1, 2],
                bias: vec![1.0, 1.0],
                negative_fraction: 0.0,
                mask_fraction: 1.0,
                part_dropout: 0.0,
                blob_gap: Shape::BLOB_GAP,
                object_size: [18, 22],
                shifted_object_size: None,
                foreground: [0.95, 0.85, 0.2],
                body_color: [0.55, 0.55, 0.6],
                part_color: None,
            },
            scale: Scale {
                train: 200,
                test: 60,
                epochs: 16,
                seed: 3,
                blocks: blocks(&[(8, true), (16, true), (16, false)]),
                lr: 5e-3,
                score_mode: ScoreMode::Probability,
                weights: LossWeights::default(),
            },
            supervised_fraction: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeScores {
    pub regime1: f64,
    pub regime2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraResult {
    pub baseline: RegimeScores,
    pub gain_ext: RegimeScores,
}

pub fn camera(setup: &CameraSetup) -> Result<CameraResult> {
    let sc = &setup.scale;
    let train = setup.scene.split(SplitKind::Train, sc.train, sc.seed)?;
    let r1 = setup.scene.split(SplitKind::Val, sc.test, sc.seed)?;
    let r2 = setup.scene.split(SplitKind::Shifted, sc.test, sc.seed)?;
    let score = |m: &Model| -> Result<RegimeScores> {
        Ok(RegimeScores {
            regime1: eval::accuracy(m, &r1)?.overall,
            regime2: eval::accuracy(m, &r2)?.overall,
        })
    };
    let base = trainer::train(&sc.config(Mode::Baseline), &train, &[], None)?;
    let cfg = TrainConfig {
        supervised_fraction: setup.supervised_fraction,
        supervision: SupervisionSource::BoundingBox,
        ..sc.config(Mode::GainExt)
    };
    let ext = trainer::train(&cfg, &train, &[], None)?;
    Ok(CameraResult {
        baseline: score(&base.checkpoint.model)?,
        gain_ext: score(&ext.checkpoint.model)?,
    })
}
