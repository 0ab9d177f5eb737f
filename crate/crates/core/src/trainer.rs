//! Training loops for the baseline, self-guided and externally supervised
//! modes. One graph per step, batch of one, plain SGD with momentum.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    attention_map, loss_am, loss_cl, loss_e, loss_ext, loss_self, supervision_from_box, supervision_from_mask,
    ExtraSupervision, LossWeights, MaskParams, ScoreMode, SupervisionSource,
};
use crate::autodiff::{grad, Graph};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{preprocess, ConvBlock, Model, ModelSpec, Param};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Classification loss only.
    Baseline,
    /// Classification plus attention mining.
    Gain,
    /// Adds the extra-supervision term on the supervised subset.
    GainExt,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "gain" => Ok(Mode::Gain),
            "gain-ext" => Ok(Mode::GainExt),
            _ => Err(Error::Invalid(format!("unknown mode {s:?} (expected baseline, gain or gain-ext)"))),
        }
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Gain => "gain",
            Mode::GainExt => "gain-ext",
        }
    }
}

fn default_blocks() -> Vec<ConvBlock> {
    ModelSpec::toy(2).blocks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    pub mask: MaskParams,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Treat the channel weights of the attention map as constants.
    pub detach_weights: bool,
    pub score_mode: ScoreMode,
    /// Share of training samples whose masks or boxes feed the extra-supervision loss.
    pub supervised_fraction: f64,
    pub supervision: SupervisionSource,
    pub blocks: Vec<ConvBlock>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Gain,
            weights: LossWeights::default(),
            mask: MaskParams::default(),
            lr: 5e-3,
            momentum: 0.9,
            batch_size: 1,
            epochs: 30,
            seed: 0,
            detach_weights: false,
            score_mode: ScoreMode::Probability,
            supervised_fraction: 0.0,
            supervision: SupervisionSource::PixelMask,
            blocks: default_blocks(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.supervised_fraction) {
            return Err(Error::Invalid(format!(
                "supervised fraction must lie in [0,1], got {}",
                self.supervised_fraction
            )));
        }
        if self.mode == Mode::GainExt && self.supervised_fraction == 0.0 {
            return Err(Error::MissingSupervision("gain-ext needs a supervised fraction above 0".into()));
        }
        self.weights.validate()?;
        self.mask.validate()
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_slice(bytes).map_err(|e| Error::format("train config JSON", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 8 bytes of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> u64 {
        let d = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        u64::from_be_bytes(d[..8].try_into().unwrap())
    }

    pub fn model_spec(&self, sample: &Sample) -> ModelSpec {
        ModelSpec {
            in_channels: sample.image.shape()[0],
            height: sample.height(),
            width: sample.width(),
            blocks: self.blocks.clone(),
            num_classes: sample.labels.len(),
        }
    }
}

/// Loss components of one step. Absent terms were not computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_cl: f64,
    pub l_am: Option<f64>,
    pub l_e: Option<f64>,
    pub total: f64,
}

pub struct StepOutput {
    pub losses: StepLosses,
    /// Gradient of the total loss for every parameter, in model order.
    pub grads: Vec<Tensor>,
    /// Forward passes run through the shared parameters.
    pub forward_passes: usize,
}

/// One training step on one sample. `supervision` is used only in
/// [`Mode::GainExt`].
pub fn step(model: &Model, sample: &Sample, supervision: Option<&[ExtraSupervision]>, cfg: &TrainConfig) -> Result<StepOutput> {
    let g = Graph::new();
    let bm = model.bind(&g);
    let image = g.constant(preprocess(&sample.image));
    let fwd = bm.forward(&image)?;
    let l_cl = loss_cl(&fwd.logits, &sample.labels)?;
    let mut losses = StepLosses {
        l_cl: l_cl.item()?,
        l_am: None,
        l_e: None,
        total: 0.0,
    };
    let positives = sample.positive_classes();
    let total = if cfg.mode == Mode::Baseline || positives.is_empty() {
        l_cl
    } else {
        let maps = positives
            .iter()
            .map(|&c| attention_map(&fwd, c, cfg.detach_weights))
            .collect::<Result<Vec<_>>>()?;
        let l_am = loss_am(&bm, &image, &maps, &cfg.mask, cfg.score_mode)?;
        losses.l_am = Some(l_am.item()?);
        match (cfg.mode, supervision) {
            (Mode::GainExt, Some(targets)) => {
                let l_e = loss_e(&maps, targets)?;
                losses.l_e = Some(l_e.item()?);
                loss_ext(&l_cl, &l_am, &l_e, &cfg.weights)?
            }
            _ => loss_self(&l_cl, &l_am, &cfg.weights)?,
        }
    };
    losses.total = total.item()?;
    let params: Vec<_> = bm.params().iter().collect();
    let grads = grad(&total, &params, false)?
        .into_iter()
        .map(|v| (*v.value()).clone())
        .collect();
    Ok(StepOutput {
        losses,
        grads,
        forward_passes: bm.forward_count(),
    })
}

/// [`step`] in [`Mode::Gain`].
pub fn step_gain(model: &Model, sample: &Sample, cfg: &TrainConfig) -> Result<StepOutput> {
    let cfg = TrainConfig { mode: Mode::Gain, ..cfg.clone() };
    step(model, sample, None, &cfg)
}

/// [`step`] in [`Mode::GainExt`]; without supervision it equals [`step_gain`].
pub fn step_gain_ext(
    model: &Model,
    sample: &Sample,
    supervision: Option<&[ExtraSupervision]>,
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    let cfg = TrainConfig { mode: Mode::GainExt, ..cfg.clone() };
    step(model, sample, supervision, &cfg)
}

/// SGD with heavy-ball momentum: `v <- momentum v + g; p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [Param], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("sgd", format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd",
                    format!("{}: parameter {:?} vs gradient {:?}", p.name, p.value.shape(), g.shape()),
                ));
            }
            sgd_update(p.value.data_mut(), g.data(), v.data_mut(), self.lr, self.momentum);
        }
        Ok(())
    }
}

pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub l_cl: f64,
    pub l_am: Option<f64>,
    pub l_e: Option<f64>,
    pub total: f64,
    pub val_accuracy: Option<f64>,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let epochs = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format("run log", e.to_string())))
            .collect::<Result<Vec<EpochRecord>>>()?;
        for (i, r) in epochs.iter().enumerate() {
            if r.epoch != i {
                return Err(Error::format("run log", format!("epoch {} at line {}", r.epoch, i + 1)));
            }
        }
        Ok(RunLog { epochs })
    }

    /// The log with wall-clock times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunLog {
        let mut out = self.clone();
        for r in &mut out.epochs {
            r.wall_time_s = 0.0;
        }
        out
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
}

/// Indices of training samples that feed the extra-supervision stream.
pub fn supervised_subset(samples: &[Sample], cfg: &TrainConfig) -> Vec<usize> {
    if cfg.supervised_fraction == 0.0 {
        return Vec::new();
    }
    let mut candidates: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            !s.positive_classes().is_empty()
                && match cfg.supervision {
                    SupervisionSource::PixelMask => s.mask.is_some(),
                    SupervisionSource::BoundingBox => s.bbox.is_some() && s.positive_classes().len() == 1,
                }
        })
        .map(|(i, _)| i)
        .collect();
    let want = (cfg.supervised_fraction * samples.len() as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x5u64 << 56);
    candidates.shuffle(&mut rng);
    candidates.truncate(want);
    candidates.sort_unstable();
    candidates
}

/// Targets for every positive class of `sample` at attention resolution.
pub fn supervision_for(sample: &Sample, source: SupervisionSource, map: (usize, usize)) -> Result<Vec<ExtraSupervision>> {
    sample
        .positive_classes()
        .into_iter()
        .map(|c| match source {
            SupervisionSource::PixelMask => {
                let m = sample
                    .class_mask(c)
                    .ok_or_else(|| Error::MissingSupervision(format!("sample {} has no mask", sample.id)))?;
                supervision_from_mask(c, &m, map)
            }
            SupervisionSource::BoundingBox => {
                let b = sample
                    .bbox
                    .ok_or_else(|| Error::MissingSupervision(format!("sample {} has no box", sample.id)))?;
                supervision_from_box(c, b, (sample.height(), sample.width()), map)
            }
        })
        .collect()
}

/// Trains a fresh model (or continues `init`) on `train`, reporting
/// validation accuracy on `val` after each epoch.
pub fn train(cfg: &TrainConfig, train: &[Sample], val: &[Sample], init: Option<Model>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Invalid("training set is empty".into()))?;
    let mut model = match init {
        Some(m) => m,
        None => Model::new(cfg.model_spec(first), cfg.seed)?,
    };
    let [_, mh, mw] = model.spec().feature_shape();

    let mut supervision: Vec<Option<Vec<ExtraSupervision>>> = vec![None; train.len()];
    if cfg.mode == Mode::GainExt {
        let subset = supervised_subset(train, cfg);
        if subset.is_empty() {
            let what = match cfg.supervision {
                SupervisionSource::PixelMask => "pixel masks",
                SupervisionSource::BoundingBox => "bounding boxes",
            };
            return Err(Error::MissingSupervision(format!(
                "gain-ext training needs {what}, but no training sample carries one"
            )));
        }
        for i in subset {
            supervision[i] = Some(supervision_for(&train[i], cfg.supervision, (mh, mw))?);
        }
    }

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut log = RunLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let (mut sum_cl, mut sum_total) = (0.0, 0.0);
        let (mut sum_am, mut n_am, mut sum_e, mut n_e) = (0.0, 0usize, 0.0, 0usize);
        let mut acc: Option<Vec<Tensor>> = None;
        let mut in_batch = 0;
        for (pos, &i) in order.iter().enumerate() {
            let out = step(&model, &train[i], supervision[i].as_deref(), cfg)?;
            let l = out.losses;
            if !l.total.is_finite() {
                return Err(Error::NonFinite {
                    step: global_step,
                    epoch,
                    detail: format!("sample {} produced {:?}", train[i].id, l),
                });
            }
            sum_cl += l.l_cl;
            sum_total += l.total;
            if let Some(v) = l.l_am {
                sum_am += v;
                n_am += 1;
            }
            if let Some(v) = l.l_e {
                sum_e += v;
                n_e += 1;
            }
            acc = Some(match acc {
                None => out.grads,
                Some(mut a) => {
                    for (x, y) in a.iter_mut().zip(&out.grads) {
                        for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                            *p += q;
                        }
                    }
                    a
                }
            });
            in_batch += 1;
            global_step += 1;
            if in_batch == cfg.batch_size || pos + 1 == order.len() {
                let mut grads = acc.take().unwrap();
                if in_batch > 1 {
                    let inv = 1.0 / in_batch as f64;
                    grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
                }
                sgd.update(model.params_mut(), &grads)?;
                in_batch = 0;
            }
        }
        let n = train.len() as f64;
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(eval::accuracy(&model, val)?.overall)
        };
        log.epochs.push(EpochRecord {
            epoch,
            steps: train.len(),
            l_cl: sum_cl / n,
            l_am: (n_am > 0).then(|| sum_am / n_am as f64),
            l_e: (n_e > 0).then(|| sum_e / n_e as f64),
            total: sum_total / n,
            val_accuracy,
            wall_time_s: started.elapsed().as_secs_f64(),
            seed: cfg.seed,
            config: cfg.clone(),
        });
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, global_step as u64, cfg.hash()),
        log,
    })
}

/// [`train`] over manifests on disk.
pub fn train_from_manifests(cfg: &TrainConfig, train_manifest: &Path, val_manifest: Option<&Path>) -> Result<TrainOutcome> {
    let tr = Dataset::load(train_manifest)?.samples()?;
    let va = match val_manifest {
        Some(p) => Dataset::load(p)?.samples()?,
        None => Vec::new(),
    };
    train(cfg, &tr, &va, None)
}
