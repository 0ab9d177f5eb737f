//! Subcommands of the `gain-lab` binary.
//!
//! Every command resolves its settings as flag, then `--config` file, then
//! built-in default, and does all its work through `gain_core`. Config files
//! are JSON objects keyed by the flag names in snake case.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use gain_core::attention::SupervisionSource;
use gain_core::checkpoint::Checkpoint;
use gain_core::data::{generate_dataset, sha256_hex, Dataset, SceneSpec, SplitKind};
use gain_core::eval::{self, RunReport};
use gain_core::experiments::{self, BiasSetup, CameraSetup, CompletenessSetup};
use gain_core::trainer::{self, Mode, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_STEM: &str = "report";

#[derive(Parser, Debug)]
#[command(name = "gain-lab", version, about = "Guided attention inference network experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset: images, masks and one manifest per split.
    GenData(GenDataArgs),
    /// Train a classifier and write its checkpoint and run log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more manifests.
    Eval(EvalArgs),
    /// Write attention heatmap overlays for every sample of a manifest.
    Attn(AttnArgs),
    /// Run an experiment suite and write its result tables.
    Report(ReportArgs),
}

/// Flags every subcommand accepts.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON settings file; explicit flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scene spec JSON (default: the three-class toy scene).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Training samples.
    #[arg(long)]
    pub train: Option<usize>,
    /// Validation samples.
    #[arg(long)]
    pub val: Option<usize>,
    /// Foreground-only samples (0 skips the split).
    #[arg(long)]
    pub fg_only: Option<usize>,
    /// Background-only samples (0 skips the split).
    #[arg(long)]
    pub bg_only: Option<usize>,
    /// Shifted-regime samples (0 skips the split).
    #[arg(long)]
    pub shifted: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Baseline,
    Gain,
    GainExt,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Gain => Mode::Gain,
            ModeArg::GainExt => Mode::GainExt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionArg {
    Mask,
    Box,
}

impl From<SupervisionArg> for SupervisionSource {
    fn from(s: SupervisionArg) -> SupervisionSource {
        match s {
            SupervisionArg::Mask => SupervisionSource::PixelMask,
            SupervisionArg::Box => SupervisionSource::BoundingBox,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation manifest, scored after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Share of training samples used for extra supervision (gain-ext).
    #[arg(long)]
    pub supervised_fraction: Option<f64>,
    /// Extra-supervision source.
    #[arg(long, value_enum)]
    pub supervision: Option<SupervisionArg>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Manifests to evaluate; each is reported under its split name.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct AttnArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Manifest whose samples are rendered.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Class index or name.
    #[arg(long)]
    pub class: Option<String>,
    /// Render at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Completeness,
    Bias,
    Camera,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Completeness => "completeness",
            Experiment::Bias => "bias",
            Experiment::Camera => "camera",
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Experiment suite to run.
    #[arg(long, value_enum)]
    pub experiment: Option<Experiment>,
}

/// How a command failed: bad invocation (exit 2) or a failing stage (exit 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Stage { .. } => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Stage { stage, message } => write!(f, "{stage} failed: {message}"),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T, E: fmt::Display> Stage<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| CliError::Stage { stage, message: e.to_string() })
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| usage(format!("bad config {}: {e}", path.display())))
}

fn require<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| usage(format!("--{flag} is required (as a flag or in the config file)")))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Stage { stage: "write output", message: format!("{}: {e}", dir.display()) })?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Stage { stage: "write output", message: format!("{}: {e}", path.display()) })
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(|_| ()),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Eval(a) => eval_cmd(&a).map(|_| ()),
        Command::Attn(a) => attn(&a).map(|_| ()),
        Command::Report(a) => report(&a).map(|_| ()),
    }
}

// -------------------------------------------------------------------- gen-data

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataFile {
    seed: Option<u64>,
    out: Option<PathBuf>,
    spec: Option<PathBuf>,
    train: Option<usize>,
    val: Option<usize>,
    fg_only: Option<usize>,
    bg_only: Option<usize>,
    shifted: Option<usize>,
}

/// Writes the requested splits; returns the manifest paths.
pub fn gen_data(a: &GenDataArgs) -> CliResult<Vec<PathBuf>> {
    let f: GenDataFile = read_config(a.common.config.as_deref())?;
    let out = require(a.common.out.clone().or(f.out), "out")?;
    let seed = a.common.seed.or(f.seed).unwrap_or(0);
    let counts = [
        (SplitKind::Train, a.train.or(f.train).unwrap_or(200)),
        (SplitKind::Val, a.val.or(f.val).unwrap_or(60)),
        (SplitKind::FgOnly, a.fg_only.or(f.fg_only).unwrap_or(0)),
        (SplitKind::BgOnly, a.bg_only.or(f.bg_only).unwrap_or(0)),
        (SplitKind::Shifted, a.shifted.or(f.shifted).unwrap_or(0)),
    ];
    let counts: Vec<_> = counts.into_iter().filter(|&(_, n)| n > 0).collect();
    if counts.is_empty() {
        return Err(usage("every split count is 0"));
    }
    let spec = match a.spec.clone().or(f.spec) {
        Some(p) => {
            let bytes = std::fs::read(&p).stage("read scene spec")?;
            serde_json::from_slice::<SceneSpec>(&bytes).stage("parse scene spec")?
        }
        None => SceneSpec::toy(),
    };
    generate_dataset(&out, &spec, &counts, seed).stage("generate dataset")
}

// ----------------------------------------------------------------------- train

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    seed: Option<u64>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    val: Option<PathBuf>,
    mode: Option<ModeArg>,
    epochs: Option<usize>,
    lr: Option<f64>,
    supervised_fraction: Option<f64>,
    supervision: Option<SupervisionArg>,
    /// Any other training hyperparameters, as a partial config.
    train: Option<TrainConfig>,
}

/// Resolved settings of a train invocation, also written to `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainPlan {
    pub data: PathBuf,
    pub val: Option<PathBuf>,
    pub out: PathBuf,
    pub config: TrainConfig,
}

pub fn train_plan(a: &TrainArgs) -> CliResult<TrainPlan> {
    let f: TrainFile = read_config(a.common.config.as_deref())?;
    let mut cfg = f.train.unwrap_or_default();
    if let Some(m) = a.mode.or(f.mode) {
        cfg.mode = m.into();
    }
    if let Some(s) = a.common.seed.or(f.seed) {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs.or(f.epochs) {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr.or(f.lr) {
        cfg.lr = lr;
    }
    if let Some(s) = a.supervision.or(f.supervision) {
        cfg.supervision = s.into();
    }
    match a.supervised_fraction.or(f.supervised_fraction) {
        Some(frac) => cfg.supervised_fraction = frac,
        // gain-ext without an explicit fraction supervises every sample
        None if cfg.mode == Mode::GainExt && cfg.supervised_fraction == 0.0 => cfg.supervised_fraction = 1.0,
        None => {}
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(TrainPlan {
        data: require(a.data.clone().or(f.data), "data")?,
        val: a.val.clone().or(f.val),
        out: require(a.common.out.clone().or(f.out), "out")?,
        config: cfg,
    })
}

/// Trains and writes `checkpoint.bin`, `run_log.jsonl` and `config.json`.
pub fn train(a: &TrainArgs) -> CliResult<TrainPlan> {
    let plan = train_plan(a)?;
    let out = trainer::train_from_manifests(&plan.config, &plan.data, plan.val.as_deref()).stage("train")?;
    write(&plan.out.join(CHECKPOINT_FILE), out.checkpoint.to_bytes())?;
    write(&plan.out.join(RUN_LOG_FILE), out.log.to_jsonl())?;
    let mut echo = serde_json::to_string_pretty(&plan).expect("plan serializes");
    echo.push('\n');
    write(&plan.out.join(CONFIG_FILE), echo)?;
    Ok(plan)
}

// ------------------------------------------------------------------------ eval

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    seed: Option<u64>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    data: Option<Vec<PathBuf>>,
}

/// Scores the checkpoint on every manifest and writes `report.json` and
/// `report.md`. With both bias-broken splits present a bias table is added.
pub fn eval_cmd(a: &EvalArgs) -> CliResult<RunReport> {
    let f: EvalFile = read_config(a.common.config.as_deref())?;
    // evaluation is deterministic; the seed is accepted but unused
    let _ = a.common.seed.or(f.seed);
    let out = require(a.common.out.clone().or(f.out), "out")?;
    let ckpt_path = require(a.checkpoint.clone().or(f.checkpoint), "checkpoint")?;
    let data = if a.data.is_empty() { f.data.unwrap_or_default() } else { a.data.clone() };
    if data.is_empty() {
        return Err(usage("--data needs at least one manifest"));
    }
    let bytes = std::fs::read(&ckpt_path).stage("load checkpoint")?;
    let ckpt = Checkpoint::from_bytes(&bytes).stage("load checkpoint")?;
    let mut splits = Vec::new();
    for p in &data {
        let ds = Dataset::load(p).stage("load data")?;
        let name = ds.manifest.split.clone();
        if splits.iter().any(|(n, _)| n == &name) {
            return Err(usage(format!("split {name} given twice")));
        }
        splits.push((name, ds.samples().stage("load data")?));
    }
    let mut report = RunReport {
        config_hash: format!("{:016x}", ckpt.config_hash),
        checkpoint: sha256_hex(&bytes),
        ..RunReport::default()
    };
    for (name, samples) in &splits {
        let m = eval::evaluate_split(&ckpt.model, samples).stage("evaluate")?;
        report.splits.insert(name.clone(), m);
    }
    let has = |n: &str| splits.iter().any(|(s, _)| s == n);
    if has(eval::FG_ONLY) && has(eval::BG_ONLY) {
        let refs: Vec<(&str, &[_])> = splits.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
        let table = eval::bias_table(&[("model", &ckpt.model)], &refs).stage("evaluate")?;
        report.bias_table = Some(table);
    }
    eval::write_report(&report, &out.join(REPORT_STEM), None).stage("write report")?;
    Ok(report)
}

// ------------------------------------------------------------------------ attn

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttnFile {
    seed: Option<u64>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    class: Option<String>,
    limit: Option<usize>,
}

fn resolve_class(arg: &str, names: &[String]) -> Option<usize> {
    match arg.parse::<usize>() {
        Ok(i) => (i < names.len()).then_some(i),
        Err(_) => names.iter().position(|n| n == arg),
    }
}

/// Writes `<sample>_<class>.ppm` overlays; returns their paths.
pub fn attn(a: &AttnArgs) -> CliResult<Vec<PathBuf>> {
    let f: AttnFile = read_config(a.common.config.as_deref())?;
    let _ = a.common.seed.or(f.seed);
    let out = require(a.common.out.clone().or(f.out), "out")?;
    let ckpt_path = require(a.checkpoint.clone().or(f.checkpoint), "checkpoint")?;
    let data = require(a.data.clone().or(f.data), "data")?;
    let class_arg = require(a.class.clone().or(f.class), "class")?;
    let limit = a.limit.or(f.limit);

    let ckpt = Checkpoint::load(&ckpt_path).stage("load checkpoint")?;
    let ds = Dataset::load(&data).stage("load data")?;
    let names = &ds.manifest.class_names;
    let class = resolve_class(&class_arg, names).ok_or_else(|| CliError::Stage {
        stage: "resolve class",
        message: format!("unknown class {class_arg:?} (classes: {})", names.join(", ")),
    })?;
    if ckpt.model.num_classes() != names.len() {
        return Err(CliError::Stage {
            stage: "resolve class",
            message: format!("checkpoint has {} classes, manifest {}", ckpt.model.num_classes(), names.len()),
        });
    }
    std::fs::create_dir_all(&out).stage("write output")?;
    let n = limit.map_or(ds.len(), |l| l.min(ds.len()));
    let mut written = Vec::with_capacity(n);
    for i in 0..n {
        let s = ds.sample(i).stage("load data")?;
        let map = eval::infer_attention(&ckpt.model, &s.image, class).stage("attention")?;
        let path = out.join(format!("{}_{}.ppm", s.id, names[class]));
        eval::emit_heatmap(&s.image, &map, &path).stage("write heatmap")?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------- report

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    seed: Option<u64>,
    out: Option<PathBuf>,
    experiment: Option<Experiment>,
    completeness: Option<CompletenessSetup>,
    bias: Option<BiasSetup>,
    camera: Option<CameraSetup>,
}

fn table(header: &[&str], rows: &[(String, Vec<f64>)]) -> String {
    let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for (name, cells) in rows {
        let cells: Vec<String> = cells.iter().map(|v| format!("{v:.4}")).collect();
        s.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
    }
    s
}

/// Runs one experiment suite and writes `<experiment>.json` and
/// `<experiment>.md` under `--out`; returns the JSON text.
pub fn report(a: &ReportArgs) -> CliResult<String> {
    let f: ReportFile = read_config(a.common.config.as_deref())?;
    let out = require(a.common.out.clone().or(f.out), "out")?;
    let exp = require(a.experiment.or(f.experiment), "experiment")?;
    let seed = a.common.seed.or(f.seed);
    let (json, md) = match exp {
        Experiment::Completeness => {
            let mut setup = f.completeness.unwrap_or_default();
            if let Some(s) = seed {
                setup.scale.seed = s;
            }
            let r = experiments::completeness(&setup).stage("run experiment")?;
            let rows = [("baseline", r.baseline), ("gain", r.gain)]
                .map(|(n, s)| (n.to_string(), vec![s.iou, s.both_parts, s.accuracy]));
            (
                serde_json::to_string_pretty(&r),
                table(&["variant", "cue IoU", "both parts", "accuracy"], &rows),
            )
        }
        Experiment::Bias => {
            let mut setup = f.bias.unwrap_or_default();
            if let Some(s) = seed {
                setup.scale.seed = s;
            }
            let r = experiments::bias(&setup).stage("run experiment")?;
            (serde_json::to_string_pretty(&r), r.table.to_markdown())
        }
        Experiment::Camera => {
            let mut setup = f.camera.unwrap_or_default();
            if let Some(s) = seed {
                setup.scale.seed = s;
            }
            let r = experiments::camera(&setup).stage("run experiment")?;
            let rows = [("baseline", r.baseline), ("gain-ext", r.gain_ext)]
                .map(|(n, s)| (n.to_string(), vec![s.regime1, s.regime2]));
            (serde_json::to_string_pretty(&r), table(&["variant", "regime 1", "regime 2"], &rows))
        }
    };
    let mut json = json.expect("results serialize");
    json.push('\n');
    write(&out.join(format!("{}.json", exp.name())), &json)?;
    write(&out.join(format!("{}.md", exp.name())), format!("# {} experiment\n\n{md}", exp.name()))?;
    Ok(json)
}
