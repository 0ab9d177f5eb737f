//! Inference-time attention, cues, metrics, bias tables, heatmaps and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{area_downsample, attention_map, normalize_map};
use crate::autodiff::{upsample_tensor, Graph};
use crate::data::pnm::Raster;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{preprocess, Model};
use crate::tensor::Tensor;

/// Share of the map maximum a cell must reach to count as a cue.
pub const CUE_FRACTION: f64 = 0.2;
/// Probability above which a class is predicted present. Ties are negative.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Normalized attention map `[h, w]` for `class`, computed with the training
/// formula but without recording second-order terms.
pub fn infer_attention(model: &Model, image: &Tensor, class: usize) -> Result<Tensor> {
    if class >= model.num_classes() {
        return Err(Error::Invalid(format!(
            "class {class} out of range for {} classes",
            model.num_classes()
        )));
    }
    let g = Graph::new();
    let bm = model.bind(&g);
    let fwd = bm.forward(&g.constant(preprocess(image)))?;
    let a = normalize_map(&attention_map(&fwd, class, true)?)?;
    let out = (*a.map.value()).clone();
    Ok(out)
}

/// Binary cue map at attention resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueMap {
    pub height: usize,
    pub width: usize,
    pub fraction: f64,
    pub cells: Vec<bool>,
}

impl CueMap {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Cells with `A >= fraction * max(A)`. A map with no positive value yields
/// no cues.
pub fn extract_cues(a: &Tensor, fraction: f64) -> Result<CueMap> {
    let &[height, width] = a.shape() else {
        return Err(Error::shape("extract_cues", format!("expected [h,w] map, got {:?}", a.shape())));
    };
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("cue fraction must lie in (0,1), got {fraction}")));
    }
    let max = a.data().iter().copied().fold(0.0, f64::max);
    let cells = if max > 0.0 {
        let t = fraction * max;
        a.data().iter().map(|&v| v >= t).collect()
    } else {
        vec![false; a.len()]
    };
    Ok(CueMap {
        height,
        width,
        fraction,
        cells,
    })
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets scoring 1.
pub fn attention_iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len(), "attention_iou on maps of different size");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ground truth for `class` at `(h, w)`: area-averaged, then `>= 0.5`.
pub fn ground_truth_cells(sample: &Sample, class: usize, (h, w): (usize, usize)) -> Result<Option<Vec<bool>>> {
    let Some(mask) = sample.class_mask(class) else { return Ok(None) };
    let small = area_downsample(&mask, h, w)?;
    Ok(Some(small.data().iter().map(|&v| v >= 0.5).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub per_class: Vec<f64>,
    pub samples: usize,
}

fn predict(model: &Model, image: &Tensor) -> Result<Vec<bool>> {
    let g = Graph::new();
    let bm = model.bind_frozen(&g);
    Ok(bm
        .probabilities(image)?
        .into_iter()
        .map(|p| p > DECISION_THRESHOLD)
        .collect())
}

/// Thresholded accuracy from precomputed decisions.
///
/// If every sample names a focus class (the bias-broken splits), a sample
/// counts as correct when the decision on its focus class matches its label,
/// and `per_class` groups samples by focus class. Otherwise every
/// (sample, class) decision counts once.
pub fn accuracy_from_predictions(samples: &[Sample], predictions: &[Vec<bool>]) -> Result<Accuracy> {
    if samples.is_empty() {
        return Err(Error::Invalid("accuracy on an empty split".into()));
    }
    if samples.len() != predictions.len() {
        return Err(Error::shape("accuracy", format!("{} samples, {} predictions", samples.len(), predictions.len())));
    }
    let nc = samples[0].labels.len();
    let mut hits = vec![0usize; nc];
    let mut totals = vec![0usize; nc];
    let focused = samples.iter().all(|s| s.focus.is_some());
    for (s, p) in samples.iter().zip(predictions) {
        if s.labels.len() != nc || p.len() != nc {
            return Err(Error::ClassSet(format!("sample {} has {} classes, expected {nc}", s.id, s.labels.len())));
        }
        let classes: Vec<usize> = match s.focus {
            Some(f) if focused => vec![f],
            _ => (0..nc).collect(),
        };
        for c in classes {
            totals[c] += 1;
            hits[c] += (p[c] == (s.labels[c] == 1.0)) as usize;
        }
    }
    let n_hits: usize = hits.iter().sum();
    let n_total: usize = totals.iter().sum();
    Ok(Accuracy {
        overall: n_hits as f64 / n_total as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        samples: samples.len(),
    })
}

pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<Accuracy> {
    let preds = samples
        .iter()
        .map(|s| predict(model, &s.image))
        .collect::<Result<Vec<_>>>()?;
    accuracy_from_predictions(samples, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    /// Mean cue IoU over (sample, positive class) pairs with a mask.
    pub attention_iou_mean: Option<f64>,
    pub cue_precision: Option<f64>,
    pub cue_recall: Option<f64>,
}

/// Accuracy plus cue quality against the masks carried by `samples`.
pub fn evaluate_split(model: &Model, samples: &[Sample]) -> Result<SplitMetrics> {
    let acc = accuracy(model, samples)?;
    let [_, h, w] = model.spec().feature_shape();
    let (mut ious, mut precisions, mut recalls) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        for c in s.positive_classes() {
            let Some(gt) = ground_truth_cells(s, c, (h, w))? else { continue };
            let cues = extract_cues(&infer_attention(model, &s.image, c)?, CUE_FRACTION)?;
            ious.push(attention_iou(&cues.cells, &gt));
            let inter = cues.cells.iter().zip(&gt).filter(|(&a, &b)| a && b).count() as f64;
            let n_cue = cues.count();
            let n_gt = gt.iter().filter(|&&g| g).count();
            if n_cue > 0 {
                precisions.push(inter / n_cue as f64);
            }
            if n_gt > 0 {
                recalls.push(inter / n_gt as f64);
            }
        }
    }
    Ok(SplitMetrics {
        accuracy: acc.overall,
        per_class: acc.per_class,
        attention_iou_mean: mean(&ious),
        cue_precision: mean(&precisions),
        cue_recall: mean(&recalls),
    })
}

/// Order-independent mean (values are summed in sorted order).
pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Rows are model variants, columns are splits. When both bias-broken splits
/// are present an `overall` column holds their sample-weighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub columns: Vec<String>,
    pub rows: Vec<BiasRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub variant: String,
    pub cells: Vec<f64>,
}

impl BiasTable {
    pub fn cell(&self, variant: &str, column: &str) -> Option<f64> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.cells[j])
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| variant | {} |\n", self.columns.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.columns.len()));
        for r in &self.rows {
            let cells: Vec<String> = r.cells.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(out, "| {} | {} |", r.variant, cells.join(" | "));
        }
        out
    }
}

pub const FG_ONLY: &str = "fg_only";
pub const BG_ONLY: &str = "bg_only";
pub const OVERALL: &str = "overall";

pub fn bias_table(models: &[(&str, &Model)], splits: &[(&str, &[Sample])]) -> Result<BiasTable> {
    if let Some((_, first)) = models.first() {
        let nc = first.num_classes();
        for (name, m) in models {
            if m.num_classes() != nc {
                return Err(Error::ClassSet(format!(
                    "{name} has {} classes, expected {nc}",
                    m.num_classes()
                )));
            }
        }
        for (name, s) in splits {
            if let Some(bad) = s.iter().find(|s| s.labels.len() != nc) {
                return Err(Error::ClassSet(format!(
                    "split {name}: sample {} has {} classes, models have {nc}",
                    bad.id,
                    bad.labels.len()
                )));
            }
        }
    }
    let fg = splits.iter().position(|(n, _)| *n == FG_ONLY);
    let bg = splits.iter().position(|(n, _)| *n == BG_ONLY);
    let mut columns: Vec<String> = splits.iter().map(|(n, _)| n.to_string()).collect();
    if fg.is_some() && bg.is_some() {
        columns.push(OVERALL.into());
    }
    let mut rows = Vec::with_capacity(models.len());
    for (name, m) in models {
        let mut cells = splits
            .iter()
            .map(|(_, s)| accuracy(m, s).map(|a| a.overall))
            .collect::<Result<Vec<_>>>()?;
        if let (Some(f), Some(b)) = (fg, bg) {
            let (nf, nb) = (splits[f].1.len() as f64, splits[b].1.len() as f64);
            cells.push((cells[f] * nf + cells[b] * nb) / (nf + nb));
        }
        rows.push(BiasRow {
            variant: name.to_string(),
            cells,
        });
    }
    Ok(BiasTable { columns, rows })
}

/// Overlay of a normalized map on the grayscale image: the map is
/// bilinearly upsampled, colored `(a, 0, 1 - a)` and blended at 0.5.
pub fn render_heatmap(image: &Tensor, map: &Tensor) -> Result<Raster> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("heatmap", format!("expected [C,H,W] image, got {:?}", image.shape())));
    };
    if map.rank() != 2 {
        return Err(Error::shape("heatmap", format!("expected [h,w] map, got {:?}", map.shape())));
    }
    if c != 1 && c != 3 {
        return Err(Error::shape("heatmap", format!("expected 1 or 3 channels, got {c}")));
    }
    let up = upsample_tensor(map, h, w)?;
    let d = image.data();
    let mut r = Raster::new(w, h, 3);
    for i in 0..h * w {
        let gray = if c == 3 {
            0.299 * d[i] + 0.587 * d[h * w + i] + 0.114 * d[2 * h * w + i]
        } else {
            d[i]
        };
        let a = up.data()[i].clamp(0.0, 1.0);
        let ramp = [a, 0.0, 1.0 - a];
        for (k, v) in ramp.iter().enumerate() {
            r.pixels[i * 3 + k] = ((0.5 * gray + 0.5 * v).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(r)
}

pub fn emit_heatmap(image: &Tensor, map: &Tensor, path: &Path) -> Result<()> {
    let bytes = render_heatmap(image, map)?.encode();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    /// SHA-256 of the checkpoint file.
    pub checkpoint: String,
    pub splits: BTreeMap<String, SplitMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_table: Option<BiasTable>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("report JSON", e.to_string()))
    }

    /// One table row per split, then the bias table if present.
    pub fn to_markdown(&self, generated_at: Option<&str>) -> String {
        let mut out = String::from("# Run report\n\n");
        let _ = writeln!(out, "- config hash: `{}`", self.config_hash);
        let _ = writeln!(out, "- checkpoint sha256: `{}`", self.checkpoint);
        if let Some(t) = generated_at {
            let _ = writeln!(out, "- generated: {t}");
        }
        out.push_str("\n| split | accuracy | attention IoU | cue precision | cue recall |\n|---|---|---|---|---|\n");
        for (name, m) in &self.splits {
            let _ = writeln!(
                out,
                "| {name} | {:.4} | {} | {} | {} |",
                m.accuracy,
                opt(m.attention_iou_mean),
                opt(m.cue_precision),
                opt(m.cue_recall)
            );
        }
        if let Some(t) = &self.bias_table {
            out.push_str("\n## Bias table\n\n");
            out.push_str(&t.to_markdown());
        }
        out
    }
}

/// Writes `<stem>.json` and `<stem>.md`. The timestamp, if any, goes into the
/// markdown only so the JSON stays byte-reproducible.
pub fn write_report(report: &RunReport, stem: &Path, generated_at: Option<&str>) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = stem.with_extension("json");
    std::fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
    let md = stem.with_extension("md");
    std::fs::write(&md, report.to_markdown(generated_at)).map_err(|e| Error::io(&md, e))
}
