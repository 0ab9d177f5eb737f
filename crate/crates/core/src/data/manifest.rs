//! On-disk datasets: one JSON manifest per split plus PPM images and PGM
//! label masks, every file pinned by its SHA-256.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pnm::Raster;
use super::scene::{Sample, SceneSpec, SplitKind};
use crate::attention::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub image: String,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<usize>,
    pub background: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec_hash: String,
    pub seed: u64,
    pub split: String,
    pub class_names: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl DatasetManifest {
    /// Parses and structurally validates a manifest (no file access).
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_slice(bytes).map_err(|e| Error::format("manifest JSON", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::format("manifest", d));
        if self.class_names.len() < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.width == 0 || self.height == 0 || self.width > super::pnm::MAX_DIM || self.height > super::pnm::MAX_DIM {
            return bad(format!("bad image size {}x{}", self.width, self.height));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.labels.len() != self.class_names.len() {
                return bad(format!("entry {i}: {} labels for {} classes", e.labels.len(), self.class_names.len()));
            }
            if e.labels.iter().any(|&y| y > 1) {
                return bad(format!("entry {i}: labels must be 0 or 1"));
            }
            if let Some(f) = e.focus {
                if f >= self.class_names.len() {
                    return bad(format!("entry {i}: focus class {f} out of range"));
                }
            }
            if let Some(b) = e.bbox {
                if b.area() == 0 || b.x1 > self.width || b.y1 > self.height {
                    return bad(format!("entry {i}: box {:?} invalid", <[usize; 4]>::from(b)));
                }
            }
            if e.mask.is_some() != e.mask_sha256.is_some() {
                return bad(format!("entry {i}: mask and mask_sha256 must appear together"));
            }
            for p in std::iter::once(&e.image).chain(e.mask.as_ref()) {
                if Path::new(p).is_absolute() || p.split(['/', '\\']).any(|c| c == "..") {
                    return bad(format!("entry {i}: path {p:?} escapes the dataset directory"));
                }
            }
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn image_raster(s: &Sample) -> Raster {
    let (h, w) = (s.height(), s.width());
    let mut r = Raster::new(w, h, 3);
    let d = s.image.data();
    for i in 0..h * w {
        for c in 0..3 {
            r.pixels[i * 3 + c] = (d[c * h * w + i] * 255.0).round() as u8;
        }
    }
    r
}

/// Generates `count` samples of `split` and writes them under `dir`:
/// `dir/<split>/<id>.ppm`, masks as `<id>_mask.pgm`, and `dir/<split>.json`.
pub fn write_split(dir: &Path, spec: &SceneSpec, split: SplitKind, count: usize, seed: u64) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::Invalid(format!("split {} needs at least one sample", split.name())));
    }
    let samples = spec.split(split, count, seed)?;
    let mut entries = Vec::with_capacity(count);
    for s in &samples {
        let image_rel = format!("{}/{}.ppm", split.name(), s.id);
        let bytes = image_raster(s).encode();
        write_file(&dir.join(&image_rel), &bytes)?;
        let (mask, mask_sha256) = match &s.mask {
            Some(m) => {
                let rel = format!("{}/{}_mask.pgm", split.name(), s.id);
                let r = Raster {
                    width: s.width(),
                    height: s.height(),
                    channels: 1,
                    pixels: m.clone(),
                };
                let mb = r.encode();
                write_file(&dir.join(&rel), &mb)?;
                (Some(rel), Some(sha256_hex(&mb)))
            }
            None => (None, None),
        };
        entries.push(ManifestEntry {
            image: image_rel,
            labels: s.labels.iter().map(|&y| y as u8).collect(),
            mask,
            bbox: s.bbox,
            sha256: sha256_hex(&bytes),
            mask_sha256,
            focus: s.focus,
            background: s.background,
        });
    }
    let manifest = DatasetManifest {
        spec_hash: spec.hash(),
        seed,
        split: split.name().to_string(),
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        width: spec.width,
        height: spec.height,
        entries,
    };
    let path = dir.join(format!("{}.json", split.name()));
    write_file(&path, &manifest.to_json())?;
    Ok(path)
}

/// Writes every split in `counts`; returns the manifest paths in order.
pub fn generate_dataset(dir: &Path, spec: &SceneSpec, counts: &[(SplitKind, usize)], seed: u64) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    counts.iter().map(|&(k, n)| write_split(dir, spec, k, n, seed)).collect()
}

/// Foreground-without-correlated-background and
/// correlated-background-without-foreground manifests.
pub fn bias_broken_splits(dir: &Path, spec: &SceneSpec, counts: (usize, usize), seed: u64) -> Result<(PathBuf, PathBuf)> {
    Ok((
        write_split(dir, spec, SplitKind::FgOnly, counts.0, seed)?,
        write_split(dir, spec, SplitKind::BgOnly, counts.1, seed)?,
    ))
}

/// A manifest whose referenced files have been checked against their digests.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    root: PathBuf,
}

impl Dataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest = DatasetManifest::from_json(&bytes)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let ds = Dataset { manifest, root };
        for e in &ds.manifest.entries {
            ds.read_checked(&e.image, &e.sha256)?;
            if let (Some(m), Some(h)) = (&e.mask, &e.mask_sha256) {
                ds.read_checked(m, h)?;
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn read_checked(&self, rel: &str, digest: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile { path }),
            Err(e) => return Err(Error::io(path, e)),
        };
        let actual = sha256_hex(&bytes);
        if actual != digest {
            return Err(Error::Digest {
                path,
                expected: digest.to_string(),
                actual,
            });
        }
        Ok(bytes)
    }

    /// Loads entry `i` from disk, re-verifying digests.
    pub fn sample(&self, i: usize) -> Result<Sample> {
        let e = self
            .manifest
            .entries
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("sample {i} out of range ({} entries)", self.len())))?;
        let (w, h) = (self.manifest.width, self.manifest.height);
        let img = Raster::decode(&self.read_checked(&e.image, &e.sha256)?)?;
        if img.channels != 3 || img.width != w || img.height != h {
            return Err(Error::format("dataset image", format!("{} is not a {w}x{h} RGB image", e.image)));
        }
        let mut planar = vec![0.0; 3 * w * h];
        for i in 0..w * h {
            for c in 0..3 {
                planar[c * w * h + i] = img.pixels[i * 3 + c] as f64 / 255.0;
            }
        }
        let mask = match (&e.mask, &e.mask_sha256) {
            (Some(m), Some(d)) => {
                let r = Raster::decode(&self.read_checked(m, d)?)?;
                if r.channels != 1 || r.width != w || r.height != h {
                    return Err(Error::format("dataset mask", format!("{m} is not a {w}x{h} gray image")));
                }
                Some(r.pixels)
            }
            _ => None,
        };
        let id = Path::new(&e.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{i}"));
        Ok(Sample {
            id,
            image: Tensor::from_parts(vec![3, h, w], planar),
            labels: e.labels.iter().map(|&y| y as f64).collect(),
            mask,
            bbox: e.bbox,
            focus: e.focus,
            background: e.background,
        })
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }
}
