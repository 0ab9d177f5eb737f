//! Binary checkpoint format (little-endian):
//!
//! ```text
//! magic   "GAINCKPT"
//! u32     version
//! u32     tensor count
//! per tensor:
//!   u32   name length, then UTF-8 name
//!   u32   rank
//!   u64   dims[rank]
//!   f64   values (raw IEEE-754 bits)
//! ```
//!
//! Besides the model parameters, three metadata tensors are stored:
//! `meta.spec` (the model spec flattened to small integers), `meta.step` and
//! `meta.config_hash`. The latter two hold `u64` values bit-cast into the f64
//! slot, so they survive the round trip exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ConvBlock, Model, ModelSpec, Param};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GAINCKPT";
pub const VERSION: u32 = 1;

const META_SPEC: &str = "meta.spec";
const META_STEP: &str = "meta.step";
const META_HASH: &str = "meta.config_hash";

/// Upper bound on tensors and ranks accepted from a file.
const MAX_TENSORS: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn new(model: Model, step: u64, config_hash: u64) -> Self {
        Checkpoint { model, step, config_hash }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(&str, Tensor)> = Vec::new();
        tensors.push((META_SPEC, encode_spec(self.model.spec())));
        tensors.push((META_STEP, Tensor::from_parts(vec![1], vec![f64::from_bits(self.step)])));
        tensors.push((META_HASH, Tensor::from_parts(vec![1], vec![f64::from_bits(self.config_hash)])));
        for p in self.model.params() {
            tensors.push((p.name.as_str(), p.value.clone()));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Corrupt("bad magic; not a GAIN checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let count = r.u32("tensor count")?;
        if count > MAX_TENSORS {
            return Err(Error::Corrupt(format!("implausible tensor count {count}")));
        }
        let mut tensors = Vec::with_capacity(count as usize);
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Corrupt(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")?;
            if rank > MAX_RANK {
                return Err(Error::Corrupt(format!("tensor {name}: implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = r.u64("dimension")?;
                let d = usize::try_from(d)
                    .ok()
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::Corrupt(format!("tensor {name}: bad dimension {d}")))?;
                n = n
                    .checked_mul(d)
                    .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                    .ok_or_else(|| Error::Corrupt(format!("tensor {name}: truncated (dims exceed file size)")))?;
                shape.push(d);
            }
            let raw = r.take(n * 8, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes after last tensor", r.remaining())));
        }

        let mut take_meta = |key: &str| -> Result<Tensor> {
            let idx = tensors
                .iter()
                .position(|(n, _)| n == key)
                .ok_or_else(|| Error::Corrupt(format!("missing {key}")))?;
            Ok(tensors.remove(idx).1)
        };
        let spec = decode_spec(&take_meta(META_SPEC)?)?;
        let step = take_meta(META_STEP)?.item().map_err(|_| Error::Corrupt("meta.step is not a scalar".into()))?;
        let hash = take_meta(META_HASH)?
            .item()
            .map_err(|_| Error::Corrupt("meta.config_hash is not a scalar".into()))?;
        let params = tensors.into_iter().map(|(name, value)| Param { name, value }).collect();
        let model = Model::from_params(spec, params)?;
        Ok(Checkpoint {
            model,
            step: step.to_bits(),
            config_hash: hash.to_bits(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {} (need {n}, have {})",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

// [in_channels, height, width, num_classes, n_blocks, (out_channels, pool)*]
fn encode_spec(spec: &ModelSpec) -> Tensor {
    let mut v = vec![
        spec.in_channels as f64,
        spec.height as f64,
        spec.width as f64,
        spec.num_classes as f64,
        spec.blocks.len() as f64,
    ];
    for b in &spec.blocks {
        v.push(b.out_channels as f64);
        v.push(if b.pool { 1.0 } else { 0.0 });
    }
    let n = v.len();
    Tensor::from_parts(vec![n], v)
}

fn decode_spec(t: &Tensor) -> Result<ModelSpec> {
    let bad = || Error::Corrupt("malformed meta.spec".into());
    let as_int = |x: f64| -> Result<usize> {
        if x.fract() == 0.0 && (0.0..=65536.0).contains(&x) {
            Ok(x as usize)
        } else {
            Err(bad())
        }
    };
    let d = t.data();
    if t.rank() != 1 || d.len() < 5 {
        return Err(bad());
    }
    let n_blocks = as_int(d[4])?;
    if d.len() != 5 + 2 * n_blocks {
        return Err(bad());
    }
    let blocks = (0..n_blocks)
        .map(|i| {
            let pool = d[6 + 2 * i];
            if pool != 0.0 && pool != 1.0 {
                return Err(bad());
            }
            Ok(ConvBlock {
                out_channels: as_int(d[5 + 2 * i])?,
                pool: pool == 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelSpec {
        in_channels: as_int(d[0])?,
        height: as_int(d[1])?,
        width: as_int(d[2])?,
        num_classes: as_int(d[3])?,
        blocks,
    })
}
