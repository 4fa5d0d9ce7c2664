//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  b"HSEPCKPT"
//! u32    format version
//! u64    metadata length, then that many bytes of JSON metadata
//! u32    parameter tensor count, then tensors
//! u32    optimizer tensor count, then tensors
//! ```
//!
//! A tensor is `u32 name length, name (UTF-8), u32 rank, rank × u64 dims,
//! product(dims) × f64`. The batch stream is derived from `(seed, step)`,
//! so `seed` and `step` fully describe the data-order state.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HSEPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub seed: u64,
    pub best_validation: Option<f64>,
    /// Step at which `best_validation` was measured.
    pub best_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optimizer: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Rebuilds the model, checking that every expected tensor is present
    /// with the right shape and that no extra tensors remain.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.meta.model.clone())?;
        if model.params.len() != self.params.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {} parameter tensors, configuration needs {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in model.params.iter_mut() {
            let stored = self
                .params
                .get(name)
                .map_err(|_| Error::Corrupt(format!("missing tensor `{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Corrupt(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            *t = stored.clone();
        }
        Ok(model)
    }
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn to_bytes(c: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&c.meta).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut out = Vec::new();
    let io = |e: std::io::Error| Error::Corrupt(e.to_string());
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&meta).map_err(io)?;
    out.write_all(&(c.params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in c.params.iter() {
        write_tensor(&mut out, name, t).map_err(io)?;
    }
    out.write_all(&(c.optimizer.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in &c.optimizer {
        write_tensor(&mut out, name, t).map_err(io)?;
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Corrupt("unexpected end of file".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Corrupt(e.to_string()))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Corrupt(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` overruns the file")))?;
        let data = self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = r.u64()? as usize;
    if meta_len > r.buf.len() {
        return Err(Error::Corrupt("metadata overruns the file".into()));
    }
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let (n, t) = r.tensor()?;
        params.insert(n, t);
    }
    let mut optimizer = BTreeMap::new();
    for _ in 0..r.u32()? {
        let (n, t) = r.tensor()?;
        optimizer.insert(n, t);
    }
    if !r.buf.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes", r.buf.len())));
    }
    Ok(Checkpoint { meta, params, optimizer })
}

/// Writes to a temporary sibling and renames, so an interrupted save never
/// leaves a truncated checkpoint behind.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(c)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::Waveform;
    use crate::config::{EncoderBase, SharingMode, TcnBase};

    fn sample(sharing: SharingMode) -> Checkpoint {
        let model = Model::new(ModelConfig {
            instruments: vec!["a".into(), "b".into()],
            encoder: EncoderBase {
                stride: 4,
                kernel: 16,
                latent_dim: 8,
                heads: 2,
                stft_window: 16,
            },
            tcn: TcnBase {
                blocks: 1,
                layers_per_block: 2,
                hidden: 8,
                bottleneck: 4,
                kernel: 3,
            },
            embedding_dim: 6,
            generator_dim: 2,
            sharing,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut optimizer = BTreeMap::new();
        optimizer.insert("m/x".into(), Tensor::from_vec(&[2], vec![0.1, f64::MIN_POSITIVE]).unwrap());
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                train: TrainConfig::default(),
                step: 17,
                seed: 5,
                best_validation: Some(3.25),
                best_step: Some(10),
            },
            params: model.params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [SharingMode::Baseline, SharingMode::SharedTcn, SharingMode::Meta] {
            let c = sample(mode);
            let path = dir.path().join("c.ckpt");
            save_checkpoint(&c, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, c);
            let probe = Waveform::new((0..640).map(|t| (t as f64 * 0.05).sin()).collect(), 32000).unwrap();
            let a = c.model().unwrap().separate(&probe).unwrap();
            let b = back.model().unwrap().separate(&probe).unwrap();
            for (x, y) in a.stages.iter().zip(&b.stages) {
                for (u, v) in x.waveforms.iter().zip(&y.waveforms) {
                    assert!(u.samples.iter().zip(&v.samples).all(|(p, q)| p.to_bits() == q.to_bits()));
                }
            }
        }
    }

    #[test]
    fn version_and_corruption_are_reported() {
        let c = sample(SharingMode::Meta);
        let mut bytes = to_bytes(&c).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::Version { found: 99, expected: 1 })));
        let bytes = to_bytes(&c).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        assert!(matches!(from_bytes(b"nonsense"), Err(Error::Corrupt(_))));
        let missing = tempfile::tempdir().unwrap().path().join("none.ckpt");
        assert!(matches!(load_checkpoint(&missing), Err(Error::Io { .. })));
    }

    #[test]
    fn mismatched_tensors_are_rejected() {
        let mut c = sample(SharingMode::Baseline);
        c.params.insert("s0.mask.a.in_conv.w", Tensor::zeros(&[1]));
        assert!(c.model().is_err());
        let mut c = sample(SharingMode::Baseline);
        c.params.insert("stray", Tensor::zeros(&[1]));
        assert!(c.model().is_err());
    }
}
