//! Self-describing model checkpoints.
//!
//! Layout (little-endian):
//! magic `NFCK`, version u16, u32 length + JSON config echo, u32 length + JSON
//! metadata, u32 entry count, then per entry: u16 name length + UTF-8 name,
//! u8 trainable flag, u8 rank, rank × u64 dims, f32 payload. A CRC32 of all
//! preceding bytes closes the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{Parametric, Scalar};
use super::net::Autoencoder;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NFCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub trainable: bool,
    pub value: ArrayD<f32>,
}

/// Decoded checkpoint: model config, free-form metadata and named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: serde_json::Value,
    pub entries: Vec<(String, Blob)>,
}

impl Checkpoint {
    pub fn from_model<F: Scalar>(model: &Autoencoder<F>, metadata: serde_json::Value) -> Self {
        let mut entries = Vec::new();
        model.visit("", &mut |name, p| {
            entries.push((
                name.to_string(),
                Blob {
                    trainable: p.trainable,
                    value: p.value.mapv(|v| v.as_f64() as f32),
                },
            ))
        });
        Checkpoint {
            config: model.config.clone(),
            metadata,
            entries,
        }
    }

    pub fn push_extra(&mut self, name: String, value: ArrayD<f32>) {
        self.entries.push((name, Blob { trainable: false, value }));
    }

    pub fn extras(&self, prefix: &str) -> BTreeMap<String, ArrayD<f32>> {
        self.entries
            .iter()
            .filter_map(|(n, b)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), b.value.clone())))
            .collect()
    }

    /// Rebuilds the model; every model tensor must be present with the right shape.
    pub fn to_model<F: Scalar>(&self) -> Result<Autoencoder<F>> {
        let mut model = Autoencoder::<F>::new(self.config.clone(), 0)?;
        let lookup: BTreeMap<&str, &Blob> = self.entries.iter().map(|(n, b)| (n.as_str(), b)).collect();
        let mut failure = None;
        model.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match lookup.get(name) {
                Some(blob) if blob.value.shape() == p.value.shape() => {
                    p.value = blob.value.mapv(|v| F::of(v as f64));
                }
                Some(blob) => {
                    failure = Some(Error::shape(format!("{name}: {:?}", p.value.shape()), format!("{:?}", blob.value.shape())))
                }
                None => failure = Some(Error::Config(format!("checkpoint is missing tensor '{name}'"))),
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for json in [serde_json::to_vec(&self.config)?, serde_json::to_vec(&self.metadata)?] {
            buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
            buf.extend_from_slice(&json);
        }
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, blob) in &self.entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(blob.trainable as u8);
            buf.push(blob.value.ndim() as u8);
            for &d in blob.value.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in blob.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint"));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(footer.try_into().expect("4 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = u16::from_le_bytes(r.take(2).ok_or_else(|| corrupt("truncated"))?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(corrupt("unsupported version"));
        }
        let config_len = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len).ok_or_else(|| corrupt("truncated"))?)?;
        let meta_len = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len).ok_or_else(|| corrupt("truncated"))?)?;
        let count = r.u32().ok_or_else(|| corrupt("truncated"))? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let entry = (|| {
                let name_len = u16::from_le_bytes(r.take(2)?.try_into().ok()?) as usize;
                let name = String::from_utf8(r.take(name_len)?.to_vec()).ok()?;
                let trainable = r.take(1)?[0] != 0;
                let rank = r.take(1)?[0] as usize;
                let mut dims = Vec::with_capacity(rank);
                for _ in 0..rank {
                    dims.push(u64::from_le_bytes(r.take(8)?.try_into().ok()?) as usize);
                }
                let n: usize = dims.iter().product();
                let data: Vec<f32> = r
                    .take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                let value = ArrayD::from_shape_vec(IxDyn(&dims), data).ok()?;
                Some((name, Blob { trainable, value }))
            })()
            .ok_or_else(|| corrupt("truncated tensor entry"))?;
            entries.push(entry);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { config, metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
}

/// Convenience metadata block written by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: usize,
    pub optimizer_step: u64,
    pub seed: u64,
    pub val_nmse_db: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::Array4;

    #[test]
    fn round_trip_reproduces_outputs() {
        let model = Autoencoder::<f32>::new(ModelConfig::extend_nlnet(32), 17).unwrap();
        let ck = Checkpoint::from_model(&model, serde_json::json!({"note": "t"}));
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes, Path::new("m.ck")).unwrap();
        assert_eq!(back, ck);
        let restored: Autoencoder<f32> = back.to_model().unwrap();
        let x = Array4::from_elem((1, 2, 32, 32), 0.25f32);
        assert_eq!(model.reconstruct(&x).unwrap(), restored.reconstruct(&x).unwrap());
    }

    #[test]
    fn corrupted_bytes_are_rejected() {
        let model = Autoencoder::<f32>::new(ModelConfig::csinet(64), 1).unwrap();
        let bytes = Checkpoint::from_model(&model, serde_json::Value::Null).encode().unwrap();
        let path = Path::new("m.ck");
        assert!(Checkpoint::decode(&bytes[..bytes.len() / 2], path).is_err());
        let mut flipped = bytes.clone();
        flipped[100] ^= 0xff;
        assert!(matches!(Checkpoint::decode(&flipped, path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let model = Autoencoder::<f32>::new(ModelConfig::csinet(16), 1).unwrap();
        let mut ck = Checkpoint::from_model(&model, serde_json::Value::Null);
        ck.config = ModelConfig::extend_nlnet(16);
        assert!(ck.to_model::<f32>().is_err());
    }
}
