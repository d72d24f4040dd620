//! Self-describing checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, UTF-8 JSON header
//! (spec, tensor table, counters, RNG state), then every tensor as
//! little-endian `f32` in table order: parameters, then Adam first moments,
//! then Adam second moments when optimizer state is present.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, Model, ParamSet};
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"TSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Random stream position: all training randomness is derived from
/// `(seed, epoch)`, so the next epoch index fully determines the continuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epoch: u64,
    pub step: u64,
    /// Best validation Dice per region (ET, TC, WT).
    pub best_val_dice: Option<[f64; 3]>,
    pub best_epoch: Option<u64>,
    pub validations_since_improvement: u64,
    pub rng: RngState,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub progress: Option<TrainProgress>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ArchitectureSpec,
    trained_steps: u64,
    tensors: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
    progress: Option<TrainProgress>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::InvalidCheckpoint(format!("{}: {}", path.display(), reason.into()))
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Self { model, optimizer: None, progress: None }
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.model.params;
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.model.spec().clone(),
            trained_steps: self.model.trained_steps,
            tensors: p.names.iter().zip(&p.shapes).map(|(n, s)| TensorEntry { name: n.clone(), shape: s.clone() }).collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            progress: self.progress.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = temp_path(path);
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_u64::<LittleEndian>(json.len() as u64)?;
            w.write_all(&json)?;
            let mut blobs: Vec<&Vec<f32>> = p.values.iter().collect();
            if let Some(o) = &self.optimizer {
                blobs.extend(o.m.iter());
                blobs.extend(o.v.iter());
            }
            for blob in blobs {
                for &x in blob {
                    w.write_f32::<LittleEndian>(x)?;
                }
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = std::io::BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad(path, "truncated"))?;
        if &magic != MAGIC {
            return Err(bad(path, "not a checkpoint (bad magic)"));
        }
        let len = r.read_u64::<LittleEndian>().map_err(|_| bad(path, "truncated"))? as usize;
        if len > 64 << 20 {
            return Err(bad(path, "implausible header length"));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(path, e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(path, format!("unsupported format version {}", header.format_version)));
        }
        let mut read_blob = |n: usize| -> Result<Vec<f32>> {
            let mut v = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut v).map_err(|_| bad(path, "truncated tensor data"))?;
            Ok(v)
        };
        let sizes: Vec<usize> = header.tensors.iter().map(|t| t.shape.iter().product()).collect();
        let values = sizes.iter().map(|&n| read_blob(n)).collect::<Result<Vec<_>>>()?;
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let m = sizes.iter().map(|&n| read_blob(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| read_blob(n)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(path, "trailing bytes"));
        }
        let params = ParamSet {
            names: header.tensors.iter().map(|t| t.name.clone()).collect(),
            shapes: header.tensors.into_iter().map(|t| t.shape).collect(),
            values,
        };
        let mut model = Model::from_params(&header.spec, params)?;
        model.trained_steps = header.trained_steps;
        Ok(Self { model, optimizer, progress: header.progress })
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec_for_variant;

    fn small() -> Model {
        let spec = ArchitectureSpec { base_channels: 2, depth: 2, ..spec_for_variant("unet3d_attention").unwrap() };
        Model::build(&spec, 11).unwrap()
    }

    #[test]
    fn round_trip_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let mut model = small();
        model.trained_steps = 9;
        let mut opt = AdamState::new(&model.params);
        opt.step = 9;
        opt.m[0][0] = 0.25;
        opt.v[1][0] = 3.5;
        let progress = TrainProgress {
            epoch: 4,
            step: 9,
            best_val_dice: Some([0.5, 0.6, 0.7]),
            best_epoch: Some(2),
            validations_since_improvement: 1,
            rng: RngState { seed: 3, next_epoch: 5 },
        };
        let ck = Checkpoint { model, optimizer: Some(opt.clone()), progress: Some(progress.clone()) };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model.params, ck.model.params);
        assert_eq!(back.model.spec(), ck.model.spec());
        assert_eq!(back.model.trained_steps, 9);
        assert_eq!(back.optimizer, Some(opt));
        assert_eq!(back.progress, Some(progress));
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn rejects_garbage_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        assert!(matches!(Checkpoint::load(&path), Err(Error::MissingFile(_))));
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::InvalidCheckpoint(_))));
        Checkpoint::from_model(small()).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::InvalidCheckpoint(_))));
    }
}
