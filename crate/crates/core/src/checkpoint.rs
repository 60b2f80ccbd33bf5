//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u8` bytes-per-scalar, a
//! length-prefixed JSON header (model config, step, phase, stream position,
//! optimizer hyperparameters, parameter names and shapes), the parameter
//! values in little-endian order, then the optimizer moments as `f64`.
//! Files are written to a temporary name and renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Phase;
use crate::model::{ModelConfig, ModelState};
use crate::tensor::{Precision, Scalar, Tensor};
use crate::trainer::AdamW;

const MAGIC: &[u8; 8] = b"TSTCKPT\0";
const VERSION: u32 = 1;

/// Where the data stream stood when the checkpoint was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StreamPosition {
    pub cursor: usize,
    pub epoch: usize,
    pub tokens_consumed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelState<T>,
    /// Number of completed steps.
    pub step: usize,
    pub phase: Phase,
    pub stream: StreamPosition,
    pub optimizer: Option<AdamW>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    decay_mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: usize,
    phase: Phase,
    stream: StreamPosition,
    params: Vec<(String, Vec<usize>)>,
    optimizer: Option<OptimizerHeader>,
}

/// Precision recorded in a checkpoint file.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path)?;
    let (_, p) = preamble(&bytes)?;
    Ok(p)
}

fn preamble(bytes: &[u8]) -> Result<(usize, Precision)> {
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let p = match bytes[12] {
        4 => Precision::Single,
        8 => Precision::Double,
        w => return Err(Error::Data(format!("bad scalar width {w}"))),
    };
    Ok((13, p))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config.clone(),
            step: self.step,
            phase: self.phase,
            stream: self.stream,
            params: self
                .model
                .names
                .iter()
                .zip(&self.model.params)
                .map(|(n, t)| (n.clone(), t.shape.clone()))
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                t: o.t,
                decay_mask: o.decay_mask.clone(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::PRECISION.bytes() as u8);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.model.params {
            for &x in &t.data {
                x.write_le(&mut out);
            }
        }
        if let Some(o) = &self.optimizer {
            for x in o.m.iter().chain(&o.v).flatten() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut pos, precision) = preamble(bytes)?;
        if precision != T::PRECISION {
            return Err(Error::Data(format!(
                "checkpoint holds {precision:?} precision, expected {:?}",
                T::PRECISION
            )));
        }
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(&mut pos, len)?)?;
        let w = T::PRECISION.bytes();
        let mut named = Vec::with_capacity(header.params.len());
        for (name, shape) in header.params {
            let n: usize = shape.iter().product();
            let raw = take(&mut pos, n * w)?;
            let data = raw.chunks_exact(w).map(T::read_le).collect();
            named.push((name, Tensor::new(shape, data)?));
        }
        let model = ModelState::from_named(header.model, named)
            .map_err(|e| Error::Data(format!("checkpoint parameters: {e}")))?;
        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
                    Ok(take(&mut pos, n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect())
                };
                let sizes: Vec<usize> = model.params.iter().map(Tensor::numel).collect();
                let m = sizes.iter().map(|&n| read_f64s(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| read_f64s(n)).collect::<Result<Vec<_>>>()?;
                if h.decay_mask.len() != sizes.len() {
                    return Err(Error::Data("optimizer mask does not match parameters".into()));
                }
                Some(AdamW {
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                    weight_decay: h.weight_decay,
                    t: h.t,
                    m,
                    v,
                    decay_mask: h.decay_mask,
                })
            }
        };
        if pos != bytes.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - pos
            )));
        }
        Ok(Checkpoint {
            model,
            step: header.step,
            phase: header.phase,
            stream: header.stream,
            optimizer,
        })
    }

    /// Write atomically: to `<path>.tmp`, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample<T: Scalar>() -> Checkpoint<T> {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            vocab: 5,
            max_len: 4,
            ..ModelConfig::default()
        };
        let model = ModelState::<T>::init(&cfg).unwrap();
        let mut opt = AdamW::new(&model.params, 0.9, 0.95, 1e-8, 0.1);
        opt.t = 7;
        opt.m[0][1] = 0.1 + 0.2;
        opt.v[2][0] = 1e-300;
        Checkpoint {
            model,
            step: 7,
            phase: Phase::Superposition,
            stream: StreamPosition {
                cursor: 10,
                epoch: 1,
                tokens_consumed: 99,
            },
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let c = sample::<f64>();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::<f64>::load(&p).unwrap(), c);
        let c32 = sample::<f32>();
        c32.save(&p).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&p).unwrap(), c32);
        assert_eq!(checkpoint_precision(&p).unwrap(), Precision::Single);
    }

    #[test]
    fn rejects_wrong_precision_and_truncation() {
        let bytes = sample::<f32>().to_bytes().unwrap();
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::Data(_))));
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Data(_))
        ));
        assert!(matches!(Checkpoint::<f32>::from_bytes(b"garbage"), Err(Error::Data(_))));
    }
}
