//! `STHP` checkpoint files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic    4 bytes  "STHP"
//! version  u32      1
//! per tensor, until the checksum:
//!   name length  u32
//!   name         UTF-8 bytes
//!   rank         u32
//!   dims         u32 × rank
//!   data         f32 × product(dims)
//! crc32    u32      of every preceding byte
//! ```
//!
//! The file holds parameters only. The model configuration travels in a
//! separate key-value file; [`Model::from_params`] checks the two agree.

use std::path::Path;

use super::Model;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"STHP";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * params.numel() + 64 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        t.data()
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet<f32>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an STHP checkpoint file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.usize()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut params = ParamSet::new();
    while r.pos < body.len() {
        let len = r.usize()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if params.contains(&name) {
            return Err(Error::Format(format!("tensor `{name}` appears twice")));
        }
        let rank = r.usize()?;
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= body.len() / 4)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` has dims {dims:?}")))?;
        let data = r
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Tensor::new(dims, data)?);
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamSet<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet<f32>> {
    let path = path.as_ref();
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

impl<T: Scalar> Model<T> {
    /// Adopts loaded parameters for `config`. Fails on the first tensor that
    /// is missing or shaped differently from what the configuration builds,
    /// and on tensors the configuration does not know.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = Model::<T>::new(config)?;
        for (name, want) in reference.params.iter() {
            match params.get(name) {
                None => {
                    return Err(Error::dim(format!(
                        "checkpoint lacks tensor `{name}` of shape {:?}",
                        want.shape()
                    )))
                }
                Some(t) if t.shape() != want.shape() => {
                    return Err(Error::dim(format!(
                        "checkpoint tensor `{name}` has shape {:?}, configuration expects {:?}",
                        t.shape(),
                        want.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let extra: Vec<&str> = params
            .names()
            .filter(|n| !reference.params.contains(n))
            .collect();
        if !extra.is_empty() {
            return Err(Error::dim(format!(
                "checkpoint holds tensors the configuration does not use: {}",
                extra.join(", ")
            )));
        }
        let model = Model {
            config: reference.config,
            params,
        };
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            img_h: 16,
            img_w: 16,
            conv_channels: vec![4, 8],
            embed_width: 16,
            context_width: 16,
            heads: 2,
            ff_width: 16,
            head_hidden: 16,
            unet_widths: vec![8, 8, 8, 8],
            ..ModelConfig::for_mode(crate::config::SequenceMode::Temporal)
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = Model::<f32>::new(small()).unwrap();
        let bytes = to_bytes(&m.params).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        for (n, t) in m.params.iter() {
            assert_eq!(back.get(n).unwrap().data(), t.data());
        }
        let re = Model::from_params(small(), back).unwrap();
        assert_eq!(re.stage(), 0);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sthp");
        let m = Model::<f32>::new(small()).unwrap();
        save_checkpoint(&path, &m.params).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), to_bytes(&m.params).unwrap());
        assert!(matches!(
            load_checkpoint(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let m = Model::<f32>::new(small()).unwrap();
        let mut bytes = to_bytes(&m.params).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(from_bytes(b"STHD00000000"), Err(Error::Format(_))));
    }

    #[test]
    fn mismatch_names_the_tensor() {
        let m = Model::<f32>::new(small()).unwrap();
        let other = ModelConfig {
            head_hidden: 24,
            ..small()
        };
        let err = Model::from_params(other, m.params.clone()).unwrap_err();
        assert!(err.to_string().contains("head.fc1.weight"), "{err}");

        let mut missing = m.params.clone();
        missing.remove_prefix("lift.");
        let err = Model::from_params(small(), missing).unwrap_err();
        assert!(err.to_string().contains("lift."), "{err}");

        let mut extra = m.params.clone();
        extra.insert("stray", Tensor::zeros([2]));
        let err = Model::from_params(small(), extra).unwrap_err();
        assert!(err.to_string().contains("stray"), "{err}");
    }
}
