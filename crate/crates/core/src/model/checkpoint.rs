//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "RLCKPT\0\0"
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! payload      f64 values: every parameter tensor in header order, then the
//!              optimizer first moments and second moments if present
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RLCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model_config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Adam step count when moment buffers follow the parameters.
    pub optimizer_step: Option<u64>,
}

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like(params: &Params) -> Self {
        let z: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub params: Params,
    pub optimizer: Option<OptimizerState>,
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: VERSION,
            model_config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            tensors: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20 + 8 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            write_tensor(&mut out, t);
        }
        if let Some(opt) = &self.optimizer {
            for t in opt.m.iter().chain(&opt.v) {
                write_tensor(&mut out, t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        let mut payload = body[hlen..].chunks_exact(8);
        if payload.len() * 8 != body.len() - hlen {
            return Err(bad("payload not a whole number of f64 values"));
        }
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let c = payload.next().ok_or_else(|| bad("truncated payload"))?;
                data.push(f64::from_le_bytes(c.try_into().expect("8 bytes")));
            }
            Ok(Tensor::from_vec(shape, data))
        };
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for e in &header.tensors {
            names.push(e.name.clone());
            tensors.push(take(&e.shape)?);
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let m = header
                    .tensors
                    .iter()
                    .map(|e| take(&e.shape))
                    .collect::<Result<Vec<_>>>()?;
                let v = header
                    .tensors
                    .iter()
                    .map(|e| take(&e.shape))
                    .collect::<Result<Vec<_>>>()?;
                Some(OptimizerState { step, m, v })
            }
            None => None,
        };
        if payload.next().is_some() {
            return Err(bad("trailing payload"));
        }
        let params = Params::from_parts(names, tensors);
        if !params.matches(&header.model_config) {
            return Err(bad("tensors do not match the stored model config"));
        }
        Ok(Self {
            config: header.model_config,
            seed: header.seed,
            step: header.step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let config = ModelConfig::tiny();
        let mut params = Params::init(&config, 3);
        params.tensors_mut()[0].data_mut()[0] = f64::from_bits(0x3ff0_0000_0000_0001);
        let mut opt = OptimizerState::zeros_like(&params);
        opt.step = 9;
        opt.v[1].data_mut()[0] = 1e-300;
        let ck = Checkpoint {
            config,
            seed: 42,
            step: 17,
            params,
            optimizer: Some(opt),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let config = ModelConfig::tiny();
        let ck = Checkpoint {
            params: Params::init(&config, 0),
            config,
            seed: 0,
            step: 0,
            optimizer: None,
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
