//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"JALNCKPT"  u32 version
//! u32 len, config JSON
//! u32 count, tensor records
//! u8 has_state [u64 step, u32 len, meta JSON, u32 count, tensor records]
//!
//! tensor record: u32 len, name, u32 ndim, u64 dims[ndim], u8 dtype (0 = f32, 1 = f64), raw values
//! ```

use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"JALNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> NamedTensor {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data.iter().map(|v| v.f64() as f32).collect()),
            DType::F64 => TensorData::F64(t.data.iter().map(|v| v.f64()).collect()),
        };
        NamedTensor { name: name.to_string(), shape: vec![t.rows, t.cols], data }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::Checkpoint(format!("{}: expected 2 dims, got {:?}", self.name, self.shape)));
        };
        let data: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        };
        Tensor::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(format!("{}: {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// Free-form JSON (optimizer kind, hyperparameters, epoch counters).
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<NamedTensor>,
    pub state: Option<TrainState>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &NamedTensor) {
    put_str(out, &t.name);
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => {
            out.push(0);
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        TensorData::F64(v) => {
            out.push(1);
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        self.params.iter().for_each(|t| put_tensor(&mut out, t));
        match &self.state {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.step.to_le_bytes());
                put_str(&mut out, &s.meta);
                out.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
                s.tensors.iter().for_each(|t| put_tensor(&mut out, t));
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = r.string()?;
        let n = r.u32()? as usize;
        let params = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let state = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let meta = r.string()?;
                let n = r.u32()? as usize;
                let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                Some(TrainState { step, meta, tensors })
            }
            b => return Err(Error::Checkpoint(format!("bad state flag {b}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint { config, params, state })
    }

    pub fn param(&self, name: &str) -> Option<&NamedTensor> {
        self.params.iter().find(|t| t.name == name)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn tensor(&mut self) -> Result<NamedTensor> {
        let name = self.string()?;
        let nd = self.u32()? as usize;
        let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = match self.take(1)?[0] {
            0 => TensorData::F32(
                self.take(count * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            1 => TensorData::F64(
                self.take(count * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            d => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {d}"))),
        };
        Ok(NamedTensor { name, shape, data })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    // write-then-rename so an interrupted save never clobbers the last good file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.encode())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 0..40), step in any::<u64>()) {
            let n = vals.len();
            let ck = Checkpoint {
                config: "{\"a\":1}".into(),
                params: vec![
                    NamedTensor { name: "w".into(), shape: vec![1, n], data: TensorData::F32(vals.clone()) },
                    NamedTensor { name: "b".into(), shape: vec![n, 1], data: TensorData::F64(vals.iter().map(|&v| v as f64).collect()) },
                ],
                state: Some(TrainState { step, meta: "{}".into(), tensors: vec![
                    NamedTensor { name: "m/w".into(), shape: vec![1, n], data: TensorData::F32(vals) },
                ]}),
            };
            prop_assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
        }
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint { config: "{}".into(), params: vec![], state: None };
        let mut b = ck.encode();
        assert!(Checkpoint::decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(Checkpoint::decode(&b).is_err());
    }
}
