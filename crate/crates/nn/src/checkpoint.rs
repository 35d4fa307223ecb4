//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "DXLTCKPT"
//! version    u32      1
//! flags      u32      bit 0: optimizer state present (resume checkpoint)
//! meta count u32, then per entry: u32 key len, key, u32 value len, value
//! name count u32, then per tensor:
//!   u32 name len, name, u8 dtype (1 = f64), u32 rank, rank x u64 dims,
//!   values; with bit 0 set also grad, m, v values and u64 step count
//! ```
//!
//! Metadata is stored before the tensors so it can be read without loading
//! any weights.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::{ParamEntry, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DXLTCKPT";
pub const VERSION: u32 = 1;
const FLAG_OPTIMIZER: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore,
    /// Whether gradients, Adam moments and step counts are serialized.
    pub with_optimizer: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSummary {
    pub version: u32,
    pub with_optimizer: bool,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>)>,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_values<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(NnError::Checkpoint(format!("string length {n} too large")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| NnError::Checkpoint("string is not utf-8".into()))
}

fn get_values<R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut b = vec![0u8; n * 8];
    r.read_exact(&mut b)?;
    let data = b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            metadata: BTreeMap::new(),
            params,
            with_optimizer: false,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u32(w, if self.with_optimizer { FLAG_OPTIMIZER } else { 0 })?;
        put_u32(w, self.metadata.len() as u32)?;
        for (k, v) in &self.metadata {
            put_str(w, k)?;
            put_str(w, v)?;
        }
        put_u32(w, self.params.len() as u32)?;
        for (name, e) in self.params.iter() {
            put_str(w, name)?;
            w.write_all(&[DTYPE_F64])?;
            put_u32(w, e.value.shape().len() as u32)?;
            for d in e.value.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            put_values(w, &e.value)?;
            if self.with_optimizer {
                put_values(w, &e.grad)?;
                put_values(w, &e.m)?;
                put_values(w, &e.v)?;
                w.write_all(&e.step.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn read_header<R: Read>(r: &mut R) -> Result<(u32, bool, BTreeMap<String, String>)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let flags = get_u32(r)?;
        let n = get_u32(r)?;
        let mut metadata = BTreeMap::new();
        for _ in 0..n {
            let k = get_str(r)?;
            let v = get_str(r)?;
            metadata.insert(k, v);
        }
        Ok((version, flags & FLAG_OPTIMIZER != 0, metadata))
    }

    fn read_shape<R: Read>(r: &mut R) -> Result<(String, Vec<usize>)> {
        let name = get_str(r)?;
        let dtype = get_u8(r)?;
        if dtype != DTYPE_F64 {
            return Err(NnError::Checkpoint(format!("`{name}`: unknown dtype tag {dtype}")));
        }
        let rank = get_u32(r)? as usize;
        if rank > 8 {
            return Err(NnError::Checkpoint(format!("`{name}`: rank {rank}")));
        }
        let shape = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        Ok((name, shape))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (_, with_optimizer, metadata) = Self::read_header(r)?;
        let count = get_u32(r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let (name, shape) = Self::read_shape(r)?;
            let value = get_values(r, &shape)?;
            if with_optimizer {
                let grad = get_values(r, &shape)?;
                let m = get_values(r, &shape)?;
                let v = get_values(r, &shape)?;
                let step = get_u64(r)?;
                params.insert_entry(&name, ParamEntry { value, grad, m, v, step })?;
            } else {
                params.insert(&name, value)?;
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            metadata,
            params,
            with_optimizer,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Reads the header, metadata and tensor shapes, seeking over values.
    pub fn summarize(path: impl AsRef<Path>) -> Result<CheckpointSummary> {
        let mut r = BufReader::new(File::open(path)?);
        let (version, with_optimizer, metadata) = Self::read_header(&mut r)?;
        let count = get_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let (name, shape) = Self::read_shape(&mut r)?;
            let n: usize = shape.iter().product();
            let skip = if with_optimizer { 4 * n * 8 + 8 } else { n * 8 };
            r.seek(SeekFrom::Current(skip as i64))?;
            tensors.push((name, shape));
        }
        Ok(CheckpointSummary {
            version,
            with_optimizer,
            metadata,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::AdamConfig;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(&[2, 3], vec![0.1, -0.2, 1e-300, f64::MIN_POSITIVE, 3.0, -0.0]).unwrap())
            .unwrap();
        s.insert("b", Tensor::new(&[1], vec![std::f64::consts::PI]).unwrap()).unwrap();
        s
    }

    #[test]
    fn inference_round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new(sample_store());
        ck.metadata.insert("kind".into(), "test".into());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn resume_round_trip_keeps_moments() {
        let mut s = sample_store();
        s.accumulate_grad("b", &Tensor::scalar(0.5)).unwrap();
        s.adam_step(&AdamConfig::default());
        s.accumulate_grad("b", &Tensor::scalar(0.25)).unwrap();
        let ck = Checkpoint {
            metadata: BTreeMap::new(),
            params: s,
            with_optimizer: true,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.entry("b").unwrap().step, 1);
    }

    #[test]
    fn inference_checkpoint_drops_optimizer_state() {
        let mut s = sample_store();
        s.accumulate_grad("b", &Tensor::scalar(0.5)).unwrap();
        let ck = Checkpoint::new(s);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params.grad("b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn summary_reads_shapes_without_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut ck = Checkpoint::new(sample_store());
        ck.with_optimizer = true;
        ck.metadata.insert("N".into(), "15".into());
        ck.save(&path).unwrap();
        let s = Checkpoint::summarize(&path).unwrap();
        assert_eq!(s.metadata["N"], "15");
        assert_eq!(s.tensors, vec![("a.w".to_string(), vec![2, 3]), ("b".to_string(), vec![1])]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = Checkpoint::new(sample_store()).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
