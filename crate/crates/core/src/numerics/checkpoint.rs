//! Binary checkpoint format.
//!
//! ```text
//! "LAIR" | version u32 | seed u64 | meta_len u32 | meta (UTF-8 JSON)
//! n_tensors u32 | { name_len u32 | name | ndim u32 | dims u32* | values f32* }*
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{LairError, Result};

pub const MAGIC: &[u8; 4] = b"LAIR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    /// Free-form JSON: model configuration, init metadata, training summary.
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> LairError {
    LairError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, seed: u64, meta: String) -> Self {
        Self {
            version: FORMAT_VERSION,
            seed,
            meta,
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        write_bytes(&mut w, self.meta.as_bytes())?;
        w.write_all(&len_u32(self.tensors.len())?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&len_u32(t.shape().len())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&len_u32(d)?.to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("file too short for header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed).map_err(|_| bad("truncated header"))?;
        let seed = u64::from_le_bytes(seed);
        let meta = String::from_utf8(read_bytes(&mut r)?).map_err(|_| bad("metadata is not UTF-8"))?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(&mut r)?).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let mut raw = vec![0u8; count * 4];
            r.read_exact(&mut raw).map_err(|_| bad(format!("truncated values for `{name}`")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self {
            version,
            seed,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Copies the tensors into `store` (names and shapes must agree).
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        store.load_from(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| bad(format!("length {n} exceeds u32")))
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_all(&len_u32(b.len())?.to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("unexpected end of file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| bad("unexpected end of file"))?;
    Ok(b)
}
