//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "IMPX" version subnet_count
//! repeat subnet_count:
//!     name_len name_bytes param_count
//!     repeat param_count:
//!         rank dim_0 .. dim_{rank-1} f32_le * product(dims)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMPX";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SubnetWeights {
    pub name: String,
    pub params: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub subnets: Vec<SubnetWeights>,
}

impl Checkpoint {
    pub fn subnet(&self, name: &str) -> Option<&SubnetWeights> {
        self.subnets.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.subnets.len() as u32).to_le_bytes());
        for s in &self.subnets {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.params.len() as u32).to_le_bytes());
            for p in &s.params {
                out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
                for &d in p.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in p.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(4, &format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut subnets = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.fail(at as u64, "subnet name is not utf-8"))?;
            let n = r.u32()?;
            let mut params = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let rank = r.u32()? as usize;
                let shape = (0..rank)
                    .map(|_| r.u32().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let len: usize = shape.iter().product();
                let at = r.pos;
                let raw = r.take(len * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                params
                    .push(Tensor::new(shape, data).map_err(|_| r.fail(at as u64, "empty tensor"))?);
            }
            subnets.push(SubnetWeights { name, params });
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos as u64, "trailing bytes"));
        }
        Ok(Self { subnets })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl Reader<'_> {
    pub fn fail(&self, offset: u64, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            reason: reason.to_string(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(self.pos as u64, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem");
        let ck = Checkpoint {
            subnets: vec![SubnetWeights {
                name: "M".into(),
                params: vec![Tensor::new(vec![2], vec![1.5, -0.0]).unwrap()],
            }],
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes, p).unwrap(), ck);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p),
            Err(Error::Format { .. })
        ));
    }
}
