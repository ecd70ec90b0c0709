//! On-disk store of per-sample target attribution maps.
//!
//! Layout, integers little-endian `u32`:
//!
//! ```text
//! "IXAC" version count height width
//! repeat count:
//!     sample_id class f32_le * (height * width)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{write_atomic, Reader};

pub const CACHE_MAGIC: &[u8; 4] = b"IXAC";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub sample_id: u32,
    pub class: u32,
    pub map: Vec<f32>,
}

/// Maps keyed by sample id, all of size `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionCache {
    height: usize,
    width: usize,
    entries: Vec<CacheEntry>,
    index: HashMap<u32, usize>,
}

impl AttributionCache {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, sample_id: u32) -> bool {
        self.index.contains_key(&sample_id)
    }

    pub fn get(&self, sample_id: u32) -> Option<&CacheEntry> {
        self.index.get(&sample_id).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    /// Inserts or replaces the map for `entry.sample_id`.
    pub fn insert(&mut self, entry: CacheEntry) -> Result<()> {
        if entry.map.len() != self.height * self.width {
            return Err(Error::dim(
                "cache insert",
                &[entry.map.len()],
                &[self.height, self.width],
            ));
        }
        match self.index.get(&entry.sample_id) {
            Some(&i) => self.entries[i] = entry,
            None => {
                self.index.insert(entry.sample_id, self.entries.len());
                self.entries.push(entry);
            }
        }
        Ok(())
    }

    /// Serialized with entries sorted by sample id, so the bytes do not
    /// depend on insertion order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut order: Vec<&CacheEntry> = self.entries.iter().collect();
        order.sort_by_key(|e| e.sample_id);
        let mut out = Vec::with_capacity(20 + order.len() * (8 + 4 * self.height * self.width));
        out.extend_from_slice(CACHE_MAGIC);
        for v in [
            CACHE_VERSION,
            order.len() as u32,
            self.height as u32,
            self.width as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for e in order {
            out.extend_from_slice(&e.sample_id.to_le_bytes());
            out.extend_from_slice(&e.class.to_le_bytes());
            for v in &e.map {
                out.extend_from_slice(&v.to_le_bytes());
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
        if r.take(4)? != CACHE_MAGIC {
            return Err(r.fail(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(r.fail(4, &format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let mut cache = Self::new(height, width);
        for _ in 0..count {
            let at = r.pos as u64;
            let sample_id = r.u32()?;
            let class = r.u32()?;
            let map = r
                .take(4 * height * width)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if cache.contains(sample_id) {
                return Err(r.fail(at, &format!("duplicate sample id {sample_id}")));
            }
            cache.insert(CacheEntry {
                sample_id,
                class,
                map,
            })?;
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos as u64, "trailing bytes"));
        }
        Ok(cache)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// The magic is checked before the rest of the file is read.
    pub fn read(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = vec![0u8; 4];
        if f.read_exact(&mut bytes).is_err() || bytes != CACHE_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
