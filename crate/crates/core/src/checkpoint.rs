//! Binary tensor container.
//!
//! ```text
//! "SGSR" | version u32 | tag length u32 | tag UTF-8 | count u32 |
//!   per entry: name length u32 | name UTF-8 | dtype u8 | ndim u32 | dims u32[] | payload
//! | CRC32 of everything before it, u32
//! ```
//!
//! All integers and payloads are little-endian. dtype 0 is `f32`; dtype 1 is
//! `u64` and only carries bookkeeping scalars in resume files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Role};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGSR";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    U64(Vec<u64>),
}

/// Tagged, ordered list of named entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub tag: String,
    pub entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            entries: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), Entry::F32(t)));
    }

    pub fn push_u64(&mut self, name: impl Into<String>, v: Vec<u64>) {
        self.entries.push((name.into(), Entry::U64(v)));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.tag);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            put_str(&mut out, name);
            match e {
                Entry::F32(t) => {
                    out.push(DTYPE_F32);
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U64(v) => {
                    out.push(DTYPE_U64);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                    for &x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Malformed("not an SGSR container".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::CrcMismatch { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Malformed(format!("unsupported container version {version}")));
        }
        let tag = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("entry {name}: size overflow")))?;
            let entry = match dtype {
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("size overflow".into()))?)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Entry::F32(Tensor::new(&dims, data)?)
                }
                DTYPE_U64 => {
                    if ndim != 1 {
                        return Err(Error::Malformed(format!("entry {name}: u64 entries are 1-D")));
                    }
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Malformed("size overflow".into()))?)?;
                    Entry::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                d => return Err(Error::Malformed(format!("entry {name}: unknown dtype {d}"))),
            };
            entries.push((name, entry));
        }
        if r.pos != body.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { tag, entries })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("sgsr.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Malformed(m) => Error::Malformed(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Malformed("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Malformed("name is not UTF-8".into()))
    }
}

/// Container for one role's parameters, tagged with the role name.
pub fn store_to_container(store: &ParamStore<f32>) -> Container {
    let mut c = Container::new(store.role().as_str());
    for (name, t) in store.iter() {
        c.push_tensor(name.clone(), t.clone());
    }
    c
}

pub fn store_from_container(c: &Container, role: Role) -> Result<ParamStore<f32>> {
    if c.tag != role.as_str() {
        return Err(Error::Malformed(format!("checkpoint holds role {}, expected {role}", c.tag)));
    }
    let mut store = ParamStore::new(role);
    for (name, e) in &c.entries {
        match e {
            Entry::F32(t) => store.insert(name.clone(), t.clone())?,
            Entry::U64(_) => return Err(Error::Malformed(format!("parameter {name} is not f32"))),
        }
    }
    Ok(store)
}

pub fn save_store(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    store_to_container(store).save(path)
}

pub fn load_store(path: &Path, role: Role) -> Result<ParamStore<f32>> {
    store_from_container(&Container::load(path)?, role)
}

/// `<stage>.<role>.sgsr`
pub fn checkpoint_name(stage: &str, role: Role) -> String {
    format!("{stage}.{role}.sgsr")
}
