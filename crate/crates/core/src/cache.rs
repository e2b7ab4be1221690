//! Per-timestep, per-site store for attention features recorded during
//! inversion and consumed during fused forward sampling.
//!
//! Content entries carry query, key and value arrays; style entries carry
//! key and value only. Arrays are held as `f32` regardless of the backend's
//! compute precision so persistence round-trips bit-exactly.
//!
//! File format (little-endian): magic `MSFC`, u32 version = 1, u32 entry
//! count; per entry: u32 timestep, u32 site-id length + UTF-8 site id,
//! u8 role (0 = content, 1 = style), u8 has_q, then for each present array
//! (q?, k, v): u32 heads, u32 tokens, u32 head-dim, then
//! heads * tokens * head-dim f32 values in row-major order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::denoiser::SiteId;
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"MSFC";
const FORMAT_VERSION: u32 = 1;
/// Cap on elements of a single deserialized array; rejects corrupt headers
/// before they turn into huge allocations.
const MAX_ARRAY_ELEMS: u64 = 1 << 28;

/// Which trajectory an entry was recorded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Content,
    Style,
}

impl Role {
    fn as_byte(self) -> u8 {
        match self {
            Role::Content => 0,
            Role::Style => 1,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Content => write!(f, "content"),
            Role::Style => write!(f, "style"),
        }
    }
}

/// Identifies one recorded entry: a planned timestep, a self-attention hook
/// site, and the trajectory role.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub timestep: u32,
    pub site: SiteId,
    pub role: Role,
}

impl CacheKey {
    pub fn new(timestep: u32, site: impl Into<SiteId>, role: Role) -> Self {
        CacheKey {
            timestep,
            site: site.into(),
            role,
        }
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} entry at timestep {} site '{}'",
            self.role, self.timestep, self.site
        )
    }
}

/// Query/key/value arrays captured at one site and timestep, shaped
/// (heads, tokens, head-dim). The query is absent for style entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedFeatures {
    q: Option<Array3<f32>>,
    k: Array3<f32>,
    v: Array3<f32>,
}

impl CachedFeatures {
    pub fn new(q: Option<Array3<f32>>, k: Array3<f32>, v: Array3<f32>) -> Result<Self> {
        let (kh, kt, kd) = k.dim();
        let (vh, vt, vd) = v.dim();
        if (kh, kt, kd) != (vh, vt, vd) {
            return Err(Error::Shape(format!(
                "key shape {:?} differs from value shape {:?}",
                k.dim(),
                v.dim()
            )));
        }
        if let Some(q) = &q {
            let (qh, _, qd) = q.dim();
            if qh != kh || qd != kd {
                return Err(Error::Shape(format!(
                    "query shape {:?} incompatible with key shape {:?}",
                    q.dim(),
                    k.dim()
                )));
            }
        }
        Ok(CachedFeatures { q, k, v })
    }

    pub fn with_query(q: Array3<f32>, k: Array3<f32>, v: Array3<f32>) -> Result<Self> {
        Self::new(Some(q), k, v)
    }

    pub fn keys_values(k: Array3<f32>, v: Array3<f32>) -> Result<Self> {
        Self::new(None, k, v)
    }

    pub fn query(&self) -> Option<&Array3<f32>> {
        self.q.as_ref()
    }

    pub fn keys(&self) -> &Array3<f32> {
        &self.k
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.v
    }

    /// Copy with the query dropped (used when recording style entries).
    pub fn without_query(&self) -> Self {
        CachedFeatures {
            q: None,
            k: self.k.clone(),
            v: self.v.clone(),
        }
    }

    pub fn query_f64(&self) -> Option<Array3<f64>> {
        self.q.as_ref().map(|a| a.mapv(f64::from))
    }

    pub fn keys_f64(&self) -> Array3<f64> {
        self.k.mapv(f64::from)
    }

    pub fn values_f64(&self) -> Array3<f64> {
        self.v.mapv(f64::from)
    }
}

/// In-memory feature store. Written by one inversion pass at a time; the
/// fused forward pass only reads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    entries: BTreeMap<CacheKey, CachedFeatures>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts one entry. Fails on duplicate keys and on entries violating
    /// the role schema (content must carry a query, style must not).
    pub fn record(&mut self, key: CacheKey, feats: CachedFeatures) -> Result<()> {
        match (key.role, feats.query().is_some()) {
            (Role::Content, false) => {
                return Err(Error::Validation(format!(
                    "{key} must carry a query array"
                )))
            }
            (Role::Style, true) => {
                return Err(Error::Validation(format!(
                    "{key} must not carry a query array"
                )))
            }
            _ => {}
        }
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateEntry(key.to_string()));
        }
        self.entries.insert(key, feats);
        Ok(())
    }

    pub fn lookup(&self, key: &CacheKey) -> Result<&CachedFeatures> {
        self.entries.get(key).ok_or_else(|| {
            Error::CacheMiss(format!(
                "no {} features for timestep {} at site '{}'",
                key.role, key.timestep, key.site
            ))
        })
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn remove(&mut self, key: &CacheKey) -> Option<CachedFeatures> {
        self.entries.remove(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn role_count(&self, role: Role) -> usize {
        self.entries.keys().filter(|k| k.role == role).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CacheKey, &CachedFeatures)> {
        self.entries.iter()
    }

    /// Serializes the store; entry order is the key order, so identical
    /// stores produce identical bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (key, feats) in &self.entries {
            w.write_all(&key.timestep.to_le_bytes())?;
            let site = key.site.as_str().as_bytes();
            w.write_all(&(site.len() as u32).to_le_bytes())?;
            w.write_all(site)?;
            w.write_all(&[key.role.as_byte()])?;
            w.write_all(&[feats.query().is_some() as u8])?;
            if let Some(q) = feats.query() {
                write_array(&mut w, q)?;
            }
            write_array(&mut w, feats.keys())?;
            write_array(&mut w, feats.values())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = OffsetReader::new(BufReader::new(File::open(path)?));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.read_u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.read_u32()?;
        let mut store = FeatureStore::new();
        for _ in 0..count {
            let timestep = r.read_u32()?;
            let site_len = r.read_u32()? as usize;
            let site_offset = r.offset;
            let mut site_bytes = vec![0u8; site_len];
            r.read_exact(&mut site_bytes)?;
            let site = String::from_utf8(site_bytes).map_err(|_| Error::Format {
                offset: site_offset,
                message: "site id is not valid UTF-8".into(),
            })?;
            let role_offset = r.offset;
            let role = match r.read_u8()? {
                0 => Role::Content,
                1 => Role::Style,
                b => {
                    return Err(Error::Format {
                        offset: role_offset,
                        message: format!("invalid role byte {b}"),
                    })
                }
            };
            let has_q_offset = r.offset;
            let has_q = match r.read_u8()? {
                0 => false,
                1 => true,
                b => {
                    return Err(Error::Format {
                        offset: has_q_offset,
                        message: format!("invalid has_q byte {b}"),
                    })
                }
            };
            let q = if has_q { Some(read_array(&mut r)?) } else { None };
            let k = read_array(&mut r)?;
            let v = read_array(&mut r)?;
            let feats = CachedFeatures::new(q, k, v).map_err(|e| Error::Format {
                offset: r.offset,
                message: e.to_string(),
            })?;
            store.record(CacheKey::new(timestep, site, role), feats)?;
        }
        let mut trailing = [0u8; 1];
        if r.inner.read(&mut trailing)? != 0 {
            return Err(Error::Format {
                offset: r.offset,
                message: "trailing data after final entry".into(),
            });
        }
        Ok(store)
    }
}

fn write_array(w: &mut impl Write, a: &Array3<f32>) -> Result<()> {
    let (h, t, d) = a.dim();
    w.write_all(&(h as u32).to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for &v in a.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(r: &mut OffsetReader<impl Read>) -> Result<Array3<f32>> {
    let header_offset = r.offset;
    let h = r.read_u32()? as usize;
    let t = r.read_u32()? as usize;
    let d = r.read_u32()? as usize;
    let n = h as u64 * t as u64 * d as u64;
    if n > MAX_ARRAY_ELEMS {
        return Err(Error::Format {
            offset: header_offset,
            message: format!("array of {n} elements exceeds limit"),
        });
    }
    let mut data = Vec::with_capacity(n as usize);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Array3::from_shape_vec((h, t, d), data).map_err(|e| Error::Format {
        offset: header_offset,
        message: e.to_string(),
    })
}

/// Reader that tracks the byte offset so format errors can point at the
/// exact position.
struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn new(inner: R) -> Self {
        OffsetReader { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    offset: at,
                    message: "unexpected end of file".into(),
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read_u8(&mut self) -> Result<u8> {
        let mut buf = [0u8; 1];
        self.read_exact(&mut buf)?;
        Ok(buf[0])
    }
}
