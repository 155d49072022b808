//! Checkpoint container: a flat named-tensor binary with a trailing
//! length and CRC so truncated or corrupted files are rejected whole.
//!
//! Layout, all integers little-endian:
//!   magic "PPRCKPT1"
//!   u32 format version
//!   u32 entry count
//!   per entry: u32 name length, name bytes,
//!              u8 dtype (0 = f64, 1 = raw bytes), u8 rank,
//!              u64 dims[rank], payload
//!   u64 byte length of everything before this field
//!   u32 CRC-32 (IEEE) of everything before this field

use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PPRCKPT1";
pub const VERSION: u32 = 1;

/// One named payload: an f64 tensor or an opaque byte blob (used for
/// environment RNG snapshots).
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    Bytes(Vec<u8>),
}

impl Entry {
    pub fn tensor(t: &Tensor) -> Entry {
        Entry::F64 {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Entry {
        Entry::F64 {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// A u64 smuggled through an f64 payload bit-for-bit.
    pub fn u64_bits(v: u64) -> Entry {
        Entry::scalar(f64::from_bits(v))
    }

    pub fn vec(data: Vec<f64>) -> Entry {
        Entry::F64 {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn as_tensor(&self) -> Result<Tensor> {
        match self {
            Entry::F64 { shape, data } => Ok(Tensor::from_vec(shape.clone(), data.clone())),
            Entry::Bytes(_) => Err(Error::Checkpoint("entry is raw bytes, not a tensor".into())),
        }
    }

    pub fn as_scalar(&self) -> Result<f64> {
        match self {
            Entry::F64 { data, .. } if data.len() == 1 => Ok(data[0]),
            _ => Err(Error::Checkpoint("entry is not a scalar".into())),
        }
    }

    pub fn as_u64_bits(&self) -> Result<u64> {
        Ok(self.as_scalar()?.to_bits())
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match self {
            Entry::Bytes(b) => Ok(b),
            Entry::F64 { .. } => Err(Error::Checkpoint("entry is a tensor, not bytes".into())),
        }
    }
}

/// Ordered name → entry map; order is preserved on disk so identical
/// content writes identical bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointData {
    entries: Vec<(String, Entry)>,
}

impl CheckpointData {
    pub fn new() -> CheckpointData {
        CheckpointData::default()
    }

    pub fn insert(&mut self, name: &str, entry: Entry) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
        self.entries.push((name.to_string(), entry));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn encode(data: &CheckpointData) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(data.len())
        .map_err(|_| Error::Checkpoint("too many entries".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, entry) in data.iter() {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::Checkpoint("entry name too long".into()))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        match entry {
            Entry::F64 { shape, data } => {
                let expect: usize = shape.iter().product();
                if expect != data.len() {
                    return Err(Error::Checkpoint(format!(
                        "entry `{name}`: shape {:?} does not cover {} values",
                        shape,
                        data.len()
                    )));
                }
                buf.push(0u8);
                buf.push(u8::try_from(shape.len())
                    .map_err(|_| Error::Checkpoint("rank too large".into()))?);
                for d in shape {
                    buf.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                for v in data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Entry::Bytes(bytes) => {
                buf.push(1u8);
                buf.push(1u8);
                buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                buf.extend_from_slice(bytes);
            }
        }
    }
    let body_len = buf.len() as u64;
    buf.extend_from_slice(&body_len.to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    let bytes = encode(data)?;
    // Write-then-rename so an interrupted save never leaves a torn
    // file at the final path.
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "file ends inside {what} (offset {})",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    // Trailer first: length and CRC guard everything else.
    if bytes.len() < MAGIC.len() + 4 + 4 + 8 + 4 {
        return Err(Error::Checkpoint(
            "file too short for header and checksum trailer".into(),
        ));
    }
    let crc_stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc_actual = crc32fast::hash(&bytes[..bytes.len() - 4]);
    if crc_stored != crc_actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: file says {crc_stored:#010x}, contents hash to {crc_actual:#010x} (truncated or corrupted)"
        )));
    }
    let body_len = u64::from_le_bytes(bytes[bytes.len() - 12..bytes.len() - 4].try_into().unwrap());
    if body_len != (bytes.len() - 12) as u64 {
        return Err(Error::Checkpoint(format!(
            "length field says {body_len} bytes, file body has {}",
            bytes.len() - 12
        )));
    }

    let mut c = Cursor {
        buf: &bytes[..bytes.len() - 12],
        pos: 0,
    };
    let magic = c.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let count = c.u32("entry count")?;
    let mut data = CheckpointData::new();
    for i in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name_bytes = c.take(name_len, "entry name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let dtype = c.u8("dtype")?;
        let rank = c.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64("dimension")? as usize);
        }
        let entry = match dtype {
            0 => {
                let n: usize = dims.iter().product();
                let payload = c.take(n * 8, &format!("payload of `{name}`"))?;
                let values = payload
                    .chunks_exact(8)
                    .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
                    .collect();
                Entry::F64 {
                    shape: dims,
                    data: values,
                }
            }
            1 => {
                if rank != 1 {
                    return Err(Error::Checkpoint(format!(
                        "byte entry `{name}` must be rank 1"
                    )));
                }
                Entry::Bytes(c.take(dims[0], &format!("payload of `{name}`"))?.to_vec())
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "entry `{name}`: unknown dtype code {other}"
                )))
            }
        };
        data.insert(&name, entry)?;
    }
    if c.pos != c.buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last entry",
            c.buf.len() - c.pos
        )));
    }
    Ok(data)
}
