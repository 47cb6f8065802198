//! Tagged little-endian container shared by the dataset and checkpoint
//! formats: magic, u16 version, `(tag, u64 length, payload)` sections and a
//! trailing CRC-32 over everything before it.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (reader supports up to {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("missing section {0:?}")]
    MissingSection(String),
    #[error("malformed section {tag:?}: {reason}")]
    Malformed { tag: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn section(&mut self, tag: &str, payload: &[u8]) {
        let t = tag.as_bytes();
        self.buf.extend_from_slice(&(t.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(t);
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Parsed container: sections in file order.
pub(crate) struct Container<'a> {
    pub sections: Vec<(String, &'a [u8])>,
}

impl<'a> Container<'a> {
    pub fn parse(bytes: &'a [u8], magic: &[u8; 4], supported: u16) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated("magic"));
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if &found != magic {
            return Err(FormatError::BadMagic {
                expected: *magic,
                found,
            });
        }
        if bytes.len() < 6 {
            return Err(FormatError::Truncated("version"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version > supported {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported,
            });
        }
        if bytes.len() < 10 {
            return Err(FormatError::Truncated("checksum"));
        }
        let body = &bytes[..bytes.len() - 4];
        let mut r = Cursor { bytes: &body[6..] };
        let mut sections = Vec::new();
        while !r.bytes.is_empty() {
            let tl = u16::from_le_bytes(r.take(2, "section tag")?.try_into().unwrap()) as usize;
            let tag = String::from_utf8_lossy(r.take(tl, "section tag")?).into_owned();
            let len = u64::from_le_bytes(r.take(8, "section length")?.try_into().unwrap());
            let len = usize::try_from(len).map_err(|_| FormatError::Truncated("section payload"))?;
            sections.push((tag, r.take(len, "section payload")?));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        Ok(Self { sections })
    }

    pub fn get(&self, tag: &str) -> Result<&'a [u8], FormatError> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, p)| *p)
            .ok_or_else(|| FormatError::MissingSection(tag.to_string()))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() < n {
            return Err(FormatError::Truncated(what));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }
}

pub(crate) fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn u64s_to_bytes(v: &[u64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn bytes_to_f64s(tag: &str, b: &[u8]) -> Result<Vec<f64>, FormatError> {
    if b.len() % 8 != 0 {
        return Err(malformed(tag, "length not a multiple of 8"));
    }
    Ok(b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn bytes_to_u64s(tag: &str, b: &[u8]) -> Result<Vec<u64>, FormatError> {
    if b.len() % 8 != 0 {
        return Err(malformed(tag, "length not a multiple of 8"));
    }
    Ok(b.chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn malformed(tag: &str, reason: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        tag: tag.to_string(),
        reason: reason.into(),
    }
}
