//! Tensor-record container shared by checkpoints, stats caches and raw
//! datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LFMG"  u32 version  u32 header_len  header bytes (UTF-8)
//! repeated: u32 name_len  name bytes  u8 dtype  u32 rank  u64 extent × rank  payload
//! u32 crc32 of everything before it
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"LFMG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a record file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("file truncated")]
    Truncated,
    #[error("malformed record file: {0}")]
    Malformed(String),
    #[error("missing record {0}")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, RecordError>;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl RecordData {
    fn tag(&self) -> u8 {
        match self {
            RecordData::F32(_) => 0,
            RecordData::F64(_) => 1,
            RecordData::U64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating payloads widened to f64; `None` for integer records.
    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match self {
            RecordData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            RecordData::F64(v) => Some(v.clone()),
            RecordData::U64(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: RecordData) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(RecordError::Malformed(format!(
                "record {name}: shape {shape:?} holds {numel} values, payload has {}",
                data.len()
            )));
        }
        Ok(Record { name, shape, data })
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Record::new(name, shape, RecordData::F64(data))
    }

    pub fn u64s(name: impl Into<String>, data: Vec<u64>) -> Self {
        let n = data.len();
        Record { name: name.into(), shape: vec![n], data: RecordData::U64(data) }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordFile {
    pub header: String,
    pub records: Vec<Record>,
}

impl RecordFile {
    pub fn new(header: impl Into<String>) -> Self {
        RecordFile { header: header.into(), records: Vec::new() }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| RecordError::Missing(name.to_string()))
    }

    pub fn require_f64(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let r = self.require(name)?;
        let data = r
            .data
            .to_f64()
            .ok_or_else(|| RecordError::Malformed(format!("record {name} is not floating point")))?;
        Ok((r.shape.clone(), data))
    }

    pub fn require_u64(&self, name: &str) -> Result<&[u64]> {
        match &self.require(name)?.data {
            RecordData::U64(v) => Ok(v),
            _ => Err(RecordError::Malformed(format!("record {name} is not an integer record"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.header);
        for r in &self.records {
            put_str(&mut out, &r.name);
            out.push(r.data.tag());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match &r.data {
                RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                RecordData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(RecordError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(RecordError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(RecordError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(RecordError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(RecordError::Version { found: version, expected: FORMAT_VERSION });
        }
        let header = r.string()?;
        let mut records = Vec::new();
        while r.pos < body.len() {
            let name = r.string()?;
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| RecordError::Malformed("extent overflow".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| RecordError::Malformed(format!("record {name}: extent overflow")))?;
            let data = match tag {
                0 => RecordData::F32(r.take(numel, 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => RecordData::F64(r.take(numel, 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => RecordData::U64(r.take(numel, 8)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                t => return Err(RecordError::Malformed(format!("record {name}: unknown dtype tag {t}"))),
            };
            records.push(Record { name, shape, data });
        }
        Ok(RecordFile { header, records })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        RecordFile::from_bytes(&bytes)
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> RecordError {
    RecordError::Io { path: path.display().to_string(), source }
}

/// Create-or-replace `path` so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| RecordError::Malformed(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(path, e));
    }
    Ok(())
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
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(RecordError::Truncated)?;
        if end > self.buf.len() {
            return Err(RecordError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take(&mut self, count: usize, width: usize) -> Result<&'a [u8]> {
        self.bytes(count.checked_mul(width).ok_or(RecordError::Truncated)?)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| RecordError::Malformed("non-UTF-8 string".into()))
    }
}
