//! Tensor archive: the on-disk format every pipeline stage reads and writes.
//!
//! Layout:
//!
//! ```text
//! bytes 0..4    magic "SYND"
//! bytes 4..12   header length, u64 little-endian
//! bytes 12..12+len  UTF-8 JSON header: [{name, shape, dtype, offset}, ...]
//! remainder     contiguous little-endian payloads
//! ```
//!
//! Offsets are relative to the start of the payload section. Supported
//! payload types are `f32` and `i64`; the round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SYND";

/// A single named payload.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    I64(ArrayD<i64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::I64(a) => a.shape(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I64(_) => "i64",
        }
    }

    fn byte_len(&self) -> u64 {
        let n = self.shape().iter().product::<usize>() as u64;
        match self {
            TensorData::F32(_) => n * 4,
            TensorData::I64(_) => n * 8,
        }
    }

    /// Quantize an f64 array to the archive's f32 payload type.
    pub fn from_f64(a: &ArrayD<f64>) -> Self {
        TensorData::F32(a.mapv(|v| v as f32))
    }

    /// Widen an f32 payload back to f64 (exact).
    pub fn to_f64(&self) -> Result<ArrayD<f64>> {
        match self {
            TensorData::F32(a) => Ok(a.mapv(f64::from)),
            TensorData::I64(_) => Err(Error::MalformedHeader(
                "expected f32 array, found i64".into(),
            )),
        }
    }

    pub fn as_i64(&self) -> Result<&ArrayD<i64>> {
        match self {
            TensorData::I64(a) => Ok(a),
            TensorData::F32(_) => Err(Error::MalformedHeader(
                "expected i64 array, found f32".into(),
            )),
        }
    }
}

/// An ordered collection of named arrays, as stored in one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, TensorData)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add an array; rejects duplicate names.
    pub fn push(&mut self, name: impl Into<String>, data: TensorData) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.push((name, data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn require(&self, name: &str) -> Result<&TensorData> {
        self.get(name).ok_or_else(|| Error::MissingArray(name.into()))
    }

    pub fn require_f64(&self, name: &str) -> Result<ArrayD<f64>> {
        self.require(name)?.to_f64()
    }

    pub fn entries(&self) -> &[(String, TensorData)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

impl FromIterator<(String, TensorData)> for Archive {
    fn from_iter<I: IntoIterator<Item = (String, TensorData)>>(iter: I) -> Self {
        Archive {
            entries: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

/// Write all arrays to `path`. Fails on an empty archive or duplicate names
/// before touching the filesystem.
pub fn write_archive(path: impl AsRef<Path>, archive: &Archive) -> Result<()> {
    if archive.is_empty() {
        return Err(Error::EmptyArchive);
    }
    for (i, (name, _)) in archive.entries.iter().enumerate() {
        if archive.entries[..i].iter().any(|(n, _)| n == name) {
            return Err(Error::DuplicateName(name.clone()));
        }
    }

    let mut header = Vec::with_capacity(archive.len());
    let mut offset = 0u64;
    for (name, data) in &archive.entries {
        header.push(HeaderEntry {
            name: name.clone(),
            shape: data.shape().to_vec(),
            dtype: data.dtype().into(),
            offset,
        });
        offset += data.byte_len();
    }
    let header_json = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, data) in &archive.entries {
        match data {
            TensorData::F32(a) => {
                for v in a.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            TensorData::I64(a) => {
                for v in a.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an archive back. Header errors map to [`Error::MalformedHeader`];
/// payloads shorter than the header declares map to [`Error::TruncatedPayload`].
pub fn read_archive(path: impl AsRef<Path>) -> Result<Archive> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact_or_malformed(&mut r, &mut magic, "file too short for magic")?;
    if &magic != MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic bytes {magic:?}"
        )));
    }
    let mut len_bytes = [0u8; 8];
    read_exact_or_malformed(&mut r, &mut len_bytes, "file too short for header length")?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_buf = vec![0u8; header_len];
    read_exact_or_malformed(&mut r, &mut header_buf, "file too short for header")?;
    let header: Vec<HeaderEntry> = serde_json::from_slice(&header_buf)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut expected = 0u64;
    for entry in &header {
        let n = entry.shape.iter().product::<usize>() as u64;
        let bytes = match entry.dtype.as_str() {
            "f32" => n * 4,
            "i64" => n * 8,
            other => {
                return Err(Error::MalformedHeader(format!("unknown dtype `{other}`")))
            }
        };
        if entry.offset != expected {
            return Err(Error::MalformedHeader(format!(
                "array `{}` declares offset {} but payloads are contiguous at {}",
                entry.name, entry.offset, expected
            )));
        }
        expected += bytes;
    }
    if (payload.len() as u64) < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len() as u64,
        });
    }

    let mut archive = Archive::new();
    for entry in header {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let data = match entry.dtype.as_str() {
            "f32" => {
                let mut values = Vec::with_capacity(n);
                for i in 0..n {
                    let b: [u8; 4] = payload[start + 4 * i..start + 4 * i + 4]
                        .try_into()
                        .expect("length checked above");
                    values.push(f32::from_le_bytes(b));
                }
                TensorData::F32(array_from_vec(&entry.shape, values, &entry.name)?)
            }
            "i64" => {
                let mut values = Vec::with_capacity(n);
                for i in 0..n {
                    let b: [u8; 8] = payload[start + 8 * i..start + 8 * i + 8]
                        .try_into()
                        .expect("length checked above");
                    values.push(i64::from_le_bytes(b));
                }
                TensorData::I64(array_from_vec(&entry.shape, values, &entry.name)?)
            }
            _ => unreachable!("dtype validated above"),
        };
        archive.push(entry.name, data)?;
    }
    Ok(archive)
}

fn array_from_vec<T>(shape: &[usize], values: Vec<T>, name: &str) -> Result<ArrayD<T>> {
    ArrayD::from_shape_vec(shape.to_vec(), values)
        .map_err(|e| Error::MalformedHeader(format!("array `{name}`: {e}")))
}

fn read_exact_or_malformed(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::MalformedHeader(what.into()))
}
