//! MVOX volume container.
//!
//! Little-endian layout:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `MVX1` |
//! | 12    | dims, 3 × u32 |
//! | 12    | spacing, 3 × f32 |
//! | 48    | voxel-to-world affine, 12 × f32, row-major 3×4 |
//! | 1     | dtype: 0 = f32 intensities, 1 = u8 labels |
//! | 8     | payload length in bytes, u64 |
//! | n     | voxel payload, x-fastest |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::affine::AffineTransform;
use crate::volume::{Grid, LabelMap, Volume, VolumeError, MAX_LABEL};

pub const MAGIC: &[u8; 4] = b"MVX1";
pub const HEADER_LEN: usize = 4 + 12 + 12 + 48 + 1 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    U8Labels = 1,
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"MVX1\"")]
    BadMagic([u8; 4]),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("payload length {declared} bytes disagrees with dims {dims:?} ({expected} bytes)")]
    PayloadLength { dims: [usize; 3], declared: u64, expected: u64 },
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("label {value} at voxel {index} outside 0..={MAX_LABEL}")]
    LabelRange { index: usize, value: u8 },
    #[error("expected {expected} payload, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("invalid header geometry: {0}")]
    Geometry(#[source] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Contents of an MVOX file.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Intensity(Volume),
    Labels(LabelMap),
}

impl VolumeFile {
    pub fn kind(&self) -> &'static str {
        match self {
            VolumeFile::Intensity(_) => "intensity",
            VolumeFile::Labels(_) => "labels",
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            VolumeFile::Intensity(v) => &v.grid,
            VolumeFile::Labels(l) => &l.grid,
        }
    }
}

fn encode_header(grid: &Grid, dtype: Dtype, payload_len: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    for d in grid.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in grid.spacing {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    for a in grid.affine.to_rows() {
        out.extend_from_slice(&(a as f32).to_le_bytes());
    }
    out.push(dtype as u8);
    out.extend_from_slice(&payload_len.to_le_bytes());
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = encode_header(&v.grid, Dtype::F32, (v.data.len() * 4) as u64);
    out.reserve(v.data.len() * 4);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_labels(l: &LabelMap) -> Vec<u8> {
    let mut out = encode_header(&l.grid, Dtype::U8Labels, l.labels.len() as u64);
    out.extend_from_slice(&l.labels);
    out
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<(), FormatError> {
    write_bytes(path, &encode_volume(v))
}

pub fn write_labels(path: impl AsRef<Path>, l: &LabelMap) -> Result<(), FormatError> {
    write_bytes(path, &encode_labels(l))
}

fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<VolumeFile, FormatError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = c.u32("dims")? as usize;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        *s = c.f32("spacing")? as f64;
    }
    let mut rows = [0f64; 12];
    for r in &mut rows {
        *r = c.f32("affine")? as f64;
    }
    let dtype = match c.take(1, "dtype")?[0] {
        0 => Dtype::F32,
        1 => Dtype::U8Labels,
        other => return Err(FormatError::UnknownDtype(other)),
    };
    let declared = u64::from_le_bytes(c.take(8, "payload length")?.try_into().unwrap());
    let grid = Grid::new(dims, spacing, AffineTransform::from_rows(&rows)).map_err(FormatError::Geometry)?;
    let n = grid.num_voxels();
    let width = if dtype == Dtype::F32 { 4 } else { 1 };
    let expected = (n * width) as u64;
    if declared != expected {
        return Err(FormatError::PayloadLength { dims, declared, expected });
    }
    let payload = c.take(expected as usize, "payload")?;
    match dtype {
        Dtype::F32 => {
            let data: Vec<f32> =
                payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite(i));
            }
            Ok(VolumeFile::Intensity(Volume { grid, data }))
        }
        Dtype::U8Labels => {
            if let Some(index) = payload.iter().position(|&v| v > MAX_LABEL) {
                return Err(FormatError::LabelRange { index, value: payload[index] });
            }
            Ok(VolumeFile::Labels(LabelMap { grid, labels: payload.to_vec() }))
        }
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeFile, FormatError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn read_intensity(path: impl AsRef<Path>) -> Result<Volume, FormatError> {
    match read_volume(path)? {
        VolumeFile::Intensity(v) => Ok(v),
        other => Err(FormatError::WrongKind { expected: "intensity", found: other.kind() }),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap, FormatError> {
    match read_volume(path)? {
        VolumeFile::Labels(l) => Ok(l),
        other => Err(FormatError::WrongKind { expected: "labels", found: other.kind() }),
    }
}
