//! Self-describing binary tensor container (TNSR) and trajectory-file parsing.
//!
//! The TNSR layout is fixed: magic `TNSR`, version (u32 LE), rank (u32 LE),
//! one u64 LE extent per axis, a one-byte dtype code (1 = f32), then the
//! row-major little-endian payload.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not a TNSR file)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: unsupported dtype code {code}")]
    UnsupportedDtype { path: PathBuf, code: u8 },
    #[error("{path}: truncated payload (expected {expected} values, got {got})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("invalid tensor dims {dims:?}: {reason}")]
    InvalidDims { dims: Vec<usize>, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: no frame records found")]
    EmptyTrajectory { path: PathBuf },
}

fn io_err(path: &Path, source: std::io::Error) -> TensorIoError {
    TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Element kind stored in a [`Tensor`]. Only 32-bit floats exist in v1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DType {
    #[default]
    F32,
}

/// Dense row-major tensor of rank >= 1.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}[{} values]", self.dims, self.data.len())
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorIoError> {
        if dims.is_empty() {
            return Err(TensorIoError::InvalidDims {
                dims,
                reason: "rank must be >= 1".into(),
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorIoError::InvalidDims {
                dims,
                reason: "all extents must be >= 1".into(),
            });
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorIoError::InvalidDims {
                dims,
                reason: format!("product of extents {} != {} stored values", expected, data.len()),
            });
        }
        Ok(Self {
            dims,
            dtype: DType::F32,
            data,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorIoError> {
        let n: usize = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat offset of a multi-index (row-major). Debug-asserts bounds.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.dims).enumerate() {
            debug_assert!(ix < d, "index {ix} out of range {d} at axis {i}");
            off = off * d + ix;
        }
        off
    }
}

/// Writes `t` in the TNSR container format.
pub fn write_tensor(t: &Tensor, path: &Path) -> Result<(), TensorIoError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(t, &mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes the TNSR encoding of `t` to an arbitrary sink (used by checkpoint
/// files that concatenate several tensors).
pub fn write_tensor_to<W: Write>(t: &Tensor, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for &d in &t.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[DTYPE_F32])?;
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Number of bytes the TNSR encoding of `t` occupies.
pub fn encoded_len(t: &Tensor) -> usize {
    4 + 4 + 4 + 8 * t.dims.len() + 1 + 4 * t.data.len()
}

/// Reads a tensor written by [`write_tensor`].
pub fn read_tensor(path: &Path) -> Result<Tensor, TensorIoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    read_tensor_from(&mut r, path)
}

pub fn read_tensor_from<R: Read>(r: &mut R, path: &Path) -> Result<Tensor, TensorIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(TensorIoError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = read_u32(r, path)?;
    if version != VERSION {
        return Err(TensorIoError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let rank = read_u32(r, path)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
        dims.push(u64::from_le_bytes(buf) as usize);
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype).map_err(|e| io_err(path, e))?;
    if dtype[0] != DTYPE_F32 {
        return Err(TensorIoError::UnsupportedDtype {
            path: path.to_path_buf(),
            code: dtype[0],
        });
    }
    let expected: usize = dims.iter().product();
    let mut data = Vec::with_capacity(expected);
    let mut buf = [0u8; 4];
    for _ in 0..expected {
        if let Err(e) = r.read_exact(&mut buf) {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                return Err(TensorIoError::Truncated {
                    path: path.to_path_buf(),
                    expected,
                    got: data.len(),
                });
            }
            return Err(io_err(path, e));
        }
        data.push(f32::from_le_bytes(buf));
    }
    Tensor::new(dims, data)
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32, TensorIoError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

/// One raw 19-number record of a trajectory file. Extrinsic entries are kept
/// uninterpreted; `camera::build_trajectory` turns them into rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    /// fx fy cx cy, normalized by image dimensions.
    pub intrinsics: [f64; 4],
    /// Two distortion placeholders (parsed, preserved, ignored downstream).
    pub distortion: [f64; 2],
    /// Row-major 3x4 world-to-camera matrix.
    pub extrinsic: [f64; 12],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub source_id: String,
    pub frames: Vec<TrajectoryRecord>,
}

/// Parses the RealEstate10k-style camera text format: first line is an opaque
/// source id, each following nonempty line holds 19 whitespace-separated
/// numbers. Blank lines are skipped; anything else malformed is a hard error.
pub fn parse_trajectory(path: &Path) -> Result<TrajectoryFile, TensorIoError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_trajectory_str(&text, path)
}

pub fn parse_trajectory_str(text: &str, path: &Path) -> Result<TrajectoryFile, TensorIoError> {
    let mut lines = text.lines().enumerate();
    let source_id = match lines.next() {
        Some((_, first)) => first.trim().to_string(),
        None => {
            return Err(TensorIoError::EmptyTrajectory {
                path: path.to_path_buf(),
            })
        }
    };
    let mut frames = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 19 {
            return Err(TensorIoError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected 19 fields, got {}", fields.len()),
            });
        }
        let mut values = [0.0f64; 19];
        for (i, f) in fields.iter().enumerate() {
            values[i] = f.parse::<f64>().map_err(|_| TensorIoError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("non-numeric token `{f}`"),
            })?;
        }
        let record = TrajectoryRecord {
            timestamp: values[0],
            intrinsics: [values[1], values[2], values[3], values[4]],
            distortion: [values[5], values[6]],
            extrinsic: values[7..19].try_into().unwrap(),
        };
        if let Some(prev) = frames.last() {
            let prev: &TrajectoryRecord = prev;
            if record.timestamp <= prev.timestamp {
                return Err(TensorIoError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: format!(
                        "timestamps not strictly increasing ({} after {})",
                        record.timestamp, prev.timestamp
                    ),
                });
            }
        }
        frames.push(record);
    }
    if frames.is_empty() {
        return Err(TensorIoError::EmptyTrajectory {
            path: path.to_path_buf(),
        });
    }
    Ok(TrajectoryFile { source_id, frames })
}

/// Writes a trajectory in the same text format `parse_trajectory` reads.
pub fn write_trajectory(traj: &TrajectoryFile, path: &Path) -> Result<(), TensorIoError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, s: String| -> Result<(), TensorIoError> {
        w.write_all(s.as_bytes()).map_err(|e| io_err(path, e))
    };
    write(&mut w, format!("{}\n", traj.source_id))?;
    for rec in &traj.frames {
        let mut line = format!("{}", rec.timestamp);
        for v in rec
            .intrinsics
            .iter()
            .chain(rec.distortion.iter())
            .chain(rec.extrinsic.iter())
        {
            line.push(' ');
            line.push_str(&format!("{v}"));
        }
        line.push('\n');
        write(&mut w, line)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
