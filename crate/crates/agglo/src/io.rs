//! Bit-exact file formats binding the modules into pipeline runs.
//!
//! - `.emb` embedding files: magic `AEMB`, version u32 = 1, rows u64,
//!   dim u32, then rows x dim little-endian f32, row-major.
//! - JSON Lines manifests and label files (UTF-8, one object per line).
//! - Standardization transforms: JSON header referencing raw little-endian
//!   f32 payload files for the mean and rotation.
//! - Assignment tables: raw little-endian u32 array plus a JSON sidecar.
//! - JSON reports with every float rounded to 9 significant digits so
//!   re-runs diff cleanly.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::packer::ImageManifestEntry;
use crate::phis::PhisTransform;
use crate::types::{CoreError, EmbeddingMatrix};

const EMB_MAGIC: &[u8; 4] = b"AEMB";
const EMB_VERSION: u32 = 1;

#[derive(Debug)]
pub enum IoError {
    Io(std::io::Error),
    /// Malformed file contents (bad magic, truncated payload, parse errors).
    Format { path: PathBuf, reason: String },
    /// Structurally valid file with invalid values (non-finite entries...).
    Invalid { path: PathBuf, source: CoreError },
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Io(e) => write!(f, "I/O error: {e}"),
            IoError::Format { path, reason } => {
                write!(f, "malformed file {}: {reason}", path.display())
            }
            IoError::Invalid { path, source } => {
                write!(f, "invalid data in {}: {source}", path.display())
            }
        }
    }
}

impl std::error::Error for IoError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            IoError::Io(e) => Some(e),
            IoError::Invalid { source, .. } => Some(source),
            IoError::Format { .. } => None,
        }
    }
}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e)
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), reason: reason.into() }
}

/// Writes an embedding matrix in the `.emb` binary format.
pub fn write_emb(path: &Path, matrix: &EmbeddingMatrix) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMB_MAGIC)?;
    w.write_all(&EMB_VERSION.to_le_bytes())?;
    w.write_all(&(matrix.rows() as u64).to_le_bytes())?;
    w.write_all(&(matrix.dim() as u32).to_le_bytes())?;
    for &v in matrix.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates an `.emb` file.
pub fn read_emb(path: &Path) -> Result<EmbeddingMatrix, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err(path, "file shorter than header"))?;
    if &magic != EMB_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}, expected \"AEMB\"")));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != EMB_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    r.read_exact(&mut u64buf)?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;

    let expected_bytes = rows
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| format_err(path, format!("header claims {rows} x {dim} entries")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected_bytes {
        return Err(format_err(
            path,
            format!("payload is {} bytes, expected {expected_bytes}", payload.len()),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    EmbeddingMatrix::new(rows, dim, data)
        .map_err(|source| IoError::Invalid { path: path.to_path_buf(), source })
}

/// Reads a JSON Lines image manifest (`{"id", "width", "height"}` per line).
pub fn read_image_manifest(path: &Path) -> Result<Vec<ImageManifestEntry>, IoError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ImageManifestEntry = serde_json::from_str(&line)
            .map_err(|e| format_err(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_image_manifest(path: &Path, entries: &[ImageManifestEntry]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(|e| format_err(path, e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelLine {
    label: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    index: u32,
}

/// Reads class labels from JSON Lines (`{"label": n}` per line).
pub fn read_labels(path: &Path) -> Result<Vec<u32>, IoError> {
    read_u32_lines(path, |line| serde_json::from_str::<LabelLine>(line).map(|l| l.label))
}

/// Reads gallery truth indices from JSON Lines (`{"index": n}` per line).
pub fn read_truth_indices(path: &Path) -> Result<Vec<u32>, IoError> {
    read_u32_lines(path, |line| serde_json::from_str::<IndexLine>(line).map(|l| l.index))
}

fn read_u32_lines(
    path: &Path,
    parse: impl Fn(&str) -> Result<u32, serde_json::Error>,
) -> Result<Vec<u32>, IoError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|e| format_err(path, format!("line {}: {e}", lineno + 1)))?);
    }
    Ok(out)
}

/// Writes newline-delimited ids.
pub fn write_id_lines(path: &Path, ids: &[String]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for id in ids {
        w.write_all(id.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_id_lines(path: &Path) -> Result<Vec<String>, IoError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

/// Sidecar describing a binary assignment table.
#[derive(Debug, Serialize, Deserialize)]
pub struct AssignmentSidecar {
    pub count: usize,
    pub num_leaves: usize,
    pub format: String,
}

/// Writes an assignment table as a raw little-endian u32 array plus a JSON
/// sidecar at `<path>.json`.
pub fn write_assignments(path: &Path, assignments: &[u32], num_leaves: usize) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for &a in assignments {
        w.write_all(&a.to_le_bytes())?;
    }
    w.flush()?;
    let sidecar = AssignmentSidecar {
        count: assignments.len(),
        num_leaves,
        format: "u32le".to_string(),
    };
    write_json_pretty(&sidecar_path(path), &serde_json::to_value(&sidecar).unwrap())
}

pub fn read_assignments(path: &Path) -> Result<(Vec<u32>, AssignmentSidecar), IoError> {
    let sidecar: AssignmentSidecar = {
        let text = std::fs::read_to_string(sidecar_path(path))?;
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?
    };
    let bytes = std::fs::read(path)?;
    if bytes.len() != sidecar.count * 4 {
        return Err(format_err(
            path,
            format!("payload is {} bytes, sidecar promises {}", bytes.len(), sidecar.count * 4),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((values, sidecar))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// JSON header of a serialized standardization transform.
#[derive(Debug, Serialize, Deserialize)]
pub struct TransformHeader {
    pub dim: usize,
    pub scale: f64,
    pub mean_file: String,
    pub rotation_file: String,
}

/// Saves a transform: `<prefix>.json` header plus `<prefix>.mean.f32` and
/// `<prefix>.rot.f32` raw little-endian payloads (rotation row-major).
pub fn save_transform(prefix: &Path, t: &PhisTransform) -> Result<(), IoError> {
    let stem = prefix
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "transform".to_string());
    let mean_file = format!("{stem}.mean.f32");
    let rotation_file = format!("{stem}.rot.f32");
    let dir = prefix.parent().unwrap_or(Path::new("."));

    write_f32_payload(&dir.join(&mean_file), t.mean().iter().map(|&v| v as f32))?;
    let d = t.dim();
    write_f32_payload(
        &dir.join(&rotation_file),
        (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| t.rotation()[(i, j)] as f32),
    )?;

    let header =
        TransformHeader { dim: d, scale: t.scale(), mean_file, rotation_file };
    write_json_pretty(
        &prefix.with_extension("json"),
        &serde_json::to_value(&header).unwrap(),
    )
}

/// Loads a transform saved by [`save_transform`]. The payloads are f32, so a
/// loaded transform reproduces the in-memory one to f32 precision.
pub fn load_transform(header_path: &Path) -> Result<PhisTransform, IoError> {
    let text = std::fs::read_to_string(header_path)?;
    let header: TransformHeader =
        serde_json::from_str(&text).map_err(|e| format_err(header_path, e.to_string()))?;
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let mean = read_f32_payload(&dir.join(&header.mean_file), header.dim)?;
    let rotation = read_f32_payload(&dir.join(&header.rotation_file), header.dim * header.dim)?;

    let mean = DVector::from_iterator(header.dim, mean.into_iter().map(|v| v as f64));
    let rotation = DMatrix::from_row_iterator(
        header.dim,
        header.dim,
        rotation.into_iter().map(|v| v as f64),
    );
    PhisTransform::new(mean, rotation, header.scale)
        .map_err(|e| format_err(header_path, e.to_string()))
}

fn write_f32_payload(path: &Path, values: impl Iterator<Item = f32>) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f32_payload(path: &Path, expected: usize) -> Result<Vec<f32>, IoError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(format_err(
            path,
            format!("payload is {} bytes, expected {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

/// Rounds to 9 significant digits; report floats pass through this so
/// re-runs produce byte-identical, diff-friendly JSON.
pub fn sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(8 - magnitude);
    (x * factor).round() / factor
}

/// Writes a JSON value with 2-space indentation and a trailing newline.
/// `serde_json` objects iterate in sorted key order, so output is stable.
pub fn write_json_pretty(path: &Path, value: &serde_json::Value) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| format_err(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes an experts-by-layers CSV with an `expert` column followed by one
/// `layer_<id>` column per teacher layer, floats at 9 significant digits.
pub fn write_alignment_csv(
    path: &Path,
    m: &crate::analysis::AlignmentMatrix,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "expert")?;
    for layer in &m.layers {
        write!(w, ",layer_{layer}")?;
    }
    writeln!(w)?;
    for (e, name) in m.experts.iter().enumerate() {
        write!(w, "{name}")?;
        for l in 0..m.layers.len() {
            write!(w, ",{}", sig9(m.score(e, l)))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
