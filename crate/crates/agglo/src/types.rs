//! Core domain types shared by every module: dense feature matrices, image
//! token records, and teacher descriptors.
//!
//! All types validate their invariants at construction and are immutable
//! afterwards, so they can be shared freely across threads.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numeric::ceil_div;

/// Errors raised by core type constructors.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Data buffer length does not match `rows * dim`.
    LengthMismatch { rows: usize, dim: usize, len: usize },
    /// A NaN or infinite entry was found.
    NonFinite { row: usize, col: usize },
    /// A pixel or patch dimension was zero.
    ZeroDimension { field: &'static str },
    /// Register loss requested for a teacher with no registers.
    RegisterLossWithoutRegisters,
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::LengthMismatch { rows, dim, len } => write!(
                f,
                "data length {len} does not match {rows} rows x {dim} dims = {}",
                rows * dim
            ),
            CoreError::NonFinite { row, col } => {
                write!(f, "non-finite entry at row {row}, column {col}")
            }
            CoreError::ZeroDimension { field } => write!(f, "{field} must be positive"),
            CoreError::RegisterLossWithoutRegisters => {
                write!(f, "register loss enabled but the teacher has no register tokens")
            }
        }
    }
}

impl std::error::Error for CoreError {}

/// Dense row-major matrix of f32 feature vectors.
///
/// This is the universal currency of the crate: teacher/student summaries,
/// patch tokens, registers, score matrices, and cluster centroids all travel
/// as `EmbeddingMatrix`. Every entry is guaranteed finite and the buffer
/// length always equals `rows * dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Validates and wraps a row-major buffer.
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, CoreError> {
        if data.len() != rows * dim {
            return Err(CoreError::LengthMismatch { rows, dim, len: data.len() });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite { row: i / dim.max(1), col: i % dim.max(1) });
            }
        }
        Ok(Self { rows, dim, data })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { rows, dim, data: vec![0.0; rows * dim] }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, CoreError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(CoreError::LengthMismatch { rows: rows.len(), dim, len: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Borrow row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    /// Same shape (rows and dim) as another matrix.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.dim == other.dim
    }
}

/// Validated constructor mirroring the library's file readers.
pub fn validate_embedding_matrix(
    rows: usize,
    dim: usize,
    data: Vec<f32>,
) -> Result<EmbeddingMatrix, CoreError> {
    EmbeddingMatrix::new(rows, dim, data)
}

/// An image's identity plus its patch-token count; the packer's input unit.
///
/// The token count is always derived from the pixel dimensions via ceiling
/// division, so partial edge patches count as full patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTokenRecord {
    pub id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub patch_size: u32,
    num_tokens: u32,
}

impl ImageTokenRecord {
    pub fn new(
        id: impl Into<String>,
        width_px: u32,
        height_px: u32,
        patch_size: u32,
    ) -> Result<Self, CoreError> {
        if width_px == 0 {
            return Err(CoreError::ZeroDimension { field: "width_px" });
        }
        if height_px == 0 {
            return Err(CoreError::ZeroDimension { field: "height_px" });
        }
        if patch_size == 0 {
            return Err(CoreError::ZeroDimension { field: "patch_size" });
        }
        let num_tokens = ceil_div(height_px, patch_size) * ceil_div(width_px, patch_size);
        Ok(Self { id: id.into(), width_px, height_px, patch_size, num_tokens })
    }

    /// Patch-token count (grid height x grid width).
    pub fn num_tokens(&self) -> u32 {
        self.num_tokens
    }
}

/// Per-teacher feature-stream description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub name: String,
    pub summary_dim: usize,
    pub patch_dim: usize,
    /// Register-token count; 0 for teachers without registers.
    pub num_registers: usize,
    /// Whether the register-matching term participates in this teacher's loss.
    pub has_register_loss: bool,
}

impl TeacherConfig {
    pub fn new(
        name: impl Into<String>,
        summary_dim: usize,
        patch_dim: usize,
        num_registers: usize,
        has_register_loss: bool,
    ) -> Result<Self, CoreError> {
        if has_register_loss && num_registers == 0 {
            return Err(CoreError::RegisterLossWithoutRegisters);
        }
        Ok(Self { name: name.into(), summary_dim, patch_dim, num_registers, has_register_loss })
    }
}
