//! Expert-specialization analysis via linear centered kernel alignment:
//! centered cross-covariance, CKA scores, and the routed-token protocol
//! pairing student experts with teacher layers.
//!
//! CKA compares representation sets of possibly different widths and is
//! invariant to orthogonal transforms and isotropic scaling, which makes it
//! the right similarity for projected feature spaces.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;

use crate::types::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisError {
    RowMismatch { left: usize, right: usize },
    /// A matrix has zero centered variance; CKA is undefined.
    DegenerateInput,
    /// Routed-token sets must agree on the teacher layer ids.
    LayerSetMismatch,
    EmptySets,
    /// Fewer than two token rows.
    TooFewRows { rows: usize },
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::RowMismatch { left, right } => {
                write!(f, "row counts differ: {left} vs {right}")
            }
            AnalysisError::DegenerateInput => {
                write!(f, "input has zero centered variance; CKA is undefined")
            }
            AnalysisError::LayerSetMismatch => {
                write!(f, "routed-token sets disagree on teacher layer ids")
            }
            AnalysisError::EmptySets => write!(f, "no routed-token sets given"),
            AnalysisError::TooFewRows { rows } => {
                write!(f, "need at least 2 aligned token rows, got {rows}")
            }
        }
    }
}

impl std::error::Error for AnalysisError {}

/// Tokens routed to one student expert plus the spatially corresponding
/// teacher tokens per layer (row `i` everywhere is the same image patch).
#[derive(Debug, Clone)]
pub struct RoutedTokenSet {
    pub expert_id: String,
    pub student_tokens: EmbeddingMatrix,
    pub teacher_tokens_per_layer: BTreeMap<u32, EmbeddingMatrix>,
    /// Where the student tokens were captured (free text; the capture point
    /// relative to the expert MLP is not enforced).
    pub provenance: Option<String>,
}

impl RoutedTokenSet {
    pub fn new(
        expert_id: impl Into<String>,
        student_tokens: EmbeddingMatrix,
        teacher_tokens_per_layer: BTreeMap<u32, EmbeddingMatrix>,
        provenance: Option<String>,
    ) -> Result<Self, AnalysisError> {
        let n = student_tokens.rows();
        if n < 2 {
            return Err(AnalysisError::TooFewRows { rows: n });
        }
        for m in teacher_tokens_per_layer.values() {
            if m.rows() != n {
                return Err(AnalysisError::RowMismatch { left: n, right: m.rows() });
            }
        }
        Ok(Self {
            expert_id: expert_id.into(),
            student_tokens,
            teacher_tokens_per_layer,
            provenance,
        })
    }
}

/// Centered cross-covariance `A^T B - (1/N)(sum a_i)(sum b_i)^T`, returned
/// row-major with shape `dim(a) x dim(b)`.
///
/// Note the scaling: this is the centered scatter matrix (no 1/N on the
/// product term), exactly as the CKA score expects.
pub fn centered_cross_cov(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
) -> Result<Vec<f64>, AnalysisError> {
    if a.rows() != b.rows() {
        return Err(AnalysisError::RowMismatch { left: a.rows(), right: b.rows() });
    }
    let n = a.rows();
    let da = a.dim();
    let db = b.dim();

    const CHUNK: usize = 256;
    let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n.div_ceil(CHUNK.max(1)).max(1))
        .into_par_iter()
        .map(|chunk_idx| {
            let lo = chunk_idx * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut prod = vec![0.0f64; da * db];
            let mut sum_a = vec![0.0f64; da];
            let mut sum_b = vec![0.0f64; db];
            for row in lo..hi {
                let ra = a.row(row);
                let rb = b.row(row);
                for (i, &va) in ra.iter().enumerate() {
                    let va = va as f64;
                    sum_a[i] += va;
                    let dst = &mut prod[i * db..(i + 1) * db];
                    for (slot, &vb) in dst.iter_mut().zip(rb) {
                        *slot += va * vb as f64;
                    }
                }
                // sum_a loop above already added; add b sums once per row.
                for (s, &vb) in sum_b.iter_mut().zip(rb) {
                    *s += vb as f64;
                }
            }
            (prod, sum_a, sum_b)
        })
        .collect();

    let mut prod = vec![0.0f64; da * db];
    let mut sum_a = vec![0.0f64; da];
    let mut sum_b = vec![0.0f64; db];
    for (p, sa, sb) in partials {
        for (dst, v) in prod.iter_mut().zip(p) {
            *dst += v;
        }
        for (dst, v) in sum_a.iter_mut().zip(sa) {
            *dst += v;
        }
        for (dst, v) in sum_b.iter_mut().zip(sb) {
            *dst += v;
        }
    }

    let inv_n = 1.0 / n as f64;
    for i in 0..da {
        for j in 0..db {
            prod[i * db + j] -= inv_n * sum_a[i] * sum_b[j];
        }
    }
    Ok(prod)
}

fn frobenius_sq(m: &[f64]) -> f64 {
    m.iter().map(|&v| v * v).sum()
}

/// Linear CKA: `||cov(X,Y)||_F^2 / (||cov(X,X)||_F ||cov(Y,Y)||_F)`.
///
/// In [0, 1] up to rounding; 1 exactly when the representations agree up to
/// an orthogonal transform and isotropic scale.
pub fn linear_cka(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<f64, AnalysisError> {
    let cross = centered_cross_cov(x, y)?;
    let xx = centered_cross_cov(x, x)?;
    let yy = centered_cross_cov(y, y)?;
    let norm_x = frobenius_sq(&xx).sqrt();
    let norm_y = frobenius_sq(&yy).sqrt();
    if norm_x == 0.0 || norm_y == 0.0 {
        return Err(AnalysisError::DegenerateInput);
    }
    let score = frobenius_sq(&cross) / (norm_x * norm_y);
    debug_assert!(score > -1e-8 && score < 1.0 + 1e-8, "CKA {score} out of bounds");
    Ok(score.clamp(0.0, 1.0))
}

/// Experts-by-layers CKA score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    pub experts: Vec<String>,
    pub layers: Vec<u32>,
    /// Row-major, `experts.len() x layers.len()`.
    pub scores: Vec<f64>,
}

impl AlignmentMatrix {
    pub fn score(&self, expert: usize, layer: usize) -> f64 {
        self.scores[expert * self.layers.len() + layer]
    }
}

/// CKA between each expert's routed student tokens and every teacher layer's
/// spatially corresponding tokens, with teacher activations optionally
/// clipped to `clip_range` first (high-magnitude outlier channels otherwise
/// mask the underlying alignment).
pub fn expert_teacher_alignment(
    sets: &[RoutedTokenSet],
    clip_range: Option<(f32, f32)>,
) -> Result<AlignmentMatrix, AnalysisError> {
    let first = sets.first().ok_or(AnalysisError::EmptySets)?;
    let layers: Vec<u32> = first.teacher_tokens_per_layer.keys().copied().collect();
    for set in sets {
        let keys: Vec<u32> = set.teacher_tokens_per_layer.keys().copied().collect();
        if keys != layers {
            return Err(AnalysisError::LayerSetMismatch);
        }
    }

    let mut scores = Vec::with_capacity(sets.len() * layers.len());
    for set in sets {
        for layer in &layers {
            let teacher = &set.teacher_tokens_per_layer[layer];
            let clipped;
            let teacher = match clip_range {
                Some((lo, hi)) => {
                    clipped = EmbeddingMatrix::new(
                        teacher.rows(),
                        teacher.dim(),
                        teacher.data().iter().map(|&v| v.clamp(lo, hi)).collect(),
                    )
                    .expect("clamp preserves finiteness");
                    &clipped
                }
                None => teacher,
            };
            scores.push(linear_cka(&set.student_tokens, teacher)?);
        }
    }
    Ok(AlignmentMatrix {
        experts: sets.iter().map(|s| s.expert_id.clone()).collect(),
        layers,
        scores,
    })
}
