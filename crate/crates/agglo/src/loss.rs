//! Distillation loss kernels: per-image summary/patch/register terms with
//! token-based normalization, global batch aggregation that is invariant to
//! packing, and the asymmetric relational loss over pairwise distances.
//!
//! All losses are computed in f64 over f32 features. Batch aggregation and
//! the relational pair sum use an exactly rounded summation, so regrouping
//! images across sequences and ranks is bit-exact, and the unordered-pair
//! fast path equals the ordered-pair definition bit for bit.
//!
//! These kernels operate on whatever embedding space the caller supplies;
//! summaries and patches typically arrive standardized (see [`crate::phis`])
//! while registers stay in their raw space.

use std::collections::BTreeMap;
use std::fmt;

use crate::numeric::{dot, exact_sum, l2_norm, sq_l2_distance};
use crate::types::{EmbeddingMatrix, TeacherConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// Summary vector with zero norm; cosine is undefined.
    ZeroNormVector,
    /// Teacher/student shapes disagree.
    ShapeMismatch { context: &'static str },
    /// Aggregation over an empty global batch.
    EmptyBatch,
    /// Total loss over an empty teacher set.
    EmptyTeacherSet,
    /// Non-positive smooth-L1 transition point.
    InvalidBeta { beta: f64 },
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::ZeroNormVector => write!(f, "summary vector has zero norm"),
            LossError::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            LossError::EmptyBatch => write!(f, "global batch contains no images"),
            LossError::EmptyTeacherSet => write!(f, "no teachers supplied"),
            LossError::InvalidBeta { beta } => {
                write!(f, "smooth-L1 beta must be positive (got {beta})")
            }
        }
    }
}

impl std::error::Error for LossError {}

/// Matched teacher/student features for one image and one teacher.
///
/// Shapes are validated once here so the individual loss kernels cannot be
/// called on mismatched inputs. Register matrices may have zero rows for
/// teachers without registers.
#[derive(Debug, Clone)]
pub struct PerImageFeatures {
    teacher_summary: Vec<f32>,
    student_summary: Vec<f32>,
    teacher_patches: EmbeddingMatrix,
    student_patches: EmbeddingMatrix,
    teacher_registers: EmbeddingMatrix,
    student_registers: EmbeddingMatrix,
}

impl PerImageFeatures {
    pub fn new(
        teacher_summary: Vec<f32>,
        student_summary: Vec<f32>,
        teacher_patches: EmbeddingMatrix,
        student_patches: EmbeddingMatrix,
        teacher_registers: EmbeddingMatrix,
        student_registers: EmbeddingMatrix,
    ) -> Result<Self, LossError> {
        if teacher_summary.len() != student_summary.len() || teacher_summary.is_empty() {
            return Err(LossError::ShapeMismatch { context: "summary vectors" });
        }
        if teacher_summary.iter().chain(&student_summary).any(|v| !v.is_finite()) {
            return Err(LossError::ShapeMismatch { context: "non-finite summary entry" });
        }
        if !teacher_patches.same_shape(&student_patches) {
            return Err(LossError::ShapeMismatch { context: "patch matrices" });
        }
        if teacher_patches.rows() == 0 {
            return Err(LossError::ShapeMismatch { context: "at least one patch token required" });
        }
        if !teacher_registers.same_shape(&student_registers) {
            return Err(LossError::ShapeMismatch { context: "register matrices" });
        }
        Ok(Self {
            teacher_summary,
            student_summary,
            teacher_patches,
            student_patches,
            teacher_registers,
            student_registers,
        })
    }

    /// Patch-token count N_q.
    pub fn num_tokens(&self) -> usize {
        self.teacher_patches.rows()
    }

    pub fn num_registers(&self) -> usize {
        self.teacher_registers.rows()
    }
}

/// Cosine summary loss `1 - cos(teacher, student)`, in [0, 2].
pub fn summary_loss(f: &PerImageFeatures) -> Result<f64, LossError> {
    let nt = l2_norm(&f.teacher_summary);
    let ns = l2_norm(&f.student_summary);
    if nt == 0.0 || ns == 0.0 {
        return Err(LossError::ZeroNormVector);
    }
    let cos = (dot(&f.teacher_summary, &f.student_summary) / (nt * ns)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Mean squared patch error, normalized by the image's token count so
/// high-resolution images cannot dominate the combined objective.
pub fn patch_loss(f: &PerImageFeatures) -> f64 {
    let n = f.num_tokens();
    let total = exact_sum(
        f.teacher_patches
            .iter_rows()
            .zip(f.student_patches.iter_rows())
            .map(|(t, s)| sq_l2_distance(t, s)),
    );
    total / n as f64
}

/// Mean squared register error, gated by the teacher's register indicator.
/// Teachers without a register loss contribute exactly 0.
pub fn register_loss(f: &PerImageFeatures, teacher: &TeacherConfig) -> Result<f64, LossError> {
    if !teacher.has_register_loss {
        return Ok(0.0);
    }
    let k = f.num_registers();
    if k == 0 || k != teacher.num_registers {
        return Err(LossError::ShapeMismatch { context: "register count vs teacher config" });
    }
    let total = exact_sum(
        f.teacher_registers
            .iter_rows()
            .zip(f.student_registers.iter_rows())
            .map(|(t, s)| sq_l2_distance(t, s)),
    );
    Ok(total / k as f64)
}

/// Combined per-image loss: summary + patch + register terms.
pub fn per_image_loss(f: &PerImageFeatures, teacher: &TeacherConfig) -> Result<f64, LossError> {
    Ok(summary_loss(f)? + patch_loss(f) + register_loss(f, teacher)?)
}

/// Mean of per-image losses over the whole global batch, regardless of how
/// images are grouped into sequences and ranks.
///
/// `grouped` is nested rank -> sequence -> image. The sum is exactly
/// rounded, so any regrouping of the same per-image losses returns a
/// bit-identical result.
pub fn global_aggregate(grouped: &[Vec<Vec<f64>>]) -> Result<f64, LossError> {
    let count: usize = grouped.iter().flatten().map(Vec::len).sum();
    if count == 0 {
        return Err(LossError::EmptyBatch);
    }
    let total = exact_sum(grouped.iter().flatten().flatten().copied());
    Ok(total / count as f64)
}

/// Final multi-teacher objective: sum of per-teacher global losses.
pub fn total_loss(per_teacher: &BTreeMap<String, f64>) -> Result<f64, LossError> {
    if per_teacher.is_empty() {
        return Err(LossError::EmptyTeacherSet);
    }
    Ok(exact_sum(per_teacher.values().copied()))
}

/// Per-teacher objective: global alignment plus the relational term.
pub fn per_teacher_objective(global: f64, arkd: f64) -> f64 {
    global + arkd
}

/// Smooth-L1 transition point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothL1Config {
    pub beta: f64,
}

impl SmoothL1Config {
    pub fn new(beta: f64) -> Result<Self, LossError> {
        if !(beta > 0.0) {
            return Err(LossError::InvalidBeta { beta });
        }
        Ok(Self { beta })
    }
}

impl Default for SmoothL1Config {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

/// Smooth-L1: quadratic below `beta`, linear above.
pub fn smooth_l1(x: f64, cfg: &SmoothL1Config) -> f64 {
    let a = x.abs();
    if a < cfg.beta {
        0.5 * x * x / cfg.beta
    } else {
        a - 0.5 * cfg.beta
    }
}

fn smooth_l1_derivative(x: f64, cfg: &SmoothL1Config) -> f64 {
    debug_assert!(x >= 0.0);
    if x < cfg.beta {
        x / cfg.beta
    } else {
        1.0
    }
}

/// Whether the relational loss gates each pair to one side of the error
/// (asymmetric, the default) or penalizes both sides (the plain relational
/// baseline kept for ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationMode {
    Asymmetric,
    Symmetric,
}

/// Relational loss value plus the batch statistics that define it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArkdReport {
    pub loss: f64,
    /// Mean teacher distance over ordered pairs (the normalization scale).
    pub teacher_scale: f64,
    /// Median of normalized teacher distances (the gating boundary).
    pub median: f64,
    /// Ordered pair count B*(B-1).
    pub pair_count: usize,
    /// True when B < 2 or the teacher scale collapsed below eps; the loss is
    /// 0 in that case.
    pub degenerate: bool,
}

struct PairGeometry {
    /// Unordered pair list (i, j, teacher_distance, student_distance), i < j.
    pairs: Vec<(usize, usize, f64, f64)>,
    scale: f64,
    median: f64,
}

fn pair_geometry(
    teacher: &EmbeddingMatrix,
    student: &EmbeddingMatrix,
    eps: f64,
) -> Result<Option<PairGeometry>, LossError> {
    if !teacher.same_shape(student) {
        return Err(LossError::ShapeMismatch { context: "teacher vs student summaries" });
    }
    let b = teacher.rows();
    if b < 2 {
        return Ok(None);
    }
    let mut pairs = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in (i + 1)..b {
            let dt = sq_l2_distance(teacher.row(i), teacher.row(j)).sqrt();
            let ds = sq_l2_distance(student.row(i), student.row(j)).sqrt();
            pairs.push((i, j, dt, ds));
        }
    }
    // Mean over ordered pairs; distances are symmetric so doubling the
    // unordered sum is exact.
    let ordered = (b * (b - 1)) as f64;
    let scale = 2.0 * exact_sum(pairs.iter().map(|p| p.2)) / ordered;
    if !(scale >= eps) {
        return Ok(None);
    }
    for p in &mut pairs {
        p.2 /= scale;
        p.3 /= scale;
    }
    // Lower median of the ordered-pair multiset. Each unordered distance
    // appears twice, so index p-1 of the doubled sorted list is element
    // (p-1)/2 of the unordered sorted list.
    let mut sorted: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[(sorted.len() - 1) / 2];
    Ok(Some(PairGeometry { pairs, scale, median }))
}

fn pair_term(dt: f64, ds: f64, median: f64, cfg: &SmoothL1Config, mode: RelationMode) -> f64 {
    let shrink = (ds - dt).max(0.0);
    let expand = (dt - ds).max(0.0);
    match mode {
        RelationMode::Asymmetric => {
            if dt < median {
                smooth_l1(shrink, cfg)
            } else {
                smooth_l1(expand, cfg)
            }
        }
        RelationMode::Symmetric => smooth_l1(shrink, cfg) + smooth_l1(expand, cfg),
    }
}

/// Relational loss over pairwise summary distances, normalized by the mean
/// teacher distance and gated at the median.
///
/// Below-median pairs (close in teacher space) are only penalized for being
/// too far apart in student space; at-or-above-median pairs only for being
/// too close. Degenerate batches (B < 2, or teacher scale below `eps`)
/// report a zero loss with the `degenerate` flag set.
///
/// In a distributed setting the caller supplies the fully gathered
/// `B_global x d` summary matrices; no communication happens here.
pub fn relational_loss(
    teacher: &EmbeddingMatrix,
    student: &EmbeddingMatrix,
    cfg: &SmoothL1Config,
    eps: f64,
    mode: RelationMode,
) -> Result<ArkdReport, LossError> {
    let b = teacher.rows();
    let geometry = pair_geometry(teacher, student, eps)?;
    let Some(geo) = geometry else {
        let ordered = if b < 2 { 0 } else { b * (b - 1) };
        return Ok(ArkdReport {
            loss: 0.0,
            teacher_scale: 0.0,
            median: 0.0,
            pair_count: ordered,
            degenerate: true,
        });
    };
    let ordered = b * (b - 1);
    let total = exact_sum(
        geo.pairs
            .iter()
            .map(|&(_, _, dt, ds)| pair_term(dt, ds, geo.median, cfg, mode)),
    );
    Ok(ArkdReport {
        loss: 2.0 * total / ordered as f64,
        teacher_scale: geo.scale,
        median: geo.median,
        pair_count: ordered,
        degenerate: false,
    })
}

/// Asymmetric relational loss (the default mode of [`relational_loss`]).
pub fn arkd_loss(
    teacher: &EmbeddingMatrix,
    student: &EmbeddingMatrix,
    cfg: &SmoothL1Config,
    eps: f64,
) -> Result<ArkdReport, LossError> {
    relational_loss(teacher, student, cfg, eps, RelationMode::Asymmetric)
}

/// Analytic gradient of [`relational_loss`] with respect to the student
/// summaries, as a row-major B x d f64 buffer.
///
/// The teacher scale and median are constants of the teacher geometry, so
/// the gradient flows only through the normalized student distances. At the
/// non-smooth points (coincident students, exact median/beta boundaries)
/// the zero subgradient is used.
pub fn arkd_student_gradient(
    teacher: &EmbeddingMatrix,
    student: &EmbeddingMatrix,
    cfg: &SmoothL1Config,
    eps: f64,
    mode: RelationMode,
) -> Result<Vec<f64>, LossError> {
    let b = student.rows();
    let d = student.dim();
    let mut grad = vec![0.0f64; b * d];
    let Some(geo) = pair_geometry(teacher, student, eps)? else {
        return Ok(grad);
    };
    let ordered = (b * (b - 1)) as f64;
    for &(i, j, dt, ds) in &geo.pairs {
        if ds == 0.0 {
            continue;
        }
        // d(term)/d(normalized student distance) for the active branch.
        let shrink_active = ds > dt
            && (mode == RelationMode::Symmetric || dt < geo.median);
        let expand_active = dt > ds
            && (mode == RelationMode::Symmetric || dt >= geo.median);
        let dterm = if shrink_active {
            smooth_l1_derivative(ds - dt, cfg)
        } else if expand_active {
            -smooth_l1_derivative(dt - ds, cfg)
        } else {
            0.0
        };
        if dterm == 0.0 {
            continue;
        }
        // Both ordered orientations contribute; chain through
        // ds_normalized = |s_i - s_j| / scale.
        let coeff = 2.0 * dterm / (ordered * geo.scale * (ds * geo.scale));
        let (ri, rj) = (student.row(i), student.row(j));
        for c in 0..d {
            let diff = ri[c] as f64 - rj[c] as f64;
            grad[i * d + c] += coeff * diff;
            grad[j * d + c] -= coeff * diff;
        }
    }
    Ok(grad)
}
