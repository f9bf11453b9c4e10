//! Isotropic feature standardization: fit, apply, and invert the invertible
//! rotation-plus-scale transform that equalizes the per-channel variance of
//! a teacher feature stream, plus a multimodality diagnostic for streams
//! whose moments are not trustworthy.
//!
//! The transform is `y = (1/s) R (x - mean)` with `R = H V^T`, where `V`
//! holds the covariance eigenvectors (descending eigenvalues) and `H` is a
//! normalized Hadamard matrix. Because every entry of `H` has magnitude
//! `1/sqrt(d)`, the diagonal of `H Lambda H^T` is constant at the mean
//! eigenvalue, so a single scalar `s = sqrt(mean eigenvalue)` standardizes
//! every channel at once. `R` is orthogonal, so the map is an isometry up to
//! `1/s`: relative distances between features are preserved.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::types::EmbeddingMatrix;

/// Fixed row-chunk size for parallel accumulations. Chunk boundaries do not
/// depend on the thread count, and chunk partials are merged in order, so
/// results are identical for any `--threads` setting.
const CHUNK_ROWS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum PhisError {
    InsufficientSamples { rows: usize, needed: usize },
    /// No Sylvester/Paley/Kronecker factorization found for this order.
    OrderNotConstructible(usize),
    NotPsd { min_eigenvalue: f64 },
    /// Covariance has (numerically) zero trace; no scale exists.
    DegenerateCovariance,
    DimMismatch { expected: usize, actual: usize },
    InvalidMoments { reason: String },
}

impl fmt::Display for PhisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhisError::InsufficientSamples { rows, needed } => {
                write!(f, "need at least {needed} samples, got {rows}")
            }
            PhisError::OrderNotConstructible(d) => write!(
                f,
                "no Hadamard matrix construction of order {d}: not a power of two, \
                 not prime+1 (= 3 mod 4), and no factorization into constructible orders"
            ),
            PhisError::NotPsd { min_eigenvalue } => {
                write!(f, "covariance is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")
            }
            PhisError::DegenerateCovariance => {
                write!(f, "covariance trace is zero; the stream has no variance to standardize")
            }
            PhisError::DimMismatch { expected, actual } => {
                write!(f, "dimension mismatch: expected {expected}, got {actual}")
            }
            PhisError::InvalidMoments { reason } => write!(f, "invalid moments: {reason}"),
        }
    }
}

impl std::error::Error for PhisError {}

/// First and second moments of a feature stream.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    sample_count: usize,
}

impl MomentEstimate {
    /// Validates symmetry (within 1e-6 of the covariance scale) and a
    /// non-negative diagonal.
    pub fn new(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        sample_count: usize,
    ) -> Result<Self, PhisError> {
        if sample_count < 2 {
            return Err(PhisError::InsufficientSamples { rows: sample_count, needed: 2 });
        }
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(PhisError::InvalidMoments {
                reason: format!(
                    "covariance is {}x{} but the mean has {d} entries",
                    covariance.nrows(),
                    covariance.ncols()
                ),
            });
        }
        let scale = covariance.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..d {
            if covariance[(i, i)] < 0.0 {
                return Err(PhisError::InvalidMoments {
                    reason: format!("negative variance at channel {i}"),
                });
            }
            for j in (i + 1)..d {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-6 * scale {
                    return Err(PhisError::InvalidMoments {
                        reason: format!("covariance not symmetric at ({i}, {j})"),
                    });
                }
            }
        }
        Ok(Self { mean, covariance, sample_count })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Unbiased mean and covariance (1/(n-1)).
///
/// Two passes with f64 accumulation over fixed-size row chunks; the chunk
/// partials are merged in order so the result is independent of thread count.
pub fn estimate_moments(samples: &EmbeddingMatrix) -> Result<MomentEstimate, PhisError> {
    let n = samples.rows();
    let d = samples.dim();
    if n < 2 {
        return Err(PhisError::InsufficientSamples { rows: n, needed: 2 });
    }

    let chunk_len = CHUNK_ROWS * d;
    let mean_partials: Vec<Vec<f64>> = samples
        .data()
        .par_chunks(chunk_len)
        .map(|chunk| {
            let mut acc = vec![0.0f64; d];
            for row in chunk.chunks_exact(d) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            acc
        })
        .collect();
    let mut mean = vec![0.0f64; d];
    for partial in &mean_partials {
        for (m, p) in mean.iter_mut().zip(partial) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // Upper-triangle scatter, packed row-wise.
    let tri_len = d * (d + 1) / 2;
    let tri_partials: Vec<Vec<f64>> = samples
        .data()
        .par_chunks(chunk_len)
        .map(|chunk| {
            let mut acc = vec![0.0f64; tri_len];
            let mut centered = vec![0.0f64; d];
            for row in chunk.chunks_exact(d) {
                for (c, (&v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
                    *c = v as f64 - m;
                }
                let mut base = 0;
                for i in 0..d {
                    let ci = centered[i];
                    let dst = &mut acc[base..base + d - i];
                    for (a, &cj) in dst.iter_mut().zip(&centered[i..]) {
                        *a += ci * cj;
                    }
                    base += d - i;
                }
            }
            acc
        })
        .collect();
    let mut tri = vec![0.0f64; tri_len];
    for partial in &tri_partials {
        for (t, p) in tri.iter_mut().zip(partial) {
            *t += p;
        }
    }

    let norm = 1.0 / (n as f64 - 1.0);
    let mut covariance = DMatrix::<f64>::zeros(d, d);
    let mut base = 0;
    for i in 0..d {
        for j in i..d {
            let v = tri[base + j - i] * norm;
            covariance[(i, j)] = v;
            covariance[(j, i)] = v;
        }
        base += d - i;
    }
    MomentEstimate::new(DVector::from_vec(mean), covariance, n)
}

fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    let mut f = 2;
    while f * f <= n {
        if n % f == 0 {
            return false;
        }
        f += 1;
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
enum HadamardPlan {
    Base1,
    Base2,
    /// Sylvester doubling of a constructible half order.
    Double(usize),
    /// Paley construction I from a prime q = order - 1, q = 3 (mod 4).
    Paley(usize),
    /// Kronecker product of two constructible orders.
    Kronecker(usize, usize),
}

fn find_plan(order: usize, memo: &mut HashMap<usize, Option<HadamardPlan>>) -> Option<HadamardPlan> {
    if let Some(cached) = memo.get(&order) {
        return cached.clone();
    }
    let plan = (|| {
        match order {
            1 => return Some(HadamardPlan::Base1),
            2 => return Some(HadamardPlan::Base2),
            o if o % 4 != 0 => return None,
            _ => {}
        }
        if find_plan(order / 2, memo).is_some() {
            return Some(HadamardPlan::Double(order / 2));
        }
        let q = order - 1;
        if q % 4 == 3 && is_prime(q) {
            return Some(HadamardPlan::Paley(q));
        }
        let mut a = 4;
        while a * a <= order {
            if order % a == 0
                && find_plan(a, memo).is_some()
                && find_plan(order / a, memo).is_some()
            {
                return Some(HadamardPlan::Kronecker(a, order / a));
            }
            a += 1;
        }
        None
    })();
    memo.insert(order, plan.clone());
    plan
}

fn build_signs(order: usize, memo: &mut HashMap<usize, Option<HadamardPlan>>) -> Option<DMatrix<f64>> {
    let plan = find_plan(order, memo)?;
    let m = match plan {
        HadamardPlan::Base1 => DMatrix::from_element(1, 1, 1.0),
        HadamardPlan::Base2 => DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]),
        HadamardPlan::Double(half) => {
            let h = build_signs(half, memo)?;
            let mut out = DMatrix::zeros(order, order);
            for i in 0..half {
                for j in 0..half {
                    let v = h[(i, j)];
                    out[(i, j)] = v;
                    out[(i, j + half)] = v;
                    out[(i + half, j)] = v;
                    out[(i + half, j + half)] = -v;
                }
            }
            out
        }
        HadamardPlan::Paley(q) => paley_signs(q),
        HadamardPlan::Kronecker(a, b) => {
            let ha = build_signs(a, memo)?;
            let hb = build_signs(b, memo)?;
            ha.kronecker(&hb)
        }
    };
    Some(m)
}

/// Paley construction I: H = I + S over the index set {inf} + GF(q), where S
/// is the skew matrix built from the quadratic character of GF(q).
fn paley_signs(q: usize) -> DMatrix<f64> {
    let n = q + 1;
    let mut is_square = vec![false; q];
    for a in 1..q {
        is_square[(a * a) % q] = true;
    }
    let chi = |x: usize| -> f64 {
        if x == 0 {
            0.0
        } else if is_square[x] {
            1.0
        } else {
            -1.0
        }
    };
    let mut h = DMatrix::<f64>::identity(n, n);
    for b in 1..n {
        h[(0, b)] += 1.0;
        h[(b, 0)] += -1.0;
    }
    for a in 1..n {
        for b in 1..n {
            let diff = (a + q - b) % q;
            h[(a, b)] += chi(diff);
        }
    }
    h
}

/// Normalized Hadamard matrix of the given order: entries `+-1/sqrt(d)`,
/// `H H^T = I`. Sylvester doubling, Paley I, and Kronecker products of
/// constructible factors are searched in that order.
pub fn hadamard(order: usize) -> Result<DMatrix<f64>, PhisError> {
    if order == 0 {
        return Err(PhisError::OrderNotConstructible(0));
    }
    let mut memo = HashMap::new();
    let mut signs =
        build_signs(order, &mut memo).ok_or(PhisError::OrderNotConstructible(order))?;
    signs.scale_mut(1.0 / (order as f64).sqrt());
    Ok(signs)
}

/// The fitted standardization transform: `y = (1/scale) * rotation * (x - mean)`.
#[derive(Debug, Clone)]
pub struct PhisTransform {
    mean: DVector<f64>,
    rotation: DMatrix<f64>,
    scale: f64,
}

impl PhisTransform {
    /// Validates dimensions, a positive scale, and orthogonality of the
    /// rotation (`R R^T = I` within 1e-5).
    pub fn new(mean: DVector<f64>, rotation: DMatrix<f64>, scale: f64) -> Result<Self, PhisError> {
        let d = mean.len();
        if rotation.nrows() != d || rotation.ncols() != d {
            return Err(PhisError::DimMismatch { expected: d, actual: rotation.nrows() });
        }
        if !(scale > 0.0) {
            return Err(PhisError::DegenerateCovariance);
        }
        let gram = &rotation * rotation.transpose();
        for i in 0..d {
            for j in 0..d {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - expected).abs() > 1e-5 {
                    return Err(PhisError::InvalidMoments {
                        reason: format!(
                            "rotation is not orthogonal: (R R^T)[{i},{j}] = {}",
                            gram[(i, j)]
                        ),
                    });
                }
            }
        }
        Ok(Self { mean, rotation, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn rotation(&self) -> &DMatrix<f64> {
        &self.rotation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Fits the transform from moments: eigendecompose the covariance
/// (eigenvalues descending, tiny negatives clamped to zero), rotate the
/// eigenbasis by a Hadamard matrix, and set the scalar scale to the root
/// mean eigenvalue. Eigenvector signs are fixed so the largest-magnitude
/// component is positive, which makes fits reproducible.
pub fn fit_phis(moments: &MomentEstimate) -> Result<PhisTransform, PhisError> {
    let d = moments.dim();
    let eig = nalgebra::SymmetricEigen::new(moments.covariance().clone());

    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let neg_tol = 1e-8 * max_abs.max(1.0);
    let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig < -neg_tol {
        return Err(PhisError::NotPsd { min_eigenvalue: min_eig });
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&b))
    });

    let mut v_t = DMatrix::<f64>::zeros(d, d); // rows are eigenvectors
    let mut trace = 0.0;
    for (row, &src) in order.iter().enumerate() {
        trace += eig.eigenvalues[src].max(0.0);
        let col = eig.eigenvectors.column(src);
        let mut largest = 0usize;
        for i in 1..d {
            if col[i].abs() > col[largest].abs() {
                largest = i;
            }
        }
        let sign = if col[largest] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            v_t[(row, i)] = sign * col[i];
        }
    }

    let scale = (trace / d as f64).sqrt();
    if !(scale > 0.0) {
        return Err(PhisError::DegenerateCovariance);
    }
    let rotation = hadamard(d)? * &v_t;
    PhisTransform::new(moments.mean().clone(), rotation, scale)
}

fn map_rows(
    x: &EmbeddingMatrix,
    expected_dim: usize,
    f: impl Fn(&[f32], &mut [f32]) + Sync,
) -> Result<EmbeddingMatrix, PhisError> {
    if x.dim() != expected_dim {
        return Err(PhisError::DimMismatch { expected: expected_dim, actual: x.dim() });
    }
    let d = expected_dim;
    let out: Vec<Vec<f32>> = x
        .data()
        .par_chunks(d.max(1))
        .map(|row| {
            let mut out_row = vec![0.0f32; d];
            f(row, &mut out_row);
            out_row
        })
        .collect();
    Ok(EmbeddingMatrix::new(x.rows(), d, out.concat())
        .expect("transform of finite input stays finite"))
}

/// Forward map `y = (1/s) R (x - mean)` applied row-wise.
pub fn apply_phis(t: &PhisTransform, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix, PhisError> {
    let d = t.dim();
    // Row-major copy of R so each output channel reads contiguous memory.
    let mut rot_rows = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            rot_rows[i * d + j] = t.rotation[(i, j)];
        }
    }
    let inv_s = 1.0 / t.scale;
    let mean = t.mean.as_slice();
    map_rows(x, d, |row, out| {
        let centered: Vec<f64> =
            row.iter().zip(mean).map(|(&v, &m)| v as f64 - m).collect();
        for (j, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (r, c) in rot_rows[j * d..(j + 1) * d].iter().zip(&centered) {
                acc += r * c;
            }
            *slot = (acc * inv_s) as f32;
        }
    })
}

/// Inverse map `x = s R^T y + mean` applied row-wise.
pub fn invert_phis(t: &PhisTransform, y: &EmbeddingMatrix) -> Result<EmbeddingMatrix, PhisError> {
    let d = t.dim();
    // Row-major copy of R^T is the column-major layout of R.
    let rot_t_rows: Vec<f64> = t.rotation.as_slice().to_vec();
    let s = t.scale;
    let mean = t.mean.as_slice();
    map_rows(y, d, |row, out| {
        let promoted: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        for (i, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (r, v) in rot_t_rows[i * d..(i + 1) * d].iter().zip(&promoted) {
                acc += r * v;
            }
            *slot = (acc * s + mean[i]) as f32;
        }
    })
}

/// Multimodality diagnostic result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultimodalityReport {
    /// Fraction of the stream's total variance explained by the optimal
    /// two-cluster split along the top principal component, in [0, 1].
    pub score: f64,
    pub flagged: bool,
}

/// Scores how much of a stream's variance is explained by a two-mode split.
///
/// Samples are projected onto the top principal component and split by exact
/// 1-D 2-means (every threshold between sorted neighbors is tried). The
/// score is the between-cluster variance of that split divided by the total
/// multivariate variance (trace of the covariance). Single-mode blobs put
/// only a small fraction of their total variance in any one split direction;
/// separated modes concentrate most of it there. Zero total variance scores
/// 0 by convention.
///
/// The score measures variance concentration, not bimodality per se: a
/// unimodal stream whose top eigenvalue carries most of the trace can score
/// above conservative thresholds (a 1-D Gaussian's optimal split explains
/// 2/pi of its own axis variance). Fitting such a stream is still safe;
/// `--force` overrides the fit guard.
pub fn multimodality_score(
    samples: &EmbeddingMatrix,
    threshold: f64,
) -> Result<MultimodalityReport, PhisError> {
    let n = samples.rows();
    if n < 10 {
        return Err(PhisError::InsufficientSamples { rows: n, needed: 10 });
    }
    let moments = estimate_moments(samples)?;
    let d = samples.dim();

    let total_sum: f64 = (0..d).map(|i| moments.covariance()[(i, i)]).sum::<f64>()
        * (n as f64 - 1.0);
    if total_sum <= 0.0 {
        return Ok(MultimodalityReport { score: 0.0, flagged: false });
    }

    let eig = nalgebra::SymmetricEigen::new(moments.covariance().clone());
    let mut top = 0usize;
    for i in 1..d {
        if eig.eigenvalues[i] > eig.eigenvalues[top] {
            top = i;
        }
    }
    let pc = eig.eigenvectors.column(top);
    let mean = moments.mean().as_slice();
    let mut projected: Vec<f64> = samples
        .iter_rows()
        .map(|row| {
            row.iter()
                .zip(mean)
                .zip(pc.iter())
                .map(|((&v, &m), &w)| (v as f64 - m) * w)
                .sum()
        })
        .collect();
    projected.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Exact 1-D 2-means via prefix sums: minimize within-cluster SSE over
    // all n-1 split points.
    let mut prefix = vec![0.0f64; n + 1];
    let mut prefix_sq = vec![0.0f64; n + 1];
    for (i, &p) in projected.iter().enumerate() {
        prefix[i + 1] = prefix[i] + p;
        prefix_sq[i + 1] = prefix_sq[i] + p * p;
    }
    let sse = |lo: usize, hi: usize| -> f64 {
        let count = (hi - lo) as f64;
        let sum = prefix[hi] - prefix[lo];
        (prefix_sq[hi] - prefix_sq[lo]) - sum * sum / count
    };
    let mut best_within = f64::INFINITY;
    for split in 1..n {
        let within = sse(0, split) + sse(split, n);
        if within < best_within {
            best_within = within;
        }
    }
    let sst_1d = sse(0, n);
    let between = (sst_1d - best_within).max(0.0);
    let score = (between / total_sum).clamp(0.0, 1.0);
    Ok(MultimodalityReport { score, flagged: score > threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::EmbeddingMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn moments_hand_example() {
        let samples = EmbeddingMatrix::new(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let m = estimate_moments(&samples).unwrap();
        assert_eq!(m.mean().as_slice(), &[1.0, 0.0]);
        assert_eq!(m.covariance()[(0, 0)], 2.0);
        assert_eq!(m.covariance()[(0, 1)], 0.0);
        assert_eq!(m.covariance()[(1, 1)], 0.0);
    }

    #[test]
    fn moments_constant_samples_have_zero_covariance() {
        let samples = EmbeddingMatrix::new(3, 2, vec![5.0, -1.0, 5.0, -1.0, 5.0, -1.0]).unwrap();
        let m = estimate_moments(&samples).unwrap();
        assert!(m.covariance().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn moments_reject_single_sample() {
        let samples = EmbeddingMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            estimate_moments(&samples),
            Err(PhisError::InsufficientSamples { rows: 1, needed: 2 })
        ));
    }

    fn assert_orthogonal(h: &DMatrix<f64>, tol: f64) {
        let d = h.nrows();
        let gram = h * h.transpose();
        for i in 0..d {
            for j in 0..d {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[(i, j)] - expected).abs() < tol,
                    "gram[{i},{j}] = {} (order {d})",
                    gram[(i, j)]
                );
            }
        }
    }

    #[test]
    fn hadamard_base_cases() {
        let h1 = hadamard(1).unwrap();
        assert_eq!(h1[(0, 0)], 1.0);
        let h2 = hadamard(2).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert_eq!(h2[(0, 0)], r);
        assert_eq!(h2[(1, 1)], -r);
    }

    #[test]
    fn hadamard_constructions_are_orthogonal() {
        // Sylvester (8, 64), Paley (12, 20), Kronecker via search (24, 144).
        for order in [1usize, 2, 4, 8, 12, 20, 24, 64, 144] {
            let h = hadamard(order).unwrap();
            let entry = 1.0 / (order as f64).sqrt();
            assert!(h.iter().all(|v| (v.abs() - entry).abs() < 1e-12));
            assert_orthogonal(&h, 1e-6);
        }
    }

    #[test]
    fn hadamard_teacher_width_1152_is_constructible() {
        let h = hadamard(1152).unwrap();
        // Spot-check orthogonality on a few row pairs instead of the full gram.
        for (a, b) in [(0usize, 0usize), (0, 1), (17, 17), (17, 901), (1151, 3)] {
            let dot: f64 = (0..1152).map(|k| h[(a, k)] * h[(b, k)]).sum();
            let expected = if a == b { 1.0 } else { 0.0 };
            assert!((dot - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn hadamard_rejects_unconstructible_orders() {
        for order in [0usize, 3, 6, 10, 36] {
            assert!(matches!(hadamard(order), Err(PhisError::OrderNotConstructible(_))));
        }
    }

    #[test]
    fn fit_identity_covariance_keeps_unit_diagonal() {
        let m = MomentEstimate::new(DVector::zeros(4), DMatrix::identity(4, 4), 100).unwrap();
        let t = fit_phis(&m).unwrap();
        assert!((t.scale() - 1.0).abs() < 1e-12);
        let transformed = t.rotation() * DMatrix::<f64>::identity(4, 4) * t.rotation().transpose();
        for i in 0..4 {
            assert!((transformed[(i, i)] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_diag_4_1_closed_form() {
        let m = MomentEstimate::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]),
            100,
        )
        .unwrap();
        let t = fit_phis(&m).unwrap();
        assert!((t.scale() - 2.5f64.sqrt()).abs() < 1e-12);
        let sigma = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let transformed = (t.rotation() * sigma * t.rotation().transpose()) / (t.scale() * t.scale());
        assert!((transformed[(0, 0)] - 1.0).abs() < 1e-9);
        assert!((transformed[(1, 1)] - 1.0).abs() < 1e-9);
        assert!((transformed[(0, 1)].abs() - 0.6).abs() < 1e-9);
    }

    #[test]
    fn fit_rejects_indefinite_covariance() {
        // Symmetric but with a -1 eigenvalue.
        let m = MomentEstimate::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            10,
        )
        .unwrap();
        assert!(matches!(fit_phis(&m), Err(PhisError::NotPsd { .. })));
    }

    #[test]
    fn fit_rejects_zero_covariance() {
        let m = MomentEstimate::new(DVector::zeros(2), DMatrix::zeros(2, 2), 10).unwrap();
        assert!(matches!(fit_phis(&m), Err(PhisError::DegenerateCovariance)));
    }

    fn correlated_samples(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // x = A z + mu with a fixed well-conditioned mixing matrix.
        let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z: Vec<f64> = (0..d)
                .map(|_| {
                    // Box-Muller.
                    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            for i in 0..d {
                let v: f64 = (0..d).map(|j| a[i * d + j] * z[j]).sum::<f64>() + mu[i];
                data.push(v as f32);
            }
        }
        EmbeddingMatrix::new(n, d, data).unwrap()
    }

    #[test]
    fn fitted_transform_standardizes_its_sample() {
        let samples = correlated_samples(2000, 8, 77);
        let moments = estimate_moments(&samples).unwrap();
        let t = fit_phis(&moments).unwrap();
        let y = apply_phis(&t, &samples).unwrap();
        let ym = estimate_moments(&y).unwrap();
        for i in 0..8 {
            assert!(
                (ym.covariance()[(i, i)] - 1.0).abs() < 1e-2,
                "channel {i} variance {}",
                ym.covariance()[(i, i)]
            );
            assert!(ym.mean()[i].abs() < 1e-2);
        }
    }

    #[test]
    fn apply_centers_mean_rows_to_zero() {
        let samples = correlated_samples(500, 4, 3);
        let moments = estimate_moments(&samples).unwrap();
        let t = fit_phis(&moments).unwrap();
        let mean_f32: Vec<f32> = moments.mean().iter().map(|&v| v as f32).collect();
        let x = EmbeddingMatrix::new(2, 4, [mean_f32.clone(), mean_f32].concat()).unwrap();
        let y = apply_phis(&t, &x).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn roundtrip_and_distance_preservation() {
        let samples = correlated_samples(300, 8, 15);
        let moments = estimate_moments(&samples).unwrap();
        let t = fit_phis(&moments).unwrap();
        let y = apply_phis(&t, &samples).unwrap();
        let back = invert_phis(&t, &y).unwrap();
        for (a, b) in samples.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
        }
        // Orthogonal rotation: distances scale exactly by 1/s.
        let d01 = crate::numeric::l2_distance(samples.row(0), samples.row(1));
        let t01 = crate::numeric::l2_distance(y.row(0), y.row(1));
        assert!((t01 - d01 / t.scale()).abs() < 1e-3 * d01.max(1.0));
    }

    #[test]
    fn fit_is_deterministic() {
        let samples = correlated_samples(500, 8, 123);
        let m = estimate_moments(&samples).unwrap();
        let t1 = fit_phis(&m).unwrap();
        let t2 = fit_phis(&estimate_moments(&samples).unwrap()).unwrap();
        assert_eq!(t1.scale().to_bits(), t2.scale().to_bits());
        assert_eq!(t1.rotation().as_slice(), t2.rotation().as_slice());
        assert_eq!(t1.mean().as_slice(), t2.mean().as_slice());
    }

    #[test]
    fn apply_rejects_dim_mismatch() {
        let samples = correlated_samples(100, 4, 9);
        let t = fit_phis(&estimate_moments(&samples).unwrap()).unwrap();
        let wrong = EmbeddingMatrix::zeros(3, 5);
        assert!(matches!(apply_phis(&t, &wrong), Err(PhisError::DimMismatch { .. })));
    }

    fn blob(n: usize, d: usize, center: f32, spread: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n * d).map(|_| center + rng.random_range(-spread..spread)).collect()
    }

    #[test]
    fn multimodality_flags_separated_blobs_not_single_blob() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let d = 8;

        let single = EmbeddingMatrix::new(400, d, blob(400, d, 0.0, 1.0, &mut rng)).unwrap();
        let r = multimodality_score(&single, 0.5).unwrap();
        assert!(r.score < 0.35, "single blob scored {}", r.score);
        assert!(!r.flagged);

        let mut data = blob(200, d, -10.0, 1.0, &mut rng);
        data.extend(blob(200, d, 10.0, 1.0, &mut rng));
        let bimodal = EmbeddingMatrix::new(400, d, data).unwrap();
        let r = multimodality_score(&bimodal, 0.5).unwrap();
        assert!(r.score > 0.9, "bimodal scored {}", r.score);
        assert!(r.flagged);
    }

    #[test]
    fn multimodality_degenerate_and_small_inputs() {
        let constant = EmbeddingMatrix::new(12, 3, vec![2.0; 36]).unwrap();
        let r = multimodality_score(&constant, 0.5).unwrap();
        assert_eq!(r.score, 0.0);
        assert!(!r.flagged);

        let tiny = EmbeddingMatrix::zeros(5, 3);
        assert!(matches!(
            multimodality_score(&tiny, 0.5),
            Err(PhisError::InsufficientSamples { .. })
        ));
    }
}
