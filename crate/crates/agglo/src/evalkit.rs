//! Evaluation harness: kNN class posteriors, retrieval similarity scores,
//! entropy-weighted fusion of multiple head scores, and top-1 / Recall@1
//! metrics.
//!
//! Every operation is pure and row-independent, so results do not depend on
//! parallelism. Argmax ties always break to the lowest index.

use std::fmt;

use rayon::prelude::*;

use crate::numeric::{argmax_tie_lowest, cosine, entropy, softmax};
use crate::types::EmbeddingMatrix;

/// Raw scores with one row per query and one column per candidate (class or
/// gallery item).
pub type ScoreMatrix = EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    KTooLarge { k: usize, train_rows: usize },
    EmptyTrain,
    DimMismatch { expected: usize, actual: usize },
    ShapeMismatch { context: &'static str },
    LengthMismatch { expected: usize, actual: usize },
    IndexOutOfRange { index: u32, cols: usize },
    InvalidConfig { reason: &'static str },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::KTooLarge { k, train_rows } => {
                write!(f, "k = {k} exceeds the {train_rows} train points")
            }
            EvalError::EmptyTrain => write!(f, "empty train set"),
            EvalError::DimMismatch { expected, actual } => {
                write!(f, "embedding dims differ: {expected} vs {actual}")
            }
            EvalError::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            EvalError::LengthMismatch { expected, actual } => {
                write!(f, "expected {expected} entries, got {actual}")
            }
            EvalError::IndexOutOfRange { index, cols } => {
                write!(f, "truth index {index} out of range for {cols} candidates")
            }
            EvalError::InvalidConfig { reason } => write!(f, "invalid config: {reason}"),
        }
    }
}

impl std::error::Error for EvalError {}

/// Entropy-weighted ensembling knobs: softmax temperature and entropy
/// sharpening, both strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleConfig {
    pub temperature: f64,
    pub sharpening: f64,
}

impl EnsembleConfig {
    pub fn new(temperature: f64, sharpening: f64) -> Result<Self, EvalError> {
        if !(temperature > 0.0) {
            return Err(EvalError::InvalidConfig { reason: "temperature must be positive" });
        }
        if !(sharpening > 0.0) {
            return Err(EvalError::InvalidConfig { reason: "sharpening must be positive" });
        }
        Ok(Self { temperature, sharpening })
    }
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { temperature: 1.0, sharpening: 1.0 }
    }
}

/// kNN voting knobs. The defaults (k = 20, vote temperature 0.07) follow the
/// usual self-supervised evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    pub vote_temperature: f64,
}

impl KnnConfig {
    pub fn new(k: usize, vote_temperature: f64) -> Result<Self, EvalError> {
        if k == 0 {
            return Err(EvalError::InvalidConfig { reason: "k must be at least 1" });
        }
        if !(vote_temperature > 0.0) {
            return Err(EvalError::InvalidConfig { reason: "vote temperature must be positive" });
        }
        Ok(Self { k, vote_temperature })
    }
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 20, vote_temperature: 0.07 }
    }
}

/// Class posteriors from exponentially weighted kNN votes.
///
/// For each query: cosine similarities to the train set, top-k neighbors
/// (similarity descending, index ascending on ties), votes weighted by
/// `exp(similarity / vote_temperature)`, normalized to sum 1 per row.
pub fn knn_posteriors(
    train: &EmbeddingMatrix,
    labels: &[u32],
    query: &EmbeddingMatrix,
    cfg: &KnnConfig,
) -> Result<ScoreMatrix, EvalError> {
    if train.rows() == 0 {
        return Err(EvalError::EmptyTrain);
    }
    if labels.len() != train.rows() {
        return Err(EvalError::LengthMismatch { expected: train.rows(), actual: labels.len() });
    }
    if cfg.k > train.rows() {
        return Err(EvalError::KTooLarge { k: cfg.k, train_rows: train.rows() });
    }
    if query.dim() != train.dim() {
        return Err(EvalError::DimMismatch { expected: train.dim(), actual: query.dim() });
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;

    let rows: Vec<Vec<f32>> = query
        .data()
        .par_chunks(query.dim().max(1))
        .map(|q| {
            let mut sims: Vec<(f64, usize)> = train
                .iter_rows()
                .enumerate()
                .map(|(i, t)| (cosine(q, t), i))
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut votes = vec![0.0f64; num_classes];
            for &(sim, idx) in sims.iter().take(cfg.k) {
                votes[labels[idx] as usize] += (sim / cfg.vote_temperature).exp();
            }
            let total: f64 = votes.iter().sum();
            votes.iter().map(|&v| (v / total) as f32).collect()
        })
        .collect();
    Ok(ScoreMatrix::new(query.rows(), num_classes, rows.concat())
        .expect("posteriors are finite"))
}

/// Cosine similarity of every query against every gallery row.
pub fn retrieval_scores(
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
) -> Result<ScoreMatrix, EvalError> {
    if queries.dim() != gallery.dim() {
        return Err(EvalError::DimMismatch { expected: gallery.dim(), actual: queries.dim() });
    }
    let rows: Vec<Vec<f32>> = queries
        .data()
        .par_chunks(queries.dim().max(1))
        .map(|q| gallery.iter_rows().map(|g| cosine(q, g) as f32).collect())
        .collect();
    Ok(ScoreMatrix::new(queries.rows(), gallery.rows(), rows.concat())
        .expect("cosines are finite"))
}

/// Per-query z-normalization of a head's scores: each row is shifted to
/// mean 0 and scaled to unit standard deviation.
///
/// Heads built from different similarity measures live on very different
/// scales; fusing raw scores then lets one head dominate regardless of its
/// weight. This is an opt-in preprocessing step, off by default, because
/// the fusion rule is defined on raw scores. Constant rows (no preference)
/// become all zeros.
pub fn z_normalize_rows(scores: &ScoreMatrix) -> ScoreMatrix {
    let cols = scores.dim();
    let mut data = Vec::with_capacity(scores.rows() * cols);
    for row in scores.iter_rows() {
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / cols.max(1) as f64;
        let var: f64 =
            row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols.max(1) as f64;
        let std = var.sqrt();
        if std == 0.0 {
            data.extend(std::iter::repeat_n(0.0f32, cols));
        } else {
            data.extend(row.iter().map(|&v| ((v as f64 - mean) / std) as f32));
        }
    }
    ScoreMatrix::new(scores.rows(), cols, data).expect("z-normalization keeps entries finite")
}

fn check_heads(heads: &[ScoreMatrix]) -> Result<(usize, usize), EvalError> {
    let first = heads.first().ok_or(EvalError::ShapeMismatch { context: "no heads given" })?;
    for h in heads {
        if !h.same_shape(first) {
            return Err(EvalError::ShapeMismatch { context: "heads have different shapes" });
        }
    }
    Ok((first.rows(), first.dim()))
}

/// Per-query head weights `alpha` from prediction entropies.
///
/// Each head's scores become a confidence distribution via softmax at the
/// configured temperature; heads are weighted by `exp(-sharpening * entropy)`
/// and normalized, so every weight row is a point on the simplex.
pub fn entropy_weights(
    heads: &[ScoreMatrix],
    cfg: &EnsembleConfig,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let (rows, _) = check_heads(heads)?;
    let out = (0..rows)
        .map(|q| {
            let entropies: Vec<f64> = heads
                .iter()
                .map(|h| entropy(&softmax(h.row(q), cfg.temperature)))
                .collect();
            // Shift by the minimum before exponentiating for stability.
            let min_h = entropies.iter().copied().fold(f64::INFINITY, f64::min);
            let mut weights: Vec<f64> = entropies
                .iter()
                .map(|&h| (-cfg.sharpening * (h - min_h)).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            weights
        })
        .collect();
    Ok(out)
}

/// Fused scores: the per-query convex combination of raw head scores.
pub fn ensemble_scores(
    heads: &[ScoreMatrix],
    weights: &[Vec<f64>],
) -> Result<ScoreMatrix, EvalError> {
    let (rows, cols) = check_heads(heads)?;
    if weights.len() != rows {
        return Err(EvalError::LengthMismatch { expected: rows, actual: weights.len() });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for q in 0..rows {
        if weights[q].len() != heads.len() {
            return Err(EvalError::LengthMismatch {
                expected: heads.len(),
                actual: weights[q].len(),
            });
        }
        for c in 0..cols {
            let fused: f64 = heads
                .iter()
                .zip(&weights[q])
                .map(|(h, &w)| w * h.row(q)[c] as f64)
                .sum();
            data.push(fused as f32);
        }
    }
    Ok(ScoreMatrix::new(rows, cols, data).expect("fused scores are finite"))
}

/// Fraction of queries whose argmax matches the true label.
pub fn top1_accuracy(scores: &ScoreMatrix, truth: &[u32]) -> Result<f64, EvalError> {
    if truth.len() != scores.rows() {
        return Err(EvalError::LengthMismatch { expected: scores.rows(), actual: truth.len() });
    }
    let correct = scores
        .iter_rows()
        .zip(truth)
        .filter(|(row, &t)| argmax_tie_lowest(row) == t as usize)
        .count();
    Ok(correct as f64 / scores.rows().max(1) as f64)
}

/// Fraction of queries whose best-scoring candidate is the true index.
pub fn recall_at_1(scores: &ScoreMatrix, truth_index: &[u32]) -> Result<f64, EvalError> {
    if truth_index.len() != scores.rows() {
        return Err(EvalError::LengthMismatch {
            expected: scores.rows(),
            actual: truth_index.len(),
        });
    }
    if let Some(&bad) = truth_index.iter().find(|&&t| t as usize >= scores.dim()) {
        return Err(EvalError::IndexOutOfRange { index: bad, cols: scores.dim() });
    }
    let correct = scores
        .iter_rows()
        .zip(truth_index)
        .filter(|(row, &t)| argmax_tie_lowest(row) == t as usize)
        .count();
    Ok(correct as f64 / scores.rows().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: usize, dim: usize, data: Vec<f32>) -> EmbeddingMatrix {
        EmbeddingMatrix::new(rows, dim, data).unwrap()
    }

    #[test]
    fn knn_exact_match_is_one_hot() {
        let train = matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let labels = [0u32, 1, 2];
        let query = matrix(1, 2, vec![0.0, 1.0]);
        let cfg = KnnConfig::new(1, 0.07).unwrap();
        let post = knn_posteriors(&train, &labels, &query, &cfg).unwrap();
        assert_eq!(post.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn knn_all_same_label_is_one_hot() {
        let train = matrix(4, 2, vec![1.0, 0.0, 0.9, 0.1, 0.8, 0.2, 0.7, 0.3]);
        let labels = [2u32; 4];
        let query = matrix(1, 2, vec![1.0, 0.05]);
        let cfg = KnnConfig::new(4, 0.07).unwrap();
        let post = knn_posteriors(&train, &labels, &query, &cfg).unwrap();
        assert_eq!(post.row(0)[2], 1.0);
        assert_eq!(post.row(0)[0], 0.0);
    }

    /// Brute-force kNN oracle: full sort, explicit exp-weighted votes.
    fn knn_oracle(
        train: &EmbeddingMatrix,
        labels: &[u32],
        query: &[f32],
        k: usize,
        temp: f64,
        num_classes: usize,
    ) -> Vec<f64> {
        let mut sims: Vec<(f64, usize)> = (0..train.rows())
            .map(|i| (cosine(query, train.row(i)), i))
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut votes = vec![0.0f64; num_classes];
        for &(s, i) in sims.iter().take(k) {
            votes[labels[i] as usize] += (s / temp).exp();
        }
        let total: f64 = votes.iter().sum();
        votes.into_iter().map(|v| v / total).collect()
    }

    #[test]
    fn knn_matches_oracle_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.random_range(1..=10);
            let d = rng.random_range(2..6);
            let classes = rng.random_range(1..=4u32);
            let train = matrix(
                n,
                d,
                (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let query = matrix(2, d, (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect());
            let k = rng.random_range(1..=n);
            let cfg = KnnConfig::new(k, 0.07).unwrap();
            let post = knn_posteriors(&train, &labels, &query, &cfg).unwrap();
            let num_classes = labels.iter().copied().max().unwrap() as usize + 1;
            for q in 0..2 {
                let oracle = knn_oracle(&train, &labels, query.row(q), k, 0.07, num_classes);
                for (a, b) in post.row(q).iter().zip(&oracle) {
                    assert!((*a as f64 - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn knn_error_paths() {
        let train = matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let query = matrix(1, 2, vec![1.0, 0.0]);
        let cfg = KnnConfig::new(3, 0.07).unwrap();
        assert!(matches!(
            knn_posteriors(&train, &[0, 1], &query, &cfg),
            Err(EvalError::KTooLarge { .. })
        ));
        let cfg = KnnConfig::default();
        assert!(matches!(
            knn_posteriors(&EmbeddingMatrix::zeros(0, 2), &[], &query, &cfg),
            Err(EvalError::EmptyTrain)
        ));
        assert!(matches!(
            knn_posteriors(&train, &[0], &query, &KnnConfig::new(1, 0.07).unwrap()),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn retrieval_identity_and_orthogonal() {
        let gallery = matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let queries = matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let scores = retrieval_scores(&queries, &gallery).unwrap();
        assert_eq!(argmax_tie_lowest(scores.row(0)), 1);
        assert_eq!(argmax_tie_lowest(scores.row(1)), 0);
        assert_eq!(scores.row(0)[0], 0.0); // orthogonal pair
    }

    #[test]
    fn retrieval_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let queries = matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let gallery = matrix(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect());
        let scores = retrieval_scores(&queries, &gallery).unwrap();
        for q in 0..4 {
            for g in 0..5 {
                let expected = cosine(queries.row(q), gallery.row(g));
                assert!((scores.row(q)[g] as f64 - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn weights_equal_for_identical_heads() {
        let a = matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 1.0]);
        let w = entropy_weights(&[a.clone(), a], &EnsembleConfig::default()).unwrap();
        for row in w {
            assert!((row[0] - 0.5).abs() < 1e-12);
            assert!((row[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_approach_uniform_as_sharpening_vanishes() {
        let a = matrix(1, 3, vec![10.0, 0.0, 0.0]);
        let b = matrix(1, 3, vec![1.0, 1.0, 1.0]);
        let cfg = EnsembleConfig::new(1.0, 1e-9).unwrap();
        let w = entropy_weights(&[a, b], &cfg).unwrap();
        assert!((w[0][0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn confident_head_gets_more_weight() {
        // Head A is nearly one-hot; head B is flat with entropy ln 3.
        let a = matrix(1, 3, vec![10.0, 0.0, 0.0]);
        let b = matrix(1, 3, vec![1.0, 1.0, 1.0]);
        let w = entropy_weights(&[a.clone(), b.clone()], &EnsembleConfig::default()).unwrap();
        assert!(w[0][0] > w[0][1]);

        let h_b = entropy(&softmax(b.row(0), 1.0));
        assert!((h_b - 3.0f64.ln()).abs() < 1e-12);
        let h_a = entropy(&softmax(a.row(0), 1.0));
        // Hand-evaluated weight ratio exp(-(H_a - H_b)).
        let expected = 1.0 / (1.0 + (-(h_b - h_a)).exp());
        assert!((w[0][0] - expected).abs() < 1e-9);
    }

    #[test]
    fn weight_is_monotone_in_sharpening() {
        let a = matrix(1, 3, vec![5.0, 0.0, 0.0]);
        let b = matrix(1, 3, vec![1.0, 1.0, 0.9]);
        let mut last = 0.0;
        for gamma in [0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
            let cfg = EnsembleConfig::new(1.0, gamma).unwrap();
            let w = entropy_weights(&[a.clone(), b.clone()], &cfg).unwrap();
            assert!(w[0][0] > last, "gamma {gamma}: {} not > {last}", w[0][0]);
            last = w[0][0];
        }
    }

    #[test]
    fn ensemble_single_head_is_identity_and_preserves_argmax() {
        let a = matrix(2, 3, vec![0.3, 0.9, 0.1, 0.5, 0.2, 0.4]);
        let heads = [a.clone()];
        let w = entropy_weights(&heads, &EnsembleConfig::new(0.3, 4.0).unwrap()).unwrap();
        let fused = ensemble_scores(&heads, &w).unwrap();
        for q in 0..2 {
            assert_eq!(argmax_tie_lowest(fused.row(q)), argmax_tie_lowest(a.row(q)));
            for (x, y) in fused.row(q).iter().zip(a.row(q)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ensemble_opposite_heads_cancel() {
        let a = matrix(1, 3, vec![1.0, -2.0, 3.0]);
        let b = matrix(1, 3, vec![-1.0, 2.0, -3.0]);
        let w = vec![vec![0.5, 0.5]];
        let fused = ensemble_scores(&[a, b], &w).unwrap();
        assert_eq!(fused.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn ensemble_weighted_sum_elementwise() {
        let a = matrix(1, 2, vec![1.0, 0.0]);
        let b = matrix(1, 2, vec![0.0, 1.0]);
        let fused = ensemble_scores(&[a, b], &[vec![0.7, 0.3]]).unwrap();
        assert!((fused.row(0)[0] - 0.7).abs() < 1e-6);
        assert!((fused.row(0)[1] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn z_normalization_equalizes_head_scales() {
        // Same ranking at wildly different scales: raw fusion is dominated
        // by the large head, z-normed fusion treats them equally.
        let small = matrix(1, 3, vec![0.01, 0.02, 0.03]);
        let large = matrix(1, 3, vec![300.0, 200.0, 100.0]);
        let zs = z_normalize_rows(&small);
        let zl = z_normalize_rows(&large);
        // Unit variance per row after normalization.
        for z in [&zs, &zl] {
            let mean: f64 = z.row(0).iter().map(|&v| v as f64).sum::<f64>() / 3.0;
            let var: f64 =
                z.row(0).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
        // Opposite rankings at equal scale now cancel under equal weights.
        let fused = ensemble_scores(&[zs, zl], &[vec![0.5, 0.5]]).unwrap();
        assert!(fused.row(0).iter().all(|v| v.abs() < 1e-6));

        // Constant rows carry no preference and become zeros.
        let flat = z_normalize_rows(&matrix(1, 3, vec![7.0, 7.0, 7.0]));
        assert_eq!(flat.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn metrics_counting() {
        let scores = matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(top1_accuracy(&scores, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&scores, &[1, 0, 0]).unwrap(), 0.0);
        assert!((top1_accuracy(&scores, &[0, 1, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_1(&scores, &[0, 1, 2]).unwrap(), 1.0);
        assert!(matches!(
            recall_at_1(&scores, &[0, 3, 1]),
            Err(EvalError::IndexOutOfRange { index: 3, cols: 3 })
        ));
        assert!(matches!(
            top1_accuracy(&scores, &[0, 1]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }
}
