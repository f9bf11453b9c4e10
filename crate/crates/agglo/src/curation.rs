//! Hierarchical data curation: seeded k-means (k-means++ initialization,
//! deterministic Lloyd iterations), multi-level centroid hierarchies,
//! out-of-sample assignment, and top-down balanced sampling that flattens
//! long-tailed concept distributions.
//!
//! Determinism contract: the E-step and assignment are data-parallel over
//! fixed-size point chunks with partials merged in chunk order, so results
//! are identical for any thread count; sampling uses one independent RNG
//! stream per leaf.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::numeric::sq_l2_distance;
use crate::types::EmbeddingMatrix;

const CHUNK_POINTS: usize = 4096;

/// Desk-scale default hierarchy, suitable for corpora of a few thousand to a
/// few million points.
pub const DESK_SCALE_LEVEL_KS: [usize; 4] = [1000, 100, 20, 5];

/// Production-scale hierarchy for billion-image corpora (finest to
/// coarsest). Shipped for configuration only; nothing at this scale runs in
/// the test suite.
pub const PRODUCTION_SCALE_LEVEL_KS: [usize; 4] = [20_000_000, 500_000, 50_000, 20_000];

#[derive(Debug, Clone, PartialEq)]
pub enum CurationError {
    KTooLarge { k: usize, rows: usize },
    /// Level sizes must be non-empty, strictly decreasing, and start within
    /// the point count.
    InvalidLevelSizes { reason: String },
    DimMismatch { expected: usize, actual: usize },
    TargetTooLarge { target: usize, available: usize },
    /// Assignment table references a missing leaf.
    InvalidAssignment { index: u32, leaves: usize },
}

impl fmt::Display for CurationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurationError::KTooLarge { k, rows } => {
                write!(f, "k = {k} is invalid for {rows} points")
            }
            CurationError::InvalidLevelSizes { reason } => {
                write!(f, "invalid level sizes: {reason}")
            }
            CurationError::DimMismatch { expected, actual } => {
                write!(f, "dimension mismatch: tree has {expected}, points have {actual}")
            }
            CurationError::TargetTooLarge { target, available } => {
                write!(f, "target {target} exceeds the {available} assigned points")
            }
            CurationError::InvalidAssignment { index, leaves } => {
                write!(f, "assignment references leaf {index} but the tree has {leaves}")
            }
        }
    }
}

impl std::error::Error for CurationError {}

/// k-means output: centroids, per-point assignment, and the inertia trace
/// (one entry per E-step, non-increasing).
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: EmbeddingMatrix,
    pub assignments: Vec<u32>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
}

struct EStep {
    assignments: Vec<u32>,
    min_dists: Vec<f64>,
    inertia: f64,
}

fn e_step(points: &EmbeddingMatrix, centroids: &[Vec<f32>]) -> EStep {
    let d = points.dim();
    let per_chunk: Vec<(Vec<u32>, Vec<f64>, f64)> = points
        .data()
        .par_chunks(CHUNK_POINTS * d)
        .map(|chunk| {
            let mut assign = Vec::with_capacity(chunk.len() / d.max(1));
            let mut dists = Vec::with_capacity(assign.capacity());
            let mut inertia = 0.0f64;
            for row in chunk.chunks_exact(d) {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.iter().enumerate() {
                    let dist = sq_l2_distance(row, centroid);
                    if dist < best_d {
                        best_d = dist;
                        best = c;
                    }
                }
                assign.push(best as u32);
                dists.push(best_d);
                inertia += best_d;
            }
            (assign, dists, inertia)
        })
        .collect();

    let mut assignments = Vec::with_capacity(points.rows());
    let mut min_dists = Vec::with_capacity(points.rows());
    let mut inertia = 0.0f64;
    for (a, dists, partial) in per_chunk {
        assignments.extend(a);
        min_dists.extend(dists);
        inertia += partial;
    }
    EStep { assignments, min_dists, inertia }
}

fn m_step(points: &EmbeddingMatrix, step: &EStep, k: usize, centroids: &mut [Vec<f32>]) {
    let d = points.dim();
    let per_chunk: Vec<(Vec<f64>, Vec<usize>)> = points
        .data()
        .par_chunks(CHUNK_POINTS * d)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let mut sums = vec![0.0f64; k * d];
            let mut counts = vec![0usize; k];
            let base = chunk_idx * CHUNK_POINTS;
            for (offset, row) in chunk.chunks_exact(d).enumerate() {
                let c = step.assignments[base + offset] as usize;
                counts[c] += 1;
                for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                    *s += v as f64;
                }
            }
            (sums, counts)
        })
        .collect();

    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (s, c) in per_chunk {
        for (dst, v) in sums.iter_mut().zip(s) {
            *dst += v;
        }
        for (dst, v) in counts.iter_mut().zip(c) {
            *dst += v;
        }
    }

    let mut empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        for (slot, &s) in centroids[c].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
            *slot = (s / counts[c] as f64) as f32;
        }
    }

    if !empties.is_empty() {
        // Reseed each empty cluster with a distinct point, farthest from its
        // assigned centroid first (index breaks ties).
        let mut order: Vec<usize> = (0..points.rows()).collect();
        order.sort_by(|&a, &b| {
            step.min_dists[b].partial_cmp(&step.min_dists[a]).unwrap().then(a.cmp(&b))
        });
        empties.sort_unstable();
        for (empty, &point) in empties.iter().zip(order.iter()) {
            centroids[*empty].copy_from_slice(points.row(point));
        }
    }
}

fn kmeans_plus_plus_init(
    points: &EmbeddingMatrix,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f32>> {
    let rows = points.rows();
    let mut chosen_flags = vec![false; rows];
    let first = rng.random_range(0..rows);
    chosen_flags[first] = true;
    let mut centroids = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> =
        (0..rows).map(|i| sq_l2_distance(points.row(i), points.row(first))).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = rows - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc >= r {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining mass is on already-chosen points (duplicates);
            // take the lowest unchosen index.
            (0..rows).find(|&i| !chosen_flags[i]).expect("k <= rows leaves a free point")
        };
        chosen_flags[next] = true;
        let row = points.row(next).to_vec();
        for i in 0..rows {
            let dist = sq_l2_distance(points.row(i), &row);
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
        centroids.push(row);
    }
    centroids
}

/// Lloyd's k-means with seeded k-means++ initialization.
///
/// Runs until assignments stabilize or `max_iters` centroid updates. The
/// returned centroids, assignments, and inertia are mutually consistent, and
/// the inertia history is checked non-increasing.
pub fn kmeans(
    points: &EmbeddingMatrix,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KmeansResult, CurationError> {
    let rows = points.rows();
    if k == 0 || k > rows {
        return Err(CurationError::KTooLarge { k, rows });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus_init(points, k, &mut rng);

    let mut step = e_step(points, &centroids);
    let mut history = vec![step.inertia];
    for _ in 0..max_iters {
        m_step(points, &step, k, &mut centroids);
        let next = e_step(points, &centroids);
        history.push(next.inertia);
        let converged = next.assignments == step.assignments;
        step = next;
        if converged {
            break;
        }
    }

    for pair in history.windows(2) {
        debug_assert!(
            pair[1] <= pair[0] + 1e-9 * pair[0].abs().max(1.0),
            "inertia increased: {} -> {}",
            pair[0],
            pair[1]
        );
    }

    let dim = points.dim();
    let flat: Vec<f32> = centroids.concat();
    Ok(KmeansResult {
        centroids: EmbeddingMatrix::new(k, dim, flat).expect("centroids of finite points"),
        assignments: step.assignments,
        inertia: step.inertia,
        inertia_history: history,
    })
}

/// One hierarchy level: centroids plus the parent index of each centroid in
/// the next-coarser level (empty for the top level).
#[derive(Debug, Clone)]
pub struct ClusterLevel {
    pub centroids: EmbeddingMatrix,
    pub parent_of: Vec<u32>,
}

/// Multi-level centroid hierarchy; `levels[0]` is the finest.
#[derive(Debug, Clone)]
pub struct ClusterTree {
    levels: Vec<ClusterLevel>,
    level_sizes: Vec<usize>,
}

impl ClusterTree {
    pub fn levels(&self) -> &[ClusterLevel] {
        &self.levels
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn num_leaves(&self) -> usize {
        self.level_sizes[0]
    }

    pub fn dim(&self) -> usize {
        self.levels[0].centroids.dim()
    }
}

/// Builds the hierarchy: level 1 clusters the points, each subsequent level
/// clusters the previous level's centroids. Parent maps come from the
/// nearest-centroid assignments of each upper-level fit.
pub fn build_hierarchy(
    points: &EmbeddingMatrix,
    level_ks: &[usize],
    max_iters: usize,
    seed: u64,
) -> Result<ClusterTree, CurationError> {
    if level_ks.is_empty() {
        return Err(CurationError::InvalidLevelSizes { reason: "no levels given".into() });
    }
    if level_ks.iter().any(|&k| k == 0) {
        return Err(CurationError::InvalidLevelSizes { reason: "level size of zero".into() });
    }
    if level_ks.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CurationError::InvalidLevelSizes {
            reason: format!("sizes must be strictly decreasing, got {level_ks:?}"),
        });
    }
    if level_ks[0] > points.rows() {
        return Err(CurationError::KTooLarge { k: level_ks[0], rows: points.rows() });
    }

    let mut levels: Vec<ClusterLevel> = Vec::with_capacity(level_ks.len());
    let mut current = kmeans(points, level_ks[0], max_iters, seed)?;
    for (idx, &k) in level_ks.iter().enumerate().skip(1) {
        let upper = kmeans(&current.centroids, k, max_iters, seed.wrapping_add(idx as u64))?;
        levels.push(ClusterLevel {
            centroids: current.centroids,
            parent_of: upper.assignments.clone(),
        });
        current = upper;
    }
    levels.push(ClusterLevel { centroids: current.centroids, parent_of: Vec::new() });
    Ok(ClusterTree { levels, level_sizes: level_ks.to_vec() })
}

/// Point-row to level-1 centroid mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentTable {
    assignments: Vec<u32>,
}

impl AssignmentTable {
    pub fn new(assignments: Vec<u32>, num_leaves: usize) -> Result<Self, CurationError> {
        if let Some(&bad) = assignments.iter().find(|&&a| a as usize >= num_leaves) {
            return Err(CurationError::InvalidAssignment { index: bad, leaves: num_leaves });
        }
        Ok(Self { assignments })
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// Assigns each point to its nearest level-1 centroid (ties to the lowest
/// index).
pub fn assign(points: &EmbeddingMatrix, tree: &ClusterTree) -> Result<AssignmentTable, CurationError> {
    if points.dim() != tree.dim() {
        return Err(CurationError::DimMismatch { expected: tree.dim(), actual: points.dim() });
    }
    let leaves = &tree.levels[0].centroids;
    let d = points.dim();
    let assignments: Vec<u32> = points
        .data()
        .par_chunks(CHUNK_POINTS * d.max(1))
        .flat_map_iter(|chunk| {
            chunk.chunks_exact(d).map(|row| {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in leaves.iter_rows().enumerate() {
                    let dist = sq_l2_distance(row, centroid);
                    if dist < best_d {
                        best_d = dist;
                        best = c;
                    }
                }
                best as u32
            })
        })
        .collect();
    AssignmentTable::new(assignments, tree.num_leaves())
}

/// Splits `quota` across nodes as evenly as possible without exceeding
/// capacities (integer waterfilling): saturated nodes take their capacity,
/// everyone else sits at a common level, and the remainder goes round-robin
/// by node index. Unsaturated allocations never differ by more than one.
fn allocate_among(quota: usize, capacities: &[usize]) -> Vec<usize> {
    debug_assert!(quota <= capacities.iter().sum::<usize>());
    let filled = |level: usize| -> usize {
        capacities.iter().map(|&c| c.min(level)).sum()
    };
    // Largest level whose waterfill fits within the quota.
    let mut lo = 0usize;
    let mut hi = *capacities.iter().max().unwrap_or(&0);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if filled(mid) <= quota {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let level = lo;
    let mut alloc: Vec<usize> = capacities.iter().map(|&c| c.min(level)).collect();
    let mut leftover = quota - alloc.iter().sum::<usize>();
    for (a, &c) in alloc.iter_mut().zip(capacities) {
        if leftover == 0 {
            break;
        }
        if c > level {
            *a += 1;
            leftover -= 1;
        }
    }
    debug_assert_eq!(leftover, 0);
    alloc
}

/// Draws a balanced sample of exactly `target_n` point rows.
///
/// The target is split uniformly across top-level nodes, then recursively
/// uniformly across children; quotas a subtree cannot absorb are
/// redistributed among its unsaturated siblings. Leaf-level points are drawn
/// uniformly without replacement with a per-leaf RNG stream, so the result
/// is deterministic for a given seed.
pub fn hierarchical_sample(
    tree: &ClusterTree,
    table: &AssignmentTable,
    target_n: usize,
    seed: u64,
) -> Result<Vec<usize>, CurationError> {
    let total = table.len();
    if target_n > total {
        return Err(CurationError::TargetTooLarge { target: target_n, available: total });
    }

    let num_leaves = tree.num_leaves();
    let mut leaf_points: Vec<Vec<u32>> = vec![Vec::new(); num_leaves];
    for (row, &leaf) in table.assignments().iter().enumerate() {
        if leaf as usize >= num_leaves {
            return Err(CurationError::InvalidAssignment { index: leaf, leaves: num_leaves });
        }
        leaf_points[leaf as usize].push(row as u32);
    }

    // children[l][node] lists that node's children at level l-1; capacities
    // accumulate bottom-up.
    let num_levels = tree.levels.len();
    let mut children: Vec<Vec<Vec<usize>>> = Vec::with_capacity(num_levels);
    children.push(Vec::new()); // leaves have no children
    for l in 1..num_levels {
        let mut lists = vec![Vec::new(); tree.level_sizes[l]];
        for (child, &parent) in tree.levels[l - 1].parent_of.iter().enumerate() {
            lists[parent as usize].push(child);
        }
        children.push(lists);
    }
    let mut capacity: Vec<Vec<usize>> = Vec::with_capacity(num_levels);
    capacity.push(leaf_points.iter().map(Vec::len).collect());
    for l in 1..num_levels {
        let caps = children[l]
            .iter()
            .map(|kids| kids.iter().map(|&c| capacity[l - 1][c]).sum())
            .collect();
        capacity.push(caps);
    }

    let mut out: Vec<usize> = Vec::with_capacity(target_n);
    let top = num_levels - 1;
    let top_alloc = allocate_among(target_n, &capacity[top]);
    let mut stack: Vec<(usize, usize, usize)> = Vec::new(); // (level, node, quota)
    for (node, &q) in top_alloc.iter().enumerate().rev() {
        stack.push((top, node, q));
    }
    while let Some((level, node, quota)) = stack.pop() {
        if quota == 0 {
            continue;
        }
        if level == 0 {
            draw_from_leaf(&leaf_points[node], node, quota, seed, &mut out);
            continue;
        }
        let kids = &children[level][node];
        let caps: Vec<usize> = kids.iter().map(|&c| capacity[level - 1][c]).collect();
        let allocs = allocate_among(quota, &caps);
        for (pos, &child) in kids.iter().enumerate().rev() {
            stack.push((level - 1, child, allocs[pos]));
        }
    }
    Ok(out)
}

fn draw_from_leaf(points: &[u32], leaf: usize, quota: usize, seed: u64, out: &mut Vec<usize>) {
    debug_assert!(quota <= points.len());
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (leaf as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut pool: Vec<u32> = points.to_vec();
    // Partial Fisher-Yates; selected ids are emitted in ascending order.
    for i in 0..quota {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut selected: Vec<u32> = pool[..quota].to_vec();
    selected.sort_unstable();
    out.extend(selected.into_iter().map(|p| p as usize));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob_points(centers: &[(f32, f32)], per_blob: usize, spread: f32, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for &(cx, cy) in centers {
            for _ in 0..per_blob {
                data.push(cx + rng.random_range(-spread..spread));
                data.push(cy + rng.random_range(-spread..spread));
            }
        }
        EmbeddingMatrix::new(centers.len() * per_blob, 2, data).unwrap()
    }

    #[test]
    fn kmeans_k_equals_rows_reaches_zero_inertia() {
        let points = EmbeddingMatrix::new(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 5.0, 5.0]).unwrap();
        let r = kmeans(&points, 4, 20, 1).unwrap();
        assert!(r.inertia < 1e-12);
        let mut seen: Vec<u32> = r.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn kmeans_k1_is_global_mean() {
        let points = EmbeddingMatrix::new(3, 2, vec![0.0, 0.0, 3.0, 0.0, 0.0, 3.0]).unwrap();
        let r = kmeans(&points, 1, 10, 0).unwrap();
        assert!((r.centroids.row(0)[0] - 1.0).abs() < 1e-6);
        assert!((r.centroids.row(0)[1] - 1.0).abs() < 1e-6);
    }

    /// Exhaustive 2-partition oracle: minimum within-cluster SSE over every
    /// non-trivial bipartition.
    fn best_two_partition_sse(points: &EmbeddingMatrix) -> f64 {
        let n = points.rows();
        let d = points.dim();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut sums = [vec![0.0f64; d], vec![0.0f64; d]];
            let mut counts = [0usize; 2];
            for i in 0..n {
                let side = ((mask >> i) & 1) as usize;
                counts[side] += 1;
                for (s, &v) in sums[side].iter_mut().zip(points.row(i)) {
                    *s += v as f64;
                }
            }
            let mut sse = 0.0;
            for i in 0..n {
                let side = ((mask >> i) & 1) as usize;
                for (c, &v) in sums[side].iter().zip(points.row(i)) {
                    let diff = v as f64 - c / counts[side] as f64;
                    sse += diff * diff;
                }
            }
            best = best.min(sse);
        }
        best
    }

    #[test]
    fn kmeans_two_blobs_matches_exhaustive_oracle() {
        let points = blob_points(&[(0.0, 0.0), (10.0, 10.0)], 5, 0.5, 3);
        let r = kmeans(&points, 2, 50, 7).unwrap();
        let oracle = best_two_partition_sse(&points);
        assert!(
            (r.inertia - oracle).abs() < 1e-6 * oracle.max(1.0),
            "kmeans {} vs oracle {}",
            r.inertia,
            oracle
        );
        // Centroids sit at the blob means.
        let mut cents: Vec<(f32, f32)> =
            r.centroids.iter_rows().map(|c| (c[0], c[1])).collect();
        cents.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        assert!((cents[0].0 - 0.0).abs() < 0.5 && (cents[1].0 - 10.0).abs() < 0.5);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let points = EmbeddingMatrix::zeros(3, 2);
        assert!(matches!(kmeans(&points, 4, 5, 0), Err(CurationError::KTooLarge { .. })));
        assert!(matches!(kmeans(&points, 0, 5, 0), Err(CurationError::KTooLarge { .. })));
    }

    #[test]
    fn kmeans_is_deterministic_and_inertia_monotone() {
        let points = blob_points(&[(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)], 30, 1.0, 11);
        let a = kmeans(&points, 3, 40, 5).unwrap();
        let b = kmeans(&points, 3, 40, 5).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());
        for w in a.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
        }
    }

    #[test]
    fn hierarchy_four_pairs_under_two_parents() {
        // 8 points in 4 tight pairs; pairs 0/1 sit far from pairs 2/3.
        let points = EmbeddingMatrix::new(
            8,
            2,
            vec![
                0.0, 0.0, 0.1, 0.0, // pair A
                2.0, 0.0, 2.1, 0.0, // pair B
                20.0, 0.0, 20.1, 0.0, // pair C
                22.0, 0.0, 22.1, 0.0, // pair D
            ],
        )
        .unwrap();
        let tree = build_hierarchy(&points, &[4, 2], 50, 2).unwrap();
        assert_eq!(tree.level_sizes(), &[4, 2]);
        assert_eq!(tree.levels()[0].parent_of.len(), 4);
        // The two leaves near x=0..2 share a parent, likewise near x=20..22.
        let leaf_x: Vec<f32> =
            tree.levels()[0].centroids.iter_rows().map(|c| c[0]).collect();
        let parents = &tree.levels()[0].parent_of;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let close = (leaf_x[i] - leaf_x[j]).abs() < 5.0;
                assert_eq!(parents[i] == parents[j], close, "leaves {i} and {j}");
            }
        }
    }

    #[test]
    fn hierarchy_single_level_and_bad_sizes() {
        let points = blob_points(&[(0.0, 0.0)], 10, 1.0, 1);
        let tree = build_hierarchy(&points, &[10], 10, 0).unwrap();
        assert_eq!(tree.levels().len(), 1);
        assert!(tree.levels()[0].parent_of.is_empty());

        assert!(matches!(
            build_hierarchy(&points, &[2, 4], 10, 0),
            Err(CurationError::InvalidLevelSizes { .. })
        ));
        assert!(matches!(
            build_hierarchy(&points, &[], 10, 0),
            Err(CurationError::InvalidLevelSizes { .. })
        ));
    }

    #[test]
    fn assign_matches_linear_scan_oracle() {
        let points = blob_points(&[(0.0, 0.0), (8.0, 8.0)], 20, 2.0, 13);
        let tree = build_hierarchy(&points, &[6, 2], 30, 4).unwrap();
        let queries = blob_points(&[(1.0, 1.0), (7.0, 7.0)], 15, 3.0, 14);
        let table = assign(&queries, &tree).unwrap();
        let leaves = &tree.levels()[0].centroids;
        for (i, &got) in table.assignments().iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..leaves.rows() {
                let dist = sq_l2_distance(queries.row(i), leaves.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assert_eq!(got as usize, best);
        }
    }

    #[test]
    fn assign_exact_point_and_tie_rule() {
        let points = EmbeddingMatrix::new(4, 1, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let tree = build_hierarchy(&points, &[4, 2], 20, 0).unwrap();
        let leaves = &tree.levels()[0].centroids;
        // A query exactly on centroid 3's position maps there.
        let probe = EmbeddingMatrix::new(1, 1, vec![leaves.row(3)[0]]).unwrap();
        assert_eq!(assign(&probe, &tree).unwrap().assignments()[0], 3);
        // Equidistant between two centroids: lowest index wins.
        let mut xs: Vec<f32> = leaves.iter_rows().map(|r| r[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = EmbeddingMatrix::new(1, 1, vec![(xs[0] + xs[1]) / 2.0]).unwrap();
        let got = assign(&mid, &tree).unwrap().assignments()[0];
        let d0 = sq_l2_distance(mid.row(0), leaves.row(got as usize));
        for c in 0..leaves.rows() {
            let dc = sq_l2_distance(mid.row(0), leaves.row(c));
            assert!(d0 < dc || (d0 == dc && got as usize <= c));
        }
    }

    #[test]
    fn assign_dim_mismatch() {
        let points = blob_points(&[(0.0, 0.0)], 10, 1.0, 1);
        let tree = build_hierarchy(&points, &[3], 10, 0).unwrap();
        let wrong = EmbeddingMatrix::zeros(2, 3);
        assert!(matches!(assign(&wrong, &tree), Err(CurationError::DimMismatch { .. })));
    }

    fn single_level_tree(leaf_positions: &[f32]) -> ClusterTree {
        let centroids = EmbeddingMatrix::new(
            leaf_positions.len(),
            1,
            leaf_positions.to_vec(),
        )
        .unwrap();
        ClusterTree {
            levels: vec![ClusterLevel { centroids, parent_of: Vec::new() }],
            level_sizes: vec![leaf_positions.len()],
        }
    }

    fn table_with_leaf_sizes(sizes: &[usize]) -> AssignmentTable {
        let mut assignments = Vec::new();
        for (leaf, &count) in sizes.iter().enumerate() {
            assignments.extend(std::iter::repeat_n(leaf as u32, count));
        }
        AssignmentTable::new(assignments, sizes.len()).unwrap()
    }

    #[test]
    fn sampling_quota_split_and_redistribution() {
        let tree = single_level_tree(&[0.0, 1.0]);

        // 90 / 10 points, target 10 -> 5 from each leaf.
        let table = table_with_leaf_sizes(&[90, 10]);
        let sample = hierarchical_sample(&tree, &table, 10, 0).unwrap();
        assert_eq!(sample.len(), 10);
        let in_small = sample.iter().filter(|&&p| p >= 90).count();
        assert_eq!(in_small, 5);

        // 90 / 3 points, target 10 -> small leaf saturates at 3, big gets 7.
        let table = table_with_leaf_sizes(&[90, 3]);
        let sample = hierarchical_sample(&tree, &table, 10, 0).unwrap();
        assert_eq!(sample.len(), 10);
        let in_small = sample.iter().filter(|&&p| p >= 90).count();
        assert_eq!(in_small, 3);
    }

    #[test]
    fn sampling_full_target_returns_everything() {
        let tree = single_level_tree(&[0.0, 1.0, 2.0]);
        let table = table_with_leaf_sizes(&[4, 2, 3]);
        let mut sample = hierarchical_sample(&tree, &table, 9, 7).unwrap();
        sample.sort_unstable();
        assert_eq!(sample, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn sampling_has_no_duplicates_and_exact_size() {
        let tree = single_level_tree(&[0.0, 1.0, 2.0, 3.0]);
        let table = table_with_leaf_sizes(&[50, 7, 120, 23]);
        let sample = hierarchical_sample(&tree, &table, 60, 99).unwrap();
        assert_eq!(sample.len(), 60);
        let mut unique = sample.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 60);

        assert!(matches!(
            hierarchical_sample(&tree, &table, 1000, 0),
            Err(CurationError::TargetTooLarge { .. })
        ));
    }

    #[test]
    fn sampling_flattens_zipf_leaf_sizes() {
        // Leaf sizes proportional to i^-1.5 over 10 leaves, 10k points total.
        let weights: Vec<f64> = (1..=10).map(|i| (i as f64).powf(-1.5)).collect();
        let total_w: f64 = weights.iter().sum();
        let mut sizes: Vec<usize> =
            weights.iter().map(|w| (w / total_w * 10_000.0).round() as usize).collect();
        let correction = 10_000usize as i64 - sizes.iter().sum::<usize>() as i64;
        sizes[0] = (sizes[0] as i64 + correction) as usize;

        let tree = single_level_tree(&(0..10).map(|i| i as f32).collect::<Vec<_>>());
        let table = table_with_leaf_sizes(&sizes);
        let sample = hierarchical_sample(&tree, &table, 1000, 5).unwrap();

        let mut per_leaf = vec![0usize; 10];
        for &p in &sample {
            per_leaf[table.assignments()[p] as usize] += 1;
        }
        let max = *per_leaf.iter().max().unwrap() as f64;
        let min = *per_leaf.iter().min().unwrap() as f64;
        assert!(max / min <= 2.0, "curated ratio {}", max / min);

        // Uniform-random sampling of the same size follows the skew.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pool: Vec<usize> = (0..10_000).collect();
        for i in 0..1000 {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut random_per_leaf = vec![0usize; 10];
        for &p in &pool[..1000] {
            random_per_leaf[table.assignments()[p] as usize] += 1;
        }
        let rmax = *random_per_leaf.iter().max().unwrap() as f64;
        let rmin = (*random_per_leaf.iter().min().unwrap()).max(1) as f64;
        assert!(rmax / rmin >= 5.0, "random ratio {}", rmax / rmin);
    }

    #[test]
    fn sampling_redistributes_across_subtrees() {
        // Two top-level nodes: the left subtree holds 6 points across two
        // leaves, the right 94 across two leaves. A target of 50 wants 25
        // from each side; the left can only give 6, so 44 route right.
        let centroids =
            EmbeddingMatrix::new(4, 1, vec![0.0, 1.0, 100.0, 101.0]).unwrap();
        let tree = ClusterTree {
            levels: vec![
                ClusterLevel { centroids, parent_of: vec![0, 0, 1, 1] },
                ClusterLevel {
                    centroids: EmbeddingMatrix::new(2, 1, vec![0.5, 100.5]).unwrap(),
                    parent_of: Vec::new(),
                },
            ],
            level_sizes: vec![4, 2],
        };
        let table = table_with_leaf_sizes(&[2, 4, 60, 34]);
        let sample = hierarchical_sample(&tree, &table, 50, 3).unwrap();
        assert_eq!(sample.len(), 50);
        let mut per_leaf = [0usize; 4];
        for &p in &sample {
            per_leaf[table.assignments()[p] as usize] += 1;
        }
        // Left subtree saturates completely; the right side splits its 44
        // evenly until the smaller leaf caps.
        assert_eq!(&per_leaf[..2], &[2, 4]);
        assert_eq!(per_leaf[2] + per_leaf[3], 44);
        assert_eq!(per_leaf[3], 22);
    }

    #[test]
    fn sampling_is_deterministic() {
        let tree = single_level_tree(&[0.0, 1.0, 2.0]);
        let table = table_with_leaf_sizes(&[40, 25, 35]);
        let a = hierarchical_sample(&tree, &table, 30, 17).unwrap();
        let b = hierarchical_sample(&tree, &table, 30, 17).unwrap();
        assert_eq!(a, b);
        let c = hierarchical_sample(&tree, &table, 30, 18).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn allocate_among_respects_capacities() {
        assert_eq!(allocate_among(10, &[90, 10]), vec![5, 5]);
        assert_eq!(allocate_among(10, &[90, 3]), vec![7, 3]);
        assert_eq!(allocate_among(7, &[3, 3, 3]), vec![3, 2, 2]);
        assert_eq!(allocate_among(0, &[5, 5]), vec![0, 0]);
        // Saturation routes overflow without starving anyone: the two big
        // nodes stay within one unit of each other.
        assert_eq!(allocate_among(21, &[100, 100, 1, 100]), vec![7, 7, 1, 6]);
    }

    #[test]
    fn allocate_among_is_max_min_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..300 {
            let n = rng.random_range(1..12);
            let caps: Vec<usize> = (0..n).map(|_| rng.random_range(0..40)).collect();
            let total: usize = caps.iter().sum();
            let quota = rng.random_range(0..=total);
            let alloc = allocate_among(quota, &caps);
            assert_eq!(alloc.iter().sum::<usize>(), quota);
            for (a, c) in alloc.iter().zip(&caps) {
                assert!(a <= c);
            }
            // No unit can move from a richer node to a poorer unsaturated one.
            for i in 0..n {
                for j in 0..n {
                    if alloc[i] > alloc[j] + 1 {
                        assert_eq!(alloc[j], caps[j], "unfair split {alloc:?} for caps {caps:?}");
                    }
                }
            }
        }
    }
}
