//! Token-balanced batching: pack variable-resolution images into sequences
//! with a fixed token budget, emit segment-id attention masks, balance the
//! packed sequences across ranks, and plan multi-resolution data blends.
//!
//! Packing uses first-fit decreasing on per-image token counts (prepended
//! CLS/register tokens included), followed by a seeded shuffle of the
//! resulting sequences. Rank partitioning is longest-processing-time greedy
//! on used tokens, which bounds the max-min rank load gap by the largest
//! single sequence.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::ImageTokenRecord;

#[derive(Debug, Clone, PartialEq)]
pub enum PackError {
    /// A single image (plus its extra tokens) exceeds the sequence budget.
    ImageTooLarge { id: String, tokens: usize, c_max: usize },
    /// Invalid packer configuration.
    InvalidConfig { reason: &'static str },
    /// A blend pool has no images after resolution filtering.
    EmptyPool { pool_index: usize },
    /// Blend target weights must be positive and sum to 1.
    InvalidWeights { sum: f64 },
}

impl fmt::Display for PackError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PackError::ImageTooLarge { id, tokens, c_max } => write!(
                f,
                "image '{id}' needs {tokens} tokens which exceeds the budget c_max={c_max}"
            ),
            PackError::InvalidConfig { reason } => write!(f, "invalid packer config: {reason}"),
            PackError::EmptyPool { pool_index } => {
                write!(f, "blend pool {pool_index} is empty")
            }
            PackError::InvalidWeights { sum } => {
                write!(f, "blend weights must be positive and sum to 1 (got sum {sum})")
            }
        }
    }
}

impl std::error::Error for PackError {}

/// Sequence-budget configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackerConfig {
    /// Maximum tokens per packed sequence.
    pub c_max: usize,
    /// Tokens prepended per image (CLS + registers); they count against the
    /// budget because the student consumes them in-sequence.
    pub extra_tokens_per_image: usize,
    /// Cap on images per sequence.
    pub max_images_per_sequence: usize,
}

impl PackerConfig {
    pub fn new(
        c_max: usize,
        extra_tokens_per_image: usize,
        max_images_per_sequence: usize,
    ) -> Result<Self, PackError> {
        if c_max == 0 {
            return Err(PackError::InvalidConfig { reason: "c_max must be positive" });
        }
        if max_images_per_sequence == 0 {
            return Err(PackError::InvalidConfig {
                reason: "max_images_per_sequence must be at least 1",
            });
        }
        Ok(Self { c_max, extra_tokens_per_image, max_images_per_sequence })
    }
}

impl Default for PackerConfig {
    /// 2600-token budget, 1 CLS + 4 registers per image, 16 images max.
    fn default() -> Self {
        Self { c_max: 2600, extra_tokens_per_image: 5, max_images_per_sequence: 16 }
    }
}

/// One image's span inside a packed sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackEntry {
    pub image_id: String,
    pub token_offset: usize,
    /// Token length including the per-image extra tokens.
    pub token_length: usize,
}

/// Images assigned to one token-budgeted sequence. Spans are contiguous,
/// non-overlapping, and start at offset 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub entries: Vec<PackEntry>,
    pub used_tokens: usize,
}

impl PackedSequence {
    pub fn num_images(&self) -> usize {
        self.entries.len()
    }
}

/// Complete assignment of an image set to sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingPlan {
    pub sequences: Vec<PackedSequence>,
    /// Image ids the planner could not place. `plan_packing` fails instead of
    /// leaving images behind, so this is empty on success.
    pub unassigned: Vec<String>,
}

impl PackingPlan {
    pub fn total_images(&self) -> usize {
        self.sequences.iter().map(PackedSequence::num_images).sum()
    }

    pub fn total_used_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.used_tokens).sum()
    }
}

/// Per-token segment labels for one sequence: ids 1..=n mark the n packed
/// images, 0 is reserved for padding. Attention is allowed exactly between
/// tokens sharing a nonzero segment id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMask {
    segment_ids: Vec<u32>,
}

impl SegmentMask {
    pub fn segment_ids(&self) -> &[u32] {
        &self.segment_ids
    }

    /// Whether token `i` may attend to token `j`.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.segment_ids[i] != 0 && self.segment_ids[i] == self.segment_ids[j]
    }

    /// Dense boolean mask, mostly useful in tests.
    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let n = self.segment_ids.len();
        (0..n).map(|i| (0..n).map(|j| self.allows(i, j)).collect()).collect()
    }
}

/// Sequences distributed over ranks, with the global image count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalBatchView {
    per_rank_sequences: Vec<Vec<PackedSequence>>,
    b_global: usize,
}

impl GlobalBatchView {
    pub fn new(per_rank_sequences: Vec<Vec<PackedSequence>>) -> Self {
        let b_global = per_rank_sequences
            .iter()
            .flat_map(|seqs| seqs.iter())
            .map(PackedSequence::num_images)
            .sum();
        Self { per_rank_sequences, b_global }
    }

    pub fn per_rank_sequences(&self) -> &[Vec<PackedSequence>] {
        &self.per_rank_sequences
    }

    /// Total image count across all ranks and sequences.
    pub fn b_global(&self) -> usize {
        self.b_global
    }

    pub fn rank_token_loads(&self) -> Vec<usize> {
        self.per_rank_sequences
            .iter()
            .map(|seqs| seqs.iter().map(|s| s.used_tokens).sum())
            .collect()
    }
}

/// Padding accounting for a plan under a given budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaddingStats {
    pub padding_fraction: f64,
    /// Denominator: sequences x c_max.
    pub tokens_total: usize,
    pub tokens_padded: usize,
}

/// Packs images into token-budgeted sequences.
///
/// First-fit decreasing over `num_tokens + extra_tokens_per_image`, then a
/// seeded shuffle of the sequence order. Deterministic for a fixed input
/// order and seed. Never produces more sequences than images, so the padding
/// fraction is at most that of one-image-per-sequence batching.
pub fn plan_packing(
    images: &[ImageTokenRecord],
    cfg: &PackerConfig,
    seed: u64,
) -> Result<PackingPlan, PackError> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    let effective = |i: usize| images[i].num_tokens() as usize + cfg.extra_tokens_per_image;
    for (i, img) in images.iter().enumerate() {
        if effective(i) > cfg.c_max {
            return Err(PackError::ImageTooLarge {
                id: img.id.clone(),
                tokens: effective(i),
                c_max: cfg.c_max,
            });
        }
    }
    // Decreasing token count; stable on the original order for ties.
    order.sort_by(|&a, &b| effective(b).cmp(&effective(a)).then(a.cmp(&b)));

    struct Bin {
        used: usize,
        members: Vec<usize>,
    }
    let mut bins: Vec<Bin> = Vec::new();
    for &idx in &order {
        let need = effective(idx);
        let slot = bins.iter_mut().find(|b| {
            b.used + need <= cfg.c_max && b.members.len() < cfg.max_images_per_sequence
        });
        match slot {
            Some(bin) => {
                bin.used += need;
                bin.members.push(idx);
            }
            None => bins.push(Bin { used: need, members: vec![idx] }),
        }
    }

    let mut sequences: Vec<PackedSequence> = bins
        .into_iter()
        .map(|bin| {
            let mut offset = 0;
            let entries = bin
                .members
                .into_iter()
                .map(|idx| {
                    let len = effective(idx);
                    let entry = PackEntry {
                        image_id: images[idx].id.clone(),
                        token_offset: offset,
                        token_length: len,
                    };
                    offset += len;
                    entry
                })
                .collect();
            PackedSequence { entries, used_tokens: bin.used }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sequences.shuffle(&mut rng);

    Ok(PackingPlan { sequences, unassigned: Vec::new() })
}

/// Length-`c_max` segment-id vector for one sequence.
pub fn build_segment_mask(seq: &PackedSequence, c_max: usize) -> SegmentMask {
    debug_assert!(seq.used_tokens <= c_max);
    let mut segment_ids = vec![0u32; c_max];
    for (image_idx, entry) in seq.entries.iter().enumerate() {
        let id = image_idx as u32 + 1;
        for slot in &mut segment_ids[entry.token_offset..entry.token_offset + entry.token_length] {
            *slot = id;
        }
    }
    SegmentMask { segment_ids }
}

/// Distributes sequences over ranks, longest first onto the least-loaded
/// rank. The resulting max-min token-load gap never exceeds the largest
/// single-sequence token count.
pub fn partition_across_ranks(plan: &PackingPlan, num_ranks: usize) -> GlobalBatchView {
    assert!(num_ranks >= 1, "num_ranks must be at least 1");
    let mut order: Vec<usize> = (0..plan.sequences.len()).collect();
    order.sort_by(|&a, &b| {
        plan.sequences[b]
            .used_tokens
            .cmp(&plan.sequences[a].used_tokens)
            .then(a.cmp(&b))
    });

    let mut loads = vec![0usize; num_ranks];
    let mut per_rank: Vec<Vec<PackedSequence>> = vec![Vec::new(); num_ranks];
    for idx in order {
        let rank = (0..num_ranks).min_by_key(|&r| (loads[r], r)).unwrap();
        loads[rank] += plan.sequences[idx].used_tokens;
        per_rank[rank].push(plan.sequences[idx].clone());
    }
    GlobalBatchView::new(per_rank)
}

/// Padding fraction relative to `sequences x c_max`; an empty plan reports 0.
pub fn padding_stats(plan: &PackingPlan, cfg: &PackerConfig) -> PaddingStats {
    let tokens_total = plan.sequences.len() * cfg.c_max;
    let tokens_padded = tokens_total - plan.total_used_tokens();
    let padding_fraction =
        if tokens_total == 0 { 0.0 } else { tokens_padded as f64 / tokens_total as f64 };
    PaddingStats { padding_fraction, tokens_total, tokens_padded }
}

/// One manifest row: JSON Lines objects `{"id", "width", "height"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageManifestEntry {
    pub id: String,
    pub width: u32,
    pub height: u32,
}

impl ImageManifestEntry {
    /// Longest pixel side, used for resolution filtering and capping.
    pub fn native_resolution(&self) -> u32 {
        self.width.max(self.height)
    }
}

/// A source pool for multi-resolution blending.
#[derive(Debug, Clone)]
pub struct BlendPool {
    pub images: Vec<ImageManifestEntry>,
    /// Inclusive native-resolution filter on the longest side, in pixels.
    pub native_resolution_range: (u32, u32),
}

/// A target resolution cap with its share of the blended manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendTarget {
    pub resolution_cap: u32,
    pub weight: f64,
}

/// A blended-manifest row: train this image capped at this resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlendAssignment {
    pub id: String,
    pub target_resolution: u32,
}

/// Plans a multi-resolution blend over image pools.
///
/// Pools are filtered to their native-resolution range and concatenated;
/// every surviving image is assigned to exactly one target. Target quotas
/// follow the weights (largest remainder, so proportions match within one
/// item) and images are interleaved across targets so each pool's
/// distribution is preserved within every target. The emitted resolution is
/// the target cap clamped to the image's native resolution, since blending
/// only down-samples.
pub fn plan_multires_blend(
    pools: &[BlendPool],
    targets: &[BlendTarget],
) -> Result<Vec<BlendAssignment>, PackError> {
    if pools.is_empty() {
        return Err(PackError::EmptyPool { pool_index: 0 });
    }
    let weight_sum: f64 = targets.iter().map(|t| t.weight).sum();
    if targets.is_empty()
        || targets.iter().any(|t| t.weight <= 0.0)
        || (weight_sum - 1.0).abs() > 1e-9
    {
        return Err(PackError::InvalidWeights { sum: weight_sum });
    }

    let mut images: Vec<&ImageManifestEntry> = Vec::new();
    for (pool_index, pool) in pools.iter().enumerate() {
        let (lo, hi) = pool.native_resolution_range;
        let selected: Vec<&ImageManifestEntry> = pool
            .images
            .iter()
            .filter(|img| (lo..=hi).contains(&img.native_resolution()))
            .collect();
        if selected.is_empty() {
            return Err(PackError::EmptyPool { pool_index });
        }
        images.extend(selected);
    }

    let n = images.len();
    // Largest-remainder quotas; ties resolved by target index.
    let exact: Vec<f64> = targets.iter().map(|t| t.weight * n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut leftover = n - quotas.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..targets.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &t in &by_remainder {
        if leftover == 0 {
            break;
        }
        quotas[t] += 1;
        leftover -= 1;
    }

    // Walk the concatenated pool order, always feeding the target with the
    // most remaining quota (lowest index on ties). This interleaves pools
    // across targets rather than handing whole pools to single targets.
    let mut remaining = quotas;
    let mut out = Vec::with_capacity(n);
    for img in images {
        let target = (0..targets.len()).max_by_key(|&t| (remaining[t], usize::MAX - t)).unwrap();
        remaining[target] -= 1;
        out.push(BlendAssignment {
            id: img.id.clone(),
            target_resolution: targets[target].resolution_cap.min(img.native_resolution()),
        });
    }
    Ok(out)
}
