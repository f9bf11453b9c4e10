//! Property tests over random instances for the packer and sampler
//! invariants that must hold unconditionally.

mod common;

use proptest::prelude::*;

use agglo::curation::{self, AssignmentTable};
use agglo::packer::{self, PackerConfig};
use agglo::types::{EmbeddingMatrix, ImageTokenRecord};

fn records(tokens: &[u32]) -> Vec<ImageTokenRecord> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| ImageTokenRecord::new(format!("img{i}"), t * 16, 16, 16).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn packing_never_violates_budget_and_assigns_once(
        tokens in proptest::collection::vec(64u32..=2304, 1..48),
        seed in 0u64..1000,
    ) {
        let cfg = PackerConfig::new(2600, 5, 16).unwrap();
        let images = records(&tokens);
        let plan = packer::plan_packing(&images, &cfg, seed).unwrap();

        let mut seen = Vec::new();
        for seq in &plan.sequences {
            prop_assert!(seq.used_tokens <= cfg.c_max);
            prop_assert!(seq.entries.len() <= cfg.max_images_per_sequence);
            for e in &seq.entries {
                seen.push(e.image_id.clone());
            }
        }
        seen.sort();
        let mut expected: Vec<String> = images.iter().map(|i| i.id.clone()).collect();
        expected.sort();
        prop_assert_eq!(seen, expected);

        // Deterministic for a fixed seed.
        let again = packer::plan_packing(&images, &cfg, seed).unwrap();
        prop_assert_eq!(&plan, &again);

        // Never more padding than one image per sequence.
        let stats = packer::padding_stats(&plan, &cfg);
        let total_eff: usize =
            images.iter().map(|i| i.num_tokens() as usize + cfg.extra_tokens_per_image).sum();
        let singleton =
            (images.len() * cfg.c_max - total_eff) as f64 / (images.len() * cfg.c_max) as f64;
        prop_assert!(stats.padding_fraction <= singleton + 1e-12);
    }

    #[test]
    fn rank_partition_gap_is_bounded_by_largest_sequence(
        tokens in proptest::collection::vec(64u32..=2304, 1..48),
        seed in 0u64..1000,
        num_ranks in 1usize..9,
    ) {
        let cfg = PackerConfig::new(2600, 5, 16).unwrap();
        let plan = packer::plan_packing(&records(&tokens), &cfg, seed).unwrap();
        let view = packer::partition_across_ranks(&plan, num_ranks);
        let loads = view.rank_token_loads();
        let max_seq = plan.sequences.iter().map(|s| s.used_tokens).max().unwrap_or(0);
        let max = loads.iter().max().copied().unwrap_or(0);
        let min = loads.iter().min().copied().unwrap_or(0);
        prop_assert!(max - min <= max_seq, "gap {} > largest sequence {}", max - min, max_seq);
        prop_assert_eq!(view.b_global(), plan.total_images());
    }

    #[test]
    fn hierarchical_sample_is_exact_and_duplicate_free(
        leaf_sizes in proptest::collection::vec(1usize..60, 2..12),
        seed in 0u64..500,
    ) {
        let total: usize = leaf_sizes.iter().sum();
        let target = total / 2;
        let leaves = leaf_sizes.len();
        let centroids = EmbeddingMatrix::new(
            leaves,
            1,
            (0..leaves).map(|i| i as f32 * 10.0).collect(),
        ).unwrap();
        let points = EmbeddingMatrix::new(
            total,
            1,
            leaf_sizes
                .iter()
                .enumerate()
                .flat_map(|(leaf, &n)| std::iter::repeat_n(leaf as f32 * 10.0, n))
                .collect(),
        ).unwrap();
        let tree = curation::build_hierarchy(&centroids, &[leaves], 5, seed).unwrap();
        let table: AssignmentTable = curation::assign(&points, &tree).unwrap();
        let sample = curation::hierarchical_sample(&tree, &table, target, seed).unwrap();
        prop_assert_eq!(sample.len(), target);
        let mut unique = sample.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assert_eq!(unique.len(), target);

        let again = curation::hierarchical_sample(&tree, &table, target, seed).unwrap();
        prop_assert_eq!(sample, again);
    }
}
