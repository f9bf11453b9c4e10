//! Token-balanced batching end to end: pack a mixed-resolution image set,
//! inspect segment masks, balance sequences across ranks, and compare the
//! padding against one-image-per-sequence batching.
//!
//! Run with: cargo run --example pack_images

use agglo::packer::{
    build_segment_mask, padding_stats, partition_across_ranks, plan_packing, PackerConfig,
};
use agglo::types::ImageTokenRecord;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Native-resolution images: 256x256 yields 256 patch tokens at patch 16,
    // 768x768 yields 2304. Each image also carries 1 CLS + 4 registers.
    let sizes: &[(u32, u32)] = &[
        (256, 256),
        (768, 768),
        (512, 384),
        (256, 192),
        (640, 480),
        (256, 256),
        (384, 384),
        (768, 512),
    ];
    let images: Vec<ImageTokenRecord> = sizes
        .iter()
        .enumerate()
        .map(|(i, &(w, h))| ImageTokenRecord::new(format!("img{i}"), w, h, 16))
        .collect::<Result<_, _>>()?;
    for img in &images {
        println!("{}: {}x{} -> {} tokens", img.id, img.width_px, img.height_px, img.num_tokens());
    }

    let cfg = PackerConfig::default(); // c_max 2600, 5 extra tokens, 16 images
    let plan = plan_packing(&images, &cfg, 7)?;
    println!("\npacked into {} sequences (budget {}):", plan.sequences.len(), cfg.c_max);
    for (i, seq) in plan.sequences.iter().enumerate() {
        let ids: Vec<&str> = seq.entries.iter().map(|e| e.image_id.as_str()).collect();
        println!("  seq {i}: {} tokens, images {ids:?}", seq.used_tokens);
    }

    // Segment ids make attention block-diagonal; 0 marks padding.
    let mask = build_segment_mask(&plan.sequences[0], cfg.c_max);
    let ids = mask.segment_ids();
    println!("\nsegment ids of seq 0 (first 12): {:?}...", &ids[..12]);
    println!("token 0 attends to last used token: {}", mask.allows(0, plan.sequences[0].used_tokens - 1));

    let stats = padding_stats(&plan, &cfg);
    let singleton_padded = images.len() * cfg.c_max
        - images
            .iter()
            .map(|i| i.num_tokens() as usize + cfg.extra_tokens_per_image)
            .sum::<usize>();
    println!(
        "\npadding: {:.2}% packed vs {:.2}% one-image-per-sequence",
        100.0 * stats.padding_fraction,
        100.0 * singleton_padded as f64 / (images.len() * cfg.c_max) as f64
    );

    let view = partition_across_ranks(&plan, 2);
    println!("rank token loads: {:?} ({} images globally)", view.rank_token_loads(), view.b_global());
    Ok(())
}
