//! Per-image losses with token-based normalization, global aggregation that
//! ignores packing, and the asymmetric relational loss.
//!
//! Run with: cargo run --example distill_losses

use std::collections::BTreeMap;

use agglo::loss::{
    arkd_loss, global_aggregate, patch_loss, per_image_loss, relational_loss, summary_loss,
    PerImageFeatures, RelationMode, SmoothL1Config,
};
use agglo::types::{EmbeddingMatrix, TeacherConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let teacher_cfg = TeacherConfig::new("dino", 4, 4, 2, true)?;

    // A high-resolution and a low-resolution image with the same per-token
    // error magnitude: the 1/N_q normalization keeps their losses equal.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let per_token_error = 0.1f32;
    let build = |tokens: usize, rng: &mut ChaCha8Rng| -> PerImageFeatures {
        let teacher: Vec<Vec<f32>> =
            (0..tokens).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let student: Vec<Vec<f32>> = teacher
            .iter()
            .map(|row| row.iter().map(|v| v + per_token_error).collect())
            .collect();
        let regs = EmbeddingMatrix::zeros(2, 4);
        PerImageFeatures::new(
            vec![1.0, 0.5, 0.0, 0.0],
            vec![1.0, 0.4, 0.1, 0.0],
            EmbeddingMatrix::from_rows(&teacher).unwrap(),
            EmbeddingMatrix::from_rows(&student).unwrap(),
            regs.clone(),
            regs,
        )
        .unwrap()
    };
    let small = build(256, &mut rng);
    let large = build(2304, &mut rng);
    println!("patch loss, 256 tokens:  {:.6}", patch_loss(&small));
    println!("patch loss, 2304 tokens: {:.6} (same error scale, same loss)", patch_loss(&large));
    println!("summary loss: {:.6}", summary_loss(&small)?);
    println!("combined per-image: {:.6}", per_image_loss(&small, &teacher_cfg)?);

    // The global mean does not care how images were packed across ranks.
    let losses = vec![0.5, 1.5, 2.0, 4.0];
    let flat = global_aggregate(&[vec![losses.clone()]])?;
    let packed = global_aggregate(&[vec![vec![0.5], vec![1.5, 2.0]], vec![vec![4.0]]])?;
    println!("\nglobal mean flat {flat} == regrouped {packed}: {}", flat == packed);

    // Relational loss: below-median pairs are pulled together, far pairs
    // pushed apart; one-sided errors on the wrong side cost nothing.
    let teacher = EmbeddingMatrix::from_rows(&[
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 8.0],
        vec![1.5, 8.0],
    ])?;
    let student = EmbeddingMatrix::from_rows(&[
        vec![0.0, 0.0],
        vec![3.0, 0.0], // close pair stretched: penalized
        vec![0.0, 7.0],
        vec![4.0, 10.5], // far pairs stretched further: free under the gate
    ])?;
    let cfg = SmoothL1Config::default();
    let report = arkd_loss(&teacher, &student, &cfg, 1e-8)?;
    println!("\nARKD loss {:.6}", report.loss);
    println!("  teacher scale {:.4}, median {:.4}, {} ordered pairs", report.teacher_scale, report.median, report.pair_count);
    let symmetric = relational_loss(&teacher, &student, &cfg, 1e-8, RelationMode::Symmetric)?;
    println!("  symmetric variant {:.6} (always >= asymmetric)", symmetric.loss);

    // Per-teacher objectives sum into the final multi-teacher loss.
    let mut per_teacher = BTreeMap::new();
    per_teacher.insert("dino".to_string(), flat + report.loss);
    per_teacher.insert("siglip2".to_string(), 0.75);
    println!("\ntotal objective: {:.6}", agglo::loss::total_loss(&per_teacher)?);
    Ok(())
}
