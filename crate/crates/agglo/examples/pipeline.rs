//! The whole recipe through the on-disk formats: write embedding shards and
//! a manifest, curate a balanced subset, pack it, standardize one teacher's
//! summaries, and compute the multi-teacher loss over the packed batch.
//!
//! Run with: cargo run --example pipeline

use std::collections::BTreeMap;

use agglo::curation::{assign, build_hierarchy, hierarchical_sample};
use agglo::io;
use agglo::loss::{
    arkd_loss, global_aggregate, per_image_loss, per_teacher_objective, total_loss,
    PerImageFeatures, SmoothL1Config,
};
use agglo::packer::{plan_packing, ImageManifestEntry, PackerConfig};
use agglo::phis::{apply_phis, estimate_moments, fit_phis};
use agglo::types::{EmbeddingMatrix, ImageTokenRecord, TeacherConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scratch = tempfile::tempdir()?;
    let dir = scratch.path();
    let mut rng = ChaCha8Rng::seed_from_u64(13);

    // 1. A long-tailed corpus: 120 images, 3 concepts, with embeddings.
    let sizes = [80usize, 30, 10];
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for (concept, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            entries.push(ImageManifestEntry {
                id: format!("c{concept}_{i:03}"),
                width: 192 + rng.random_range(0..4) * 128,
                height: 192 + rng.random_range(0..3) * 128,
            });
            rows.push(vec![
                concept as f32 * 20.0 + rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
            ]);
        }
    }
    io::write_emb(&dir.join("corpus.emb"), &EmbeddingMatrix::from_rows(&rows)?)?;
    io::write_image_manifest(&dir.join("corpus.jsonl"), &entries)?;

    // 2. Curate a balanced 30-image subset.
    let points = io::read_emb(&dir.join("corpus.emb"))?;
    let tree = build_hierarchy(&points, &[3], 30, 1)?;
    let table = assign(&points, &tree)?;
    let sample = hierarchical_sample(&tree, &table, 30, 2)?;
    let mut per_concept = [0usize; 3];
    for &row in &sample {
        per_concept[table.assignments()[row] as usize] += 1;
    }
    println!("curated 30 of 120 images; per-leaf counts {per_concept:?}");

    // 3. Pack the curated subset.
    let manifest = io::read_image_manifest(&dir.join("corpus.jsonl"))?;
    let records: Vec<ImageTokenRecord> = sample
        .iter()
        .map(|&row| {
            let e = &manifest[row];
            ImageTokenRecord::new(e.id.clone(), e.width, e.height, 16)
        })
        .collect::<Result<_, _>>()?;
    let plan = plan_packing(&records, &PackerConfig::default(), 7)?;
    println!("packed into {} sequences", plan.sequences.len());

    // 4. Standardize the teacher summary stream, then compute losses in the
    // standardized space.
    let d = 8;
    let teacher_cfg = TeacherConfig::new("teacher", d, d, 0, false)?;
    let raw_teacher = EmbeddingMatrix::new(
        30,
        d,
        (0..30 * d).map(|i| ((i % d) as f32 + 1.0) * rng.random_range(0.5..1.5)).collect(),
    )?;
    let transform = fit_phis(&estimate_moments(&raw_teacher)?)?;
    let teacher_summaries = apply_phis(&transform, &raw_teacher)?;
    let student_summaries = EmbeddingMatrix::new(
        30,
        d,
        teacher_summaries.data().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect(),
    )?;

    // Per-image losses grouped exactly as packed (rank 0 = all sequences).
    let mut grouped: Vec<Vec<f64>> = Vec::new();
    let mut cursor = 0usize;
    for seq in &plan.sequences {
        let mut seq_losses = Vec::new();
        for _ in &seq.entries {
            let features = PerImageFeatures::new(
                teacher_summaries.row(cursor).to_vec(),
                student_summaries.row(cursor).to_vec(),
                EmbeddingMatrix::zeros(4, d),
                EmbeddingMatrix::new(4, d, vec![0.05; 4 * d])?,
                EmbeddingMatrix::zeros(0, d),
                EmbeddingMatrix::zeros(0, d),
            )?;
            seq_losses.push(per_image_loss(&features, &teacher_cfg)?);
            cursor += 1;
        }
        grouped.push(seq_losses);
    }
    let global = global_aggregate(&[grouped])?;
    let arkd = arkd_loss(&teacher_summaries, &student_summaries, &SmoothL1Config::default(), 1e-8)?;
    let objective = per_teacher_objective(global, arkd.loss);
    let mut per_teacher = BTreeMap::new();
    per_teacher.insert(teacher_cfg.name.clone(), objective);
    println!(
        "global {:.5} + relational {:.5} -> total {:.5}",
        global,
        arkd.loss,
        total_loss(&per_teacher)?
    );
    Ok(())
}
