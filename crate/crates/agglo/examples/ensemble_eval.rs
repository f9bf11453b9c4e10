//! Entropy-weighted head ensembling: kNN posteriors from two synthetic
//! heads, per-query confidence weights, and fused top-1 accuracy.
//!
//! Run with: cargo run --example ensemble_eval

use agglo::evalkit::{
    ensemble_scores, entropy_weights, knn_posteriors, top1_accuracy, EnsembleConfig, KnnConfig,
};
use agglo::types::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class-clustered embeddings; `noise` controls how separable they are.
fn head_embeddings(
    rows: usize,
    labels: &[u32],
    noise: f32,
    seed: u64,
) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let data: Vec<f32> = (0..rows)
        .flat_map(|i| {
            let class = labels[i] as usize;
            (0..d)
                .map(|c| {
                    let center = if c == class { 1.0 } else { 0.0 };
                    center + rng.random_range(-noise..noise)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    EmbeddingMatrix::new(rows, d, data).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let classes = 4u32;
    let train_n = 200;
    let query_n = 64;
    let train_labels: Vec<u32> = (0..train_n).map(|_| rng.random_range(0..classes)).collect();
    let query_labels: Vec<u32> = (0..query_n).map(|_| rng.random_range(0..classes)).collect();

    // Head A is clean, head B is noisy: their posteriors differ in entropy.
    let knn = KnnConfig::default();
    let mut heads = Vec::new();
    for (name, noise, seed) in [("A", 0.35f32, 11u64), ("B", 0.95, 12)] {
        let train = head_embeddings(train_n, &train_labels, noise, seed);
        let query = head_embeddings(query_n, &query_labels, noise, seed + 100);
        let posteriors = knn_posteriors(&train, &train_labels, &query, &knn)?;
        let top1 = top1_accuracy(&posteriors, &query_labels)?;
        println!("head {name}: top-1 {:.3}", top1);
        heads.push(posteriors);
    }

    let cfg = EnsembleConfig::default(); // tau 1, gamma 1
    let weights = entropy_weights(&heads, &cfg)?;
    let mean_a: f64 = weights.iter().map(|w| w[0]).sum::<f64>() / query_n as f64;
    println!("mean weight on the confident head: {mean_a:.3}");

    let fused = ensemble_scores(&heads, &weights)?;
    println!("fused:  top-1 {:.3}", top1_accuracy(&fused, &query_labels)?);

    // Sharper gamma leans harder on low-entropy heads.
    for gamma in [0.1, 1.0, 10.0] {
        let cfg = EnsembleConfig::new(1.0, gamma)?;
        let w = entropy_weights(&heads, &cfg)?;
        let mean_a: f64 = w.iter().map(|r| r[0]).sum::<f64>() / query_n as f64;
        println!("gamma {gamma:>4}: mean weight on head A = {mean_a:.3}");
    }
    Ok(())
}
