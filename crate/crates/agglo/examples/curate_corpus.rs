//! Hierarchical curation on a long-tailed synthetic corpus: cluster, assign,
//! and draw a balanced sample, then compare per-concept counts against
//! uniform random sampling.
//!
//! Run with: cargo run --example curate_corpus

use agglo::curation::{assign, build_hierarchy, hierarchical_sample, kmeans};
use agglo::types::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let d = 6;
    let num_concepts = 8;

    // Zipf-ish concept sizes: a few huge head concepts, a long tail.
    let sizes: Vec<usize> =
        (1..=num_concepts).map(|i| (4000.0 / (i as f64).powf(1.5)) as usize).collect();
    let total: usize = sizes.iter().sum();
    println!("concept sizes: {sizes:?} (total {total})");

    let mut data = Vec::with_capacity(total * d);
    let mut concept_of = Vec::with_capacity(total);
    for (concept, &size) in sizes.iter().enumerate() {
        let center: Vec<f32> =
            (0..d).map(|bit| if (concept >> bit) & 1 == 1 { 40.0 } else { 0.0 }).collect();
        for _ in 0..size {
            concept_of.push(concept);
            for &c in &center {
                data.push(c + rng.random_range(-1.0..1.0));
            }
        }
    }
    let points = EmbeddingMatrix::new(total, d, data)?;

    // Plain k-means first: the inertia trace is non-increasing.
    let km = kmeans(&points, num_concepts, 40, 1)?;
    println!(
        "k-means inertia: {:.1} -> {:.1} over {} E-steps",
        km.inertia_history[0],
        km.inertia,
        km.inertia_history.len()
    );

    // Two-level hierarchy, then out-of-sample style assignment and sampling.
    let tree = build_hierarchy(&points, &[num_concepts, 3], 40, 1)?;
    let table = assign(&points, &tree)?;
    let target = 800;
    let sample = hierarchical_sample(&tree, &table, target, 99)?;

    let mut curated = vec![0usize; num_concepts];
    for &row in &sample {
        curated[concept_of[row]] += 1;
    }
    let mut random = vec![0usize; num_concepts];
    let mut pool: Vec<usize> = (0..total).collect();
    for i in 0..target {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
        random[concept_of[pool[i]]] += 1;
    }
    println!("\nper-concept counts in a {target}-image sample:");
    println!("  balanced: {curated:?}");
    println!("  random:   {random:?}");
    let ratio = |counts: &[usize]| {
        *counts.iter().max().unwrap() as f64 / (*counts.iter().min().unwrap()).max(1) as f64
    };
    println!(
        "  max/min ratio: balanced {:.2} vs random {:.2}",
        ratio(&curated),
        ratio(&random)
    );
    Ok(())
}
