//! Expert-specialization analysis: the CKA matrix between routed student
//! tokens and teacher layers recovers a planted correspondence, and teacher
//! clipping reveals alignment hidden by outlier activations.
//!
//! Run with: cargo run --example expert_alignment

use std::collections::BTreeMap;

use agglo::analysis::{expert_teacher_alignment, linear_cka, RoutedTokenSet};
use agglo::types::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
    EmbeddingMatrix::new(rows, dim, (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 256; // spatially aligned tokens per expert

    // CKA ignores orthogonal transforms and isotropic scale.
    let x = random(n, 6, &mut rng);
    let scaled = EmbeddingMatrix::new(n, 6, x.data().iter().map(|v| v * 7.0).collect())?;
    println!("CKA(x, 7x)   = {:.6}", linear_cka(&x, &scaled)?);
    println!("CKA(x, rand) = {:.6}", linear_cka(&x, &random(n, 6, &mut rng))?);

    // Two experts, each mirroring one teacher layer's signal.
    let signal_a = random(n, 8, &mut rng);
    let signal_b = random(n, 8, &mut rng);
    let sets = vec![
        RoutedTokenSet::new(
            "E0",
            signal_a.clone(),
            BTreeMap::from([(0u32, signal_a.clone()), (1, random(n, 8, &mut rng))]),
            Some("post-expert capture".to_string()),
        )?,
        RoutedTokenSet::new(
            "E1",
            signal_b.clone(),
            BTreeMap::from([(0, random(n, 8, &mut rng)), (1, signal_b.clone())]),
            None,
        )?,
    ];
    let matrix = expert_teacher_alignment(&sets, Some((-10.0, 10.0)))?;
    println!("\nexpert x layer CKA:");
    print!("{:>6}", "");
    for layer in &matrix.layers {
        print!("{:>10}", format!("layer {layer}"));
    }
    println!();
    for (e, name) in matrix.experts.iter().enumerate() {
        print!("{name:>6}");
        for l in 0..matrix.layers.len() {
            print!("{:>10.4}", matrix.score(e, l));
        }
        println!();
    }

    // High-magnitude activations mask alignment until the teacher is clipped.
    let spiked: Vec<f32> = signal_a
        .iter_rows()
        .enumerate()
        .flat_map(|(i, row)| {
            let mut out = row.to_vec();
            if i % 9 == 0 {
                out[0] += 400.0;
            }
            out
        })
        .collect();
    let spiked_set = vec![RoutedTokenSet::new(
        "E0",
        signal_a.clone(),
        BTreeMap::from([(0u32, EmbeddingMatrix::new(n, 8, spiked)?)]),
        None,
    )?];
    let raw = expert_teacher_alignment(&spiked_set, None)?;
    let clipped = expert_teacher_alignment(&spiked_set, Some((-10.0, 10.0)))?;
    println!(
        "\nspiked teacher layer: CKA {:.4} raw -> {:.4} clipped to [-10, 10]",
        raw.score(0, 0),
        clipped.score(0, 0)
    );
    Ok(())
}
