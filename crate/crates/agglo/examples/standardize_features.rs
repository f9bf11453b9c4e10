//! Fit the rotation+scale standardization on a correlated feature stream,
//! check what it does to per-channel variances, invert it, and run the
//! multimodality diagnostic that guards the fit.
//!
//! Run with: cargo run --example standardize_features

use agglo::phis::{
    apply_phis, estimate_moments, fit_phis, invert_phis, multimodality_score,
};
use agglo::types::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let d = 8;
    let n = 4000;

    // Wildly different channel scales plus cross-channel correlation.
    let scales: Vec<f64> = (0..d).map(|i| 0.1 * 4.0f64.powi(i as i32 % 4)).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let shared = gaussian(&mut rng);
        for s in &scales {
            data.push((s * (gaussian(&mut rng) + 0.8 * shared) + 3.0) as f32);
        }
    }
    let stream = EmbeddingMatrix::new(n, d, data)?;

    let moments = estimate_moments(&stream)?;
    print!("raw channel variances:         ");
    for i in 0..d {
        print!("{:>8.3}", moments.covariance()[(i, i)]);
    }
    println!();

    let transform = fit_phis(&moments)?;
    println!("fitted scale s = {:.5} (root mean eigenvalue)", transform.scale());

    let standardized = apply_phis(&transform, &stream)?;
    let post = estimate_moments(&standardized)?;
    print!("standardized channel variances:");
    for i in 0..d {
        print!("{:>8.3}", post.covariance()[(i, i)]);
    }
    println!();

    // The map is invertible: the student can train in the standardized space
    // and still emit features in the teacher's original space.
    let recovered = invert_phis(&transform, &standardized)?;
    let max_err = stream
        .data()
        .iter()
        .zip(recovered.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("max roundtrip error: {max_err:.2e}");

    // Streams with separated modes break moment-based standardization; the
    // diagnostic scores how much variance one split direction explains.
    let unimodal = multimodality_score(&stream, 0.5)?;
    println!("\nunimodal stream  -> score {:.3}, flagged {}", unimodal.score, unimodal.flagged);
    let mut bimodal = Vec::new();
    for i in 0..n {
        let center = if i % 2 == 0 { -6.0 } else { 6.0 };
        for _ in 0..d {
            bimodal.push((center + 0.3 * gaussian(&mut rng)) as f32);
        }
    }
    let bimodal = EmbeddingMatrix::new(n, d, bimodal)?;
    let report = multimodality_score(&bimodal, 0.5)?;
    println!("two-mode stream -> score {:.3}, flagged {}", report.score, report.flagged);
    Ok(())
}
