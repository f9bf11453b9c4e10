//! Shared helpers for integration tests: deterministic data generators and
//! a harness for invoking the CLI binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agglo::types::EmbeddingMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rows: usize, dim: usize, lo: f32, hi: f32, seed: u64) -> EmbeddingMatrix {
    let mut r = rng(seed);
    EmbeddingMatrix::new(rows, dim, (0..rows * dim).map(|_| r.random_range(lo..hi)).collect())
        .unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Correlated Gaussian samples from a diagonal-plus-low-rank factor model,
/// cheap enough to generate at d = 1024.
pub fn correlated_gaussians(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    let mut r = rng(seed);
    let rank = 8.min(d);
    let diag: Vec<f64> = (0..d).map(|_| r.random_range(0.3..2.0)).collect();
    let factors: Vec<f64> = (0..d * rank).map(|_| r.random_range(-0.8..0.8)).collect();
    let mean: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let shared: Vec<f64> = (0..rank).map(|_| gaussian(&mut r)).collect();
        for i in 0..d {
            let mut v = mean[i] + diag[i] * gaussian(&mut r);
            for (k, s) in shared.iter().enumerate() {
                v += factors[i * rank + k] * s;
            }
            data.push(v as f32);
        }
    }
    EmbeddingMatrix::new(n, d, data).unwrap()
}

pub fn bin_path() -> &'static str {
    env!("CARGO_BIN_EXE_agglo")
}

/// Runs the binary with `--threads` prepended; panics on spawn failure.
pub fn run_cli(threads: usize, args: &[&str]) -> Output {
    let mut cmd = std::process::Command::new(bin_path());
    cmd.arg("--threads").arg(threads.to_string()).args(args);
    cmd.output().expect("failed to spawn agglo binary")
}

pub fn assert_cli_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Byte-compares every regular file under two directories (same relative
/// paths expected on both sides).
pub fn assert_dirs_identical(a: &Path, b: &Path) {
    let list = |root: &Path| -> Vec<PathBuf> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    files.push(path.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        files.sort();
        files
    };
    let files_a = list(a);
    let files_b = list(b);
    assert_eq!(files_a, files_b, "directories hold different file sets");
    for rel in files_a {
        let bytes_a = std::fs::read(a.join(&rel)).unwrap();
        let bytes_b = std::fs::read(b.join(&rel)).unwrap();
        assert_eq!(bytes_a, bytes_b, "file {} differs", rel.display());
    }
}
