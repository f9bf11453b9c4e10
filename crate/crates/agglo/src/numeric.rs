//! Shared numeric helpers: order-invariant exact summation, argmax with a
//! fixed tie rule, and small vector kernels used across the loss, curation,
//! and evaluation modules.
//!
//! All reductions over f32 feature data accumulate in f64.

/// Correctly rounded sum of a sequence of f64 values (Shewchuk's algorithm,
/// same scheme as CPython's `math.fsum`).
///
/// The result is the true real-valued sum rounded once to the nearest f64,
/// so it does not depend on the order of the inputs. Batch-aggregation code
/// relies on this to make regrouping across ranks/sequences bit-exact.
pub fn exact_sum<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let mut partials: Vec<f64> = Vec::new();
    for value in values {
        let mut x = value;
        let mut used = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[used] = lo;
                used += 1;
            }
            x = hi;
        }
        partials.truncate(used);
        partials.push(x);
    }

    // Sum the non-overlapping partials from largest to smallest, keeping one
    // correction term so half-way cases round to even like a single addition.
    let mut n = partials.len();
    let mut hi = 0.0;
    if n > 0 {
        n -= 1;
        hi = partials[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = partials[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax_tie_lowest(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Squared Euclidean distance with f64 accumulation.
pub fn sq_l2_distance(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

/// Euclidean distance with f64 accumulation.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    sq_l2_distance(a, b).sqrt()
}

/// Dot product with f64 accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Euclidean norm with f64 accumulation.
pub fn l2_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity; zero-norm inputs yield 0 by convention.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Numerically stable softmax into a fresh f64 vector.
pub fn softmax(scores: &[f32], temperature: f64) -> Vec<f64> {
    let max = scores
        .iter()
        .map(|&s| s as f64 / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .map(|&s| (s as f64 / temperature - max).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Shannon entropy (natural log) of a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Ceiling division for patch-grid sizing.
pub fn ceil_div(a: u32, b: u32) -> u32 {
    a.div_ceil(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_sum_matches_simple_cases() {
        assert_eq!(exact_sum([1.0, 2.0, 3.0]), 6.0);
        assert_eq!(exact_sum(std::iter::empty()), 0.0);
        // The classic case where naive summation loses the small addend.
        assert_eq!(exact_sum([1e16, 1.0, -1e16]), 1.0);
    }

    #[test]
    fn exact_sum_is_order_invariant_on_adversarial_input() {
        let xs = vec![1e100, 1.0, -1e100, 1e-30, 0.1, -0.05];
        let mut rev = xs.clone();
        rev.reverse();
        assert_eq!(exact_sum(xs).to_bits(), exact_sum(rev).to_bits());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_tie_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_tie_lowest(&[5.0]), 0);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn entropy_of_uniform_is_ln_n() {
        let h = entropy(&[1.0 / 3.0; 3]);
        assert!((h - 3.0f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn exact_sum_permutation_invariant(values in proptest::collection::vec(-1e6f64..1e6, 1..64), swaps in proptest::collection::vec((0usize..64, 0usize..64), 0..32)) {
            let mut shuffled = values.clone();
            let n = shuffled.len();
            for (a, b) in swaps {
                shuffled.swap(a % n, b % n);
            }
            prop_assert_eq!(exact_sum(values).to_bits(), exact_sum(shuffled).to_bits());
        }
    }
}
