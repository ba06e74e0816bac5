//! Small shared numeric helpers: log-sum-exp, softmax, seeded stream derivation.

use alloc::vec::Vec;
// Unused whenever std is in the crate graph (its inherent f64 methods win);
// required for the pure no_std build.
#[allow(unused_imports)]
use num_traits::Float;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Numerically stable log(sum(exp(x_i))). Returns -inf for an empty slice or
/// when every entry is -inf.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for &x in xs {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

/// Softmax of `logits / temperature`, max-shifted so saturated logits cannot
/// overflow. `temperature` must be positive (callers validate).
pub(crate) fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        let s = l / temperature;
        if s > max {
            max = s;
        }
    }
    let mut out: Vec<f64> = logits.iter().map(|&l| (l / temperature - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Log-softmax of raw logits (temperature 1), used for exact log-probabilities.
pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| l - lse).collect()
}

/// SplitMix64 finalizer; the standard 64-bit avalanche mix.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha stream from a master seed and a tag path
/// (e.g. (step, query, sample)), so work units can be reordered or
/// parallelized without changing any draw.
pub(crate) fn derive_stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut acc = mix64(seed);
    for &t in tags {
        acc = mix64(acc ^ mix64(t));
    }
    ChaCha8Rng::seed_from_u64(acc)
}

/// Uniform draw in [0, 1) with 53 random bits.
pub(crate) fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [lo, hi).
pub(crate) fn uniform_f64(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_f64(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_naive_on_moderate_values() {
        let xs = [0.3, -1.2, 2.0, 0.0];
        let naive: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_saturated_inputs() {
        // Would overflow exp() without the shift.
        let xs = [1000.0, 1000.0];
        assert!((log_sum_exp(&xs) - (1000.0 + core::f64::consts::LN_2)).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_normalizes_and_orders() {
        let p = softmax(&[3.0f64.ln(), 0.0], 1.0);
        assert!((p[0] - 0.75).abs() < 1e-15);
        assert!((p[1] - 0.25).abs() < 1e-15);
        let sharp = softmax(&[3.0f64.ln(), 0.0], 0.5);
        assert!((sharp[0] - 0.9).abs() < 1e-12);
        assert!((sharp[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let mut a = derive_stream(7, &[1, 2, 3]);
        let mut a2 = derive_stream(7, &[1, 2, 3]);
        let mut b = derive_stream(7, &[1, 2, 4]);
        let (xa, xa2, xb) = (a.next_u64(), a2.next_u64(), b.next_u64());
        assert_eq!(xa, xa2);
        assert_ne!(xa, xb);
    }

    #[test]
    fn unit_draws_live_in_half_open_interval() {
        let mut rng = derive_stream(0, &[0]);
        for _ in 0..1000 {
            let u = unit_f64(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
