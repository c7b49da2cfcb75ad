//! Small numeric helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Kahan (compensated) summation accumulator.
///
/// Accumulation order is whatever the caller feeds; influence and metric code
/// always feeds terms in fixed ascending index order so totals are independent
/// of worker count.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let y = value - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum
    }
}

/// Deterministic RNG keyed by a seed and a stream index.
///
/// Every randomized stage (initialization, per-epoch shuffles, subsampling)
/// draws from its own stream so results do not depend on call interleaving
/// or thread count.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Format a double with 17 significant digits, enough to round-trip exactly.
pub fn fmt_f64(value: f64) -> String {
    format!("{:.16e}", value)
}

/// Dot product in fixed index order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = KahanSum::new();
    for (x, y) in a.iter().zip(b) {
        acc.add(x * y);
    }
    acc.total()
}

/// Squared Euclidean distance in fixed index order.
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = KahanSum::new();
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc.add(d * d);
    }
    acc.total()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_matches_naive_on_benign_input() {
        let vals = [1.0, 2.0, 3.5, -1.25];
        let mut k = KahanSum::new();
        for v in vals {
            k.add(v);
        }
        assert_eq!(k.total(), 5.25);
    }

    #[test]
    fn kahan_recovers_small_terms() {
        // 1 + 1e-16 * 10 done naively loses every small term.
        let mut k = KahanSum::new();
        k.add(1.0);
        for _ in 0..10 {
            k.add(1e-16);
        }
        assert!((k.total() - (1.0 + 1e-15)).abs() < 1e-18);
    }

    #[test]
    fn stream_rng_is_reproducible_and_stream_separated() {
        use rand::RngCore;
        let a1 = stream_rng(7, 0).next_u64();
        let a2 = stream_rng(7, 0).next_u64();
        let b = stream_rng(7, 1).next_u64();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
    }

    #[test]
    fn fmt_f64_round_trips() {
        for v in [0.0, -0.0, 1.0, -1.5, 1e-300, 9.87654321e300, std::f64::consts::PI] {
            let parsed: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }
}
