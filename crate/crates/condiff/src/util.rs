//! Small numeric and RNG helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Neumaier compensated summation. Aggregations that feed reported metrics go
/// through this so the totals are insensitive to accumulation order at the
/// 1e-12 level.
pub fn sum_compensated(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean_compensated(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    sum_compensated(values.iter().copied()) / values.len() as f64
}

/// Deterministic stream splitting: one master seed plus a stream label gives
/// an independent generator, so parallel consumers never share a sequence.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal draw via Box–Muller on the raw uniform stream. Used where
/// bit-stable behavior across dependency bumps matters more than speed.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    loop {
        let u1: f64 = rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        if u1 > f64::MIN_POSITIVE {
            let r = (-2.0 * u1.ln()).sqrt();
            return r * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Two-sample Kolmogorov–Smirnov statistic sup |F̂₁ − F̂₂|.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < xa.len() && j < xb.len() {
        // consume every copy of the next distinct value from both sides
        let v = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] == v {
            i += 1;
        }
        while j < xb.len() && xb[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
