//! Stateless, hash-keyed Gaussian noise.
//!
//! The simulated reader derives its per-query perturbations from
//! `(seed, query_id, class index)` alone, so results do not depend on call
//! order, and a server in another language can reproduce them from the
//! three primitives below.

/// FNV-1a over UTF-8 bytes.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One splitmix64 finalization step.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Uniform in (0, 1), never exactly zero.
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard normal draw keyed by `(seed, key, slot)` (Box–Muller, cosine branch).
pub fn keyed_normal(seed: u64, key: &str, slot: u64) -> f64 {
    let base = splitmix64(seed ^ splitmix64(fnv1a(key)));
    let a = splitmix64(base ^ splitmix64(slot.wrapping_mul(2)));
    let b = splitmix64(base ^ splitmix64(slot.wrapping_mul(2) + 1));
    let u1 = unit_open(a);
    let u2 = unit_open(b);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn keyed_normal_is_deterministic_and_roughly_standard() {
        assert_eq!(keyed_normal(7, "q1", 2), keyed_normal(7, "q1", 2));
        assert_ne!(keyed_normal(7, "q1", 2), keyed_normal(7, "q1", 3));
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|i| keyed_normal(1, "k", i)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
