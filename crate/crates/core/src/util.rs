//! Small shared helpers: decimal formatting, seeding, hashing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 17-significant-digit decimal text; round-trips any f64 exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Inclusive linearly spaced grid.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * (i as f64) / ((count - 1) as f64))
            .collect(),
    }
}

/// Derive an independent RNG from a base seed and a label, so that
/// concurrent sub-tasks stay deterministic regardless of scheduling.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Standard normal draw (Box-Muller).
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| randn(rng)).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &std::path::Path) -> crate::error::Result<String> {
    let bytes = std::fs::read(path).map_err(|e| crate::error::Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_round_trips() {
        for v in [0.0, 1.0, -2.5, 0.1, 1e-300, 12345.6789e77] {
            let s = format_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(0.2, 0.4264, 5);
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 0.2);
        assert_eq!(g[4], 0.4264);
    }

    #[test]
    fn randn_moments() {
        let mut rng = seeded_rng(0, "randn");
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| randn(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn seeded_rng_label_sensitivity() {
        use rand::RngCore;
        let a = seeded_rng(1, "x").next_u64();
        let b = seeded_rng(1, "y").next_u64();
        let a2 = seeded_rng(1, "x").next_u64();
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }
}
