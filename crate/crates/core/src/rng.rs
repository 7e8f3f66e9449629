//! Reproducible random streams.
//!
//! Every independent unit of work (a path, a checker pair, a batch of
//! coupled draws) gets its own ChaCha8 stream selected by `(seed, tag,
//! index)`. ChaCha is counter based, so a stream's output never depends on
//! which worker thread consumes it and results are identical for any
//! thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

pub const TAG_PATHS: u64 = 0x7061_7468;
pub const TAG_CHECK: u64 = 0x6368_6b72;
pub const TAG_COUPLE: u64 = 0x636f_7570;
pub const TAG_BOOT: u64 = 0x626f_6f74;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for work item `index` of the job identified by `(seed, tag)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag)));
    rng.set_stream(index);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Fills `out` with i.i.d. `N(0, variance)` draws.
pub fn fill_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64, out: &mut [f64]) {
    let sd = variance.sqrt();
    for v in out.iter_mut() {
        *v = sd * standard_normal(rng);
    }
}

/// Uniform draw on `[0, 1)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<f64> = (0..4).map(|_| uniform(&mut stream(1, TAG_PATHS, 3))).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let mut s0 = stream(1, TAG_PATHS, 0);
        let mut s1 = stream(1, TAG_PATHS, 1);
        let x0: Vec<f64> = (0..8).map(|_| uniform(&mut s0)).collect();
        let x1: Vec<f64> = (0..8).map(|_| uniform(&mut s1)).collect();
        assert_ne!(x0, x1);
        let mut t = stream(1, TAG_CHECK, 0);
        let y: Vec<f64> = (0..8).map(|_| uniform(&mut t)).collect();
        assert_ne!(x0, y);
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = stream(7, TAG_PATHS, 0);
        let mut buf = vec![0.0; 200_000];
        fill_gaussian(&mut rng, 0.25, &mut buf);
        let n = buf.len() as f64;
        let mean = buf.iter().sum::<f64>() / n;
        let var = buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 5.0 * 0.5 / n.sqrt());
        assert!((var - 0.25).abs() < 0.005);
    }
}
