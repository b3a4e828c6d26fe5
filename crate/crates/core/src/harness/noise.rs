//! Seeded measurement noise and seed splitting.
//!
//! Every random draw in an experiment comes from a ChaCha8 stream seeded by
//! `split_seed(seed, stream, index)`, where `stream` names the consumer (see
//! the `STREAM_*` constants) and `index` is the image or sample number.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;

pub const STREAM_NOISE: u64 = 1;
pub const STREAM_POWER: u64 = 2;
pub const STREAM_AEM: u64 = 3;
pub const STREAM_PHANTOM: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(stream, index)` under a run seed.
pub fn split_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(seed, stream, index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Impulse,
}

impl NoiseKind {
    pub fn short_name(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Impulse => "impulse",
        }
    }

    pub fn apply(self, x: &Image, level: f64, seed: u64) -> Result<Image> {
        match self {
            NoiseKind::Gaussian => add_gaussian_noise(x, level, seed),
            NoiseKind::Impulse => add_impulse_noise(x, level, seed),
        }
    }
}

fn check_level(level: f64, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidParameter(format!(
            "{what} must lie in [0, 1), got {level}"
        )));
    }
    Ok(())
}

/// Standard deviation used for `level`: a fraction of the dynamic range of `x`.
pub fn gaussian_sigma(x: &Image, level: f64) -> f64 {
    level * (x.max() - x.min())
}

/// Adds i.i.d. `N(0, sigma^2)` with `sigma = level * (max(x) - min(x))`.
pub fn add_gaussian_noise(x: &Image, level: f64, seed: u64) -> Result<Image> {
    check_level(level, "noise level")?;
    let sigma = gaussian_sigma(x, level);
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in out.values_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Sets `floor(fraction * N)` distinct pixels, drawn uniformly, to 0 or 1
/// with equal probability.
pub fn add_impulse_noise(x: &Image, fraction: f64, seed: u64) -> Result<Image> {
    check_level(fraction, "impulse fraction")?;
    let n = x.len();
    let count = (fraction * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for i in sample(&mut rng, n, count).into_iter() {
        out.values_mut()[i] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    }
    Ok(out)
}
