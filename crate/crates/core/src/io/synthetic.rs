use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Distance of blob centers from the origin.
pub const BLOB_RADIUS: f64 = 4.0;

fn gaussian(std: f64) -> Result<Normal<f64>> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::contract(format!(
            "noise level {std} must be finite and non-negative"
        )));
    }
    Normal::new(0.0, std).map_err(|e| Error::contract(e.to_string()))
}

/// Two interleaved half circles of radius one. Class 0 is the upper arc
/// centered at the origin, class 1 the lower arc centered at `(1, 0.5)`.
/// Samples alternate between classes; `noise` is the std of isotropic
/// Gaussian jitter.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::contract("two moons needs at least two points"));
    }
    let jitter = gaussian(noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random::<f64>() * PI;
        let (x, y) = if i % 2 == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        features.push(x + jitter.sample(&mut rng));
        features.push(y + jitter.sample(&mut rng));
        labels.push(i % 2);
    }
    Dataset::new(features, labels, 2, 2)
}

/// `centers` isotropic Gaussian clusters with std `spread`, centered evenly on
/// a circle of radius [`BLOB_RADIUS`]. Sample `i` belongs to cluster `i % centers`.
pub fn gaussian_blobs(n: usize, centers: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || centers < 2 {
        return Err(Error::contract(
            "blobs need at least two points and two centers",
        ));
    }
    let jitter = gaussian(spread)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers;
        let angle = 2.0 * PI * c as f64 / centers as f64;
        features.push(BLOB_RADIUS * angle.cos() + jitter.sample(&mut rng));
        features.push(BLOB_RADIUS * angle.sin() + jitter.sample(&mut rng));
        labels.push(c);
    }
    Dataset::new(features, labels, 2, centers)
}
