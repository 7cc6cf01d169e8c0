//! Seeding helpers and small vector utilities shared across modules.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used everywhere in the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a base seed and an index.
///
/// Uses a splitmix64 round so neighbouring indices give uncorrelated streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard-normal sample via Box-Muller; avoids rand_distr just for this.
pub fn sample_standard_normal<R: Rng>(rng: &mut R) -> f32 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > 1e-300 {
            let r = (-2.0 * u1.ln()).sqrt();
            return (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32;
        }
    }
}

pub fn gaussian_vector<R: Rng>(rng: &mut R, dim: usize) -> Array1<f32> {
    Array1::from_iter((0..dim).map(|_| sample_standard_normal(rng)))
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| sample_standard_normal(rng))
}

pub fn l2_norm(v: &Array1<f32>) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

/// Normalizes a vector to unit L2 norm; zero vectors are left untouched.
pub fn normalize(v: &Array1<f32>) -> Array1<f32> {
    let n = l2_norm(v);
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

pub fn cosine(a: &Array1<f32>, b: &Array1<f32>) -> f32 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| *x as f64 * *y as f64).sum();
    (dot / (na as f64 * nb as f64)) as f32
}
