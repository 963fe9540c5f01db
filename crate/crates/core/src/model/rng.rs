//! Seeded random streams.
//!
//! Every consumer draws from `ChaCha8Rng::seed_from_u64(seed)` with its own
//! stream id, so adding draws to one consumer never shifts another.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

/// Stream ids.
pub mod stream {
    pub const BASES: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Normal draw with standard deviation `std`, redrawn until it lies within `±2·std`.
pub fn truncated_normal<R: Rng>(std: f64, rng: &mut R) -> f64 {
    loop {
        let x: f64 = standard_normal(rng);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

/// Random `d × p` matrix with orthonormal columns (QR of a Gaussian matrix,
/// signs fixed so that `R` has a positive diagonal).
pub fn random_orthonormal<R: Rng>(d: usize, p: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if p == 0 || p > d {
        return Err(invalid(format!("cannot draw {p} orthonormal columns in dim {d}")));
    }
    let g = DMatrix::from_fn(d, p, |_, _| standard_normal(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}
