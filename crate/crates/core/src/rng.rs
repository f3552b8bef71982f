//! Seeded random streams.
//!
//! Every stochastic routine takes a [`Seed`]. Replications derive child
//! streams from `(master_seed, index)` through the ChaCha stream counter, so a
//! replication's draws never depend on which worker ran it or in what order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Seed = u64;

pub fn rng(seed: Seed) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `index` of `master`.
pub fn child_rng(master: Seed, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(index);
    r
}

pub fn normal_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// `rows x cols` matrix of iid N(0,1), filled row by row.
pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

/// Uniform point on the unit sphere of R^p.
pub fn unit_sphere<R: Rng + ?Sized>(rng: &mut R, p: usize) -> DVector<f64> {
    loop {
        let v = normal_vector(rng, p);
        let norm = v.norm();
        if norm > 0.0 {
            return v / norm;
        }
    }
}
