//! Seeded workloads shared by the benchmarks.

use fedtree_core::{Activation, AdapterPair, DistanceMatrix, FrozenBackbone, LayerExperts, Matrix, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Euclidean distances between `n` random points in the plane.
pub fn random_distances(n: usize, seed: u64) -> DistanceMatrix {
    let mut r = rng(seed);
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (r.random::<f64>(), r.random::<f64>())).collect();
    let rows: Vec<Vec<f64>> = pts
        .iter()
        .map(|a| {
            pts.iter()
                .map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
                .collect()
        })
        .collect();
    DistanceMatrix::from_rows(&rows).expect("euclidean distances are valid")
}

pub struct Network {
    pub backbone: FrozenBackbone,
    pub experts: Vec<LayerExperts>,
    pub batch: Vec<Sample>,
}

/// `layers` square layers of width `width`, mixed experts of rank `rank`.
pub fn network(layers: usize, width: usize, rank: usize, batch: usize, seed: u64) -> Network {
    let mut r = rng(seed);
    let std = 1.0 / (width as f64).sqrt();
    let backbone = FrozenBackbone::new(
        (0..layers)
            .map(|_| Matrix::gaussian(width, width, std, &mut r))
            .collect(),
        Activation::Tanh,
    )
    .expect("square layers chain");
    let pair = |r: &mut ChaCha8Rng| {
        AdapterPair::new(
            Matrix::gaussian(rank, width, 0.5, r),
            Matrix::gaussian(width, rank, 0.5, r),
        )
        .expect("shapes agree")
    };
    let experts = (0..layers)
        .map(|_| LayerExperts::mixed(pair(&mut r), pair(&mut r), 0.5).expect("lambda in range"))
        .collect();
    let batch = (0..batch)
        .map(|_| Sample {
            x: Matrix::gaussian(1, width, 1.0, &mut r).as_slice().to_vec(),
            y: Matrix::gaussian(1, width, 1.0, &mut r).as_slice().to_vec(),
        })
        .collect();
    Network {
        backbone,
        experts,
        batch,
    }
}
