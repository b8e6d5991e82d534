//! Seeded inputs shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seot_core::graph::CrossDomainGraph;
use seot_core::measures::{cost_matrix, uniform_measure};
use seot_core::{CostMatrix, DataMatrix, DiscreteMeasure};

/// Two uniform clouds of `n` points in the unit square and their squared
/// Euclidean cost.
pub fn transport_instance(n: usize, seed: u64) -> (DiscreteMeasure, DiscreteMeasure, CostMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = || DataMatrix::new(Array2::from_shape_fn((n, 2), |_| rng.random::<f64>())).unwrap();
    let (xs, xt) = (cloud(), cloud());
    let c = cost_matrix(&xs, &xt, 2.0).unwrap();
    (uniform_measure(xs).unwrap(), uniform_measure(xt).unwrap(), c)
}

/// `k` nodes in three planted communities with mean degree about `degree`.
pub fn planted_graph(k: usize, degree: usize, seed: u64) -> CrossDomainGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = k / 3;
    let mut edges = Vec::with_capacity(k * degree / 2);
    for i in 0..k {
        let c = (i / block).min(2);
        let (lo, hi) = (c * block, if c == 2 { k } else { (c + 1) * block });
        let mut added = 0;
        while added < degree / 2 {
            let j = if rng.random::<f64>() < 0.9 { rng.random_range(lo..hi) } else { rng.random_range(0..k) };
            if j != i {
                edges.push((i.min(j), i.max(j), rng.random_range(0.5..1.5)));
                added += 1;
            }
        }
    }
    CrossDomainGraph::from_edges(k, edges, vec![]).unwrap()
}
