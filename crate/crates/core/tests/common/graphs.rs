use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seot_core::graph::CrossDomainGraph;

/// Erdős–Rényi style graph with random weights; sparse enough that it is
/// often disconnected and has isolated nodes.
pub fn random_sparse_graph(rng: &mut ChaCha8Rng, k: usize) -> CrossDomainGraph {
    let mean_degree = rng.random_range(0.5..4.0);
    let p = (mean_degree / k as f64).min(1.0);
    let mut edges = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            if rng.random::<f64>() < p {
                edges.push((i, j, rng.random_range(0.1..2.0)));
            }
        }
    }
    CrossDomainGraph::from_edges(k, edges, vec![]).unwrap()
}

/// `m` disjoint dense clusters of the given sizes, each internally complete.
pub fn clustered_graph(rng: &mut ChaCha8Rng, sizes: &[usize]) -> CrossDomainGraph {
    let mut edges = Vec::new();
    let mut start = 0;
    for &s in sizes {
        for i in start..start + s {
            for j in i + 1..start + s {
                edges.push((i, j, rng.random_range(0.5..1.5)));
            }
        }
        start += s;
    }
    CrossDomainGraph::from_edges(start, edges, vec![]).unwrap()
}
