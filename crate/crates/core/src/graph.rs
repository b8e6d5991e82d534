//! Cross-domain adjacency built from transport plans.
//!
//! Graphs store each undirected edge once, in compressed rows over the upper
//! triangle; every accessor mirrors it, so `A[i][j] == A[j][i]` holds exactly.

use std::io::{self, Write};

use ndarray::{Array2, ArrayView2};

use crate::barycenter::Barycenter;
use crate::error::{Result, SeotError};
use crate::ot::TransportPlan;

/// Default pruning threshold, relative to the largest entry of each plan.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DomainTag {
    Barycenter,
    Source(usize),
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NodeRange {
    pub domain: DomainTag,
    pub start: usize,
    pub len: usize,
}

impl NodeRange {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end()).contains(&i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossDomainGraph {
    k: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    node_ranges: Vec<NodeRange>,
}

impl CrossDomainGraph {
    /// Builds a graph from undirected weighted edges. Duplicate pairs are
    /// summed; self-loops and non-positive weights are rejected.
    pub fn from_edges(
        k: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
        node_ranges: Vec<NodeRange>,
    ) -> Result<Self> {
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, w) in edges {
            if i >= k || j >= k {
                return Err(SeotError::invalid(format!("edge ({i}, {j}) outside {k} nodes")));
            }
            if i == j {
                return Err(SeotError::invalid(format!("self-loop at node {i}")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(SeotError::invalid(format!("edge ({i}, {j}) has weight {w}")));
            }
            triplets.push((i.min(j), i.max(j), w));
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; k + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut weights: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, w) in triplets {
            if last == Some((i, j)) {
                *weights.last_mut().expect("duplicate follows an entry") += w;
                continue;
            }
            last = Some((i, j));
            row_ptr[i + 1] += 1;
            cols.push(j);
            weights.push(w);
        }
        for i in 0..k {
            row_ptr[i + 1] += row_ptr[i];
        }
        let covered: usize = node_ranges.iter().map(|r| r.len).sum();
        let contiguous = node_ranges.windows(2).all(|w| w[0].end() == w[1].start)
            && node_ranges.first().is_none_or(|r| r.start == 0);
        if !node_ranges.is_empty() && (covered != k || !contiguous) {
            return Err(SeotError::invalid("node ranges must tile 0..K in order"));
        }
        Ok(CrossDomainGraph { k, row_ptr, cols, weights, node_ranges })
    }

    /// Number of nodes `K`.
    pub fn n_nodes(&self) -> usize {
        self.k
    }

    /// Stored undirected edges.
    pub fn n_edges(&self) -> usize {
        self.cols.len()
    }

    /// Nonzeros of the full symmetric matrix.
    pub fn nnz(&self) -> usize {
        2 * self.cols.len()
    }

    pub fn node_ranges(&self) -> &[NodeRange] {
        &self.node_ranges
    }

    pub fn range_of(&self, domain: DomainTag) -> Option<NodeRange> {
        self.node_ranges.iter().copied().find(|r| r.domain == domain)
    }

    /// Upper-triangle edges `(i, j, w)` with `i < j`, row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.k).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |e| (i, self.cols[e], self.weights[e]))
        })
    }

    /// `A[i][j]`, mirrored for `i > j`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (i.min(j), i.max(j));
        if a == b || b >= self.k {
            return 0.0;
        }
        let row = &self.cols[self.row_ptr[a]..self.row_ptr[a + 1]];
        match row.binary_search(&b) {
            Ok(pos) => self.weights[self.row_ptr[a] + pos],
            Err(_) => 0.0,
        }
    }

    /// `d_i = Σ_j A_ij`.
    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.k];
        for (i, j, w) in self.edges() {
            d[i] += w;
            d[j] += w;
        }
        d
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        let d = self.degrees();
        (0..self.k).filter(|&i| d[i] == 0.0).collect()
    }

    /// Sum of all entries of the symmetric matrix.
    pub fn total_weight(&self) -> f64 {
        2.0 * self.weights.iter().sum::<f64>()
    }

    /// `Y = A X` for a block of column vectors (`K × b`, row-major).
    pub fn matmat(&self, x: ArrayView2<f64>, y: &mut Array2<f64>) {
        debug_assert_eq!(x.nrows(), self.k);
        y.fill(0.0);
        let b = x.ncols();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout is contiguous");
        let ys = y.as_slice_mut().expect("output block is contiguous row-major");
        for i in 0..self.k {
            // Stored neighbours satisfy j > i, so row i and the rows it
            // scatters into never alias.
            let (head, tail) = ys.split_at_mut((i + 1) * b);
            let yi = &mut head[i * b..];
            let xi = &xs[i * b..(i + 1) * b];
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                let (j, w) = (self.cols[e], self.weights[e]);
                let xj = &xs[j * b..(j + 1) * b];
                for (y, x) in yi.iter_mut().zip(xj) {
                    *y += w * x;
                }
                let yj = &mut tail[(j - i - 1) * b..(j - i) * b];
                for (y, x) in yj.iter_mut().zip(xi) {
                    *y += w * x;
                }
            }
        }
    }

    /// Same sparsity pattern with every weight replaced by `f(i, j, w)`.
    pub fn reweighted(&self, f: impl Fn(usize, usize, f64) -> f64) -> CrossDomainGraph {
        let mut out = self.clone();
        for i in 0..self.k {
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.weights[e] = f(i, self.cols[e], self.weights[e]);
            }
        }
        out
    }

    /// Dense copy of the symmetric adjacency; for tests and small graphs.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.k, self.k));
        for (i, j, w) in self.edges() {
            a[[i, j]] = w;
            a[[j, i]] = w;
        }
        a
    }

    /// Edge list: a `# K=<K> nnz=<nnz>` header, then one `i\tj\tw` line per
    /// stored edge.
    pub fn write_edge_list(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "# K={} nnz={}", self.k, self.nnz())?;
        for (i, j, w) in self.edges() {
            writeln!(out, "{i}\t{j}\t{w:.17e}")?;
        }
        Ok(())
    }
}

fn pruned_entries(gamma: &Array2<f64>, prune_threshold: f64) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    let cutoff = prune_threshold * gamma.iter().copied().fold(0.0, f64::max);
    gamma
        .indexed_iter()
        .filter(move |(_, &g)| g > 0.0 && g > cutoff)
        .map(|((i, j), &g)| (i, j, g))
}

/// Two-domain graph `[[0, γ], [γᵀ, 0]]`. Entries at or below
/// `prune_threshold × max γ` are dropped.
pub fn bipartite_graph(plan: &TransportPlan, prune_threshold: f64) -> Result<CrossDomainGraph> {
    let (ns, nt) = plan.shape();
    let edges: Vec<_> = pruned_entries(plan.gamma(), prune_threshold)
        .map(|(i, j, g)| (i, ns + j, g))
        .collect();
    if edges.is_empty() {
        return Err(SeotError::DegenerateGraph("plan has no entries after pruning".into()));
    }
    let ranges = vec![
        NodeRange { domain: DomainTag::Source(0), start: 0, len: ns },
        NodeRange { domain: DomainTag::Target, start: ns, len: nt },
    ];
    CrossDomainGraph::from_edges(ns + nt, edges, ranges)
}

/// Multi-source graph routed through the barycenter: atoms first, then each
/// source, then the target, with edges only between atoms and samples.
/// Pruning is relative to each plan's own largest entry.
pub fn star_graph(
    bary: &Barycenter,
    n_sources: usize,
    n_target: usize,
    prune_threshold: f64,
) -> Result<CrossDomainGraph> {
    let target = bary
        .plan_to_target()
        .ok_or_else(|| SeotError::InvalidState("barycenter has no target plan".into()))?;
    let plans = bary.plans_to_sources();
    if plans.len() != n_sources {
        return Err(SeotError::shape(format!(
            "barycenter has {} source plans, expected {n_sources}",
            plans.len()
        )));
    }
    if target.shape().1 != n_target {
        return Err(SeotError::shape(format!(
            "target plan has {} columns, expected {n_target}",
            target.shape().1
        )));
    }
    let nb = bary.n_atoms();
    let mut ranges = vec![NodeRange { domain: DomainTag::Barycenter, start: 0, len: nb }];
    let mut edges = Vec::new();
    let mut offset = nb;
    let all = plans.iter().enumerate().map(|(i, p)| (DomainTag::Source(i), p));
    for (domain, plan) in all.chain(std::iter::once((DomainTag::Target, target))) {
        let (rows, len) = plan.shape();
        if rows != nb {
            return Err(SeotError::shape("plan rows do not match the barycenter atoms"));
        }
        edges.extend(pruned_entries(plan.gamma(), prune_threshold).map(|(i, j, g)| (i, offset + j, g)));
        ranges.push(NodeRange { domain, start: offset, len });
        offset += len;
    }
    if edges.is_empty() {
        return Err(SeotError::DegenerateGraph("all plans are empty after pruning".into()));
    }
    CrossDomainGraph::from_edges(offset, edges, ranges)
}

/// Connected components by union-find; isolated nodes count individually.
pub fn components(graph: &CrossDomainGraph) -> usize {
    component_labels(graph).1
}

/// Component id per node (ids in order of first appearance) and the count.
pub fn component_labels(graph: &CrossDomainGraph) -> (Vec<usize>, usize) {
    let k = graph.n_nodes();
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, j, _) in graph.edges() {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut ids = vec![usize::MAX; k];
    let mut labels = vec![0; k];
    let mut count = 0;
    for i in 0..k {
        let r = find(&mut parent, i);
        if ids[r] == usize::MAX {
            ids[r] = count;
            count += 1;
        }
        labels[i] = ids[r];
    }
    (labels, count)
}
