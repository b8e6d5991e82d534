//! Normalized Laplacian, its smallest eigenpairs, and spectral embeddings.
//!
//! The eigensolver never touches `ℒ = I - S` directly. It runs a block
//! Lanczos iteration with full reorthogonalization on the normalized
//! adjacency `S = D^{-1/2} A D^{-1/2}` and reports `λ = 1 - σ` for the
//! largest Ritz values `σ`, so the only work per step is one sparse
//! block matvec.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SeotError};
use crate::graph::CrossDomainGraph;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum IsolatedPolicy {
    /// Isolated nodes get a unit self-loop and eigenvalue 0.
    #[default]
    SelfLoop,
    /// Isolated nodes are left out of the operator.
    Drop,
}

/// Matrix-free `ℒ_sym` over a frozen graph.
#[derive(Debug, Clone)]
pub struct LaplacianOperator<'g> {
    graph: &'g CrossDomainGraph,
    /// `S` itself: the graph with weights `w_ij / √(d_i d_j)`.
    normalized: CrossDomainGraph,
    inv_sqrt_degree: Vec<f64>,
    isolated_policy: IsolatedPolicy,
    isolated: Vec<usize>,
    /// Active node indices in the original numbering; `None` means all.
    active: Option<Vec<usize>>,
}

pub fn laplacian(graph: &CrossDomainGraph, isolated_policy: IsolatedPolicy) -> LaplacianOperator<'_> {
    let degrees = graph.degrees();
    let isolated: Vec<usize> = (0..degrees.len()).filter(|&i| degrees[i] == 0.0).collect();
    let inv_sqrt_degree: Vec<f64> = degrees
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 })
        .collect();
    let normalized = graph.reweighted(|i, j, w| w * inv_sqrt_degree[i] * inv_sqrt_degree[j]);
    let active = match isolated_policy {
        IsolatedPolicy::Drop if !isolated.is_empty() => {
            Some((0..degrees.len()).filter(|&i| degrees[i] > 0.0).collect())
        }
        _ => None,
    };
    LaplacianOperator { graph, normalized, inv_sqrt_degree, isolated_policy, isolated, active }
}

impl LaplacianOperator<'_> {
    pub fn graph(&self) -> &CrossDomainGraph {
        self.graph
    }

    /// `1/√d_i`; isolated nodes carry 1 (their self-loop degree).
    pub fn inv_sqrt_degree(&self) -> &[f64] {
        &self.inv_sqrt_degree
    }

    pub fn isolated_policy(&self) -> IsolatedPolicy {
        self.isolated_policy
    }

    pub fn isolated_nodes(&self) -> &[usize] {
        &self.isolated
    }

    /// Operator dimension: `K`, or `K` minus the isolated nodes under `Drop`.
    pub fn dim(&self) -> usize {
        self.active.as_ref().map_or(self.graph.n_nodes(), Vec::len)
    }

    /// Maps operator rows back to graph nodes.
    pub fn index_map(&self) -> Option<&[usize]> {
        self.active.as_deref()
    }

    /// `Y = S X` on a `dim × b` row-major block.
    pub fn apply_normalized_adjacency(&self, x: ArrayView2<f64>, y: &mut Array2<f64>) {
        let b = x.ncols();
        match &self.active {
            None => {
                self.normalized.matmat(x, y);
                if self.isolated_policy == IsolatedPolicy::SelfLoop {
                    for &i in &self.isolated {
                        y.row_mut(i).assign(&x.row(i));
                    }
                }
            }
            Some(active) => {
                let k = self.graph.n_nodes();
                let mut full_x = Array2::<f64>::zeros((k, b));
                for (r, &i) in active.iter().enumerate() {
                    full_x.row_mut(i).assign(&x.row(r));
                }
                let mut full_y = Array2::<f64>::zeros((k, b));
                self.normalized.matmat(full_x.view(), &mut full_y);
                for (r, &i) in active.iter().enumerate() {
                    y.row_mut(r).assign(&full_y.row(i));
                }
            }
        }
    }

    /// `ℒ X = X - S X`.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros(x.raw_dim());
        self.apply_normalized_adjacency(x, &mut y);
        &x - &y
    }

    /// Dense `ℒ` in operator coordinates; for tests and small graphs.
    pub fn to_dense(&self) -> Array2<f64> {
        self.apply(Array2::eye(self.dim()).view())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverParams {
    /// Residual bound `‖ℒv - λv‖₂` for every returned pair.
    pub tol: f64,
    /// Maximum number of restart cycles.
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams { tol: 1e-9, max_iter: 500, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatvecStats {
    /// Block products performed.
    pub calls: usize,
    /// Total vectors multiplied.
    pub columns: usize,
    pub time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpairs {
    /// Ascending eigenvalues of `ℒ`.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, in operator coordinates.
    pub vectors: Array2<f64>,
    pub residuals: Vec<f64>,
    pub restarts: usize,
    pub matvecs: MatvecStats,
}

/// Orthogonalizes the columns of `q` against the orthonormal columns of `v`
/// (classical Gram-Schmidt, applied twice).
fn project_out(v: &Array2<f64>, q: &mut Array2<f64>) {
    if v.ncols() == 0 {
        return;
    }
    for _ in 0..2 {
        let coeffs = v.t().dot(&*q);
        *q -= &v.dot(&coeffs);
    }
}

/// Orthonormalizes the columns of `q` in place against `v` and each other,
/// dropping columns that are numerically dependent.
fn orthonormalize(v: &Array2<f64>, q: Array2<f64>) -> Array2<f64> {
    let mut q = q;
    let original: Vec<f64> = q.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect();
    project_out(v, &mut q);
    let mut kept: Vec<Array1<f64>> = Vec::new();
    for (c, col) in q.axis_iter(Axis(1)).enumerate() {
        let mut x = col.to_owned();
        for _ in 0..2 {
            for k in &kept {
                let d = k.dot(&x);
                x.scaled_add(-d, k);
            }
        }
        let norm = x.dot(&x).sqrt();
        if norm > 1e-10 * original[c].max(f64::MIN_POSITIVE) && norm > 1e-300 {
            kept.push(x / norm);
        }
    }
    let mut out = Array2::zeros((q.nrows(), kept.len()));
    for (c, k) in kept.iter().enumerate() {
        out.column_mut(c).assign(k);
    }
    // A second pass against `v` guards against growth from the in-block sweep.
    if !kept.is_empty() {
        project_out(v, &mut out);
        for mut col in out.axis_iter_mut(Axis(1)) {
            let n = col.dot(&col).sqrt();
            col /= n;
        }
    }
    out
}

fn random_block<R: Rng>(rng: &mut R, n: usize, b: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, b), |_| rng.sample::<f64, _>(StandardNormal))
}

fn hstack(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("equal row counts")
}

/// The `m` algebraically smallest eigenpairs of `ℒ_sym`.
///
/// Thick-restart block Lanczos on `S` with full reorthogonalization. The
/// block is at least `m` wide so that eigenvalues repeated up to `m` times
/// (one per connected component) are all captured. Every returned pair has
/// an explicitly computed residual at most `tol`; otherwise the call fails
/// with the residuals achieved.
pub fn smallest_eigenpairs(op: &LaplacianOperator<'_>, m: usize, params: &SolverParams) -> Result<Eigenpairs> {
    let n = op.dim();
    if m == 0 || m > n {
        return Err(SeotError::invalid(format!("requested {m} eigenpairs of a {n}-dimensional operator")));
    }
    if !(params.tol > 0.0) {
        return Err(SeotError::invalid("eigensolver tol must be > 0"));
    }
    let block = (m + 2).min(n);
    let keep = (m + block).min(n);
    let max_dim = (keep + 6 * block).max(keep + 20).min(n);
    let mut rng = stream_rng(params.seed, Stream::EigensolverStart);
    let mut stats = MatvecStats::default();

    let mut v = Array2::<f64>::zeros((n, 0));
    let mut sv = Array2::<f64>::zeros((n, 0));
    let mut q = orthonormalize(&v, random_block(&mut rng, n, block));
    let mut restarts = 0;
    loop {
        // Expand the basis block by block.
        // The frontier is always taken whole: clipping it would break
        // `S V ⊂ span(V, Q)`, which the thick restart relies on.
        while v.ncols() < max_dim && q.ncols() > 0 {
            let take = q.ncols();
            let q_now = std::mem::replace(&mut q, Array2::zeros((n, 0)));
            let mut sq = Array2::zeros((n, take));
            let start = Instant::now();
            op.apply_normalized_adjacency(q_now.view(), &mut sq);
            stats.time += start.elapsed();
            stats.calls += 1;
            stats.columns += take;
            v = hstack(&v, &q_now);
            sv = hstack(&sv, &sq);
            if v.ncols() == n {
                q = Array2::zeros((n, 0));
                break;
            }
            let mut next = orthonormalize(&v, sq);
            if next.ncols() < block {
                // The Krylov space went invariant; keep searching with fresh directions.
                let fill = (block - next.ncols()).min(n - v.ncols() - next.ncols());
                if fill > 0 {
                    let extra = orthonormalize(&hstack(&v, &next), random_block(&mut rng, n, fill));
                    next = hstack(&next, &extra);
                }
            }
            q = next;
        }

        // Rayleigh-Ritz on the current basis.
        let h = v.t().dot(&sv);
        let dim = h.nrows();
        let hs = DMatrix::from_fn(dim, dim, |i, j| 0.5 * (h[[i, j]] + h[[j, i]]));
        let eig = SymmetricEigen::new(hs);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let kept = keep.min(dim);
        let y = Array2::from_shape_fn((dim, kept), |(i, c)| eig.eigenvectors[(i, order[c])]);
        let theta: Vec<f64> = order[..kept].iter().map(|&i| eig.eigenvalues[i]).collect();
        let x = v.dot(&y);
        let sx = sv.dot(&y);
        let residuals: Vec<f64> = (0..m)
            .map(|c| {
                let r = &sx.column(c) - &(&x.column(c) * theta[c]);
                r.dot(&r).sqrt()
            })
            .collect();
        let worst = residuals.iter().copied().fold(0.0, f64::max);
        if worst <= params.tol || (v.ncols() == n && worst <= params.tol.max(1e-10)) {
            let values = theta[..m].iter().map(|t| 1.0 - t).collect();
            let vectors = x.slice(s![.., ..m]).to_owned();
            return Ok(Eigenpairs { values, vectors, residuals, restarts, matvecs: stats });
        }
        if restarts >= params.max_iter || (v.ncols() == n && q.ncols() == 0) {
            return Err(SeotError::IterativeSolver {
                iterations: restarts,
                max_residual: worst,
                residuals,
            });
        }
        restarts += 1;
        v = x;
        sv = sx;
        if q.ncols() == 0 {
            q = orthonormalize(&v, random_block(&mut rng, n, block.min(n - v.ncols())));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEmbedding {
    /// `K × k`, one row per graph node; row-normalized if requested.
    pub vectors: Array2<f64>,
    /// The eigenvector columns before row normalization.
    pub raw_vectors: Array2<f64>,
    /// Ascending `λ_1..λ_m`, `m ≥ k`.
    pub eigenvalues: Vec<f64>,
    pub k: usize,
    pub row_normalized: bool,
    pub residuals: Vec<f64>,
    pub restarts: usize,
    pub matvecs: MatvecStats,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmbedParams {
    pub solver: SolverParams,
    /// Extra eigenvalues beyond `k` computed for gap reporting.
    pub gap_margin: usize,
}

impl Default for EmbedParams {
    fn default() -> Self {
        EmbedParams { solver: SolverParams::default(), gap_margin: 5 }
    }
}

/// Rows of the eigenvectors of the `k` smallest eigenvalues, computing
/// `min(K - 1, k + gap_margin)` eigenvalues in total.
pub fn embed(
    op: &LaplacianOperator<'_>,
    k: usize,
    row_normalize: bool,
    params: &EmbedParams,
) -> Result<SpectralEmbedding> {
    let big_k = op.graph().n_nodes();
    if k == 0 || k >= big_k {
        return Err(SeotError::invalid(format!("embedding dimension {k} must lie in 1..{big_k}")));
    }
    if k > op.dim() {
        return Err(SeotError::invalid(format!(
            "embedding dimension {k} exceeds the {} non-isolated nodes",
            op.dim()
        )));
    }
    let m = (k + params.gap_margin).min(big_k - 1).min(op.dim()).max(k);
    let pairs = smallest_eigenpairs(op, m, &params.solver)?;
    embedding_from_pairs(op, pairs, k, row_normalize)
}

/// Builds the embedding from already computed eigenpairs, keeping the first
/// `k` vectors and all eigenvalues.
pub fn embedding_from_pairs(
    op: &LaplacianOperator<'_>,
    pairs: Eigenpairs,
    k: usize,
    row_normalize: bool,
) -> Result<SpectralEmbedding> {
    let big_k = op.graph().n_nodes();
    if k == 0 || k > pairs.values.len() {
        return Err(SeotError::invalid(format!(
            "embedding dimension {k} needs that many eigenpairs, have {}",
            pairs.values.len()
        )));
    }
    let mut raw = Array2::<f64>::zeros((big_k, k));
    match op.index_map() {
        None => raw.assign(&pairs.vectors.slice(s![.., ..k])),
        Some(map) => {
            for (r, &i) in map.iter().enumerate() {
                raw.row_mut(i).assign(&pairs.vectors.slice(s![r, ..k]));
            }
        }
    }
    let mut vectors = raw.clone();
    if row_normalize {
        for mut row in vectors.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
    }
    Ok(SpectralEmbedding {
        vectors,
        raw_vectors: raw,
        eigenvalues: pairs.values,
        k,
        row_normalized: row_normalize,
        residuals: pairs.residuals,
        restarts: pairs.restarts,
        matvecs: pairs.matvecs,
    })
}

/// Gaps closer than this to the maximum count as ties.
pub const GAP_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GapSelection {
    pub k: usize,
    /// `(j, λ_{j+1} - λ_j)` for `j` in `k_min..=k_max` (1-based indices).
    pub gaps: Vec<(usize, f64)>,
    /// The gap at the class count, `λ_{N_c+1} - λ_{N_c}`.
    pub class_gap: f64,
}

/// Eigengap heuristic: `k = argmax_j (λ_{j+1} - λ_j)` over `j ∈ [k_min, k_max]`,
/// ties going to the smallest `j`.
pub fn select_k(eigenvalues: &[f64], n_classes: usize, k_min: usize, k_max: usize) -> Result<GapSelection> {
    if k_min == 0 || k_min > k_max {
        return Err(SeotError::invalid(format!("invalid gap range [{k_min}, {k_max}]")));
    }
    if k_min < n_classes {
        return Err(SeotError::invalid(format!("k_min = {k_min} is below n_classes = {n_classes}")));
    }
    if k_max >= eigenvalues.len() {
        return Err(SeotError::invalid(format!(
            "k_max = {k_max} needs at least {} eigenvalues, got {}",
            k_max + 1,
            eigenvalues.len()
        )));
    }
    let gap = |j: usize| eigenvalues[j] - eigenvalues[j - 1];
    let gaps: Vec<(usize, f64)> = (k_min..=k_max).map(|j| (j, gap(j))).collect();
    let best = gaps.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
    let k = gaps
        .iter()
        .find(|g| g.1 >= best - GAP_TIE_TOL)
        .map(|g| g.0)
        .expect("range is non-empty");
    let class_gap = if n_classes >= 1 { gap(n_classes) } else { f64::NAN };
    Ok(GapSelection { k, gaps, class_gap })
}
