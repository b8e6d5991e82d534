//! Free-support Wasserstein barycenter of labeled source domains.
//!
//! The fit alternates between entropic plans from the current support to
//! every source and a barycentric projection of each atom onto the samples
//! it is coupled with. Both steps decrease the weighted entropic objective
//! `Σ_i w_i (<C_i, γ_i> - ε H(γ_i))`. `objective_trace` records it through
//! the entropic dual of each plan, which matches the primal at the optimum
//! but is only second-order sensitive to the marginal error of a finished
//! solve, so the plans can be solved to the caller's tolerance.

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;

use crate::error::{Result, SeotError};
use crate::measures::{cost_matrix, uniform_measure, DataMatrix, DiscreteMeasure, LabeledDomain};
use crate::ot::{dual_objective, entropy, sinkhorn_warm, transport_cost, Potentials, SinkhornConfig, TransportPlan};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BarycenterInit {
    RandomSubset,
    KMeansPlusPlus,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BarycenterConfig {
    /// Number of atoms; `None` uses the size of the smallest source.
    pub n_atoms: Option<usize>,
    /// Weights over sources; `None` is uniform.
    pub source_weights: Option<Vec<f64>>,
    pub max_outer_iter: usize,
    /// Stop once no atom moves farther than this in one outer iteration.
    pub support_tol: f64,
    pub init: BarycenterInit,
    pub seed: u64,
}

impl Default for BarycenterConfig {
    fn default() -> Self {
        BarycenterConfig {
            n_atoms: None,
            source_weights: None,
            max_outer_iter: 100,
            support_tol: 1e-5,
            init: BarycenterInit::KMeansPlusPlus,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Barycenter {
    support: DataMatrix,
    weights: Array1<f64>,
    atom_labels: Vec<usize>,
    source_weights: Vec<f64>,
    plans_to_sources: Vec<TransportPlan>,
    plan_to_target: Option<TransportPlan>,
    objective_trace: Vec<f64>,
    cost_trace: Vec<f64>,
    outer_iterations: usize,
    converged: bool,
    label_fallback_atoms: Vec<usize>,
}

impl Barycenter {
    pub fn support(&self) -> &DataMatrix {
        &self.support
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn n_atoms(&self) -> usize {
        self.support.rows()
    }

    pub fn atom_labels(&self) -> &[usize] {
        &self.atom_labels
    }

    pub fn source_weights(&self) -> &[f64] {
        &self.source_weights
    }

    pub fn plans_to_sources(&self) -> &[TransportPlan] {
        &self.plans_to_sources
    }

    pub fn plan_to_target(&self) -> Option<&TransportPlan> {
        self.plan_to_target.as_ref()
    }

    /// Weighted entropic objective after each plan solve; non-increasing.
    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    /// Weighted plain transport cost `Σ_i w_i <C_i, γ_i>` alongside the objective.
    pub fn cost_trace(&self) -> &[f64] {
        &self.cost_trace
    }

    pub fn outer_iterations(&self) -> usize {
        self.outer_iterations
    }

    /// Whether the support displacement fell below `support_tol`.
    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Atoms that received no transported mass and were labeled by their
    /// nearest source sample instead.
    pub fn label_fallback_atoms(&self) -> &[usize] {
        &self.label_fallback_atoms
    }

    /// Uniform measure on the support.
    pub fn measure(&self) -> DiscreteMeasure {
        DiscreteMeasure::new(self.support.clone(), self.weights.clone())
            .expect("barycenter weights are uniform")
    }

    /// True when every stored plan reported convergence.
    pub fn plans_converged(&self) -> bool {
        self.plans_to_sources
            .iter()
            .chain(self.plan_to_target.iter())
            .all(TransportPlan::converged)
    }
}

fn check_sources(sources: &[LabeledDomain]) -> Result<usize> {
    let first = sources
        .first()
        .ok_or_else(|| SeotError::invalid("barycenter needs at least one source"))?;
    let d = first.dim();
    for (i, s) in sources.iter().enumerate() {
        if s.dim() != d {
            return Err(SeotError::shape(format!(
                "source {i} has dimension {} but source 0 has {d}",
                s.dim()
            )));
        }
        if s.labels().is_none() {
            return Err(SeotError::invalid(format!("source {i} is unlabeled")));
        }
    }
    Ok(d)
}

fn resolve_weights(cfg: &BarycenterConfig, n_sources: usize) -> Result<Vec<f64>> {
    match &cfg.source_weights {
        None => Ok(vec![1.0 / n_sources as f64; n_sources]),
        Some(w) => {
            if w.len() != n_sources {
                return Err(SeotError::shape(format!(
                    "{} source weights for {n_sources} sources",
                    w.len()
                )));
            }
            let sum: f64 = w.iter().sum();
            if w.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(SeotError::invalid("source weights must lie on the simplex"));
            }
            Ok(w.iter().map(|x| x / sum).collect())
        }
    }
}

fn pooled_points(sources: &[LabeledDomain]) -> Array2<f64> {
    let d = sources[0].dim();
    let n: usize = sources.iter().map(LabeledDomain::len).sum();
    let mut out = Array2::zeros((n, d));
    let mut r = 0;
    for s in sources {
        for row in s.points().as_array().rows() {
            out.row_mut(r).assign(&row);
            r += 1;
        }
    }
    out
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: each new center drawn with probability proportional
/// to its squared distance from the centers chosen so far.
fn kmeans_plus_plus<R: Rng>(pool: &Array2<f64>, k: usize, rng: &mut R) -> Vec<usize> {
    let n = pool.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(pool.row(i), pool.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(i);
                    if target < *w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // Every remaining point duplicates a center; fall back to any unused index.
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(pool.row(i), pool.row(next)));
        }
    }
    chosen
}

fn initial_support(pool: &Array2<f64>, k: usize, cfg: &BarycenterConfig) -> Result<DataMatrix> {
    let mut rng = stream_rng(cfg.seed, Stream::BarycenterInit);
    let picks = match cfg.init {
        BarycenterInit::KMeansPlusPlus => kmeans_plus_plus(pool, k, &mut rng),
        BarycenterInit::RandomSubset => index::sample(&mut rng, pool.nrows(), k).into_vec(),
    };
    let mut out = Array2::zeros((k, pool.ncols()));
    for (r, &i) in picks.iter().enumerate() {
        out.row_mut(r).assign(&pool.row(i));
    }
    DataMatrix::new(out)
}

struct Solved {
    plans: Vec<TransportPlan>,
    objective: f64,
    cost: f64,
}

fn solve_plans(
    bary: &DiscreteMeasure,
    sources: &[LabeledDomain],
    weights: &[f64],
    ot_cfg: &SinkhornConfig,
    warm: Option<&[TransportPlan]>,
) -> Result<Solved> {
    let mut plans = Vec::with_capacity(sources.len());
    let (mut objective, mut cost) = (0.0, 0.0);
    for (i, s) in sources.iter().enumerate() {
        let c = cost_matrix(bary.points(), s.points(), 2.0)?;
        let init: Option<&Potentials> = warm.and_then(|w| w[i].potentials());
        let plan = sinkhorn_warm(bary, s.measure(), &c, ot_cfg, init)?;
        let plan_cost = transport_cost(&plan, &c)?;
        cost += weights[i] * plan_cost;
        let value = dual_objective(&plan, bary, s.measure())
            .unwrap_or_else(|| plan_cost - ot_cfg.epsilon * entropy(&plan));
        objective += weights[i] * value;
        plans.push(plan);
    }
    Ok(Solved { plans, objective, cost })
}

/// Moves every atom to the plan-weighted mean of the samples it is coupled
/// with, pooled over sources. Returns the new support and the largest move.
fn project_support(
    support: &DataMatrix,
    plans: &[TransportPlan],
    sources: &[LabeledDomain],
    weights: &[f64],
) -> Result<(DataMatrix, f64)> {
    let (k, d) = (support.rows(), support.cols());
    let mut num = Array2::<f64>::zeros((k, d));
    let mut den = Array1::<f64>::zeros(k);
    for ((plan, s), w) in plans.iter().zip(sources).zip(weights) {
        let g = plan.gamma();
        num.scaled_add(*w, &g.dot(s.points().as_array()));
        den.scaled_add(*w, &plan.row_marginal());
    }
    let mut next = support.as_array().clone();
    let mut moved: f64 = 0.0;
    for a in 0..k {
        if den[a] > 0.0 {
            let target = num.row(a).mapv(|v| v / den[a]);
            moved = moved.max(sq_dist(target.view(), next.row(a)).sqrt());
            next.row_mut(a).assign(&target);
        }
    }
    Ok((DataMatrix::new(next)?, moved))
}

/// Fits a free-support barycenter of `sources` under squared-Euclidean cost.
///
/// The cost exponent is fixed at 2. Atom labels come from
/// [`assign_atom_labels`]. `plan_to_target` stays empty until
/// [`attach_target`].
pub fn fit_barycenter(
    sources: &[LabeledDomain],
    cfg: &BarycenterConfig,
    ot_cfg: &SinkhornConfig,
) -> Result<Barycenter> {
    fit_barycenter_with_cost(sources, cfg, ot_cfg, 2.0)
}

/// [`fit_barycenter`] with an explicit cost exponent; only `p = 2` has a
/// closed-form support update and anything else is rejected.
pub fn fit_barycenter_with_cost(
    sources: &[LabeledDomain],
    cfg: &BarycenterConfig,
    ot_cfg: &SinkhornConfig,
    p: f64,
) -> Result<Barycenter> {
    if p != 2.0 {
        return Err(SeotError::UnsupportedCost(p));
    }
    check_sources(sources)?;
    ot_cfg.validate()?;
    let weights = resolve_weights(cfg, sources.len())?;
    let total: usize = sources.iter().map(LabeledDomain::len).sum();
    let n_atoms = cfg
        .n_atoms
        .unwrap_or_else(|| sources.iter().map(LabeledDomain::len).min().unwrap_or(0));
    if n_atoms == 0 {
        return Err(SeotError::invalid("n_atoms must be >= 1"));
    }
    if n_atoms > total {
        return Err(SeotError::invalid(format!(
            "n_atoms = {n_atoms} exceeds the {total} pooled source samples"
        )));
    }
    let n_classes = sources.iter().filter_map(LabeledDomain::n_classes).max().unwrap_or(1);
    if n_atoms < n_classes {
        return Err(SeotError::invalid(format!(
            "n_atoms = {n_atoms} is below the {n_classes} classes"
        )));
    }
    if !(cfg.support_tol >= 0.0) {
        return Err(SeotError::invalid("support_tol must be >= 0"));
    }

    let mut support = initial_support(&pooled_points(sources), n_atoms, cfg)?;
    let mut solved = solve_plans(&uniform_measure(support.clone())?, sources, &weights, ot_cfg, None)?;
    let mut objective_trace = vec![solved.objective];
    let mut cost_trace = vec![solved.cost];
    let mut outer_iterations = 0;
    let mut converged = false;
    while outer_iterations < cfg.max_outer_iter {
        outer_iterations += 1;
        let (next, moved) = project_support(&support, &solved.plans, sources, &weights)?;
        support = next;
        solved = solve_plans(
            &uniform_measure(support.clone())?,
            sources,
            &weights,
            ot_cfg,
            Some(&solved.plans),
        )?;
        objective_trace.push(solved.objective);
        cost_trace.push(solved.cost);
        if moved < cfg.support_tol {
            converged = true;
            break;
        }
    }

    let mut bary = Barycenter {
        weights: Array1::from_elem(n_atoms, 1.0 / n_atoms as f64),
        support,
        atom_labels: Vec::new(),
        source_weights: weights,
        plans_to_sources: solved.plans,
        plan_to_target: None,
        objective_trace,
        cost_trace,
        outer_iterations,
        converged,
        label_fallback_atoms: Vec::new(),
    };
    let labeling = assign_atom_labels(&bary, sources)?;
    bary.atom_labels = labeling.labels;
    bary.label_fallback_atoms = labeling.fallback_atoms;
    Ok(bary)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomLabeling {
    pub labels: Vec<usize>,
    /// Atoms with no transported mass, labeled by their nearest source sample.
    pub fallback_atoms: Vec<usize>,
}

/// Labels each atom with the class receiving most of its transported mass,
/// `argmax_c Σ_i w_i Σ_{j: y_j = c} γ_i[k, j]`, ties toward the smaller id.
pub fn assign_atom_labels(bary: &Barycenter, sources: &[LabeledDomain]) -> Result<AtomLabeling> {
    check_sources(sources)?;
    let plans = bary.plans_to_sources();
    if plans.len() != sources.len() {
        return Err(SeotError::InvalidState(format!(
            "barycenter has {} source plans but {} sources were given",
            plans.len(),
            sources.len()
        )));
    }
    let gammas: Vec<&Array2<f64>> = plans.iter().map(TransportPlan::gamma).collect();
    let labels: Vec<&[usize]> = sources.iter().map(|s| s.labels().unwrap_or(&[])).collect();
    let n_classes = sources.iter().filter_map(LabeledDomain::n_classes).max().unwrap_or(1);
    let mass = class_mass(&gammas, bary.source_weights(), &labels, n_classes)?;

    let mut out = AtomLabeling { labels: Vec::with_capacity(bary.n_atoms()), fallback_atoms: Vec::new() };
    for (k, row) in mass.rows().into_iter().enumerate() {
        let total: f64 = row.sum();
        if total > 0.0 {
            out.labels.push(argmax_first(row.iter().copied()));
        } else {
            out.fallback_atoms.push(k);
            out.labels.push(nearest_label(bary.support().row(k), sources));
        }
    }
    Ok(out)
}

/// `n_atoms × n_classes` transported class mass.
pub fn class_mass(
    gammas: &[&Array2<f64>],
    weights: &[f64],
    labels: &[&[usize]],
    n_classes: usize,
) -> Result<Array2<f64>> {
    let n_atoms = gammas.first().map_or(0, |g| g.nrows());
    let mut mass = Array2::<f64>::zeros((n_atoms, n_classes));
    for ((g, w), y) in gammas.iter().zip(weights).zip(labels) {
        if g.nrows() != n_atoms || g.ncols() != y.len() {
            return Err(SeotError::shape("plan shape does not match atoms and labels"));
        }
        for k in 0..n_atoms {
            for (j, &c) in y.iter().enumerate() {
                if c >= n_classes {
                    return Err(SeotError::invalid(format!("class id {c} >= {n_classes}")));
                }
                mass[[k, c]] += w * g[[k, j]];
            }
        }
    }
    Ok(mass)
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn nearest_label(x: ndarray::ArrayView1<f64>, sources: &[LabeledDomain]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for s in sources {
        let labels = s.labels().unwrap_or(&[]);
        for (row, &y) in s.points().as_array().rows().into_iter().zip(labels) {
            let d = sq_dist(x, row);
            if d < best.0 {
                best = (d, y);
            }
        }
    }
    best.1
}

/// Solves the plan from the barycenter to `target` and stores it, replacing
/// any earlier target plan. Source plans and support are left untouched.
pub fn attach_target(
    mut bary: Barycenter,
    target: &LabeledDomain,
    ot_cfg: &SinkhornConfig,
) -> Result<Barycenter> {
    if target.dim() != bary.support.cols() {
        return Err(SeotError::shape(format!(
            "target has dimension {} but the barycenter has {}",
            target.dim(),
            bary.support.cols()
        )));
    }
    let c = cost_matrix(&bary.support, target.points(), 2.0)?;
    let plan = crate::ot::sinkhorn(&bary.measure(), target.measure(), &c, ot_cfg)?;
    bary.plan_to_target = Some(plan);
    Ok(bary)
}
