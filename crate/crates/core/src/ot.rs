//! Entropic optimal transport.
//!
//! [`sinkhorn`] minimizes `<C, γ> - ε H(γ)` over couplings of two discrete
//! measures. The default log-domain solver keeps the dual potentials `F, G`
//! (with `γ_ij = exp((F_i + G_j - C_ij) / ε)`) as the canonical state and runs
//! cheap kernel scalings on top of them, folding the scalings back into the
//! potentials whenever they drift far from one. Log-sum-exp half steps
//! re-center the potentials at every ε stage and whenever the kernel
//! underflows, which keeps ε down to 1e-4 on standardized data finite.
//!
//! A cold start anneals ε geometrically from the cost scale down to the
//! target, each stage warm-starting the next. A warm start from supplied
//! potentials goes straight to the target ε.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Result, SeotError};
use crate::measures::{CostMatrix, DiscreteMeasure};

/// Scalings are folded into the potentials once `|ln u|` or `|ln v|` exceeds this.
const ABSORB_LOG_THRESHOLD: f64 = 50.0;
/// Geometric ratio between successive ε stages.
const EPS_SCALING_FACTOR: f64 = 0.25;
/// Marginal tolerance for the annealing stages before the last one.
const STAGE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regularization ε.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Target L1 error of the row and column marginals.
    pub tol: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 1e-2,
            max_iter: 10_000,
            tol: 1e-8,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(SeotError::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0) {
            return Err(SeotError::invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(SeotError::invalid("max_iter must be >= 1"));
        }
        Ok(())
    }
}

/// Dual potentials: `γ_ij = exp((f_i + g_j - C_ij) / ε)`.
///
/// Zero-weight atoms carry `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    gamma: Array2<f64>,
    cost: Option<f64>,
    iterations: usize,
    marginal_error: f64,
    epsilon: f64,
    converged: bool,
    potentials: Option<Potentials>,
    dual_trace: Vec<f64>,
}

impl TransportPlan {
    /// Wraps a coupling that did not come from the solver.
    pub fn from_gamma(gamma: Array2<f64>) -> Result<Self> {
        if gamma.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SeotError::invalid("plan entries must be finite and nonnegative"));
        }
        Ok(TransportPlan {
            gamma,
            cost: None,
            iterations: 0,
            marginal_error: 0.0,
            epsilon: 0.0,
            converged: true,
            potentials: None,
            dual_trace: Vec::new(),
        })
    }

    pub fn gamma(&self) -> &Array2<f64> {
        &self.gamma
    }

    pub fn shape(&self) -> (usize, usize) {
        self.gamma.dim()
    }

    /// `<C, γ>` against the cost the plan was solved for.
    pub fn cost(&self) -> Option<f64> {
        self.cost
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `max(|γ1 - μ|_1, |γᵀ1 - ν|_1)` at the returned iterate.
    pub fn marginal_error(&self) -> f64 {
        self.marginal_error
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn potentials(&self) -> Option<&Potentials> {
        self.potentials.as_ref()
    }

    /// Negated entropic dual after every iteration of the final ε stage.
    /// Non-increasing, since each half step maximizes the dual exactly.
    pub fn dual_trace(&self) -> &[f64] {
        &self.dual_trace
    }

    pub fn row_marginal(&self) -> Array1<f64> {
        self.gamma.sum_axis(Axis(1))
    }

    pub fn col_marginal(&self) -> Array1<f64> {
        self.gamma.sum_axis(Axis(0))
    }

    pub fn total_mass(&self) -> f64 {
        self.gamma.sum()
    }
}

/// Shannon entropy `-Σ γ log γ` with `0 log 0 = 0`.
pub fn entropy(plan: &TransportPlan) -> f64 {
    -plan
        .gamma
        .iter()
        .filter(|&&g| g > 0.0)
        .map(|g| g * g.ln())
        .sum::<f64>()
}

/// Entropic dual `<f, a> + <g, b> - ε (Σγ - 1)` at the plan's potentials.
///
/// At the optimum this equals `<C, γ> - ε H(γ)`. Away from it the gap is
/// second order in the marginal error, while the primal value is off to
/// first order. `None` for plans without potentials.
pub fn dual_objective(plan: &TransportPlan, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Option<f64> {
    let pot = plan.potentials()?;
    if pot.f.len() != mu.len() || pot.g.len() != nu.len() {
        return None;
    }
    let side = |w: &Array1<f64>, p: &Array1<f64>| -> f64 {
        w.iter().zip(p).filter(|(w, _)| **w > 0.0).map(|(w, p)| w * p).sum()
    };
    let mass: f64 = plan.gamma.sum();
    Some(side(mu.weights(), &pot.f) + side(nu.weights(), &pot.g) - plan.epsilon * (mass - 1.0))
}

/// Frobenius inner product `<C, γ>`.
pub fn transport_cost(plan: &TransportPlan, c: &CostMatrix) -> Result<f64> {
    if plan.shape() != c.shape() {
        return Err(SeotError::shape(format!(
            "plan is {:?} but cost is {:?}",
            plan.shape(),
            c.shape()
        )));
    }
    Ok(plan
        .gamma
        .iter()
        .zip(c.values().iter())
        .map(|(g, c)| g * c)
        .sum())
}

fn marginal_errors(gamma: &Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let rows: f64 = gamma
        .sum_axis(Axis(1))
        .iter()
        .zip(a)
        .map(|(r, a)| (r - a).abs())
        .sum();
    let cols: f64 = gamma
        .sum_axis(Axis(0))
        .iter()
        .zip(b)
        .map(|(c, b)| (c - b).abs())
        .sum();
    rows.max(cols)
}

fn check_inputs(mu: &DiscreteMeasure, nu: &DiscreteMeasure, c: &CostMatrix) -> Result<()> {
    if c.shape() != (mu.len(), nu.len()) {
        return Err(SeotError::shape(format!(
            "cost is {:?} but measures have {} and {} atoms",
            c.shape(),
            mu.len(),
            nu.len()
        )));
    }
    Ok(())
}

/// Entropic OT plan between `mu` and `nu` under cost `c`.
///
/// Running out of iterations is not an error: the plan comes back with
/// `converged() == false` and the iterate with the smallest marginal error.
pub fn sinkhorn(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    sinkhorn_warm(mu, nu, c, cfg, None)
}

/// [`sinkhorn`] started from previously computed dual potentials.
pub fn sinkhorn_warm(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &CostMatrix,
    cfg: &SinkhornConfig,
    init: Option<&Potentials>,
) -> Result<TransportPlan> {
    cfg.validate()?;
    check_inputs(mu, nu, c)?;
    if let Some(p) = init {
        if p.f.len() != mu.len() || p.g.len() != nu.len() {
            return Err(SeotError::shape("warm-start potentials do not match the measures"));
        }
    }
    if cfg.log_domain {
        LogSolver::new(mu.weights(), nu.weights(), c.values(), cfg).solve(init)
    } else {
        solve_plain(mu.weights(), nu.weights(), c.values(), cfg)
    }
}

fn finish(
    gamma: Array2<f64>,
    a: &Array1<f64>,
    b: &Array1<f64>,
    c: &Array2<f64>,
    cfg: &SinkhornConfig,
    iterations: usize,
    potentials: Option<Potentials>,
    dual_trace: Vec<f64>,
) -> TransportPlan {
    let marginal_error = marginal_errors(&gamma, a, b);
    let cost = gamma.iter().zip(c.iter()).map(|(g, c)| g * c).sum();
    TransportPlan {
        converged: marginal_error <= cfg.tol,
        gamma,
        cost: Some(cost),
        iterations,
        marginal_error,
        epsilon: cfg.epsilon,
        potentials,
        dual_trace,
    }
}

/// Textbook scaling iterations on `exp(-C/ε)`, kept for cross-checks at large ε.
fn solve_plain(
    a: &Array1<f64>,
    b: &Array1<f64>,
    c: &Array2<f64>,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan> {
    let eps = cfg.epsilon;
    let kernel = c.mapv(|x| (-x / eps).exp());
    let mut u = Array1::<f64>::ones(a.len());
    let mut v = Array1::<f64>::ones(b.len());
    let mut best: Option<(f64, Array1<f64>, Array1<f64>)> = None;
    let mut iterations = 0;
    let mut dual_trace = Vec::new();
    loop {
        let kv = kernel.dot(&v);
        if iterations > 0 {
            let err: f64 = u.iter().zip(&kv).zip(a).map(|((u, k), a)| (u * k - a).abs()).sum();
            if err.is_nan() {
                return Err(SeotError::Numerical {
                    iteration: iterations,
                    message: "NaN marginal error in plain Sinkhorn".into(),
                });
            }
            if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
                best = Some((err, u.clone(), v.clone()));
            }
            if err <= cfg.tol || iterations >= cfg.max_iter {
                break;
            }
        }
        for ((ui, ki), ai) in u.iter_mut().zip(&kv).zip(a) {
            *ui = if *ai > 0.0 { ai / ki } else { 0.0 };
        }
        let ktu = kernel.t().dot(&u);
        for ((vj, kj), bj) in v.iter_mut().zip(&ktu).zip(b) {
            *vj = if *bj > 0.0 { bj / kj } else { 0.0 };
        }
        iterations += 1;
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(SeotError::Numerical {
                iteration: iterations,
                message: "kernel underflow in plain Sinkhorn; use the log-domain solver".into(),
            });
        }
        let dual: f64 = a
            .iter()
            .zip(&u)
            .chain(b.iter().zip(&v))
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, s)| w * eps * s.ln())
            .sum();
        dual_trace.push(-dual);
    }
    let (_, u, v) = best.expect("at least one iteration runs");
    let mut gamma = kernel;
    for (mut row, ui) in gamma.rows_mut().into_iter().zip(&u) {
        for (g, vj) in row.iter_mut().zip(&v) {
            *g *= ui * vj;
        }
    }
    let potentials = Potentials {
        f: u.mapv(|x| eps * x.ln()),
        g: v.mapv(|x| eps * x.ln()),
    };
    Ok(finish(gamma, a, b, c, cfg, iterations, Some(potentials), dual_trace))
}

struct LogSolver<'a> {
    a: &'a Array1<f64>,
    b: &'a Array1<f64>,
    c: &'a Array2<f64>,
    cfg: &'a SinkhornConfig,
    log_a: Array1<f64>,
    log_b: Array1<f64>,
}

struct LogState {
    eps: f64,
    f: Array1<f64>,
    g: Array1<f64>,
    u: Array1<f64>,
    v: Array1<f64>,
    kernel: Array2<f64>,
}

impl LogState {
    /// Folds the scalings into the potentials and rebuilds the kernel.
    fn absorb(&mut self, c: &Array2<f64>) {
        let eps = self.eps;
        for (f, u) in self.f.iter_mut().zip(self.u.iter_mut()) {
            if f.is_finite() {
                *f += eps * u.ln();
            }
            *u = 1.0;
        }
        for (g, v) in self.g.iter_mut().zip(self.v.iter_mut()) {
            if g.is_finite() {
                *g += eps * v.ln();
            }
            *v = 1.0;
        }
        self.rebuild_kernel(c);
    }

    fn rebuild_kernel(&mut self, c: &Array2<f64>) {
        let eps = self.eps;
        let g = &self.g;
        for ((mut row, c_row), fi) in self.kernel.rows_mut().into_iter().zip(c.rows()).zip(&self.f) {
            for ((k, cij), gj) in row.iter_mut().zip(c_row).zip(g) {
                *k = flushed_exp((fi + gj - cij) / eps);
            }
        }
    }

    fn canonical(&self) -> Potentials {
        let eps = self.eps;
        let fold = |p: &Array1<f64>, s: &Array1<f64>| {
            Array1::from_iter(p.iter().zip(s).map(|(p, s)| {
                if p.is_finite() && *s > 0.0 {
                    p + eps * s.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }))
        };
        Potentials {
            f: fold(&self.f, &self.u),
            g: fold(&self.g, &self.v),
        }
    }
}

/// `exp(x)` with subnormal results flushed to zero. They carry no usable
/// mass and make every later product involving them very slow.
#[inline]
fn flushed_exp(x: f64) -> f64 {
    let e = x.exp();
    if e < f64::MIN_POSITIVE {
        0.0
    } else {
        e
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl<'a> LogSolver<'a> {
    fn new(
        a: &'a Array1<f64>,
        b: &'a Array1<f64>,
        c: &'a Array2<f64>,
        cfg: &'a SinkhornConfig,
    ) -> Self {
        LogSolver {
            a,
            b,
            c,
            cfg,
            log_a: a.mapv(f64::ln),
            log_b: b.mapv(f64::ln),
        }
    }

    /// Exact row update: `f_i = ε ln a_i - ε LSE_j((g_j - C_ij) / ε)`.
    fn lse_rows(&self, st: &mut LogState) {
        let eps = st.eps;
        for i in 0..self.a.len() {
            st.f[i] = if self.a[i] > 0.0 {
                let row = self.c.row(i);
                let g = &st.g;
                eps * self.log_a[i]
                    - eps * log_sum_exp((0..g.len()).map(|j| (g[j] - row[j]) / eps))
            } else {
                f64::NEG_INFINITY
            };
        }
    }

    fn lse_cols(&self, st: &mut LogState) {
        let eps = st.eps;
        for j in 0..self.b.len() {
            st.g[j] = if self.b[j] > 0.0 {
                let col = self.c.column(j);
                let f = &st.f;
                eps * self.log_b[j]
                    - eps * log_sum_exp((0..f.len()).map(|i| (f[i] - col[i]) / eps))
            } else {
                f64::NEG_INFINITY
            };
        }
    }

    fn recenter(&self, st: &mut LogState) {
        st.absorb(self.c);
        self.lse_rows(st);
        self.lse_cols(st);
        st.u.fill(1.0);
        st.v.fill(1.0);
        st.rebuild_kernel(self.c);
    }

    /// Entropic dual `<F, a> + <G, b> - ε Σγ + ε` at the current iterate, given its total mass.
    fn dual(&self, st: &LogState, mass: f64) -> f64 {
        let eps = st.eps;
        let side = |w: &Array1<f64>, p: &Array1<f64>, s: &Array1<f64>| -> f64 {
            w.iter()
                .zip(p)
                .zip(s)
                .filter(|((w, _), _)| **w > 0.0)
                .map(|((w, p), s)| w * (p + eps * s.ln()))
                .sum()
        };
        side(self.a, &st.f, &st.u) + side(self.b, &st.g, &st.v) - eps * mass + eps
    }

    fn schedule(&self, warm: bool) -> Vec<f64> {
        let target = self.cfg.epsilon;
        let mut stages = Vec::new();
        if !warm {
            let scale = self.c.iter().copied().fold(0.0, f64::max);
            let mut e = scale;
            while e > target {
                stages.push(e);
                e *= EPS_SCALING_FACTOR;
            }
        }
        stages.push(target);
        stages
    }

    /// One scaling sweep over rows then columns, over-relaxed by `omega`.
    ///
    /// Returns the dual value and the column L1 error of the new iterate, or
    /// `None` when a column of the kernel underflowed. A relaxed sweep that
    /// would lower the dual is replaced by a plain sweep, so the dual never
    /// decreases.
    fn sweep(
        &self,
        st: &mut LogState,
        kv: &Array1<f64>,
        omega: f64,
        last_dual: f64,
    ) -> Option<(f64, f64)> {
        let saved = (omega > 1.0).then(|| (st.u.clone(), st.v.clone()));
        let result = self.relaxed_sweep(st, kv, omega)?;
        match saved {
            Some((u, v)) if result.0 < last_dual => {
                st.u = u;
                st.v = v;
                self.relaxed_sweep(st, kv, 1.0)
            }
            _ => Some(result),
        }
    }

    fn relaxed_sweep(&self, st: &mut LogState, kv: &Array1<f64>, omega: f64) -> Option<(f64, f64)> {
        let relax = |old: f64, target: f64| {
            if omega == 1.0 {
                target
            } else {
                old.powf(1.0 - omega) * target.powf(omega)
            }
        };
        for ((ui, ki), ai) in st.u.iter_mut().zip(kv).zip(self.a) {
            *ui = if *ai > 0.0 { relax(*ui, ai / ki) } else { 0.0 };
        }
        let ktu = transposed_matvec(&st.kernel, &st.u);
        let (mut mass, mut col_err) = (0.0, 0.0);
        for ((vj, kj), bj) in st.v.iter_mut().zip(&ktu).zip(self.b) {
            if *bj > 0.0 {
                if !(*kj > 0.0) {
                    return None;
                }
                *vj = relax(*vj, bj / kj);
            } else {
                *vj = 0.0;
            }
            let col = *vj * kj;
            mass += col;
            col_err += (col - bj).abs();
        }
        Some((self.dual(st, mass), col_err))
    }

    fn solve(self, init: Option<&Potentials>) -> Result<TransportPlan> {
        let (n, m) = (self.a.len(), self.b.len());
        let stages = self.schedule(init.is_some());
        let eps0 = stages[0];
        let (f, g) = match init {
            Some(p) => (p.f.clone(), p.g.clone()),
            None => (self.log_a.mapv(|x| eps0 * x), self.log_b.mapv(|x| eps0 * x)),
        };
        let mut st = LogState {
            eps: eps0,
            f,
            g,
            u: Array1::ones(n),
            v: Array1::ones(m),
            kernel: Array2::zeros((n, m)),
        };

        let mut iterations = 0usize;
        let mut dual_trace = Vec::new();
        let mut best: Option<(f64, Potentials)> = None;
        let last_stage = stages.len() - 1;

        'stages: for (s, &eps) in stages.iter().enumerate() {
            let is_final = s == last_stage;
            let stage_tol = if is_final { self.cfg.tol } else { STAGE_TOL.max(self.cfg.tol) };
            st.eps = eps;
            self.recenter(&mut st);
            // Columns are exact right after re-centering.
            let mut col_err = 0.0;
            let mut last_dual = self.dual(&st, 1.0);
            let mut omega: f64 = 1.0;
            let mut history: Vec<f64> = Vec::new();
            let mut stage_sweeps = 0usize;
            let mut last_rate: Option<f64> = None;
            let mut newton_enabled = n.min(m) <= NEWTON_MAX_DIM;
            if is_final {
                best = None;
            }
            loop {
                let kv = matvec(&st.kernel, &st.v);
                let mut row_err = 0.0;
                let mut underflow = false;
                for ((ui, ki), ai) in st.u.iter().zip(&kv).zip(self.a) {
                    row_err += (ui * ki - ai).abs();
                    underflow |= *ai > 0.0 && !(*ki > 0.0);
                }
                let err = row_err.max(col_err);
                if err.is_nan() {
                    return Err(SeotError::Numerical {
                        iteration: iterations,
                        message: "NaN marginal error in log-domain Sinkhorn".into(),
                    });
                }
                if is_final && best.as_ref().is_none_or(|(e, _)| err < *e) {
                    best = Some((err, st.canonical()));
                }
                if err <= stage_tol {
                    continue 'stages;
                }
                if iterations >= self.cfg.max_iter {
                    if is_final {
                        break 'stages;
                    }
                    // Out of budget while annealing: jump to the target ε so the
                    // returned iterate is at least for the right problem.
                    st.eps = self.cfg.epsilon;
                    self.recenter(&mut st);
                    let err = marginal_errors(&st.kernel, self.a, self.b);
                    best = Some((err, st.canonical()));
                    break 'stages;
                }
                let stalled = last_rate.is_some_and(|mu| {
                    mu >= 1.0 || (stage_tol / err).ln() / mu.ln() > NEWTON_PREDICTED_SWEEPS as f64
                });
                if newton_enabled && stage_sweeps >= NEWTON_AFTER_SWEEPS && stalled {
                    let trace = if is_final { Some(&mut dual_trace) } else { None };
                    match self.newton_polish(&mut st, stage_tol, &mut iterations, trace) {
                        Some(healthy) => {
                            col_err = 0.0;
                            last_dual = self.dual(&st, 1.0);
                            newton_enabled = healthy;
                        }
                        None => newton_enabled = false,
                    }
                    stage_sweeps = 0;
                    continue;
                }
                iterations += 1;
                stage_sweeps += 1;
                history.push(err);
                if history.len() == RATE_WINDOW {
                    let (relaxation, rate) = relaxation_factor(&history, omega);
                    omega = omega.max(relaxation);
                    last_rate = rate;
                    history.clear();
                }
                let swept = if underflow { None } else { self.sweep(&mut st, &kv, omega, last_dual) };
                let Some((dual, new_col_err)) = swept else {
                    self.recenter(&mut st);
                    col_err = 0.0;
                    last_dual = self.dual(&st, 1.0);
                    continue;
                };
                last_dual = dual;
                col_err = new_col_err;
                if is_final {
                    dual_trace.push(-dual);
                }
                let drift = st
                    .u
                    .iter()
                    .zip(self.a)
                    .chain(st.v.iter().zip(self.b))
                    .filter(|(_, w)| **w > 0.0)
                    .map(|(s, _)| s.ln().abs())
                    .fold(0.0, f64::max);
                if !drift.is_finite() {
                    return Err(SeotError::Numerical {
                        iteration: iterations,
                        message: "non-finite scaling in log-domain Sinkhorn".into(),
                    });
                }
                if drift > ABSORB_LOG_THRESHOLD {
                    st.absorb(self.c);
                }
            }
        }

        let (best_err, pot) = best.expect("final stage records an iterate");
        let eps = self.cfg.epsilon;
        let assemble = |pot: &Potentials| {
            let mut gamma = Array2::<f64>::zeros((n, m));
            for ((i, j), gij) in gamma.indexed_iter_mut() {
                *gij = flushed_exp((pot.f[i] + pot.g[j] - self.c[[i, j]]) / eps);
            }
            gamma
        };
        // Over-relaxed sweeps leave the marginals slightly off. An exact column
        // update pins the total mass to one up to roundoff. If that alone
        // worsens the marginal error, exact row/column sweeps continue from the
        // best iterate until one ends within the bound; failing that, the best
        // iterate is returned as is.
        let bound = best_err.max(self.cfg.tol);
        let mut closing = LogState {
            eps,
            f: pot.f.clone(),
            g: pot.g.clone(),
            u: Array1::ones(n),
            v: Array1::ones(m),
            kernel: Array2::zeros((0, 0)),
        };
        let mut closed = None;
        for sweep in 0..=CLOSING_SWEEPS {
            if sweep > 0 {
                self.lse_rows(&mut closing);
            }
            self.lse_cols(&mut closing);
            let projected = Potentials { f: closing.f.clone(), g: closing.g.clone() };
            let gamma = assemble(&projected);
            if marginal_errors(&gamma, self.a, self.b) <= bound {
                closed = Some((gamma, projected));
                break;
            }
        }
        // A converged iterate the sweeps could not close is rounded onto the
        // marginals; an unconverged one is returned untouched so that it
        // still reports its error.
        let (gamma, pot) = closed.unwrap_or_else(|| {
            let gamma = assemble(&pot);
            if best_err <= self.cfg.tol {
                (round_to_marginals(gamma, self.a, self.b), pot)
            } else {
                (gamma, pot)
            }
        });
        if gamma.iter().any(|x| x.is_nan()) {
            return Err(SeotError::Numerical {
                iteration: iterations,
                message: "NaN in assembled plan".into(),
            });
        }
        Ok(finish(gamma, self.a, self.b, self.c, self.cfg, iterations, Some(pot), dual_trace))
    }
}

/// Exact sweeps tried when closing on the columns alone loses accuracy.
const CLOSING_SWEEPS: usize = 50;

/// Moves a nonnegative matrix onto the transport polytope of `(a, b)`.
///
/// Rows and then columns are scaled down where they exceed their targets,
/// and the remaining row and column deficits are filled by their outer
/// product divided by the total deficit. The result differs from the input
/// by at most twice its marginal L1 error.
fn round_to_marginals(mut gamma: Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    for (mut row, &ai) in gamma.rows_mut().into_iter().zip(a) {
        let r = row.sum();
        if r > ai {
            row *= ai / r;
        }
    }
    for (mut col, &bj) in gamma.columns_mut().into_iter().zip(b) {
        let c = col.sum();
        if c > bj {
            col *= bj / c;
        }
    }
    let err_r: Array1<f64> = a - &gamma.sum_axis(Axis(1));
    let err_c: Array1<f64> = b - &gamma.sum_axis(Axis(0));
    let total = err_r.sum();
    if total > 0.0 {
        for ((i, j), g) in gamma.indexed_iter_mut() {
            *g += (err_r[i].max(0.0) * err_c[j].max(0.0)) / total;
        }
    }
    gamma
}

/// Scaling sweeps in a stage before Newton steps are considered.
const NEWTON_AFTER_SWEEPS: usize = 2 * RATE_WINDOW;
/// Newton takes over when the observed linear rate predicts more sweeps
/// than this to reach the tolerance.
const NEWTON_PREDICTED_SWEEPS: usize = 100;
/// Largest short side for which the dense Newton system is formed.
const NEWTON_MAX_DIM: usize = 1500;
const NEWTON_MAX_STEPS: usize = 60;
/// Accepted steps shorter than this count as heavily damped.
const NEWTON_SHORT_STEP: f64 = 1.0 / 1024.0;
/// Consecutive heavily damped steps after which Newton is abandoned.
const NEWTON_MAX_SHORT: usize = 3;

impl LogSolver<'_> {
    /// Damped Newton ascent on the entropic dual, started from the current
    /// iterate and run until the marginal error is below `tol`.
    ///
    /// The Hessian `[[diag(γ1), γ], [γᵀ, diag(γᵀ1)]] / ε` is reduced to the
    /// Schur complement on the shorter side (pinning one potential to remove
    /// the constant null direction) and factored densely. Backtracking keeps
    /// every accepted step a strict ascent step. Returns `None` when no ascent
    /// step can be found, leaving the iterate unchanged, and `Some(false)` when
    /// progress was made but the line search kept cutting steps short, which
    /// signals an ill-conditioned system not worth polishing again.
    fn newton_polish(
        &self,
        st: &mut LogState,
        tol: f64,
        iterations: &mut usize,
        mut dual_trace: Option<&mut Vec<f64>>,
    ) -> Option<bool> {
        let eps = st.eps;
        let Potentials { f, g } = st.canonical();
        let rows: Vec<usize> = (0..self.a.len()).filter(|&i| self.a[i] > 0.0).collect();
        let cols: Vec<usize> = (0..self.b.len()).filter(|&j| self.b[j] > 0.0).collect();
        let mut f_act: Vec<f64> = rows.iter().map(|&i| f[i]).collect();
        let mut g_act: Vec<f64> = cols.iter().map(|&j| g[j]).collect();
        let a_act: Vec<f64> = rows.iter().map(|&i| self.a[i]).collect();
        let b_act: Vec<f64> = cols.iter().map(|&j| self.b[j]).collect();
        let cost = |i: usize, j: usize| self.c[[rows[i], cols[j]]];
        let (n, m) = (rows.len(), cols.len());

        let plan = |f: &[f64], g: &[f64]| {
            let mut gam = nalgebra::DMatrix::<f64>::zeros(n, m);
            for i in 0..n {
                for j in 0..m {
                    gam[(i, j)] = flushed_exp((f[i] + g[j] - cost(i, j)) / eps);
                }
            }
            gam
        };
        let dual = |f: &[f64], g: &[f64], mass: f64| {
            let lin: f64 = f.iter().zip(&a_act).map(|(x, w)| x * w).sum::<f64>()
                + g.iter().zip(&b_act).map(|(x, w)| x * w).sum::<f64>();
            lin - eps * mass + eps
        };

        let mut gam = plan(&f_act, &g_act);
        let mut current = dual(&f_act, &g_act, gam.sum());
        let mut improved = false;
        let mut short_steps = 0usize;
        for _ in 0..NEWTON_MAX_STEPS {
            let r: Vec<f64> = (0..n).map(|i| gam.row(i).sum()).collect();
            let c: Vec<f64> = (0..m).map(|j| gam.column(j).sum()).collect();
            let grad_f: Vec<f64> = a_act.iter().zip(&r).map(|(a, r)| a - r).collect();
            let grad_g: Vec<f64> = b_act.iter().zip(&c).map(|(b, c)| b - c).collect();
            let err = grad_f
                .iter()
                .map(|x| x.abs())
                .sum::<f64>()
                .max(grad_g.iter().map(|x| x.abs()).sum::<f64>());
            if err <= tol {
                break;
            }
            let (df, dg) = if n >= m {
                newton_direction(&gam, &r, &c, &grad_f, &grad_g, eps)?
            } else {
                let (dg, df) =
                    newton_direction(&gam.transpose(), &c, &r, &grad_g, &grad_f, eps)?;
                (df, dg)
            };
            let slope: f64 = grad_f.iter().zip(&df).map(|(x, y)| x * y).sum::<f64>()
                + grad_g.iter().zip(&dg).map(|(x, y)| x * y).sum::<f64>();
            if !(slope > 0.0) {
                break;
            }
            // Below this the dual cannot resolve the step; fall back on the
            // marginal error.
            let roundoff = 1e-14 * (1.0 + current.abs());
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let f_try: Vec<f64> = f_act.iter().zip(&df).map(|(x, d)| x + t * d).collect();
                let g_try: Vec<f64> = g_act.iter().zip(&dg).map(|(x, d)| x + t * d).collect();
                let reach = df.iter().chain(&dg).fold(0.0_f64, |m, d| m.max(d.abs())) * t / eps;
                let gam_try = if reach < RESCALE_MAX_EXPONENT {
                    rescaled_plan(&gam, &df, &dg, t / eps)
                } else {
                    plan(&f_try, &g_try)
                };
                let d_try = dual(&f_try, &g_try, gam_try.sum());
                let armijo = d_try >= current + 1e-4 * t * slope;
                let resolved = t * slope > roundoff;
                if d_try.is_finite()
                    && (armijo
                        || (!resolved
                            && d_try >= current - roundoff
                            && marginal_l1(&gam_try, &a_act, &b_act) < err))
                {
                    accepted = Some((f_try, g_try, gam_try, d_try));
                    break;
                }
                t *= 0.5;
            }
            let Some((f_new, g_new, gam_new, d_new)) = accepted else {
                break;
            };
            short_steps = if t < NEWTON_SHORT_STEP { short_steps + 1 } else { 0 };
            f_act = f_new;
            g_act = g_new;
            gam = gam_new;
            current = d_new;
            improved = true;
            *iterations += 1;
            if let Some(trace) = dual_trace.as_deref_mut() {
                trace.push(-current);
            }
            if *iterations >= self.cfg.max_iter || short_steps >= NEWTON_MAX_SHORT {
                break;
            }
        }
        if !improved {
            return None;
        }
        st.f.fill(f64::NEG_INFINITY);
        st.g.fill(f64::NEG_INFINITY);
        for (k, &i) in rows.iter().enumerate() {
            st.f[i] = f_act[k];
        }
        for (k, &j) in cols.iter().enumerate() {
            st.g[j] = g_act[k];
        }
        st.u.fill(1.0);
        st.v.fill(1.0);
        st.rebuild_kernel(self.c);
        Some(short_steps < NEWTON_MAX_SHORT)
    }
}

/// `K v` over contiguous rows; `K` is always in standard layout here.
fn matvec(k: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    let v = v.as_slice().expect("contiguous");
    let data = k.as_slice().expect("standard layout");
    data.chunks_exact(k.ncols().max(1))
        .take(k.nrows())
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `Kᵀ u` as a sum of scaled rows, avoiding a strided column walk.
fn transposed_matvec(k: &Array2<f64>, u: &Array1<f64>) -> Array1<f64> {
    let mut out = vec![0.0; k.ncols()];
    let data = k.as_slice().expect("standard layout");
    for (row, &ui) in data.chunks_exact(k.ncols().max(1)).zip(u) {
        if ui != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += ui * a;
            }
        }
    }
    Array1::from(out)
}

/// Plan entries below this are dropped from the Newton system.
const HESSIAN_FLOOR: f64 = 1e-150;

/// Largest `|t·d|/ε` for which a trial plan is formed by rescaling the
/// current one instead of exponentiating from scratch.
const RESCALE_MAX_EXPONENT: f64 = 30.0;

/// `γ_ij · exp(s·df_i) · exp(s·dg_j)`: the plan after moving the potentials
/// by `t·(df, dg)` with `s = t/ε`.
fn rescaled_plan(gam: &nalgebra::DMatrix<f64>, df: &[f64], dg: &[f64], s: f64) -> nalgebra::DMatrix<f64> {
    let ef: Vec<f64> = df.iter().map(|d| (s * d).exp()).collect();
    let mut out = gam.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let eg = (s * dg[j]).exp();
        for (x, e) in col.iter_mut().zip(&ef) {
            *x *= e * eg;
            if *x < f64::MIN_POSITIVE {
                *x = 0.0;
            }
        }
    }
    out
}

fn marginal_l1(gam: &nalgebra::DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let rows: f64 = gam.row_iter().zip(a).map(|(r, a)| (r.sum() - a).abs()).sum();
    let cols: f64 = gam.column_iter().zip(b).map(|(c, b)| (c.sum() - b).abs()).sum();
    rows.max(cols)
}

/// Solves the Newton system for the ascent direction, eliminating the long
/// side (rows of `gam`, diagonal block `r`) and pinning the last short-side
/// potential.
fn newton_direction(
    gam: &nalgebra::DMatrix<f64>,
    r: &[f64],
    c: &[f64],
    grad_long: &[f64],
    grad_short: &[f64],
    eps: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (n, m) = gam.shape();
    if r.iter().any(|x| !(*x > 0.0)) {
        return None;
    }
    // Entries this small cannot move the direction, but products of them are
    // subnormal and make the dense products below many times slower.
    let gam = &gam.map(|x| if x < HESSIAN_FLOOR { 0.0 } else { x });
    // Schur complement diag(c) - γᵀ diag(1/r) γ on the first m-1 short-side atoms.
    let k = m - 1;
    let inv_sqrt_r: Vec<f64> = r.iter().map(|x| 1.0 / x.sqrt()).collect();
    let mut head = gam.columns(0, k).into_owned();
    for mut col in head.column_iter_mut() {
        for (x, s) in col.iter_mut().zip(&inv_sqrt_r) {
            *x *= s;
        }
    }
    let scaled_grad = nalgebra::DVector::from_iterator(n, grad_long.iter().zip(r).map(|(g, r)| g / r));
    let mut dg = nalgebra::DVector::<f64>::zeros(m);
    if k > 0 {
        let mut schur = -(head.transpose() * &head);
        for j in 0..k {
            schur[(j, j)] += c[j];
        }
        let coupled = gam.columns(0, k).tr_mul(&scaled_grad);
        let rhs = nalgebra::DVector::from_iterator(k, (0..k).map(|j| eps * (grad_short[j] - coupled[j])));
        // Nearly disconnected plans make the complement numerically singular;
        // escalate a Levenberg ridge until it factors.
        let scale = c.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
        let mut ridge = 1e-14 * scale;
        let chol = loop {
            let mut damped = schur.clone();
            for j in 0..k {
                damped[(j, j)] += ridge;
            }
            if let Some(ch) = damped.cholesky() {
                break ch;
            }
            ridge *= 100.0;
            if ridge > 1e-2 * scale {
                return None;
            }
        };
        dg.rows_mut(0, k).copy_from(&chol.solve(&rhs));
    }
    let coupling = gam * &dg;
    let df = (0..n).map(|i| (eps * grad_long[i] - coupling[i]) / r[i]).collect();
    let dg: Vec<f64> = dg.iter().copied().collect();
    if dg.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some((df, dg))
}

/// Sweeps per observation window of the adaptive over-relaxation.
const RATE_WINDOW: usize = 20;
const MAX_RELAXATION: f64 = 1.98;

/// Adaptive over-relaxation factor from the contraction rate μ observed over
/// the second half of `history` while running with factor `omega`. Also
/// returns μ itself.
///
/// A row/column sweep is a two-block Gauss-Seidel iteration, so Young's SOR
/// relation `(μ + ω - 1)² = ω² λ² μ` recovers the plain-sweep rate λ², and the
/// optimal factor is `2 / (1 + sqrt(1 - λ²))`. When μ is no larger than
/// `ω - 1` the factor already overshoots and is kept.
fn relaxation_factor(history: &[f64], omega: f64) -> (f64, Option<f64>) {
    let half = history.len() / 2;
    let (first, last) = (history[half], history[history.len() - 1]);
    if !(first > 0.0 && last > 0.0) {
        return (omega, None);
    }
    let mu = (last / first).powf(1.0 / (history.len() - 1 - half) as f64);
    if !(mu < 1.0) || mu <= omega - 1.0 {
        return (omega, Some(mu));
    }
    let lambda2 = ((mu + omega - 1.0).powi(2) / (omega * omega * mu)).min(1.0);
    let relaxation = (2.0 / (1.0 + (1.0 - lambda2).sqrt())).clamp(1.0, MAX_RELAXATION);
    (relaxation, Some(mu))
}

/// Largest instance the permutation oracle accepts.
pub const ORACLE_MAX_N: usize = 8;

/// Exact OT between two uniform measures of equal size, by enumerating every
/// permutation coupling. Ground truth for tests.
pub fn exact_ot_oracle(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    c: &CostMatrix,
) -> Result<TransportPlan> {
    check_inputs(mu, nu, c)?;
    let n = mu.len();
    if n != nu.len() {
        return Err(SeotError::UnsupportedByOracle);
    }
    if n > ORACLE_MAX_N {
        return Err(SeotError::OracleTooLarge { n, max: ORACLE_MAX_N });
    }
    if !mu.is_uniform(1e-12) || !nu.is_uniform(1e-12) {
        return Err(SeotError::UnsupportedByOracle);
    }
    let cv = c.values();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_perm = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cv[[i, j]]).sum();
        if total < best_cost {
            best_cost = total;
            best_perm.clone_from(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let w = 1.0 / n as f64;
    let mut gamma = Array2::zeros((n, n));
    for (i, &j) in best_perm.iter().enumerate() {
        gamma[[i, j]] = w;
    }
    let mut plan = TransportPlan::from_gamma(gamma)?;
    plan.cost = Some(best_cost * w);
    Ok(plan)
}

/// Advances to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
