//! End-to-end adaptation: standardize, fit the barycenter, attach the
//! target, build the star graph, embed it, choose `k`, classify.

use std::time::{Duration, Instant};

use ndarray::{s, Array2, Axis};

use crate::barycenter::{attach_target, fit_barycenter, Barycenter, BarycenterConfig};
use crate::classify::{evaluate, predict, ClassifierConfig, EmbeddedDataset, EvalReport};
use crate::error::{Result, SeotError};
use crate::graph::{bipartite_graph, components, star_graph, CrossDomainGraph, DomainTag, DEFAULT_PRUNE_THRESHOLD};
use crate::measures::{cost_matrix, standardize, LabeledDomain};
use crate::ot::{sinkhorn, SinkhornConfig, TransportPlan};
use crate::spectral::{
    embedding_from_pairs, laplacian, select_k, smallest_eigenpairs, GapSelection, IsolatedPolicy, SolverParams,
    SpectralEmbedding,
};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum KMode {
    Fixed(usize),
    /// Eigengap over `[k_min, k_max]`; `k_min` defaults to the class count
    /// and `k_max` to `k_min + 4`.
    AutoGap { k_min: Option<usize>, k_max: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeotConfig {
    pub ot: SinkhornConfig,
    pub bary: BarycenterConfig,
    pub prune_threshold: f64,
    pub k_mode: KMode,
    pub row_normalize: bool,
    pub classifier: ClassifierConfig,
    pub n_classes: usize,
    pub seed: u64,
    pub isolated_policy: IsolatedPolicy,
    pub eigen_tol: f64,
    pub eigen_max_iter: usize,
    pub gap_margin: usize,
    /// Also train on source rows, not just barycenter rows.
    pub train_on_sources_too: bool,
    pub standardize: bool,
}

impl Default for SeotConfig {
    fn default() -> Self {
        SeotConfig {
            ot: SinkhornConfig::default(),
            bary: BarycenterConfig::default(),
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            k_mode: KMode::AutoGap { k_min: None, k_max: None },
            row_normalize: true,
            classifier: ClassifierConfig::default(),
            n_classes: 2,
            seed: 0,
            isolated_policy: IsolatedPolicy::SelfLoop,
            eigen_tol: SolverParams::default().tol,
            eigen_max_iter: SolverParams::default().max_iter,
            gap_margin: 5,
            train_on_sources_too: false,
            standardize: true,
        }
    }
}

impl SeotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(SeotError::invalid(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        self.ot.validate()?;
        if !(self.prune_threshold >= 0.0) {
            return Err(SeotError::invalid("prune_threshold must be >= 0"));
        }
        match self.k_mode {
            KMode::Fixed(0) => return Err(SeotError::invalid("fixed k must be >= 1")),
            KMode::AutoGap { k_min, k_max } => {
                let (lo, hi) = self.gap_range_for(k_min, k_max);
                if lo < self.n_classes || lo > hi {
                    return Err(SeotError::invalid(format!("invalid gap range [{lo}, {hi}]")));
                }
            }
            _ => {}
        }
        if let ClassifierConfig::Knn { k_neighbors: 0 } = self.classifier {
            return Err(SeotError::invalid("k_neighbors must be >= 1"));
        }
        Ok(())
    }

    fn gap_range_for(&self, k_min: Option<usize>, k_max: Option<usize>) -> (usize, usize) {
        let lo = k_min.unwrap_or(self.n_classes);
        (lo, k_max.unwrap_or(lo + 4))
    }

    /// The resolved `[k_min, k_max]` when `k` is chosen by eigengap.
    pub fn gap_range(&self) -> Option<(usize, usize)> {
        match self.k_mode {
            KMode::AutoGap { k_min, k_max } => Some(self.gap_range_for(k_min, k_max)),
            KMode::Fixed(_) => None,
        }
    }

    fn solver(&self) -> SolverParams {
        SolverParams { tol: self.eigen_tol, max_iter: self.eigen_max_iter, seed: self.seed }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlanDiagnostics {
    /// `source_<i>` or `target`.
    pub name: String,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    pub plans: Vec<PlanDiagnostics>,
    pub barycenter_converged: Option<bool>,
    pub barycenter_iterations: Option<usize>,
    pub label_fallback_atoms: Vec<usize>,
    pub n_nodes: usize,
    pub nnz: usize,
    pub isolated_nodes: usize,
    pub components: usize,
    pub eigen_restarts: usize,
    pub eigen_max_residual: f64,
    pub matvec_calls: usize,
    pub matvec_columns: usize,
}

impl Diagnostics {
    pub fn all_plans_converged(&self) -> bool {
        self.plans.iter().all(|p| p.converged)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeotRun {
    /// Absent for the direct two-domain graph.
    pub barycenter: Option<Barycenter>,
    pub graph: CrossDomainGraph,
    pub embedding: SpectralEmbedding,
    pub chosen_k: usize,
    /// Consecutive gaps `(j, λ_{j+1} - λ_j)` of every computed eigenvalue.
    pub gaps: Vec<(usize, f64)>,
    pub gap_selection: Option<GapSelection>,
    pub predictions: Vec<usize>,
    pub report: Option<EvalReport>,
    /// Wall time per stage, in execution order.
    pub timings: Vec<(&'static str, Duration)>,
    /// Time spent inside sparse matvecs during the eigensolve.
    pub matvec_time: Duration,
    pub diagnostics: Diagnostics,
}

/// Runs stages in order, recording their wall times and wrapping failures
/// with the stage name and what completed before it.
struct Stages {
    timings: Vec<(&'static str, Duration)>,
}

impl Stages {
    fn run<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        match f() {
            Ok(v) => {
                self.timings.push((name, start.elapsed()));
                Ok(v)
            }
            Err(e) => {
                let completed = self.timings.iter().map(|(n, t)| format!("{n} ({:.3}s)", t.as_secs_f64())).collect();
                Err(e.in_stage(name, completed))
            }
        }
    }
}

fn check_domains(sources: &[LabeledDomain], target: &LabeledDomain, n_classes: usize) -> Result<()> {
    if sources.is_empty() {
        return Err(SeotError::invalid("need at least one labeled source"));
    }
    if target.is_empty() {
        return Err(SeotError::invalid("target domain is empty"));
    }
    let d = target.dim();
    for (i, s) in sources.iter().enumerate() {
        if s.dim() != d {
            return Err(SeotError::shape(format!("source {i} has dimension {} but the target has {d}", s.dim())));
        }
        let labels = s.labels().ok_or_else(|| SeotError::invalid(format!("source {i} is unlabeled")))?;
        if let Some(c) = labels.iter().find(|&&c| c >= n_classes) {
            return Err(SeotError::invalid(format!("source {i} has class id {c} >= n_classes = {n_classes}")));
        }
    }
    if let Some(c) = target.labels().and_then(|l| l.iter().find(|&&c| c >= n_classes)) {
        return Err(SeotError::invalid(format!("target has class id {c} >= n_classes = {n_classes}")));
    }
    Ok(())
}

fn plan_diag(name: String, p: &TransportPlan) -> PlanDiagnostics {
    PlanDiagnostics { name, converged: p.converged(), iterations: p.iterations(), marginal_error: p.marginal_error() }
}

struct Spectrum {
    embedding: SpectralEmbedding,
    chosen_k: usize,
    gaps: Vec<(usize, f64)>,
    selection: Option<GapSelection>,
    isolated: usize,
}

fn spectral_stage(graph: &CrossDomainGraph, cfg: &SeotConfig) -> Result<Spectrum> {
    let op = laplacian(graph, cfg.isolated_policy);
    let big_k = graph.n_nodes();
    let limit = (big_k - 1).min(op.dim());
    let m = match cfg.k_mode {
        KMode::Fixed(k) => {
            if k >= big_k || k > op.dim() {
                return Err(SeotError::invalid(format!("k = {k} must be below the {big_k} graph nodes")));
            }
            (k + cfg.gap_margin).min(limit).max(k)
        }
        KMode::AutoGap { .. } => {
            let (_, k_max) = cfg.gap_range().expect("auto mode");
            if k_max + 1 > limit {
                return Err(SeotError::invalid(format!(
                    "k_max = {k_max} needs {} eigenvalues but the graph supports {limit}",
                    k_max + 1
                )));
            }
            (k_max + 1).max(cfg.n_classes + 1).min(limit)
        }
    };
    let pairs = smallest_eigenpairs(&op, m, &cfg.solver())?;
    let (chosen_k, selection) = match cfg.k_mode {
        KMode::Fixed(k) => (k, None),
        KMode::AutoGap { .. } => {
            let (lo, hi) = cfg.gap_range().expect("auto mode");
            let sel = select_k(&pairs.values, cfg.n_classes, lo, hi)?;
            (sel.k, Some(sel))
        }
    };
    let gaps = pairs.values.windows(2).enumerate().map(|(j, w)| (j + 1, w[1] - w[0])).collect();
    let isolated = op.isolated_nodes().len();
    let embedding = embedding_from_pairs(&op, pairs, chosen_k, cfg.row_normalize)?;
    Ok(Spectrum { embedding, chosen_k, gaps, selection, isolated })
}

fn rows_of(x: &Array2<f64>, start: usize, len: usize) -> Array2<f64> {
    x.slice(s![start..start + len, ..]).to_owned()
}

fn finish(
    barycenter: Option<Barycenter>,
    graph: CrossDomainGraph,
    spectrum: Spectrum,
    train: (Array2<f64>, Vec<usize>),
    target_range: (usize, usize),
    target: &LabeledDomain,
    cfg: &SeotConfig,
    mut stages: Stages,
    mut diagnostics: Diagnostics,
) -> Result<SeotRun> {
    let f = &spectrum.embedding.vectors;
    let test = rows_of(f, target_range.0, target_range.1);
    let predictions = stages.run("classify", || {
        let data = EmbeddedDataset::new(train.0, train.1, test)?;
        predict(&data, cfg.n_classes, &cfg.classifier, cfg.seed)
    })?;
    let report = match target.labels() {
        Some(truth) => Some(stages.run("evaluate", || evaluate(&predictions, truth, cfg.n_classes))?),
        None => None,
    };
    let emb = &spectrum.embedding;
    diagnostics.n_nodes = graph.n_nodes();
    diagnostics.nnz = graph.nnz();
    diagnostics.isolated_nodes = spectrum.isolated;
    diagnostics.components = components(&graph);
    diagnostics.eigen_restarts = emb.restarts;
    diagnostics.eigen_max_residual = emb.residuals.iter().copied().fold(0.0, f64::max);
    diagnostics.matvec_calls = emb.matvecs.calls;
    diagnostics.matvec_columns = emb.matvecs.columns;
    let matvec_time = emb.matvecs.time;
    Ok(SeotRun {
        barycenter,
        graph,
        chosen_k: spectrum.chosen_k,
        gaps: spectrum.gaps,
        gap_selection: spectrum.selection,
        embedding: spectrum.embedding,
        predictions,
        report,
        timings: stages.timings,
        matvec_time,
        diagnostics,
    })
}

/// Multi-source adaptation through a labeled barycenter.
///
/// Plans that fail to converge are used as returned and flagged in the
/// diagnostics.
pub fn run_seot(sources: &[LabeledDomain], target: &LabeledDomain, cfg: &SeotConfig) -> Result<SeotRun> {
    cfg.validate()?;
    check_domains(sources, target, cfg.n_classes)?;
    let mut stages = Stages { timings: Vec::new() };
    let (sources, target_std) = stages.run("standardize", || prepare(sources, target, cfg.standardize))?;
    let target_std = &target_std;

    let bary_cfg = BarycenterConfig { seed: cfg.seed, ..cfg.bary.clone() };
    let bary = stages.run("barycenter", || fit_barycenter(&sources, &bary_cfg, &cfg.ot))?;
    let bary = stages.run("attach_target", || attach_target(bary, target_std, &cfg.ot))?;
    let graph = stages.run("graph", || star_graph(&bary, sources.len(), target_std.len(), cfg.prune_threshold))?;
    let spectrum = stages.run("spectral", || spectral_stage(&graph, cfg))?;

    let mut diagnostics = Diagnostics {
        barycenter_converged: Some(bary.converged()),
        barycenter_iterations: Some(bary.outer_iterations()),
        label_fallback_atoms: bary.label_fallback_atoms().to_vec(),
        ..Default::default()
    };
    for (i, p) in bary.plans_to_sources().iter().enumerate() {
        diagnostics.plans.push(plan_diag(format!("source_{i}"), p));
    }
    let target_plan = bary.plan_to_target().expect("attached above");
    diagnostics.plans.push(plan_diag("target".into(), target_plan));

    let f = &spectrum.embedding.vectors;
    let nb = bary.n_atoms();
    let mut train_rows = vec![rows_of(f, 0, nb)];
    let mut train_labels = bary.atom_labels().to_vec();
    if cfg.train_on_sources_too {
        for (i, s) in sources.iter().enumerate() {
            let r = graph.range_of(DomainTag::Source(i)).expect("star graph has every source");
            train_rows.push(rows_of(f, r.start, r.len));
            train_labels.extend_from_slice(s.labels().expect("checked"));
        }
    }
    let views: Vec<_> = train_rows.iter().map(|a| a.view()).collect();
    let train = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let t = graph.range_of(DomainTag::Target).expect("star graph has the target");
    finish(Some(bary), graph, spectrum, (train, train_labels), (t.start, t.len), target, cfg, stages, diagnostics)
}

fn prepare(sources: &[LabeledDomain], target: &LabeledDomain, enabled: bool) -> Result<(Vec<LabeledDomain>, LabeledDomain)> {
    if !enabled {
        return Ok((sources.to_vec(), target.clone()));
    }
    let mut all = sources.to_vec();
    all.push(target.clone());
    let mut out = standardize(&all)?;
    let t = out.pop().expect("target was pushed");
    Ok((out, t))
}

/// Two-domain adaptation. With `skip_barycenter` the graph is the bipartite
/// graph of the direct source-to-target plan and the classifier trains on
/// source rows; otherwise this is [`run_seot`] with a single source.
pub fn run_two_domain(
    source: &LabeledDomain,
    target: &LabeledDomain,
    cfg: &SeotConfig,
    skip_barycenter: bool,
) -> Result<SeotRun> {
    if !skip_barycenter {
        return run_seot(std::slice::from_ref(source), target, cfg);
    }
    cfg.validate()?;
    check_domains(std::slice::from_ref(source), target, cfg.n_classes)?;
    let mut stages = Stages { timings: Vec::new() };
    let (mut sources, target_std) = stages.run("standardize", || prepare(std::slice::from_ref(source), target, cfg.standardize))?;
    let source_std = sources.pop().expect("one source");
    let plan = stages.run("transport", || {
        let c = cost_matrix(source_std.points(), target_std.points(), 2.0)?;
        sinkhorn(source_std.measure(), target_std.measure(), &c, &cfg.ot)
    })?;
    let graph = stages.run("graph", || bipartite_graph(&plan, cfg.prune_threshold))?;
    let spectrum = stages.run("spectral", || spectral_stage(&graph, cfg))?;
    let diagnostics = Diagnostics { plans: vec![plan_diag("target".into(), &plan)], ..Default::default() };
    let f = &spectrum.embedding.vectors;
    let ns = source_std.len();
    let train = (rows_of(f, 0, ns), source_std.labels().expect("checked").to_vec());
    finish(None, graph, spectrum, train, (ns, target_std.len()), target, cfg, stages, diagnostics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::DataMatrix;

    fn blobs(centers: &[(f64, f64)], per: usize, jitter: f64) -> LabeledDomain {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, &(x, y)) in centers.iter().enumerate() {
            for i in 0..per {
                let a = i as f64 * 2.399;
                let r = jitter * ((i + 1) as f64 / per as f64).sqrt();
                rows.push(vec![x + r * a.cos(), y + r * a.sin()]);
                labels.push(c);
            }
        }
        LabeledDomain::uniform(DataMatrix::from_rows(&rows).unwrap(), Some(labels)).unwrap()
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let s = blobs(&[(0.0, 0.0), (5.0, 0.0)], 5, 0.5);
        assert!(matches!(run_seot(&[], &s, &SeotConfig::default()), Err(SeotError::InvalidInput(_))));
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let s = blobs(&[(0.0, 0.0), (5.0, 0.0)], 5, 0.5);
        let cfg = SeotConfig {
            bary: BarycenterConfig { n_atoms: Some(1000), ..Default::default() },
            ..Default::default()
        };
        match run_seot(std::slice::from_ref(&s), &s, &cfg) {
            Err(SeotError::Stage { stage, completed, .. }) => {
                assert_eq!(stage, "barycenter");
                assert_eq!(completed.len(), 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn well_separated_blobs_are_recovered() {
        let s1 = blobs(&[(0.0, 0.0), (6.0, 0.0)], 15, 1.0);
        let s2 = blobs(&[(0.2, 0.1), (6.1, -0.2)], 15, 1.0);
        let t = blobs(&[(0.1, -0.1), (5.9, 0.1)], 15, 1.0);
        let run = run_seot(&[s1, s2], &t, &SeotConfig::default()).unwrap();
        assert!(run.report.as_ref().unwrap().accuracy >= 0.95);
        assert_eq!(run.embedding.vectors.nrows(), 15 * 2 + 30 * 2 + 30);
        assert_eq!(run.graph.n_nodes(), run.embedding.vectors.nrows());
    }
}
