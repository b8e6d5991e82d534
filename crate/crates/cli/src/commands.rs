//! The subcommands, callable without going through a process boundary.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use seot_core::classify::source_only_baseline;
use seot_core::synth::generate;
use seot_core::{run_seot, run_two_domain, KMode, LabeledDomain, SeotConfig, SeotRun, SynthSpec};
use serde::Serialize;

use crate::config::{default_synth_spec, echo_run_config, read_run_config, read_synth_config, RunSettings};
use crate::dataset::{format_dataset, read_dataset};
use crate::error::{CliError, CliResult};
use crate::report::{
    format_predictions, format_timings, predictions_path, timings_path, write_text, Gap, Report, SCHEMA_VERSION,
};

/// `--k` on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KArg {
    Auto,
    Fixed(usize),
}

impl std::str::FromStr for KArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(KArg::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(KArg::Fixed(k)),
            _ => Err(format!("expected a positive integer or `auto`, got `{s}`")),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<KArg>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArgs {
    pub sources: Vec<PathBuf>,
    pub target: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub overrides: Overrides,
    /// Optional edge-list export of the cross-domain graph.
    pub edges: Option<PathBuf>,
}

struct Inputs {
    sources: Vec<LabeledDomain>,
    target: LabeledDomain,
    cfg: SeotConfig,
}

fn infer_n_classes(sources: &[LabeledDomain], target: &LabeledDomain) -> usize {
    sources
        .iter()
        .chain(std::iter::once(target))
        .filter_map(LabeledDomain::n_classes)
        .fold(2, usize::max)
}

fn load(args: &RunArgs) -> CliResult<Inputs> {
    if args.sources.is_empty() {
        return Err(CliError::usage("at least one --source is required"));
    }
    let settings = match &args.config {
        Some(p) => read_run_config(p)?,
        None => RunSettings::default(),
    };
    let sources = args.sources.iter().map(|p| read_dataset(p)).collect::<CliResult<Vec<_>>>()?;
    for (p, s) in args.sources.iter().zip(&sources) {
        if s.labels().is_none() {
            return Err(CliError::parse(p, None, "source datasets must be labeled"));
        }
    }
    let target = read_dataset(&args.target)?;
    let mut cfg = settings.cfg;
    cfg.n_classes = settings.n_classes.unwrap_or_else(|| infer_n_classes(&sources, &target));
    let o = &args.overrides;
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(eps) = o.epsilon {
        cfg.ot.epsilon = eps;
    }
    match o.k {
        Some(KArg::Fixed(k)) => cfg.k_mode = KMode::Fixed(k),
        Some(KArg::Auto) if matches!(cfg.k_mode, KMode::Fixed(_)) => {
            cfg.k_mode = KMode::AutoGap { k_min: None, k_max: None }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(Inputs { sources, target, cfg })
}

fn seot_report(method: &str, run: &SeotRun, inputs: &Inputs) -> Report {
    let mut r = Report {
        schema_version: SCHEMA_VERSION,
        method: method.into(),
        seed: inputs.cfg.seed,
        n_classes: inputs.cfg.n_classes,
        n_target: inputs.target.len(),
        accuracy: None,
        per_class_accuracy: None,
        confusion: None,
        chosen_k: Some(run.chosen_k),
        eigenvalues: run.embedding.eigenvalues.clone(),
        gaps: run.gaps.iter().map(|&(j, gap)| Gap { j, gap }).collect(),
        class_gap: run.gap_selection.as_ref().map(|g| g.class_gap),
        diagnostics: Some(run.diagnostics.clone()),
        config: echo_run_config(&inputs.cfg),
    };
    r.apply_eval(run.report.as_ref());
    r
}

fn write_outputs(args: &RunArgs, report: &Report, run: &SeotRun) -> CliResult<()> {
    write_text(&args.out, &report.to_json())?;
    write_text(&predictions_path(&args.out), &format_predictions(&run.predictions))?;
    write_text(&timings_path(&args.out), &format_timings(&run.timings, Some(run.matvec_time)))?;
    if let Some(path) = &args.edges {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        run.graph.write_edge_list(BufWriter::new(file)).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

/// Multi-source adaptation through the barycenter.
pub fn cmd_run(args: &RunArgs) -> CliResult<Report> {
    let inputs = load(args)?;
    let run = run_seot(&inputs.sources, &inputs.target, &inputs.cfg)?;
    let report = seot_report("seot", &run, &inputs);
    write_outputs(args, &report, &run)?;
    Ok(report)
}

/// One source, one target; `direct` uses the bipartite graph of the direct
/// plan instead of a single-source barycenter.
pub fn cmd_run2(args: &RunArgs, direct: bool) -> CliResult<Report> {
    if args.sources.len() != 1 {
        return Err(CliError::usage(format!("run2 takes exactly one --source, got {}", args.sources.len())));
    }
    let inputs = load(args)?;
    let run = run_two_domain(&inputs.sources[0], &inputs.target, &inputs.cfg, direct)?;
    let report = seot_report(if direct { "seot-direct" } else { "seot" }, &run, &inputs);
    write_outputs(args, &report, &run)?;
    Ok(report)
}

/// What `spectrum` computed, as written to its text file.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub gaps: Vec<(usize, f64)>,
    pub selected_k: usize,
    pub class_gap: f64,
}

impl Spectrum {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# eigenvalues\nindex,eigenvalue\n");
        for (i, l) in self.eigenvalues.iter().enumerate() {
            s.push_str(&format!("{},{:.16e}\n", i + 1, l));
        }
        s.push_str("\n# gaps\nj,gap\n");
        for (j, g) in &self.gaps {
            s.push_str(&format!("{j},{g:.16e}\n"));
        }
        s.push_str(&format!("\n# selected_k={}\n# class_gap={:.16e}\n", self.selected_k, self.class_gap));
        s
    }
}

/// The smallest `k_max + 1` eigenvalues of the cross-domain graph and the
/// gap table `λ_{j+1} - λ_j`, `j = 1..=k_max`.
pub fn cmd_spectrum(args: &RunArgs, k_max: usize) -> CliResult<Spectrum> {
    let mut inputs = load(args)?;
    let k_min = match inputs.cfg.k_mode {
        KMode::AutoGap { k_min, .. } => k_min,
        KMode::Fixed(_) => None,
    };
    inputs.cfg.k_mode = KMode::AutoGap { k_min, k_max: Some(k_max) };
    inputs.cfg.validate()?;
    let run = run_seot(&inputs.sources, &inputs.target, &inputs.cfg)?;
    let eigenvalues = run.embedding.eigenvalues[..=k_max].to_vec();
    let gaps = run.gaps.iter().copied().filter(|&(j, _)| j <= k_max).collect();
    let sel = run.gap_selection.as_ref().expect("auto mode selects k");
    let spectrum = Spectrum { eigenvalues, gaps, selected_k: sel.k, class_gap: sel.class_gap };
    write_text(&args.out, &spectrum.to_text())?;
    Ok(spectrum)
}

/// Source-only classifier on the raw features, same report schema.
pub fn cmd_baseline(args: &RunArgs) -> CliResult<Report> {
    let inputs = load(args)?;
    if inputs.target.labels().is_none() {
        return Err(CliError::parse(&args.target, None, "the baseline needs a labeled target"));
    }
    let eval = source_only_baseline(&inputs.sources, &inputs.target, &inputs.cfg.classifier, inputs.cfg.seed)?;
    let mut report = Report {
        schema_version: SCHEMA_VERSION,
        method: "source-only".into(),
        seed: inputs.cfg.seed,
        n_classes: inputs.cfg.n_classes,
        n_target: inputs.target.len(),
        accuracy: None,
        per_class_accuracy: None,
        confusion: None,
        chosen_k: None,
        eigenvalues: Vec::new(),
        gaps: Vec::new(),
        class_gap: None,
        diagnostics: None,
        config: echo_run_config(&inputs.cfg),
    };
    report.apply_eval(Some(&eval));
    write_text(&args.out, &report.to_json())?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    spec: &'a SynthSpec,
    seed: u64,
    sources: Vec<String>,
    target: &'a str,
}

/// Writes `source_<i>.csv`, `target.csv` and `manifest.json` into `out_dir`.
pub fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> CliResult<SynthSpec> {
    let mut spec = match config {
        Some(p) => read_synth_config(p)?,
        None => default_synth_spec(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate(&spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut names = Vec::new();
    for (i, s) in data.sources.iter().enumerate() {
        let name = format!("source_{i}.csv");
        write_text(&out_dir.join(&name), &format_dataset(s))?;
        names.push(name);
    }
    write_text(&out_dir.join("target.csv"), &format_dataset(&data.target))?;
    let manifest = Manifest { spec: &spec, seed: spec.seed, sources: names, target: "target.csv" };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_text(&out_dir.join("manifest.json"), &json)?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_argument() {
        assert_eq!("auto".parse::<KArg>(), Ok(KArg::Auto));
        assert_eq!("4".parse::<KArg>(), Ok(KArg::Fixed(4)));
        assert!("0".parse::<KArg>().is_err());
        assert!("x".parse::<KArg>().is_err());
    }

    #[test]
    fn spectrum_text_layout() {
        let s = Spectrum { eigenvalues: vec![0.0, 0.5], gaps: vec![(1, 0.5)], selected_k: 1, class_gap: 0.5 };
        let text = s.to_text();
        assert!(text.starts_with("# eigenvalues\nindex,eigenvalue\n1,0.0000000000000000e0\n"));
        assert!(text.contains("# gaps\nj,gap\n1,5.0000000000000000e-1\n"));
        assert!(text.contains("# selected_k=1"));
    }
}
