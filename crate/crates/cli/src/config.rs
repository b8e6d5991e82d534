//! Flat `key = value` configuration files.
//!
//! One key per [`SeotConfig`] field. Blank lines and lines starting with `#`
//! are ignored; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::Path;

use seot_core::barycenter::BarycenterInit;
use seot_core::classify::ClassifierConfig;
use seot_core::{IsolatedPolicy, KMode, SeotConfig, Shift, SynthSpec};

use crate::error::{CliError, CliResult};

/// Every accepted run key with a one-line description.
pub const RUN_KEYS: &[(&str, &str)] = &[
    ("epsilon", "entropic regularization, > 0"),
    ("sinkhorn_max_iter", "iteration budget per transport solve"),
    ("sinkhorn_tol", "marginal L1 tolerance per transport solve"),
    ("log_domain", "true | false"),
    ("n_atoms", "barycenter size, or `auto` for the smallest source size"),
    ("source_weights", "comma-separated simplex weights, or `uniform`"),
    ("bary_max_outer_iter", "barycenter outer iteration budget"),
    ("support_tol", "stop once no atom moves farther than this"),
    ("bary_init", "kmeans++ | random"),
    ("prune_threshold", "drop plan entries below this fraction of the plan maximum"),
    ("k", "embedding dimension, or `auto` for eigengap selection"),
    ("k_min", "lower end of the eigengap range, or `auto` (class count)"),
    ("k_max", "upper end of the eigengap range, or `auto` (k_min + 4)"),
    ("row_normalize", "true | false"),
    ("classifier", "knn | softmax"),
    ("k_neighbors", "neighbors for the kNN classifier"),
    ("softmax_l2", "L2 penalty of the softmax classifier"),
    ("softmax_lr", "learning rate of the softmax classifier"),
    ("softmax_epochs", "full-batch epochs of the softmax classifier"),
    ("n_classes", "class count, or `auto` to infer from labels"),
    ("seed", "master seed"),
    ("isolated_policy", "self_loop | drop"),
    ("eigen_tol", "eigensolver residual tolerance"),
    ("eigen_max_iter", "eigensolver restart budget"),
    ("gap_margin", "extra eigenpairs computed beyond a fixed k"),
    ("train_on_sources_too", "true | false; also train on source rows"),
    ("standardize", "true | false; pooled standardization of all domains"),
];

/// Every accepted synthetic-benchmark key.
pub const SYNTH_KEYS: &[(&str, &str)] = &[
    ("n_classes", "number of classes"),
    ("samples_per_class", "samples per class in every domain"),
    ("d", "feature dimension"),
    ("class_separation", "distance between consecutive class means"),
    ("n_sources", "number of source domains"),
    ("shift", "rotate:<degrees> | translate:<v1,...,vd> | scale:<factor> | noise:<sigma>"),
    ("seed", "generator seed"),
];

/// A parsed run configuration. `n_classes` stays open until the data is read.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub cfg: SeotConfig,
    pub n_classes: Option<usize>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings { cfg: SeotConfig::default(), n_classes: None }
    }
}

struct Entry<'a> {
    line: usize,
    value: &'a str,
}

fn entries<'a>(text: &'a str, path: &Path, known: &[(&str, &str)]) -> CliResult<BTreeMap<&'a str, Entry<'a>>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::parse(path, Some(idx + 1), "expected `key = value`"))?;
        let key = key.trim();
        if !known.iter().any(|(k, _)| *k == key) {
            return Err(CliError::parse(path, Some(idx + 1), format!("unknown key `{key}`")));
        }
        if out.insert(key, Entry { line: idx + 1, value: value.trim() }).is_some() {
            return Err(CliError::parse(path, Some(idx + 1), format!("key `{key}` given twice")));
        }
    }
    Ok(out)
}

struct Reader<'a, 'p> {
    map: BTreeMap<&'a str, Entry<'a>>,
    path: &'p Path,
}

impl Reader<'_, '_> {
    fn get<T: std::str::FromStr>(&self, key: &str, what: &str) -> CliResult<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::parse(self.path, Some(e.line), format!("`{key}` must be {what}, got `{}`", e.value))),
        }
    }

    /// `Some(None)` for `auto`.
    fn get_auto(&self, key: &str) -> CliResult<Option<Option<usize>>> {
        match self.map.get(key) {
            Some(e) if e.value == "auto" => Ok(Some(None)),
            _ => Ok(self.get::<usize>(key, "a non-negative integer or `auto`")?.map(Some)),
        }
    }

    fn raw(&self, key: &str) -> Option<(&str, usize)> {
        self.map.get(key).map(|e| (e.value, e.line))
    }

    fn fail(&self, line: usize, msg: impl Into<String>) -> CliError {
        CliError::parse(self.path, Some(line), msg)
    }
}

pub fn parse_run_config(text: &str, path: &Path) -> CliResult<RunSettings> {
    let r = Reader { map: entries(text, path, RUN_KEYS)?, path };
    let mut s = RunSettings::default();
    let c = &mut s.cfg;
    let real = "a number";
    let count = "a non-negative integer";
    let flag = "`true` or `false`";

    if let Some(v) = r.get("epsilon", real)? {
        c.ot.epsilon = v;
    }
    if let Some(v) = r.get("sinkhorn_max_iter", count)? {
        c.ot.max_iter = v;
    }
    if let Some(v) = r.get("sinkhorn_tol", real)? {
        c.ot.tol = v;
    }
    if let Some(v) = r.get("log_domain", flag)? {
        c.ot.log_domain = v;
    }
    if let Some(v) = r.get_auto("n_atoms")? {
        c.bary.n_atoms = v;
    }
    if let Some((v, line)) = r.raw("source_weights") {
        c.bary.source_weights = if v == "uniform" {
            None
        } else {
            let w = v
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| r.fail(line, "`source_weights` must be comma-separated numbers or `uniform`"))?;
            Some(w)
        };
    }
    if let Some(v) = r.get("bary_max_outer_iter", count)? {
        c.bary.max_outer_iter = v;
    }
    if let Some(v) = r.get("support_tol", real)? {
        c.bary.support_tol = v;
    }
    if let Some((v, line)) = r.raw("bary_init") {
        c.bary.init = match v {
            "kmeans++" => BarycenterInit::KMeansPlusPlus,
            "random" => BarycenterInit::RandomSubset,
            _ => return Err(r.fail(line, format!("`bary_init` must be `kmeans++` or `random`, got `{v}`"))),
        };
    }
    if let Some(v) = r.get("prune_threshold", real)? {
        c.prune_threshold = v;
    }
    let k_min = r.get_auto("k_min")?.flatten();
    let k_max = r.get_auto("k_max")?.flatten();
    c.k_mode = match r.get_auto("k")? {
        Some(Some(k)) => KMode::Fixed(k),
        _ => KMode::AutoGap { k_min, k_max },
    };
    if let Some(v) = r.get("row_normalize", flag)? {
        c.row_normalize = v;
    }
    let kind = r.raw("classifier");
    let softmax_keys = ["softmax_l2", "softmax_lr", "softmax_epochs"];
    c.classifier = match kind.map(|(v, _)| v) {
        None | Some("knn") => {
            if let Some(key) = softmax_keys.iter().find(|k| r.raw(k).is_some()) {
                let line = r.raw(key).expect("present").1;
                return Err(r.fail(line, format!("`{key}` needs `classifier = softmax`")));
            }
            ClassifierConfig::Knn { k_neighbors: r.get("k_neighbors", count)?.unwrap_or(5) }
        }
        Some("softmax") => {
            if let Some((_, line)) = r.raw("k_neighbors") {
                return Err(r.fail(line, "`k_neighbors` needs `classifier = knn`"));
            }
            ClassifierConfig::Softmax {
                l2: r.get("softmax_l2", real)?.unwrap_or(1e-3),
                lr: r.get("softmax_lr", real)?.unwrap_or(0.1),
                epochs: r.get("softmax_epochs", count)?.unwrap_or(500),
            }
        }
        Some(other) => {
            let line = kind.expect("present").1;
            return Err(r.fail(line, format!("`classifier` must be `knn` or `softmax`, got `{other}`")));
        }
    };
    s.n_classes = r.get_auto("n_classes")?.flatten();
    if let Some(v) = r.get("seed", "an unsigned integer")? {
        c.seed = v;
    }
    if let Some((v, line)) = r.raw("isolated_policy") {
        c.isolated_policy = match v {
            "self_loop" => IsolatedPolicy::SelfLoop,
            "drop" => IsolatedPolicy::Drop,
            _ => return Err(r.fail(line, format!("`isolated_policy` must be `self_loop` or `drop`, got `{v}`"))),
        };
    }
    if let Some(v) = r.get("eigen_tol", real)? {
        c.eigen_tol = v;
    }
    if let Some(v) = r.get("eigen_max_iter", count)? {
        c.eigen_max_iter = v;
    }
    if let Some(v) = r.get("gap_margin", count)? {
        c.gap_margin = v;
    }
    if let Some(v) = r.get("train_on_sources_too", flag)? {
        c.train_on_sources_too = v;
    }
    if let Some(v) = r.get("standardize", flag)? {
        c.standardize = v;
    }
    Ok(s)
}

pub fn read_run_config(path: &Path) -> CliResult<RunSettings> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_run_config(&text, path)
}

fn fmt_auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| x.to_string())
}

/// The resolved configuration as `key -> value`, in the file syntax.
pub fn echo_run_config(cfg: &SeotConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("epsilon", format!("{:e}", cfg.ot.epsilon));
    put("sinkhorn_max_iter", cfg.ot.max_iter.to_string());
    put("sinkhorn_tol", format!("{:e}", cfg.ot.tol));
    put("log_domain", cfg.ot.log_domain.to_string());
    put("n_atoms", fmt_auto(cfg.bary.n_atoms));
    put(
        "source_weights",
        cfg.bary.source_weights.as_ref().map_or_else(
            || "uniform".to_string(),
            |w| w.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(","),
        ),
    );
    put("bary_max_outer_iter", cfg.bary.max_outer_iter.to_string());
    put("support_tol", format!("{:e}", cfg.bary.support_tol));
    put(
        "bary_init",
        match cfg.bary.init {
            BarycenterInit::KMeansPlusPlus => "kmeans++",
            BarycenterInit::RandomSubset => "random",
        }
        .into(),
    );
    put("prune_threshold", format!("{:e}", cfg.prune_threshold));
    match cfg.k_mode {
        KMode::Fixed(k) => put("k", k.to_string()),
        KMode::AutoGap { .. } => {
            let (lo, hi) = cfg.gap_range().expect("auto mode");
            put("k", "auto".into());
            put("k_min", lo.to_string());
            put("k_max", hi.to_string());
        }
    }
    put("row_normalize", cfg.row_normalize.to_string());
    match cfg.classifier {
        ClassifierConfig::Knn { k_neighbors } => {
            put("classifier", "knn".into());
            put("k_neighbors", k_neighbors.to_string());
        }
        ClassifierConfig::Softmax { l2, lr, epochs } => {
            put("classifier", "softmax".into());
            put("softmax_l2", format!("{l2:e}"));
            put("softmax_lr", format!("{lr:e}"));
            put("softmax_epochs", epochs.to_string());
        }
    }
    put("n_classes", cfg.n_classes.to_string());
    put("seed", cfg.seed.to_string());
    put(
        "isolated_policy",
        match cfg.isolated_policy {
            IsolatedPolicy::SelfLoop => "self_loop",
            IsolatedPolicy::Drop => "drop",
        }
        .into(),
    );
    put("eigen_tol", format!("{:e}", cfg.eigen_tol));
    put("eigen_max_iter", cfg.eigen_max_iter.to_string());
    put("gap_margin", cfg.gap_margin.to_string());
    put("train_on_sources_too", cfg.train_on_sources_too.to_string());
    put("standardize", cfg.standardize.to_string());
    m
}

pub fn parse_shift(value: &str) -> Result<Shift, String> {
    let (kind, arg) = value
        .split_once(':')
        .ok_or_else(|| format!("shift `{value}` must look like `rotate:30`"))?;
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("bad number `{s}` in shift `{value}`"));
    match kind.trim() {
        "rotate" => Ok(Shift::Rotate(num(arg)?)),
        "scale" => Ok(Shift::Scale(num(arg)?)),
        "noise" => Ok(Shift::Noise(num(arg)?)),
        "translate" => Ok(Shift::Translate(arg.split(',').map(num).collect::<Result<_, _>>()?)),
        other => Err(format!("unknown shift kind `{other}`")),
    }
}

pub fn format_shift(shift: &Shift) -> String {
    match shift {
        Shift::Rotate(d) => format!("rotate:{d}"),
        Shift::Scale(f) => format!("scale:{f}"),
        Shift::Noise(s) => format!("noise:{s}"),
        Shift::Translate(v) => format!("translate:{}", v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
    }
}

/// The benchmark used when no synth config is given: two classes in the
/// plane, three sources, a 60 degree rotation.
pub fn default_synth_spec() -> SynthSpec {
    SynthSpec {
        n_classes: 2,
        samples_per_class: 200,
        d: 2,
        class_separation: 4.0,
        n_sources: 3,
        shift: Shift::Rotate(60.0),
        seed: 0,
    }
}

pub fn parse_synth_config(text: &str, path: &Path) -> CliResult<SynthSpec> {
    let r = Reader { map: entries(text, path, SYNTH_KEYS)?, path };
    let mut s = default_synth_spec();
    let count = "a positive integer";
    if let Some(v) = r.get("n_classes", count)? {
        s.n_classes = v;
    }
    if let Some(v) = r.get("samples_per_class", count)? {
        s.samples_per_class = v;
    }
    if let Some(v) = r.get("d", count)? {
        s.d = v;
    }
    if let Some(v) = r.get("class_separation", "a number")? {
        s.class_separation = v;
    }
    if let Some(v) = r.get("n_sources", count)? {
        s.n_sources = v;
    }
    if let Some((v, line)) = r.raw("shift") {
        s.shift = parse_shift(v).map_err(|m| r.fail(line, m))?;
    }
    if let Some(v) = r.get("seed", "an unsigned integer")? {
        s.seed = v;
    }
    Ok(s)
}

pub fn read_synth_config(path: &Path) -> CliResult<SynthSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_synth_config(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("run.cfg")
    }

    #[test]
    fn empty_file_gives_defaults() {
        let s = parse_run_config("# nothing\n\n", p()).unwrap();
        assert_eq!(s.cfg, SeotConfig::default());
        assert_eq!(s.n_classes, None);
    }

    #[test]
    fn keys_are_applied() {
        let text = "epsilon = 0.05\nk = 3\nclassifier = softmax\nsoftmax_epochs = 20\nn_atoms = 12\n\
                    source_weights = 0.25, 0.75\nisolated_policy = drop\nn_classes = 4\nbary_init = random\n";
        let s = parse_run_config(text, p()).unwrap();
        assert_eq!(s.cfg.ot.epsilon, 0.05);
        assert_eq!(s.cfg.k_mode, KMode::Fixed(3));
        assert_eq!(s.cfg.classifier, ClassifierConfig::Softmax { l2: 1e-3, lr: 0.1, epochs: 20 });
        assert_eq!(s.cfg.bary.n_atoms, Some(12));
        assert_eq!(s.cfg.bary.source_weights, Some(vec![0.25, 0.75]));
        assert_eq!(s.cfg.isolated_policy, IsolatedPolicy::Drop);
        assert_eq!(s.cfg.bary.init, BarycenterInit::RandomSubset);
        assert_eq!(s.n_classes, Some(4));
    }

    #[test]
    fn auto_gap_range() {
        let s = parse_run_config("k = auto\nk_min = 3\nk_max = auto\n", p()).unwrap();
        assert_eq!(s.cfg.k_mode, KMode::AutoGap { k_min: Some(3), k_max: None });
    }

    #[test]
    fn bad_files_name_the_line() {
        let e = parse_run_config("epsilon = 1\nepsilonn = 2\n", p()).unwrap_err();
        assert_eq!(e.to_string(), "run.cfg:2: unknown key `epsilonn`");
        let e = parse_run_config("k = 2\nk = 3\n", p()).unwrap_err();
        assert!(e.to_string().contains(":2:"));
        assert!(parse_run_config("epsilon: 1\n", p()).is_err());
        assert!(parse_run_config("epsilon = fast\n", p()).is_err());
        assert!(parse_run_config("softmax_lr = 0.1\n", p()).is_err());
        assert!(parse_run_config("classifier = svm\n", p()).is_err());
    }

    #[test]
    fn echo_reparses_to_the_same_config() {
        let text = "epsilon = 0.03\nk = 4\nclassifier = softmax\nsource_weights = 0.5,0.5\nn_atoms = 7\n";
        let mut s = parse_run_config(text, p()).unwrap();
        s.cfg.n_classes = 3;
        let echoed: String = echo_run_config(&s.cfg).iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let mut back = parse_run_config(&echoed, p()).unwrap();
        assert_eq!(back.n_classes, Some(3));
        back.cfg.n_classes = 3;
        assert_eq!(back.cfg, s.cfg);
    }

    #[test]
    fn shifts_round_trip() {
        for s in ["rotate:60", "scale:1.5", "noise:0.25", "translate:1,-2.5"] {
            assert_eq!(format_shift(&parse_shift(s).unwrap()), s);
        }
        assert!(parse_shift("spin:3").is_err());
        assert!(parse_shift("rotate").is_err());
    }

    #[test]
    fn synth_config() {
        let s = parse_synth_config("n_sources = 2\nshift = translate:1,2\nseed = 9\n", Path::new("s.cfg")).unwrap();
        assert_eq!(s.n_sources, 2);
        assert_eq!(s.shift, Shift::Translate(vec![1.0, 2.0]));
        assert_eq!(s.seed, 9);
        assert!(parse_synth_config("epsilon = 1\n", Path::new("s.cfg")).is_err());
    }
}
