use std::path::{Path, PathBuf};
use std::process::Command;

use seot_cli::config::parse_synth_config;
use seot_cli::dataset::read_dataset;
use seot_cli::report::{predictions_path, timings_path, REPORT_SCHEMA};
use seot_cli::{cmd_baseline, cmd_run, cmd_run2, cmd_spectrum, cmd_synth, KArg, Overrides, RunArgs};
use seot_core::synth::generate;
use tempfile::TempDir;

const SMALL_SYNTH: &str = "n_classes = 2\nsamples_per_class = 25\nd = 2\nclass_separation = 4\nn_sources = 2\nshift = rotate:20\n";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn small_benchmark(dir: &Path, seed: u64) -> (Vec<PathBuf>, PathBuf) {
    let cfg = write(dir, "synth.cfg", SMALL_SYNTH);
    let data = dir.join("data");
    cmd_synth(Some(&cfg), Some(seed), &data).unwrap();
    (vec![data.join("source_0.csv"), data.join("source_1.csv")], data.join("target.csv"))
}

fn run_args(sources: Vec<PathBuf>, target: PathBuf, config: Option<PathBuf>, out: PathBuf) -> RunArgs {
    RunArgs { sources, target, config, out, overrides: Overrides::default(), edges: None }
}

fn validate(json: &str) {
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let instance: serde_json::Value = serde_json::from_str(json).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "report does not match the schema: {errors:?}");
}

fn seot(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_seot")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_files_parse_back_to_the_generated_data() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "synth.cfg", SMALL_SYNTH);
    let spec = cmd_synth(Some(&cfg), Some(11), dir.path()).unwrap();
    let data = generate(&spec).unwrap();
    let mut files: Vec<PathBuf> = (0..spec.n_sources).map(|i| dir.path().join(format!("source_{i}.csv"))).collect();
    files.push(dir.path().join("target.csv"));
    let expected = data.sources.iter().chain(std::iter::once(&data.target));
    for (file, want) in files.iter().zip(expected) {
        let got = read_dataset(file).unwrap();
        assert_eq!(got.labels(), want.labels());
        let diff = (got.points().as_array() - want.points().as_array()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d <= 1e-9));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["spec"]["shift"]["kind"], "rotate");
}

#[test]
fn synth_is_byte_identical_for_a_fixed_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    cmd_synth(None, Some(3), a.path()).unwrap();
    cmd_synth(None, Some(3), b.path()).unwrap();
    for name in ["source_0.csv", "source_1.csv", "source_2.csv", "target.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn zero_translation_and_zero_rotation_give_the_same_target() {
    let dir = TempDir::new().unwrap();
    let base = "n_classes = 2\nsamples_per_class = 10\nd = 2\nn_sources = 1\nseed = 4\n";
    let rot = write(dir.path(), "r.cfg", &format!("{base}shift = rotate:0\n"));
    let tr = write(dir.path(), "t.cfg", &format!("{base}shift = translate:0,0\n"));
    cmd_synth(Some(&rot), None, &dir.path().join("r")).unwrap();
    cmd_synth(Some(&tr), None, &dir.path().join("t")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("r/target.csv")).unwrap(),
        std::fs::read(dir.path().join("t/target.csv")).unwrap()
    );
    let spec = parse_synth_config(base, Path::new("x")).unwrap();
    assert_eq!(spec.seed, 4);
}

#[test]
fn run_writes_a_schema_valid_report_and_sidecars() {
    let dir = TempDir::new().unwrap();
    let (sources, target) = small_benchmark(dir.path(), 1);
    let out = dir.path().join("report.json");
    let mut args = run_args(sources, target, None, out.clone());
    args.edges = Some(dir.path().join("graph.edges"));
    let report = cmd_run(&args).unwrap();
    let json = std::fs::read_to_string(&out).unwrap();
    validate(&json);
    assert!(report.accuracy.is_some());
    assert_eq!(report.method, "seot");
    assert_eq!(std::fs::read_to_string(predictions_path(&out)).unwrap().lines().count(), 51);
    let timings: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(timings_path(&out)).unwrap()).unwrap();
    assert!(timings["barycenter"].as_f64().unwrap() >= 0.0);
    assert!(std::fs::metadata(dir.path().join("graph.edges")).unwrap().len() > 0);
}

#[test]
fn run_reports_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let (sources, target) = small_benchmark(dir.path(), 2);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    cmd_run(&run_args(sources.clone(), target.clone(), None, a.clone())).unwrap();
    cmd_run(&run_args(sources, target, None, b.clone())).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn unlabeled_target_omits_accuracy_but_predicts() {
    let dir = TempDir::new().unwrap();
    let (sources, target) = small_benchmark(dir.path(), 3);
    let text = std::fs::read_to_string(&target).unwrap();
    let unlabeled: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 0 { format!("{l}\n") } else { format!("?{}\n", &l[l.find(',').unwrap()..]) })
        .collect();
    let target = write(dir.path(), "unlabeled.csv", &unlabeled);
    let out = dir.path().join("u.json");
    let report = cmd_run(&run_args(sources, target, None, out.clone())).unwrap();
    assert!(report.accuracy.is_none());
    let json = std::fs::read_to_string(&out).unwrap();
    assert!(!json.contains("\"accuracy\""));
    validate(&json);
    assert_eq!(std::fs::read_to_string(predictions_path(&out)).unwrap().lines().count(), 51);
}

#[test]
fn run2_direct_and_baseline_share_the_schema() {
    let dir = TempDir::new().unwrap();
    let (sources, target) = small_benchmark(dir.path(), 4);
    let out = dir.path().join("direct.json");
    let mut args = run_args(vec![sources[0].clone()], target.clone(), None, out.clone());
    args.overrides.k = Some(KArg::Fixed(2));
    let report = cmd_run2(&args, true).unwrap();
    assert_eq!(report.method, "seot-direct");
    assert_eq!(report.chosen_k, Some(2));
    validate(&std::fs::read_to_string(&out).unwrap());

    let out = dir.path().join("base.json");
    let report = cmd_baseline(&run_args(sources, target, None, out.clone())).unwrap();
    assert_eq!(report.method, "source-only");
    validate(&std::fs::read_to_string(&out).unwrap());
}

fn three_clusters(jitter_seed: usize) -> String {
    let centers = [(0.0, 0.0), (20.0, 0.0), (0.0, 20.0)];
    let mut s = String::from("label,x,y\n");
    for (c, (x, y)) in centers.iter().enumerate() {
        for i in 0..10 {
            let a = (i + jitter_seed) as f64 * 2.399;
            let r = 0.1 * ((i + 1) as f64 / 10.0).sqrt();
            s.push_str(&format!("{c},{},{}\n", x + r * a.cos(), y + r * a.sin()));
        }
    }
    s
}

#[test]
fn spectrum_of_a_three_component_graph() {
    let dir = TempDir::new().unwrap();
    let s = write(dir.path(), "s.csv", &three_clusters(0));
    let t = write(dir.path(), "t.csv", &three_clusters(5));
    let out = dir.path().join("spectrum.txt");
    let spec = cmd_spectrum(&run_args(vec![s.clone()], t.clone(), None, out.clone()), 6).unwrap();
    assert_eq!(spec.eigenvalues.len(), 7);
    assert!(spec.eigenvalues[..3].iter().all(|&l| l.abs() < 1e-8), "{:?}", spec.eigenvalues);
    assert!(spec.eigenvalues[3] > 1e-3);
    let peak = spec.gaps.iter().copied().fold((0, f64::MIN), |best, g| if g.1 > best.1 { g } else { best });
    assert_eq!(peak.0, 3);
    assert_eq!(spec.selected_k, 3);
    let first = std::fs::read(&out).unwrap();
    cmd_spectrum(&run_args(vec![s], t, None, out.clone()), 6).unwrap();
    assert_eq!(first, std::fs::read(&out).unwrap());
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let (sources, target) = small_benchmark(dir.path(), 5);
    let out = dir.path().join("r.json");
    let src = ["--source", p(&sources[0]), "--source", p(&sources[1])];

    let ok = seot(&[&["run"], &src[..], &["--target", p(&target), "--out", p(&out), "--k", "2"]].concat());
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));

    let bad = write(dir.path(), "bad.csv", "label,x,y\n0,1,2\n1,3\n");
    let r = seot(&[&["run"], &src[..], &["--target", p(&bad), "--out", p(&out)]].concat());
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bad.csv:3:"));

    let cfg = write(dir.path(), "typo.cfg", "epsilon = 0.01\nepsilom = 0.1\n");
    let r = seot(&[&["run"], &src[..], &["--target", p(&target), "--out", p(&out), "--config", p(&cfg)]].concat());
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("typo.cfg:2:"));

    let r = seot(&[&["spectrum"], &src[..], &["--target", p(&target), "--out", p(&out), "--k-max", "200"]].concat());
    assert_eq!(r.status.code(), Some(2));

    let unlabeled = write(dir.path(), "u.csv", "label,x,y\n?,0,0\n?,1,1\n");
    let r = seot(&[&["baseline"], &src[..], &["--target", p(&unlabeled), "--out", p(&out)]].concat());
    assert_eq!(r.status.code(), Some(2));

    let r = seot(&[&["run"], &src[..], &["--target", p(&dir.path().join("missing.csv")), "--out", p(&out)]].concat());
    assert_eq!(r.status.code(), Some(2));

    let strict = write(dir.path(), "strict.cfg", "eigen_tol = 1e-300\neigen_max_iter = 1\nk = 2\n");
    let r = seot(&[&["run"], &src[..], &["--target", p(&target), "--out", p(&out), "--config", p(&strict)]].concat());
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("spectral"));
}
