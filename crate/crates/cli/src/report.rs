//! The JSON report written by `run`, `run2` and `baseline`, and its sidecars.
//!
//! Reports hold only quantities that are a deterministic function of the
//! inputs, the configuration and the seed. Wall-clock timings go to a
//! separate `<stem>.timings.json` file and predictions to
//! `<stem>.predictions.csv`, both next to the report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use seot_core::{Diagnostics, EvalReport};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// The schema every report validates against, shipped with the crate.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub j: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// `seot`, `seot-direct` or `source-only`.
    pub method: String,
    pub seed: u64,
    pub n_classes: usize,
    pub n_target: usize,
    /// Present only when the target is labeled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_accuracy: Option<Vec<Option<f64>>>,
    /// `confusion[true][predicted]`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confusion: Option<Vec<Vec<usize>>>,
    /// Absent for the source-only baseline, which has no embedding.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chosen_k: Option<usize>,
    pub eigenvalues: Vec<f64>,
    pub gaps: Vec<Gap>,
    /// `λ_{N_c+1} - λ_{N_c}` when it was computed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostics: Option<Diagnostics>,
    pub config: BTreeMap<String, String>,
}

impl Report {
    pub fn apply_eval(&mut self, eval: Option<&EvalReport>) {
        if let Some(e) = eval {
            self.accuracy = Some(e.accuracy);
            self.per_class_accuracy = Some(e.per_class_accuracy.clone());
            self.confusion = Some(e.confusion.clone());
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports always serialize");
        s.push('\n');
        s
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

pub fn predictions_path(out: &Path) -> PathBuf {
    sibling(out, "predictions.csv")
}

pub fn timings_path(out: &Path) -> PathBuf {
    sibling(out, "timings.json")
}

pub fn format_predictions(predictions: &[usize]) -> String {
    let mut s = String::from("index,prediction\n");
    for (i, p) in predictions.iter().enumerate() {
        s.push_str(&format!("{i},{p}\n"));
    }
    s
}

pub fn format_timings(timings: &[(&str, Duration)], matvec: Option<Duration>) -> String {
    let mut m: Vec<(String, f64)> = timings.iter().map(|(n, t)| (n.to_string(), t.as_secs_f64())).collect();
    if let Some(t) = matvec {
        m.push(("eigensolver_matvec".into(), t.as_secs_f64()));
    }
    let obj: serde_json::Map<String, serde_json::Value> = m.into_iter().map(|(k, v)| (k, v.into())).collect();
    let mut s = serde_json::to_string_pretty(&obj).expect("timings serialize");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
