//! CSV datasets: a header line, then `label,f1,...,fd` per sample, where the
//! label is a class id or `?` for an unlabeled sample.
//!
//! Floats are written with 17 significant digits so a write/read cycle
//! reproduces every value exactly.

use std::fmt::Write as _;
use std::path::Path;

use seot_core::{DataMatrix, LabeledDomain};

use crate::error::{CliError, CliResult};

pub fn parse_dataset(text: &str, path: &Path) -> CliResult<LabeledDomain> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| CliError::parse(path, None, "empty file"))?;
    let width = header.split(',').count();
    if width < 2 {
        return Err(CliError::parse(path, Some(1), "header needs a label column and at least one feature"));
    }
    let mut rows = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(CliError::parse(
                path,
                Some(lineno),
                format!("expected {width} columns, found {}", fields.len()),
            ));
        }
        let label = match fields[0] {
            "?" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|_| CliError::parse(path, Some(lineno), format!("bad label `{s}`")))?,
            ),
        };
        let row = fields[1..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::parse(path, Some(lineno), format!("bad feature value `{s}`")))
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(CliError::parse(path, None, "no samples"));
    }
    let labels = match labels.iter().filter(|l| l.is_some()).count() {
        0 => None,
        n if n == labels.len() => Some(labels.into_iter().map(|l| l.expect("all labeled")).collect()),
        _ => return Err(CliError::parse(path, None, "mixes labeled and unlabeled (`?`) samples")),
    };
    let points = DataMatrix::from_rows(&rows).map_err(|e| CliError::parse(path, None, e.to_string()))?;
    LabeledDomain::uniform(points, labels).map_err(|e| CliError::parse(path, None, e.to_string()))
}

pub fn read_dataset(path: &Path) -> CliResult<LabeledDomain> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn format_dataset(domain: &LabeledDomain) -> String {
    let d = domain.dim();
    let mut out = String::from("label");
    for j in 1..=d {
        write!(out, ",f{j}").expect("writing to a String");
    }
    out.push('\n');
    let labels = domain.labels();
    for (i, row) in domain.points().as_array().rows().into_iter().enumerate() {
        match labels {
            Some(l) => write!(out, "{}", l[i]),
            None => write!(out, "?"),
        }
        .expect("writing to a String");
        for v in row {
            write!(out, ",{v:.16e}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, domain: &LabeledDomain) -> CliResult<()> {
    std::fs::write(path, format_dataset(domain)).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("data.csv")
    }

    #[test]
    fn parses_labeled_and_unlabeled() {
        let d = parse_dataset("label,f1,f2\n0,1.5,2\n1,-3,4e-1\n", p()).unwrap();
        assert_eq!(d.labels(), Some(&[0, 1][..]));
        assert_eq!(d.points().as_array()[[1, 1]], 0.4);
        let u = parse_dataset("label,f1\n?,1\n?,2\n", p()).unwrap();
        assert!(u.labels().is_none());
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse_dataset("label,f1,f2\n0,1,2\n1,x,2\n", p()).unwrap_err();
        assert_eq!(err.to_string(), "data.csv:3: bad feature value `x`");
        let err = parse_dataset("label,f1,f2\n0,1\n", p()).unwrap_err();
        assert!(err.to_string().starts_with("data.csv:2:"));
        assert!(parse_dataset("label,f1\n0,1\n?,2\n", p()).is_err());
        assert!(parse_dataset("label,f1\n", p()).is_err());
        assert_eq!(parse_dataset("label,f1\n-1,1\n", p()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn round_trip_is_exact() {
        let rows = vec![vec![0.1 + 0.2, -1e-300], vec![std::f64::consts::PI, 12345.678901234567]];
        let d = LabeledDomain::uniform(DataMatrix::from_rows(&rows).unwrap(), Some(vec![1, 0])).unwrap();
        let back = parse_dataset(&format_dataset(&d), p()).unwrap();
        assert_eq!(back.points(), d.points());
        assert_eq!(back.labels(), d.labels());
    }
}
