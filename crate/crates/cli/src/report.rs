//! CSV and markdown renderings of experiment results.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::experiment::{Experiment, ExperimentOutput, SummaryRow};
use crate::CliError;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::infra(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::infra(format!("{}: {e}", path.display())))
}

fn title(e: Experiment) -> &'static str {
    match e {
        Experiment::Table1 => "Success rate (%) per method and task",
        Experiment::Fig5a => "Positional generalization: success rate (%) in and outside the training placement area",
        Experiment::Fig5b => "Background generalization: success rate (%) under unseen backgrounds",
        Experiment::Table2 => "Success rate (%) by number of demonstrations",
    }
}

fn uniq<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in it {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Pivot with one row per (method, demo count) and one column per (task, variant), plus a mean column.
pub fn markdown(experiment: Experiment, out: &ExperimentOutput, seed: u64, digest: &str) -> String {
    let rows = &out.summary;
    let tasks = uniq(rows.iter().map(|r| r.task.as_str()));
    let variants = uniq(rows.iter().map(|r| r.variant.as_str()));
    let mut keys: Vec<(&str, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.method.as_str(), r.demos)) {
            keys.push((r.method.as_str(), r.demos));
        }
    }
    let lookup = |task: &str, method: &str, demos: usize, variant: &str| -> Option<&SummaryRow> {
        rows.iter().find(|r| r.task == task && r.method == method && r.demos == demos && r.variant == variant)
    };

    let mut s = String::new();
    let _ = writeln!(s, "# {}: {}\n", experiment.name(), title(experiment));
    let _ = writeln!(s, "seed {seed}, config digest `{digest}`\n");
    let mut header = vec!["method".to_string(), "demos".to_string()];
    for t in &tasks {
        for v in &variants {
            header.push(if variants.len() == 1 { t.to_string() } else { format!("{t} / {v}") });
        }
    }
    for v in &variants {
        header.push(if variants.len() == 1 { "mean".into() } else { format!("mean / {v}") });
    }
    let _ = writeln!(s, "| {} |", header.join(" | "));
    let _ = writeln!(s, "|{}", " --- |".repeat(header.len()));
    for (method, demos) in &keys {
        let mut cells = vec![method.to_string(), demos.to_string()];
        let mut sums = vec![(0.0, 0usize); variants.len()];
        for t in &tasks {
            for (vi, v) in variants.iter().enumerate() {
                match lookup(t, method, *demos, v) {
                    Some(r) => {
                        cells.push(format!("{:.0}", 100.0 * r.rate));
                        sums[vi].0 += 100.0 * r.rate;
                        sums[vi].1 += 1;
                    }
                    None => cells.push("-".into()),
                }
            }
        }
        for (sum, n) in sums {
            cells.push(if n == 0 { "-".into() } else { format!("{:.1}", sum / n as f64) });
        }
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }
    let evals = rows.first().map_or(0, |r| r.evals);
    let _ = writeln!(s, "\n{evals} evaluation rollouts per cell.");
    s
}
