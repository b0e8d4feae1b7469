//! Result emission: deterministic JSON, an aligned text table, and the
//! timing sidecar.

use std::fs;
use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::experiment::{ExperimentOutcome, ResultTable};

pub const RESULTS_FILE: &str = "results.json";
pub const REPORT_FILE: &str = "report.txt";
pub const TIMINGS_FILE: &str = "timings.json";

fn fmt_stat(mean: Option<f64>, ci: Option<f64>) -> String {
    match (mean, ci) {
        (Some(m), Some(c)) => format!("{m:.3}±{c:.3}"),
        (Some(m), None) => format!("{m:.3} (n/a)"),
        _ => "failed".to_string(),
    }
}

/// Renders the aligned text table (wall time included when available).
pub fn render_table(outcome: &ExperimentOutcome) -> String {
    let table = &outcome.table;
    let mut lines = Vec::new();
    lines.push(format!(
        "dataset {} ({} samples), split {:.2}, seed {}, basis order {} with {} functions",
        table.dataset,
        table.n_samples,
        table.split_ratio,
        table.seed,
        table.basis_order,
        table.num_basis
    ));
    let header = [
        "kernel".to_string(),
        "#params".to_string(),
        "reps".to_string(),
        "RMSE".to_string(),
        "MSLL".to_string(),
        "lobe RMSE".to_string(),
        "lobe MSLL".to_string(),
        "time[s]".to_string(),
    ];
    let mut rows = vec![header.to_vec()];
    for row in &table.rows {
        let time = outcome
            .timings
            .iter()
            .find(|t| t.kernel == row.kernel)
            .map(|t| format!("{:.1}", t.seconds))
            .unwrap_or_else(|| "-".into());
        rows.push(vec![
            row.kernel.clone(),
            row.hyperparameter_count.to_string(),
            format!("{}/{}", row.per_repeat.len(), row.repeats_configured),
            fmt_stat(row.rmse_mean, row.rmse_ci95),
            fmt_stat(row.msll_mean, row.msll_ci95),
            fmt_stat(row.lobe_rmse_mean, row.lobe_rmse_ci95),
            fmt_stat(row.lobe_msll_mean, row.lobe_msll_ci95),
            time,
        ]);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        lines.push(line.join("  "));
    }
    for row in &table.rows {
        for err in &row.errors {
            lines.push(format!("!! {}: {}", row.kernel, err));
        }
    }
    lines.join("\n") + "\n"
}

/// Serializes the result table deterministically.
pub fn results_json(table: &ResultTable) -> String {
    serde_json::to_string_pretty(table).expect("result table serialization cannot fail") + "\n"
}

/// Writes results.json, report.txt, and timings.json into the output
/// directory.
pub fn write_artifacts(outcome: &ExperimentOutcome, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| HarnessError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    fs::write(out_dir.join(RESULTS_FILE), results_json(&outcome.table))
        .map_err(|e| HarnessError::Data(format!("cannot write {RESULTS_FILE}: {e}")))?;
    fs::write(out_dir.join(REPORT_FILE), render_table(outcome))
        .map_err(|e| HarnessError::Data(format!("cannot write {REPORT_FILE}: {e}")))?;
    let timings = serde_json::to_string_pretty(&outcome.timings)
        .expect("timing serialization cannot fail")
        + "\n";
    fs::write(out_dir.join(TIMINGS_FILE), timings)
        .map_err(|e| HarnessError::Data(format!("cannot write {TIMINGS_FILE}: {e}")))?;
    Ok(())
}

/// Reads a previously written result table.
pub fn load_results(path: &Path) -> Result<ResultTable> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}
