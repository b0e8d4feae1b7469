//! Paired comparison statistics and confidence intervals.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{HarnessError, Result};

/// One-sided paired t-test outcome for the alternative "A is smaller".
#[derive(Debug, Clone, Copy)]
pub struct PairedT {
    pub t: f64,
    pub p: f64,
    pub mean_difference: f64,
    /// Zero-variance differences: the statistic degenerates and `p` is
    /// reported as 0, 1, or 0.5 by the sign of the mean difference.
    pub degenerate: bool,
}

/// One-sided paired t-test of "metric of A is smaller than metric of B"
/// on per-repeat values paired by position.
pub fn paired_t_less(a: &[f64], b: &[f64]) -> Result<PairedT> {
    if a.len() != b.len() {
        return Err(HarnessError::Config(format!(
            "paired test needs equal lengths, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(HarnessError::Config(
            "paired test needs at least 2 pairs".into(),
        ));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = b.iter().zip(a).map(|(y, x)| y - x).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd < 1e-300 {
        let p = if mean > 0.0 {
            0.0
        } else if mean < 0.0 {
            1.0
        } else {
            0.5
        };
        return Ok(PairedT {
            t: if mean == 0.0 { 0.0 } else { f64::INFINITY * mean.signum() },
            p,
            mean_difference: mean,
            degenerate: true,
        });
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| HarnessError::Numerical(format!("t-distribution: {e}")))?;
    let p = 1.0 - dist.cdf(t);
    Ok(PairedT {
        t,
        p,
        mean_difference: mean,
        degenerate: false,
    })
}

/// Half-width of the 95% t-distribution confidence interval of the mean;
/// `None` when fewer than two values exist (a single run carries no spread
/// information).
pub fn ci95_half_width(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).ok()?;
    let q = dist.inverse_cdf(0.975);
    Some(q * (var / n).sqrt())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
