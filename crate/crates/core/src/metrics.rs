//! Evaluation metrics over functional predictions: per-sample rooted RMSE,
//! mean log loss of the Gaussian predictive density, and their main-lobe
//! restricted variants.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Variance floor applied before the log loss to avoid −∞ from clamped-zero
/// variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Prominence floor for peak detection, as a fraction of the curve's range.
const PROMINENCE_FRACTION: f64 = 0.05;

/// Aggregated evaluation of one prediction set.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub rmse: f64,
    pub msll: f64,
    pub per_sample_rmse: Vec<f64>,
    pub lobe_rmse: f64,
    pub lobe_msll: f64,
    pub n_test: usize,
    pub warnings: MetricWarnings,
}

/// Counters for degerate situations encountered while evaluating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetricWarnings {
    /// Predictive variances floored before the log.
    pub floored_variances: usize,
    /// Samples skipped from lobe metrics for lack of detectable peaks.
    pub skipped_lobe_samples: usize,
}

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidParameter(format!("{what}: empty matrices")));
    }
    Ok(())
}

/// Rooted mean squared error per sample: `√(Σ_i (y_i − ŷ_i)²/l)`.
pub fn per_sample_rmse(truth: &DMatrix<f64>, pred_mean: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_dims(truth, pred_mean, "rmse inputs")?;
    let l = truth.ncols() as f64;
    Ok((0..truth.nrows())
        .map(|n| {
            let mut s = 0.0;
            for i in 0..truth.ncols() {
                let e = truth[(n, i)] - pred_mean[(n, i)];
                s += e * e;
            }
            (s / l).sqrt()
        })
        .collect())
}

/// Mean over samples of the per-sample rooted MSE (the per-sample rooting
/// matters: this is not the pooled RMSE).
pub fn rmse(truth: &DMatrix<f64>, pred_mean: &DMatrix<f64>) -> Result<f64> {
    let per = per_sample_rmse(truth, pred_mean)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Outcome of the mean log loss: the value plus the count of floored
/// variance entries.
#[derive(Debug, Clone, Copy)]
pub struct Msll {
    pub value: f64,
    pub floored: usize,
}

/// Mean over all `N·l` terms of the Gaussian negative log density
/// `½·log(2πσ̂²) + (y − ŷ)²/(2σ̂²)`. Smaller is better.
pub fn msll(
    truth: &DMatrix<f64>,
    pred_mean: &DMatrix<f64>,
    pred_var: &DMatrix<f64>,
) -> Result<Msll> {
    check_dims(truth, pred_mean, "msll inputs")?;
    check_dims(truth, pred_var, "msll variances")?;
    let mut floored = 0;
    let mut total = 0.0;
    for n in 0..truth.nrows() {
        for i in 0..truth.ncols() {
            let v = pred_var[(n, i)];
            if v < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "negative predictive variance {v} at sample {n}, angle index {i}"
                )));
            }
            let v = if v < VARIANCE_FLOOR {
                floored += 1;
                VARIANCE_FLOOR
            } else {
                v
            };
            let e = truth[(n, i)] - pred_mean[(n, i)];
            total += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + e * e / (2.0 * v);
        }
    }
    Ok(Msll {
        value: total / (truth.nrows() * truth.ncols()) as f64,
        floored,
    })
}

/// Mask of angles belonging to the main lobes of one truth curve.
#[derive(Debug, Clone)]
pub struct LobeMask {
    pub mask: Vec<bool>,
    /// No strict local maximum cleared the prominence floor.
    pub degenerate: bool,
}

fn circular_delta(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).abs() % period;
    d.min(period - d)
}

/// Topographic prominence of a peak: height above the higher of the two
/// side minima, each taken between the peak and the nearest higher point
/// (or the curve end).
fn prominence(curve: &[f64], peak: usize, wrap: bool) -> f64 {
    let l = curve.len();
    let walk = |step: isize| -> f64 {
        let mut lowest = curve[peak];
        let mut pos = peak as isize;
        let mut steps = 0;
        loop {
            pos += step;
            if wrap {
                pos = pos.rem_euclid(l as isize);
            } else if pos < 0 || pos >= l as isize {
                break;
            }
            steps += 1;
            if steps >= l as isize {
                break;
            }
            let v = curve[pos as usize];
            if v > curve[peak] {
                break;
            }
            lowest = lowest.min(v);
        }
        lowest
    };
    let left = walk(-1);
    let right = walk(1);
    curve[peak] - left.max(right)
}

/// Indices of strict local maxima clearing the prominence floor.
fn detect_peaks(curve: &[f64], wrap: bool) -> Vec<usize> {
    let l = curve.len();
    if l < 3 {
        return Vec::new();
    }
    let lo = curve.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return Vec::new();
    }
    let floor = PROMINENCE_FRACTION * range;
    let mut peaks = Vec::new();
    let bounds = if wrap { 0..l } else { 1..l - 1 };
    for i in bounds {
        let prev = curve[(i + l - 1) % l];
        let next = curve[(i + 1) % l];
        if curve[i] > prev && curve[i] > next && prominence(curve, i, wrap) >= floor {
            peaks.push(i);
        }
    }
    peaks
}

/// Marks every angle within `half_width` degrees (inclusive) of any
/// detected peak of the truth curve. Peaks are found on the truth curve
/// only. `wrap` treats the angle grid as a full circle (360°), as for
/// patterns sampled on `[0, 360)`.
pub fn main_lobe_mask(
    truth_curve: &[f64],
    angles: &[f64],
    half_width: f64,
    wrap: bool,
) -> LobeMask {
    let peaks = detect_peaks(truth_curve, wrap);
    if peaks.is_empty() {
        return LobeMask {
            mask: vec![false; truth_curve.len()],
            degenerate: true,
        };
    }
    let mask = angles
        .iter()
        .map(|&t| {
            peaks.iter().any(|&p| {
                let d = if wrap {
                    circular_delta(t, angles[p], 360.0)
                } else {
                    (t - angles[p]).abs()
                };
                d <= half_width
            })
        })
        .collect();
    LobeMask {
        mask,
        degenerate: false,
    }
}

/// Lobe-restricted metric values.
#[derive(Debug, Clone, Copy)]
pub struct LobeMetrics {
    pub rmse: f64,
    pub msll: f64,
    pub skipped_samples: usize,
    pub floored_variances: usize,
}

/// RMSE/MSLL restricted to the main-lobe angles of each truth curve, with
/// the per-sample angle count replaced by the masked count. Samples with no
/// detectable peak are skipped and counted.
pub fn lobe_metrics(
    truth: &DMatrix<f64>,
    pred_mean: &DMatrix<f64>,
    pred_var: &DMatrix<f64>,
    angles: &[f64],
    half_width: f64,
    wrap: bool,
) -> Result<LobeMetrics> {
    check_dims(truth, pred_mean, "lobe inputs")?;
    check_dims(truth, pred_var, "lobe variances")?;
    if angles.len() != truth.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} angles for {} columns",
            angles.len(),
            truth.ncols()
        )));
    }
    let mut rmse_sum = 0.0;
    let mut msll_sum = 0.0;
    let mut kept = 0usize;
    let mut skipped = 0usize;
    let mut floored = 0usize;
    for n in 0..truth.nrows() {
        let curve: Vec<f64> = truth.row(n).iter().cloned().collect();
        let lobe = main_lobe_mask(&curve, angles, half_width, wrap);
        let count = lobe.mask.iter().filter(|&&b| b).count();
        if count == 0 {
            skipped += 1;
            continue;
        }
        let mut se = 0.0;
        let mut nll = 0.0;
        for (i, &keep) in lobe.mask.iter().enumerate() {
            if !keep {
                continue;
            }
            let e = truth[(n, i)] - pred_mean[(n, i)];
            se += e * e;
            let v = pred_var[(n, i)];
            if v < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "negative predictive variance {v} at sample {n}, angle index {i}"
                )));
            }
            let v = if v < VARIANCE_FLOOR {
                floored += 1;
                VARIANCE_FLOOR
            } else {
                v
            };
            nll += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + e * e / (2.0 * v);
        }
        rmse_sum += (se / count as f64).sqrt();
        msll_sum += nll / count as f64;
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::InvalidParameter(
            "no sample had a detectable main lobe".into(),
        ));
    }
    Ok(LobeMetrics {
        rmse: rmse_sum / kept as f64,
        msll: msll_sum / kept as f64,
        skipped_samples: skipped,
        floored_variances: floored,
    })
}

/// Full evaluation: global and lobe-restricted metrics in one report.
pub fn evaluate(
    truth: &DMatrix<f64>,
    pred_mean: &DMatrix<f64>,
    pred_var: &DMatrix<f64>,
    angles: &[f64],
    half_width: f64,
    wrap: bool,
) -> Result<EvaluationReport> {
    let per_sample = per_sample_rmse(truth, pred_mean)?;
    let global_rmse = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let global_msll = msll(truth, pred_mean, pred_var)?;
    let lobe = lobe_metrics(truth, pred_mean, pred_var, angles, half_width, wrap)?;
    Ok(EvaluationReport {
        rmse: global_rmse,
        msll: global_msll.value,
        per_sample_rmse: per_sample,
        lobe_rmse: lobe.rmse,
        lobe_msll: lobe.msll,
        n_test: truth.nrows(),
        warnings: MetricWarnings {
            floored_variances: global_msll.floored + lobe.floored_variances,
            skipped_lobe_samples: lobe.skipped_samples,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c])
    }

    #[test]
    fn rmse_zero_for_perfect_prediction() {
        let y = mat(&[&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]]);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn rmse_constant_error_is_its_magnitude() {
        let y = mat(&[&[1.0, 2.0, 3.0]]);
        let p = mat(&[&[1.3, 2.3, 3.3]]);
        assert_relative_eq!(rmse(&y, &p).unwrap(), 0.3, max_relative = 1e-12);
    }

    #[test]
    fn rmse_matches_hand_computation() {
        // Two samples with 3-angle errors (1,2,2) and (0,3,4):
        // per-sample rooted means are √3 and √(25/3).
        let y = mat(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        let p = mat(&[&[1.0, 2.0, 2.0], &[0.0, 3.0, 4.0]]);
        let expected = 0.5 * ((3.0f64).sqrt() + (25.0f64 / 3.0).sqrt());
        assert_relative_eq!(rmse(&y, &p).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn rmse_is_mean_of_roots_not_pooled() {
        let y = mat(&[&[0.0], &[0.0]]);
        let p = mat(&[&[3.0], &[4.0]]);
        // Mean of per-sample roots: (3+4)/2; pooled would be √(25/2).
        assert_relative_eq!(rmse(&y, &p).unwrap(), 3.5, max_relative = 1e-12);
        assert!((rmse(&y, &p).unwrap() - (12.5f64).sqrt()).abs() > 1e-3);
    }

    #[test]
    fn msll_closed_form_values() {
        let y = mat(&[&[1.0, 2.0]]);
        // Perfect mean, σ̂² = 1/(2π): terms are ½·log(1) = 0.
        let v = mat(&[&[1.0 / (2.0 * PI), 1.0 / (2.0 * PI)]]);
        assert_relative_eq!(msll(&y, &y, &v).unwrap().value, 0.0, epsilon = 1e-12);
        // Perfect mean, σ̂² = 1: ½·log(2π).
        let v = mat(&[&[1.0, 1.0]]);
        assert_relative_eq!(
            msll(&y, &y, &v).unwrap().value,
            0.5 * (2.0 * PI).ln(),
            max_relative = 1e-12
        );
        assert_relative_eq!(msll(&y, &y, &v).unwrap().value, 0.918939, max_relative = 1e-5);
        // Squared error equal to the variance everywhere: ½·log(2πσ̂²) + ½.
        let p = mat(&[&[1.5, 2.5]]);
        let v = mat(&[&[0.25, 0.25]]);
        assert_relative_eq!(
            msll(&y, &p, &v).unwrap().value,
            0.5 * (2.0 * PI * 0.25).ln() + 0.5,
            max_relative = 1e-12
        );
    }

    #[test]
    fn msll_floors_tiny_variances() {
        let y = mat(&[&[1.0]]);
        let v = mat(&[&[0.0]]);
        let out = msll(&y, &y, &v).unwrap();
        assert_eq!(out.floored, 1);
        assert!(out.value.is_finite());
        let v = mat(&[&[-1.0]]);
        assert!(msll(&y, &y, &v).is_err());
    }

    #[test]
    fn msll_minimized_at_squared_error() {
        // Scalar grid search: the per-term loss is minimized at σ̂² = e².
        let e: f64 = 0.7;
        let loss = |v: f64| 0.5 * (2.0 * PI * v).ln() + e * e / (2.0 * v);
        let best = loss(e * e);
        for &v in &[0.1, 0.3, 0.49, 0.70, 1.0, 2.0] {
            assert!(loss(v) >= best - 1e-12, "loss({v}) < loss(e²)");
        }
    }

    fn gauss_bump(center: f64, width: f64, angles: &[f64]) -> Vec<f64> {
        angles
            .iter()
            .map(|&t| (-(t - center) * (t - center) / (2.0 * width * width)).exp())
            .collect()
    }

    #[test]
    fn single_peak_mask_covers_fifteen_degrees() {
        let angles: Vec<f64> = (0..=180).map(|d| d as f64).collect();
        let curve = gauss_bump(90.0, 15.0, &angles);
        let lobe = main_lobe_mask(&curve, &angles, 7.0, false);
        assert!(!lobe.degenerate);
        let marked: Vec<usize> = lobe
            .mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        assert_eq!(marked, (83..=97).collect::<Vec<_>>());
        assert_eq!(marked.len(), 15);
    }

    #[test]
    fn flat_curve_is_degenerate() {
        let angles: Vec<f64> = (0..=20).map(|d| d as f64).collect();
        let curve = vec![2.0; angles.len()];
        let lobe = main_lobe_mask(&curve, &angles, 7.0, false);
        assert!(lobe.degenerate);
        assert!(lobe.mask.iter().all(|&b| !b));
    }

    #[test]
    fn two_peaks_mask_is_union_of_windows() {
        let angles: Vec<f64> = (0..=180).map(|d| d as f64).collect();
        let mut curve = gauss_bump(40.0, 10.0, &angles);
        for (c, b) in curve.iter_mut().zip(gauss_bump(140.0, 10.0, &angles)) {
            *c += b;
        }
        let lobe = main_lobe_mask(&curve, &angles, 7.0, false);
        let marked: Vec<usize> = lobe
            .mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        let expected: Vec<usize> = (33..=47).chain(133..=147).collect();
        assert_eq!(marked, expected);
    }

    #[test]
    fn low_prominence_wiggles_ignored() {
        let angles: Vec<f64> = (0..=180).map(|d| d as f64).collect();
        let mut curve = gauss_bump(90.0, 12.0, &angles);
        // A 1% ripple far from the peak should not count.
        curve[20] += 0.01;
        let lobe = main_lobe_mask(&curve, &angles, 7.0, false);
        let marked: Vec<usize> = lobe
            .mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        assert_eq!(marked, (83..=97).collect::<Vec<_>>());
    }

    #[test]
    fn wraparound_mask_crosses_zero() {
        let angles: Vec<f64> = (0..360).map(|d| d as f64).collect();
        let curve: Vec<f64> = angles
            .iter()
            .map(|&t| {
                let d = circular_delta(t, 0.0, 360.0);
                (-d * d / (2.0 * 20.0 * 20.0)).exp()
            })
            .collect();
        let lobe = main_lobe_mask(&curve, &angles, 7.0, true);
        assert!(!lobe.degenerate);
        assert!(lobe.mask[0]);
        assert!(lobe.mask[7] && lobe.mask[353]);
        assert!(!lobe.mask[8] && !lobe.mask[352]);
    }

    #[test]
    fn full_mask_equals_global_metrics() {
        let angles: Vec<f64> = (0..=60).map(|d| d as f64).collect();
        let n_angles = angles.len();
        let truth = DMatrix::from_fn(3, n_angles, |r, c| {
            let t = c as f64;
            (-(t - 30.0) * (t - 30.0) / 200.0).exp() + 0.1 * r as f64
        });
        let pred = truth.map(|v| v + 0.05);
        let var = DMatrix::from_element(3, n_angles, 0.02);
        // half_width spanning the whole grid → full mask.
        let lobe = lobe_metrics(&truth, &pred, &var, &angles, 61.0, false).unwrap();
        let g_rmse = rmse(&truth, &pred).unwrap();
        let g_msll = msll(&truth, &pred, &var).unwrap().value;
        assert_relative_eq!(lobe.rmse, g_rmse, max_relative = 1e-12);
        assert_relative_eq!(lobe.msll, g_msll, max_relative = 1e-12);
    }

    #[test]
    fn perfect_on_lobe_gives_zero_lobe_rmse() {
        let angles: Vec<f64> = (0..=180).map(|d| d as f64).collect();
        let curve = gauss_bump(90.0, 15.0, &angles);
        let truth = DMatrix::from_fn(1, angles.len(), |_, c| curve[c]);
        // Perfect inside [83, 97], off elsewhere.
        let pred = DMatrix::from_fn(1, angles.len(), |_, c| {
            if (83..=97).contains(&c) {
                curve[c]
            } else {
                curve[c] + 1.0
            }
        });
        let var = DMatrix::from_element(1, angles.len(), 0.1);
        let lobe = lobe_metrics(&truth, &pred, &var, &angles, 7.0, false).unwrap();
        assert_eq!(lobe.rmse, 0.0);
    }

    #[test]
    fn lobe_metrics_match_hand_built_case() {
        // Two samples, trivially peaked at index 2 of 5 angles, half-width 1:
        // masked indices {1, 2, 3} for both samples.
        let angles = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let truth = mat(&[&[0.0, 1.0, 2.0, 1.0, 0.0], &[0.0, 2.0, 4.0, 2.0, 0.0]]);
        let pred = mat(&[&[0.0, 1.0, 1.0, 1.0, 5.0], &[0.0, 2.0, 4.0, 4.0, 5.0]]);
        let var = DMatrix::from_element(2, 5, 1.0);
        let lobe = lobe_metrics(&truth, &pred, &var, &angles, 1.0, false).unwrap();
        let s1 = ((0.0f64 + 1.0 + 0.0) / 3.0).sqrt();
        let s2 = ((0.0f64 + 0.0 + 4.0) / 3.0).sqrt();
        assert_relative_eq!(lobe.rmse, 0.5 * (s1 + s2), max_relative = 1e-12);
        let term = |e: f64| 0.5 * (2.0 * PI).ln() + e * e / 2.0;
        let m1 = (term(0.0) + term(1.0) + term(0.0)) / 3.0;
        let m2 = (term(0.0) + term(0.0) + term(2.0)) / 3.0;
        assert_relative_eq!(lobe.msll, 0.5 * (m1 + m2), max_relative = 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let angles: Vec<f64> = (0..=90).map(|d| d as f64).collect();
        let c1 = gauss_bump(30.0, 10.0, &angles);
        let c2 = gauss_bump(60.0, 12.0, &angles);
        let truth_a = DMatrix::from_fn(2, angles.len(), |r, c| if r == 0 { c1[c] } else { c2[c] });
        let truth_b = DMatrix::from_fn(2, angles.len(), |r, c| if r == 0 { c2[c] } else { c1[c] });
        let pred_a = truth_a.map(|v| v + 0.1);
        let pred_b = truth_b.map(|v| v + 0.1);
        let var_a = DMatrix::from_element(2, angles.len(), 0.05);
        let rep_a = evaluate(&truth_a, &pred_a, &var_a, &angles, 7.0, false).unwrap();
        let rep_b = evaluate(&truth_b, &pred_b, &var_a, &angles, 7.0, false).unwrap();
        assert_relative_eq!(rep_a.rmse, rep_b.rmse, max_relative = 1e-12);
        assert_relative_eq!(rep_a.msll, rep_b.msll, max_relative = 1e-12);
        assert_relative_eq!(rep_a.lobe_rmse, rep_b.lobe_rmse, max_relative = 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = mat(&[&[1.0, 2.0]]);
        let b = mat(&[&[1.0, 2.0, 3.0]]);
        assert!(rmse(&a, &b).is_err());
    }
}
