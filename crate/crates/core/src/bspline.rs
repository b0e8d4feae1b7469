//! B-spline reduction of functional outputs.
//!
//! A per-angle curve of length `l` is compressed to `l'` coefficients by
//! least squares against a clamped uniform B-spline basis, and per-angle
//! predictive means and variances are reconstructed from independently
//! modeled coefficients: `ŷ = Σ_j B_j·â_j`, `σ̂²_y = Σ_j B_j²·σ̂²_j`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot floor below which the least-squares system is treated as
/// rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// A B-spline basis of a given order evaluated on a fixed angle grid.
#[derive(Debug, Clone)]
pub struct BsplineBasis {
    /// Spline order `k` (polynomial degree `k − 1`).
    pub order: usize,
    /// Number of basis functions `l'`.
    pub num_basis: usize,
    /// Clamped non-decreasing knot vector of length `l' + k`.
    pub knots: Vec<f64>,
    /// Evaluation grid (angle degrees).
    pub grid: Vec<f64>,
    /// `l × l'` matrix with `B[i][j] = B_{jk}(t_i)`.
    pub matrix: DMatrix<f64>,
}

/// Per-angle predictive mean and variance reconstructed from coefficient
/// models. Gains are on a linear scale; variances in gain² units.
#[derive(Debug, Clone)]
pub struct FunctionalPrediction {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

/// Clamped uniform knot vector on `[lo, hi]`: the ends repeated `order`
/// times with `num_basis − order` uniformly spaced interior knots.
fn clamped_uniform_knots(lo: f64, hi: f64, order: usize, num_basis: usize) -> Vec<f64> {
    let interior = num_basis - order;
    let spans = (interior + 1) as f64;
    let mut knots = Vec::with_capacity(num_basis + order);
    knots.extend(std::iter::repeat(lo).take(order));
    for s in 1..=interior {
        knots.push(lo + (hi - lo) * s as f64 / spans);
    }
    knots.extend(std::iter::repeat(hi).take(order));
    knots
}

/// All basis values at one point by the Cox–de Boor recurrence. Returns the
/// dense row of length `num_basis`.
fn basis_row(t: f64, order: usize, num_basis: usize, knots: &[f64]) -> Vec<f64> {
    let mut row = vec![0.0; num_basis + order - 1];
    // Degree-0 seed: indicators of the knot spans, with the last span closed
    // on the right so the domain endpoint belongs to the final basis.
    let last = knots.len() - 1;
    for j in 0..row.len() {
        let left = knots[j];
        let right = knots[j + 1];
        let in_span = if right == knots[last] {
            t >= left && t <= right
        } else {
            t >= left && t < right
        };
        row[j] = if in_span && left < right { 1.0 } else { 0.0 };
    }
    for deg in 1..order {
        for j in 0..num_basis + order - 1 - deg {
            let mut value = 0.0;
            let denom_l = knots[j + deg] - knots[j];
            if denom_l > 0.0 {
                value += (t - knots[j]) / denom_l * row[j];
            }
            let denom_r = knots[j + deg + 1] - knots[j + 1];
            if denom_r > 0.0 {
                value += (knots[j + deg + 1] - t) / denom_r * row[j + 1];
            }
            row[j] = value;
        }
    }
    row.truncate(num_basis);
    row
}

/// Builds the clamped uniform basis of the given order on `[lo, hi]`,
/// evaluated at every grid point.
pub fn build_basis(
    domain: (f64, f64),
    order: usize,
    num_basis: usize,
    grid: &[f64],
) -> Result<BsplineBasis> {
    let (lo, hi) = domain;
    if !(hi > lo) {
        return Err(Error::InvalidParameter(format!(
            "domain upper bound {hi} must exceed lower bound {lo}"
        )));
    }
    if order == 0 {
        return Err(Error::InvalidParameter("spline order must be >= 1".into()));
    }
    if num_basis < order {
        return Err(Error::InvalidParameter(format!(
            "need at least order ({order}) basis functions, got {num_basis}"
        )));
    }
    if grid.is_empty() {
        return Err(Error::InvalidParameter("evaluation grid is empty".into()));
    }
    for &t in grid {
        if !(t >= lo && t <= hi) {
            return Err(Error::InvalidParameter(format!(
                "grid point {t} outside domain [{lo}, {hi}]"
            )));
        }
    }
    let knots = clamped_uniform_knots(lo, hi, order, num_basis);
    let mut matrix = DMatrix::zeros(grid.len(), num_basis);
    for (i, &t) in grid.iter().enumerate() {
        let row = basis_row(t, order, num_basis, &knots);
        for (j, &b) in row.iter().enumerate() {
            matrix[(i, j)] = b;
        }
    }
    Ok(BsplineBasis {
        order,
        num_basis,
        knots,
        grid: grid.to_vec(),
        matrix,
    })
}

/// Least-squares coefficients for one curve, plus the residual L2 norm.
pub fn fit_coefficients(curve: &[f64], basis: &BsplineBasis) -> Result<(DVector<f64>, f64)> {
    if curve.len() != basis.grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "curve has {} points, basis grid has {}",
            curve.len(),
            basis.grid.len()
        )));
    }
    if curve.len() < basis.num_basis {
        return Err(Error::Conditioning(format!(
            "{} grid points cannot determine {} coefficients",
            curve.len(),
            basis.num_basis
        )));
    }
    let y = DVector::from_column_slice(curve);
    let qr = basis.matrix.clone().qr();
    let r = qr.r();
    let max_pivot = (0..basis.num_basis)
        .map(|j| r[(j, j)].abs())
        .fold(0.0f64, f64::max);
    let min_pivot = (0..basis.num_basis)
        .map(|j| r[(j, j)].abs())
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= RANK_TOLERANCE * max_pivot {
        return Err(Error::Conditioning(format!(
            "basis matrix is rank deficient on this grid (pivot ratio {:.3e})",
            min_pivot / max_pivot
        )));
    }
    let qtb = qr.q().transpose() * &y;
    let coeffs = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::Conditioning("triangular solve failed".into()))?;
    let residual = (&basis.matrix * &coeffs - &y).norm();
    Ok((coeffs, residual))
}

/// Reconstructs per-angle mean and variance from independent coefficient
/// predictions: `mean = B·â`, `variance = (B⊙B)·σ̂²`.
pub fn reconstruct(
    coef_means: &DVector<f64>,
    coef_vars: &DVector<f64>,
    basis: &BsplineBasis,
) -> Result<FunctionalPrediction> {
    if coef_means.len() != basis.num_basis || coef_vars.len() != basis.num_basis {
        return Err(Error::DimensionMismatch(format!(
            "coefficient vectors have lengths {}/{}, basis has {}",
            coef_means.len(),
            coef_vars.len(),
            basis.num_basis
        )));
    }
    if coef_vars.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter(
            "coefficient variances must be non-negative".into(),
        ));
    }
    let mean = &basis.matrix * coef_means;
    let b_sq = basis.matrix.map(|x| x * x);
    let variance = b_sq * coef_vars;
    Ok(FunctionalPrediction { mean, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn degree_grid(lo: usize, hi_inclusive: usize) -> Vec<f64> {
        (lo..=hi_inclusive).map(|d| d as f64).collect()
    }

    #[test]
    fn order_one_basis_is_span_indicators() {
        let grid: Vec<f64> = vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5];
        let basis = build_basis((0.0, 4.0), 1, 4, &grid).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            for j in 0..4 {
                let expected = if t >= j as f64 && t < (j + 1) as f64 { 1.0 } else { 0.0 };
                assert_eq!(basis.matrix[(i, j)], expected, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn partition_of_unity_on_paper_bases() {
        // Order 4, 21 functions on [0, 180] and order 4, 41 on [0, 360).
        let b1 = build_basis((0.0, 180.0), 4, 21, &degree_grid(0, 180)).unwrap();
        assert_eq!(b1.matrix.nrows(), 181);
        for i in 0..b1.matrix.nrows() {
            let s: f64 = b1.matrix.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "row {i} sums to {s}");
        }
        let grid360 = degree_grid(0, 359);
        let b2 = build_basis((0.0, 360.0), 4, 41, &grid360).unwrap();
        assert_eq!(b2.matrix.nrows(), 360);
        for i in 0..b2.matrix.nrows() {
            let s: f64 = b2.matrix.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn local_support_spans_at_most_order_knot_spans() {
        let basis = build_basis((0.0, 10.0), 3, 8, &degree_grid(0, 10)).unwrap();
        for j in 0..basis.num_basis {
            // Support of B_j is [knot_j, knot_{j+order}].
            let lo = basis.knots[j];
            let hi = basis.knots[j + basis.order];
            for (i, &t) in basis.grid.iter().enumerate() {
                if basis.matrix[(i, j)] != 0.0 {
                    assert!(
                        t >= lo && t <= hi,
                        "B_{j} nonzero at {t} outside [{lo}, {hi}]"
                    );
                }
            }
        }
    }

    #[test]
    fn exact_curve_recovered() {
        let grid = degree_grid(0, 180);
        let basis = build_basis((0.0, 180.0), 4, 21, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a0 = DVector::from_fn(21, |_, _| rng.gen_range(-2.0..2.0));
        let curve = &basis.matrix * &a0;
        let (a, residual) = fit_coefficients(curve.as_slice(), &basis).unwrap();
        assert!(residual < 1e-10);
        for (got, want) in a.iter().zip(a0.iter()) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_curve_is_reproduced_exactly() {
        let grid = degree_grid(0, 90);
        let basis = build_basis((0.0, 90.0), 4, 12, &grid).unwrap();
        let curve = vec![3.25; grid.len()];
        let (a, _) = fit_coefficients(&curve, &basis).unwrap();
        let recon = &basis.matrix * &a;
        for &v in recon.iter() {
            assert_relative_eq!(v, 3.25, max_relative = 1e-10);
        }
    }

    #[test]
    fn smooth_curve_fits_within_five_percent() {
        let grid = degree_grid(0, 180);
        let basis = build_basis((0.0, 180.0), 4, 21, &grid).unwrap();
        let curve: Vec<f64> = grid
            .iter()
            .map(|&t| {
                let x = t / 180.0 * std::f64::consts::PI;
                (x).sin() + 0.5 * (2.3 * x).sin() + 0.25 * (3.7 * x + 0.4).sin()
            })
            .collect();
        let (_, residual) = fit_coefficients(&curve, &basis).unwrap();
        let norm: f64 = curve.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            residual / norm < 0.05,
            "relative residual {}",
            residual / norm
        );
    }

    #[test]
    fn reconstruct_round_trips_exact_fit() {
        let grid = degree_grid(0, 60);
        let basis = build_basis((0.0, 60.0), 4, 9, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = DVector::from_fn(9, |_, _| rng.gen_range(-1.0..1.0));
        let curve = &basis.matrix * &a0;
        let (a, _) = fit_coefficients(curve.as_slice(), &basis).unwrap();
        let pred = reconstruct(&a, &DVector::zeros(9), &basis).unwrap();
        for (got, want) in pred.mean.iter().zip(curve.iter()) {
            assert!((got - want).abs() < 1e-10);
        }
        assert!(pred.variance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_coefficient_variance_expands_through_squared_basis() {
        let grid = degree_grid(0, 30);
        let basis = build_basis((0.0, 30.0), 3, 6, &grid).unwrap();
        let mut vars = DVector::zeros(6);
        let s2 = 0.49;
        vars[2] = s2;
        let pred = reconstruct(&DVector::zeros(6), &vars, &basis).unwrap();
        for (i, &v) in pred.variance.iter().enumerate() {
            let b = basis.matrix[(i, 2)];
            assert_relative_eq!(v, b * b * s2, max_relative = 1e-13);
        }
    }

    #[test]
    fn negative_input_variance_rejected() {
        let grid = degree_grid(0, 10);
        let basis = build_basis((0.0, 10.0), 2, 4, &grid).unwrap();
        let mut vars = DVector::zeros(4);
        vars[1] = -1e-9;
        assert!(reconstruct(&DVector::zeros(4), &vars, &basis).is_err());
    }

    #[test]
    fn too_few_basis_functions_rejected() {
        assert!(build_basis((0.0, 10.0), 4, 3, &degree_grid(0, 10)).is_err());
    }

    #[test]
    fn rank_deficiency_reported() {
        // Two grid points cannot support 5 cubic basis functions.
        let grid = vec![0.0, 10.0];
        let basis = build_basis((0.0, 10.0), 4, 5, &grid).unwrap();
        assert!(matches!(
            fit_coefficients(&[1.0, 2.0], &basis),
            Err(Error::Conditioning(_))
        ));
    }
}
