//! Quasi-Newton minimization: BFGS inverse-Hessian updates with a
//! backtracking Armijo line search.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK_FACTOR: f64 = 0.5;
const MAX_BACKTRACKS: usize = 40;

pub(crate) trait Objective {
    fn value(&mut self, psi: &DVector<f64>) -> Result<f64>;
    fn value_grad(&mut self, psi: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
}

#[derive(Debug, Clone)]
pub(crate) struct BfgsOutcome {
    pub psi: DVector<f64>,
    pub value: f64,
    /// Objective value at every accepted point, starting with the initial
    /// one; non-increasing by construction.
    pub history: Vec<f64>,
}

/// Minimizes the objective from `psi0`. Stops when the gradient norm falls
/// below `tol`, the line search stalls, or `max_iters` accepted steps have
/// been taken. A non-finite objective at the starting point is an
/// initialization error; failures at trial points during the line search
/// merely shrink the step.
pub(crate) fn minimize(
    obj: &mut dyn Objective,
    psi0: DVector<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<BfgsOutcome> {
    let dim = psi0.len();
    let (mut f, mut g) = obj.value_grad(&psi0)?;
    if !f.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Initialization(format!(
            "objective not finite at initialization (value {f}, psi {:?})",
            psi0.as_slice()
        )));
    }
    let mut x = psi0;
    let mut h = DMatrix::identity(dim, dim);
    let mut history = vec![f];
    let mut first_update = true;

    for _ in 0..max_iters {
        if g.norm() < tol {
            break;
        }
        let mut d = -(&h * &g);
        let descent = g.dot(&d);
        if !(descent < 0.0) || !d.iter().all(|v| v.is_finite()) {
            // Curvature information went bad; fall back to steepest descent.
            h = DMatrix::identity(dim, dim);
            d = -g.clone();
        }
        let descent = g.dot(&d);

        let mut step = 1.0;
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        for _ in 0..MAX_BACKTRACKS {
            let candidate = &x + step * &d;
            match obj.value(&candidate) {
                Ok(fc) if fc.is_finite() && fc <= f + ARMIJO_C1 * step * descent => {
                    accepted = Some((candidate, fc));
                    break;
                }
                _ => step *= BACKTRACK_FACTOR,
            }
        }
        let Some((x_new, f_new)) = accepted else {
            // Stalled: no step yields sufficient decrease.
            break;
        };
        let (f_new, g_new) = match obj.value_grad(&x_new) {
            Ok(vg) if vg.0.is_finite() => vg,
            _ => (f_new, g.clone()),
        };
        let s = &x_new - &x;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-10 * s.norm() * yv.norm() {
            if first_update {
                h = DMatrix::identity(dim, dim) * (sy / yv.dot(&yv));
                first_update = false;
            }
            let rho = 1.0 / sy;
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            let shy = &s * hy.transpose();
            h = h - (&shy + shy.transpose()) * rho + (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
    }
    Ok(BfgsOutcome {
        psi: x,
        value: f,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Quadratic {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl Objective for Quadratic {
        fn value(&mut self, psi: &DVector<f64>) -> Result<f64> {
            Ok((0.5 * psi.transpose() * &self.a * psi)[(0, 0)] - self.b.dot(psi))
        }

        fn value_grad(&mut self, psi: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
            let v = self.value(psi)?;
            Ok((v, &self.a * psi - &self.b))
        }
    }

    #[test]
    fn minimizes_convex_quadratic() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let mut obj = Quadratic { a: a.clone(), b: b.clone() };
        let out = minimize(&mut obj, DVector::zeros(3), 100, 1e-10).unwrap();
        let solution = a.lu().solve(&b).unwrap();
        for (got, want) in out.psi.iter().zip(solution.iter()) {
            assert_relative_eq!(got, want, epsilon = 1e-7);
        }
    }

    #[test]
    fn history_is_monotone_nonincreasing() {
        struct Rosenbrock;
        impl Objective for Rosenbrock {
            fn value(&mut self, p: &DVector<f64>) -> Result<f64> {
                let (x, y) = (p[0], p[1]);
                Ok((1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2))
            }
            fn value_grad(&mut self, p: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
                let (x, y) = (p[0], p[1]);
                let g = DVector::from_vec(vec![
                    -2.0 * (1.0 - x) - 400.0 * x * (y - x * x),
                    200.0 * (y - x * x),
                ]);
                Ok((self.value(p)?, g))
            }
        }
        let out = minimize(&mut Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), 200, 1e-8).unwrap();
        for w in out.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "history not monotone: {} -> {}", w[0], w[1]);
        }
        assert!(out.value < 1e-6, "did not reach the minimum: {}", out.value);
    }

    #[test]
    fn non_finite_start_is_initialization_error() {
        struct Bad;
        impl Objective for Bad {
            fn value(&mut self, _: &DVector<f64>) -> Result<f64> {
                Ok(f64::NAN)
            }
            fn value_grad(&mut self, _: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
                Ok((f64::NAN, DVector::zeros(1)))
            }
        }
        assert!(matches!(
            minimize(&mut Bad, DVector::zeros(1), 10, 1e-6),
            Err(Error::Initialization(_))
        ));
    }
}
