//! Mode-wise tensor products for the multi-linear kernel.
//!
//! A design tensor in canonical layout is a row-major 4-way array with mode
//! order `(p, i, j, k)` slowest to fastest. The Kronecker-factored bilinear
//! form `vec(X)ᵀ (K_p ⊗ K_v ⊗ K_h ⊗ K_w) vec(X')` with `K_n = U_nᵀU_n` is
//! evaluated as `⟨Z, Z'⟩` where `Z = X ×_v U_v ×_h U_h ×_w U_w ×_p U_p`,
//! never materializing the Kronecker product.

use nalgebra::DMatrix;

use crate::tensor::DesignTensor;

fn dims_of(x: &DesignTensor) -> [usize; 4] {
    let s = x.shape();
    [s.p, s.v, s.h, s.w]
}

/// Multiplies one mode of a row-major multi-way array by a matrix:
/// `out[.., a, ..] = Σ_b u[a, b]·values[.., b, ..]`.
pub fn mode_product(values: &[f64], dims: &[usize], mode: usize, u: &DMatrix<f64>) -> Vec<f64> {
    let d = dims[mode];
    assert_eq!(u.ncols(), d, "factor columns must match mode dimension");
    let inner: usize = dims[mode + 1..].iter().product();
    let outer: usize = dims[..mode].iter().product();
    let d_out = u.nrows();
    let mut out = vec![0.0; outer * d_out * inner];
    for o in 0..outer {
        for a in 0..d_out {
            for b in 0..d {
                let coeff = u[(a, b)];
                if coeff == 0.0 {
                    continue;
                }
                let src = (o * d + b) * inner;
                let dst = (o * d_out + a) * inner;
                for t in 0..inner {
                    out[dst + t] += coeff * values[src + t];
                }
            }
        }
    }
    out
}

/// Unfolds a row-major multi-way array along one mode: the result has
/// `dims[mode]` rows and one column per combination of the remaining
/// indices (in canonical order with `mode` skipped).
pub fn mode_unfolding(values: &[f64], dims: &[usize], mode: usize) -> DMatrix<f64> {
    let d = dims[mode];
    let inner: usize = dims[mode + 1..].iter().product();
    let outer: usize = dims[..mode].iter().product();
    let mut out = DMatrix::zeros(d, outer * inner);
    for o in 0..outer {
        for a in 0..d {
            for t in 0..inner {
                out[(a, o * inner + t)] = values[(o * d + a) * inner + t];
            }
        }
    }
    out
}

/// Applies all four factors `[U_v, U_h, U_w, U_p]` to a design tensor,
/// returning the transformed values in canonical layout.
pub(crate) fn full_mode_product(x: &DesignTensor, factors: &[DMatrix<f64>]) -> Vec<f64> {
    // factors arrive in [U_v, U_h, U_w, U_p] order; canonical mode order is
    // (p, v, h, w).
    let dims = dims_of(x);
    let by_mode = [&factors[3], &factors[0], &factors[1], &factors[2]];
    let mut values = x.values().to_vec();
    for (mode, u) in by_mode.iter().enumerate() {
        if u.nrows() == 1 && u.ncols() == 1 && u[(0, 0)] == 1.0 {
            continue;
        }
        values = mode_product(&values, &dims, mode, u);
    }
    values
}

/// The partial product `X ×_{m≠mode} U_m`, unfolded along `mode`. Used by
/// the factor gradient: with `Y` this unfolding, `∂k/∂U = U(YY'ᵀ + Y'Yᵀ)`.
pub(crate) fn partial_product_unfolded(
    x: &DesignTensor,
    factors: &[DMatrix<f64>],
    mode: usize,
) -> DMatrix<f64> {
    let dims = dims_of(x);
    let by_mode = [&factors[3], &factors[0], &factors[1], &factors[2]];
    let mut values = x.values().to_vec();
    for (m, u) in by_mode.iter().enumerate() {
        if m == mode {
            continue;
        }
        if u.nrows() == 1 && u.ncols() == 1 && u[(0, 0)] == 1.0 {
            continue;
        }
        values = mode_product(&values, &dims, m, u);
    }
    mode_unfolding(&values, &dims, mode)
}

/// Position of a `[U_v, U_h, U_w, U_p]` factor index in canonical mode order.
pub(crate) fn factor_index_to_mode(factor_idx: usize) -> usize {
    // U_v ↔ mode 1, U_h ↔ 2, U_w ↔ 3, U_p ↔ 0.
    [1, 2, 3, 0][factor_idx]
}
