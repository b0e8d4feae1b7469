//! Sliding-patch extraction for the convolutional kernel.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::{canonical_index, DesignTensor, GridShape};

pub(crate) fn validate_patch(shape: &GridShape, patch: (usize, usize, usize)) -> Result<()> {
    let (pv, ph, pw) = patch;
    if pv == 0 || ph == 0 || pw == 0 {
        return Err(Error::InvalidParameter(format!(
            "patch dimensions must be >= 1, got {pv}x{ph}x{pw}"
        )));
    }
    if pv > shape.v || ph > shape.h || pw > shape.w {
        return Err(Error::DimensionMismatch(format!(
            "patch {pv}x{ph}x{pw} does not fit in grid {shape}"
        )));
    }
    Ok(())
}

/// Number of sliding patches: `(V−v'+1)·(H−h'+1)·(W−w'+1)`.
pub fn patch_count(shape: &GridShape, patch: (usize, usize, usize)) -> Result<usize> {
    validate_patch(shape, patch)?;
    let (pv, ph, pw) = patch;
    Ok((shape.v - pv + 1) * (shape.h - ph + 1) * (shape.w - pw + 1))
}

/// Extracts all sliding patches of one tensor, per property: element `p` of
/// the result is an `M × (v'·h'·w')` matrix whose row `m` is the patch at
/// the `m`-th origin, origins and patch cells both enumerated in canonical
/// `(i, j, k)` order.
pub fn extract_patches(
    x: &DesignTensor,
    patch: (usize, usize, usize),
) -> Result<Vec<DMatrix<f64>>> {
    let shape = *x.shape();
    let m = patch_count(&shape, patch)?;
    let (pv, ph, pw) = patch;
    let d = pv * ph * pw;
    let mut out = Vec::with_capacity(shape.p);
    for prop in 0..shape.p {
        let vec = x.vectorize(prop)?;
        let mut mat = DMatrix::zeros(m, d);
        let mut row = 0;
        for oi in 0..=(shape.v - pv) {
            for oj in 0..=(shape.h - ph) {
                for ok in 0..=(shape.w - pw) {
                    let mut col = 0;
                    for di in 0..pv {
                        for dj in 0..ph {
                            for dk in 0..pw {
                                let alpha =
                                    canonical_index(oi + di, oj + dj, ok + dk, &shape)?;
                                mat[(row, col)] = vec[alpha];
                                col += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        out.push(mat);
    }
    Ok(out)
}
