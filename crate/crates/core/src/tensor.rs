//! Voxelized design tensors and their canonical flattening.
//!
//! A design is a grid of `v × h × w` voxels carrying `p` material properties
//! per voxel. Every module in this crate shares one flattening convention:
//! properties are outermost, then voxel row `i`, column `j`, and depth `k`
//! fastest. [`canonical_index`] and [`voxel_coords`] are the two directions
//! of that bijection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a voxel grid: `v × h × w` voxels with `p` material
/// properties per voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    /// Voxel count along the vertical axis.
    pub v: usize,
    /// Voxel count along the horizontal axis.
    pub h: usize,
    /// Voxel count along the depth axis.
    pub w: usize,
    /// Number of material properties per voxel.
    pub p: usize,
}

impl GridShape {
    pub fn new(v: usize, h: usize, w: usize, p: usize) -> Result<Self> {
        if v == 0 || h == 0 || w == 0 || p == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid dimensions must all be >= 1, got {v}x{h}x{w}x{p}"
            )));
        }
        Ok(Self { v, h, w, p })
    }

    /// Number of voxels `v·h·w`.
    pub fn voxel_count(&self) -> usize {
        self.v * self.h * self.w
    }

    /// Total value count `v·h·w·p`.
    pub fn value_count(&self) -> usize {
        self.voxel_count() * self.p
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.v, self.h, self.w, self.p)
    }
}

/// Flat index of voxel `(i, j, k)`: row-major with `k` fastest.
pub fn canonical_index(i: usize, j: usize, k: usize, shape: &GridShape) -> Result<usize> {
    if i >= shape.v || j >= shape.h || k >= shape.w {
        return Err(Error::IndexOutOfRange(format!(
            "voxel ({i},{j},{k}) outside grid {shape}"
        )));
    }
    Ok((i * shape.h + j) * shape.w + k)
}

/// Inverse of [`canonical_index`].
pub fn voxel_coords(alpha: usize, shape: &GridShape) -> Result<(usize, usize, usize)> {
    if alpha >= shape.voxel_count() {
        return Err(Error::IndexOutOfRange(format!(
            "flat index {alpha} outside grid {shape} ({} voxels)",
            shape.voxel_count()
        )));
    }
    let k = alpha % shape.w;
    let rest = alpha / shape.w;
    let j = rest % shape.h;
    let i = rest / shape.h;
    Ok((i, j, k))
}

/// A voxel grid of material property values in canonical order.
///
/// Values are dimensionless material constants (for the antenna data,
/// dielectric constants in `[1.1, 2.3]`). Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignTensor {
    shape: GridShape,
    values: Vec<f64>,
}

impl DesignTensor {
    /// Builds a tensor from values in canonical order (property outermost,
    /// voxel depth `k` fastest). Rejects non-finite values and length
    /// mismatches.
    pub fn new(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.value_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for grid {shape}, got {}",
                shape.value_count(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite value at flat position {pos}"
            )));
        }
        Ok(Self { shape, values })
    }

    /// Tensor with every value equal to `c`.
    pub fn constant(shape: GridShape, c: f64) -> Result<Self> {
        Self::new(shape, vec![c; shape.value_count()])
    }

    /// Builds a tensor by evaluating `f(prop, i, j, k)` at every cell.
    pub fn from_fn(shape: GridShape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(shape.value_count());
        for prop in 0..shape.p {
            for i in 0..shape.v {
                for j in 0..shape.h {
                    for k in 0..shape.w {
                        values.push(f(prop, i, j, k));
                    }
                }
            }
        }
        Self::new(shape, values)
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    /// All values in canonical order (all properties concatenated).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value of property `prop` at voxel `(i, j, k)`.
    pub fn get(&self, prop: usize, i: usize, j: usize, k: usize) -> Result<f64> {
        if prop >= self.shape.p {
            return Err(Error::IndexOutOfRange(format!(
                "property {prop} outside grid {}",
                self.shape
            )));
        }
        let alpha = canonical_index(i, j, k, &self.shape)?;
        Ok(self.values[prop * self.shape.voxel_count() + alpha])
    }

    /// The flattened values of one property: element `alpha` is the value at
    /// `voxel_coords(alpha)`.
    pub fn vectorize(&self, prop: usize) -> Result<&[f64]> {
        if prop >= self.shape.p {
            return Err(Error::IndexOutOfRange(format!(
                "property {prop} outside grid {}",
                self.shape
            )));
        }
        let n = self.shape.voxel_count();
        Ok(&self.values[prop * n..(prop + 1) * n])
    }
}
