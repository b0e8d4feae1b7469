//! Voxel-proximity metric matrices and the Euclidean-reducing transform.
//!
//! The structured squared distance between two designs is
//! `Σ_p (vec(Xᵖ) − vec(X′ᵖ))ᵀ Gᵖ (vec(Xᵖ) − vec(X′ᵖ))`, where each `Gᵖ` is a
//! positive-definite matrix whose `(α, β)` entry is a Gaussian of the spatial
//! distance between voxels `α` and `β`:
//!
//! `g_{αβ} = 1/(2πγ²) · exp(−|J_α − J_β|² / (2γ²))`.
//!
//! Because the Gaussian separates over axes, `Gᵖ` is exactly the Kronecker
//! product of three small one-dimensional Gaussian matrices. [`factorize`]
//! exploits that: it eigendecomposes each axis factor and assembles
//! `A = Λ^{1/2} Qᵀ` with `Q = Q_i ⊗ Q_j ⊗ Q_k`, which keeps the spectrum
//! exactly positive even at lengthscales where a dense eigensolver of the
//! full matrix would drown the smallest eigenvalues in rounding noise.
//! Transformed features `Z = A·vec(X)` turn the structured distance into a
//! plain squared Euclidean distance.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{voxel_coords, DesignTensor, GridShape};

/// Relative eigenvalue floor applied to each one-dimensional axis factor.
const AXIS_EIGENVALUE_FLOOR: f64 = 1e-12;

/// Lengthscale(s) of the voxel-proximity Gaussian for one material property.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AxisScales {
    /// One shared lengthscale for all three spatial axes.
    Isotropic(f64),
    /// Separate lengthscales per axis, for grids with directional structure.
    PerAxis { gi: f64, gj: f64, gk: f64 },
}

impl AxisScales {
    fn scales(&self) -> [f64; 3] {
        match *self {
            AxisScales::Isotropic(g) => [g, g, g],
            AxisScales::PerAxis { gi, gj, gk } => [gi, gj, gk],
        }
    }

    /// Geometric mean of the axis lengthscales; equals the lengthscale itself
    /// in the isotropic case.
    fn geometric_mean(&self) -> f64 {
        let [a, b, c] = self.scales();
        (a * b * c).cbrt()
    }

    fn validate(&self) -> Result<()> {
        for g in self.scales() {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "metric lengthscale must be positive and finite, got {g}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-property lengthscale parameters of the metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricParams {
    /// One entry per material property.
    pub scales: Vec<AxisScales>,
}

impl MetricParams {
    /// Isotropic lengthscale `gamma` for every one of `p` properties.
    pub fn isotropic(gamma: f64, p: usize) -> Self {
        Self {
            scales: vec![AxisScales::Isotropic(gamma); p],
        }
    }

    /// One isotropic lengthscale per property.
    pub fn per_property(gammas: &[f64]) -> Self {
        Self {
            scales: gammas.iter().map(|&g| AxisScales::Isotropic(g)).collect(),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.scales.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "metric params cover {} properties, grid has {p}",
                self.scales.len()
            )));
        }
        for s in &self.scales {
            s.validate()?;
        }
        Ok(())
    }
}

/// The dense positive-definite voxel-proximity matrix, one block per
/// material property. Entries follow the Gaussian generator exactly.
#[derive(Debug, Clone)]
pub struct MetricMatrix {
    shape: GridShape,
    params: MetricParams,
    per_property: Vec<DMatrix<f64>>,
}

impl MetricMatrix {
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn params(&self) -> &MetricParams {
        &self.params
    }

    /// The `G` matrix of one property, size `(v·h·w) × (v·h·w)`.
    pub fn property(&self, prop: usize) -> &DMatrix<f64> {
        &self.per_property[prop]
    }
}

/// The factor `A` with `AᵀA = G` (one block per property) plus the exact
/// eigenvalues of each block, carried as per-axis products.
#[derive(Debug, Clone)]
pub struct MetricTransform {
    shape: GridShape,
    per_property: Vec<DMatrix<f64>>,
    eigenvalues: Vec<DVector<f64>>,
}

impl MetricTransform {
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    /// The factor `A` of one property.
    pub fn factor(&self, prop: usize) -> &DMatrix<f64> {
        &self.per_property[prop]
    }

    /// Eigenvalues of `G` for one property (products of the axis spectra;
    /// positive whenever construction succeeded).
    pub fn eigenvalues(&self, prop: usize) -> &DVector<f64> {
        &self.eigenvalues[prop]
    }

    /// An identity transform, useful for reducing structured kernels to
    /// their Euclidean baselines in tests.
    pub fn identity(shape: GridShape) -> Self {
        let n = shape.voxel_count();
        Self {
            shape,
            per_property: vec![DMatrix::identity(n, n); shape.p],
            eigenvalues: vec![DVector::from_element(n, 1.0); shape.p],
        }
    }

    /// `max_{α,β} |AᵀA − G|` over all property blocks.
    pub fn reconstruction_error(&self, g: &MetricMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for prop in 0..self.shape.p {
            let a = &self.per_property[prop];
            let recon = a.transpose() * a;
            let diff = &recon - g.property(prop);
            worst = worst.max(diff.amax());
        }
        worst
    }
}

/// Squared Euclidean distance between the coordinates of voxels `alpha` and
/// `beta`: `(i−i′)² + (j−j′)² + (k−k′)²`.
pub fn squared_voxel_distance(alpha: usize, beta: usize, shape: &GridShape) -> Result<f64> {
    let (i, j, k) = voxel_coords(alpha, shape)?;
    let (i2, j2, k2) = voxel_coords(beta, shape)?;
    let di = i as f64 - i2 as f64;
    let dj = j as f64 - j2 as f64;
    let dk = k as f64 - k2 as f64;
    Ok(di * di + dj * dj + dk * dk)
}

/// One-dimensional Gaussian proximity matrix `exp(−(a−b)²/(2γ²))` on
/// `0..n`.
fn axis_matrix(n: usize, gamma: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |a, b| {
        let d = a as f64 - b as f64;
        (-d * d / (2.0 * gamma * gamma)).exp()
    })
}

/// Builds the dense metric matrix for every property. Entry `(α, β)` is
/// `1/(2πγ̃²) · exp(−Σ_axis Δ²_axis/(2γ²_axis))`, with `γ̃` the geometric
/// mean of the axis lengthscales.
pub fn build_metric(shape: &GridShape, params: &MetricParams) -> Result<MetricMatrix> {
    params.validate(shape.p)?;
    let n = shape.voxel_count();
    let mut per_property = Vec::with_capacity(shape.p);
    for scales in &params.scales {
        let [gi, gj, gk] = scales.scales();
        let gm = scales.geometric_mean();
        let prefactor = 1.0 / (2.0 * std::f64::consts::PI * gm * gm);
        let mut g = DMatrix::zeros(n, n);
        for alpha in 0..n {
            let (ai, aj, ak) = voxel_coords(alpha, shape)?;
            for beta in alpha..n {
                let (bi, bj, bk) = voxel_coords(beta, shape)?;
                let di = ai as f64 - bi as f64;
                let dj = aj as f64 - bj as f64;
                let dk = ak as f64 - bk as f64;
                let expo = di * di / (2.0 * gi * gi)
                    + dj * dj / (2.0 * gj * gj)
                    + dk * dk / (2.0 * gk * gk);
                let val = prefactor * (-expo).exp();
                g[(alpha, beta)] = val;
                g[(beta, alpha)] = val;
            }
        }
        per_property.push(g);
    }
    Ok(MetricMatrix {
        shape: *shape,
        params: params.clone(),
        per_property,
    })
}

/// Eigendecomposition of one axis factor, with the relative conditioning
/// floor applied to its spectrum.
fn axis_eigen(n: usize, gamma: f64, axis: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if n == 1 {
        return Ok((DVector::from_element(1, 1.0), DMatrix::identity(1, 1)));
    }
    let eig = SymmetricEigen::new(axis_matrix(n, gamma));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= AXIS_EIGENVALUE_FLOOR * max {
        return Err(Error::Conditioning(format!(
            "metric axis {axis} (n={n}, gamma={gamma}) has eigenvalue ratio {:.3e} below floor {AXIS_EIGENVALUE_FLOOR:.0e}; gamma too large for the grid",
            min / max
        )));
    }
    Ok((eig.eigenvalues, eig.eigenvectors))
}

/// Factorizes `G = AᵀA` per property via the symmetric eigendecomposition
/// `G = QΛQᵀ`, `A = Λ^{1/2}Qᵀ`, computed from the per-axis Gaussian factors
/// so the spectrum stays exactly positive.
pub fn factorize(g: &MetricMatrix) -> Result<MetricTransform> {
    let shape = g.shape;
    let mut per_property = Vec::with_capacity(shape.p);
    let mut eigenvalues = Vec::with_capacity(shape.p);
    for scales in &g.params.scales {
        let [gi, gj, gk] = scales.scales();
        let gm = scales.geometric_mean();
        let prefactor = 1.0 / (2.0 * std::f64::consts::PI * gm * gm);
        let (li, qi) = axis_eigen(shape.v, gi, "i")?;
        let (lj, qj) = axis_eigen(shape.h, gj, "j")?;
        let (lk, qk) = axis_eigen(shape.w, gk, "k")?;
        let q = qi.kronecker(&qj).kronecker(&qk);
        let n = shape.voxel_count();
        let mut lambda = DVector::zeros(n);
        let mut idx = 0;
        for a in 0..shape.v {
            for b in 0..shape.h {
                for c in 0..shape.w {
                    lambda[idx] = prefactor * li[a] * lj[b] * lk[c];
                    idx += 1;
                }
            }
        }
        // A = Λ^{1/2} Qᵀ: row κ of Qᵀ scaled by sqrt(λ_κ).
        let mut a = q.transpose();
        for (kappa, mut row) in a.row_iter_mut().enumerate() {
            row *= lambda[kappa].sqrt();
        }
        per_property.push(a);
        eigenvalues.push(lambda);
    }
    Ok(MetricTransform {
        shape,
        per_property,
        eigenvalues,
    })
}

/// Entry-wise derivative `dG/dγ` for an isotropic property block:
/// `dg/dγ = g · (d²/γ³ − 2/γ)` with `d²` the squared voxel distance.
pub fn metric_gamma_derivative(
    g: &MetricMatrix,
    prop: usize,
) -> Result<DMatrix<f64>> {
    let gamma = match g.params.scales[prop] {
        AxisScales::Isotropic(gm) => gm,
        AxisScales::PerAxis { .. } => {
            return Err(Error::InvalidParameter(
                "analytic dG/dgamma is defined for isotropic lengthscales only".into(),
            ))
        }
    };
    let n = g.shape.voxel_count();
    let block = g.property(prop);
    let mut d = DMatrix::zeros(n, n);
    for alpha in 0..n {
        for beta in 0..n {
            let d2 = squared_voxel_distance(alpha, beta, &g.shape)?;
            d[(alpha, beta)] = block[(alpha, beta)] * (d2 / gamma.powi(3) - 2.0 / gamma);
        }
    }
    Ok(d)
}

/// Applies the transform: concatenation over properties of `Aᵖ·vec(Xᵖ)`.
pub fn transform(x: &DesignTensor, t: &MetricTransform) -> Result<DVector<f64>> {
    if x.shape() != &t.shape {
        return Err(Error::DimensionMismatch(format!(
            "tensor shape {} does not match transform shape {}",
            x.shape(),
            t.shape
        )));
    }
    let n = t.shape.voxel_count();
    let mut out = DVector::zeros(t.shape.value_count());
    for prop in 0..t.shape.p {
        let vec_p = DVector::from_column_slice(x.vectorize(prop)?);
        let z = t.factor(prop) * vec_p;
        out.rows_mut(prop * n, n).copy_from(&z);
    }
    Ok(out)
}

/// The structured squared distance `Σ_p ΔᵀGᵖΔ` evaluated through the dense
/// quadratic form.
pub fn imed_distance(x: &DesignTensor, x2: &DesignTensor, g: &MetricMatrix) -> Result<f64> {
    if x.shape() != x2.shape() {
        return Err(Error::DimensionMismatch(format!(
            "tensor shapes differ: {} vs {}",
            x.shape(),
            x2.shape()
        )));
    }
    if x.shape() != &g.shape {
        return Err(Error::DimensionMismatch(format!(
            "tensor shape {} does not match metric shape {}",
            x.shape(),
            g.shape
        )));
    }
    let mut total = 0.0;
    for prop in 0..g.shape.p {
        let a = x.vectorize(prop)?;
        let b = x2.vectorize(prop)?;
        let delta = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x - y));
        total += (delta.transpose() * g.property(prop) * &delta)[(0, 0)];
    }
    Ok(total)
}

/// Plain squared Euclidean distance of the flattened tensors (all
/// properties), i.e. the structured distance with unit-diagonal `G`.
pub fn euclidean_distance_sq(x: &DesignTensor, x2: &DesignTensor) -> Result<f64> {
    if x.shape() != x2.shape() {
        return Err(Error::DimensionMismatch(format!(
            "tensor shapes differ: {} vs {}",
            x.shape(),
            x2.shape()
        )));
    }
    Ok(x.values()
        .iter()
        .zip(x2.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    shape: GridShape,
    // Lengthscales keyed by bit pattern; per property, 1 or 3 entries.
    scale_bits: Vec<u64>,
}

impl CacheKey {
    fn new(shape: &GridShape, params: &MetricParams) -> Self {
        let mut scale_bits = Vec::with_capacity(params.scales.len() * 3);
        for s in &params.scales {
            match *s {
                AxisScales::Isotropic(g) => scale_bits.push(g.to_bits()),
                AxisScales::PerAxis { gi, gj, gk } => {
                    scale_bits.push(gi.to_bits());
                    scale_bits.push(gj.to_bits());
                    scale_bits.push(gk.to_bits());
                }
            }
        }
        Self {
            shape: *shape,
            scale_bits,
        }
    }
}

/// Insert-or-get cache of factorized transforms keyed on `(shape, γ)`.
/// Safe for concurrent use; the factorization runs outside the lock, so a
/// racing duplicate build is possible but harmless.
pub struct MetricCache {
    entries: Mutex<HashMap<CacheKey, Arc<MetricTransform>>>,
    capacity: usize,
}

impl MetricCache {
    pub fn new() -> Self {
        Self::with_capacity(128)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            capacity,
        }
    }

    /// Returns the cached transform for `(shape, params)`, building and
    /// inserting it on a miss.
    pub fn get_or_build(
        &self,
        shape: &GridShape,
        params: &MetricParams,
    ) -> Result<Arc<MetricTransform>> {
        let key = CacheKey::new(shape, params);
        if let Some(hit) = self.entries.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let transform = Arc::new(factorize(&build_metric(shape, params)?)?);
        let mut map = self.entries.lock().unwrap();
        if map.len() >= self.capacity {
            map.clear();
        }
        Ok(map.entry(key).or_insert(transform).clone())
    }
}

impl Default for MetricCache {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn shape(v: usize, h: usize, w: usize, p: usize) -> GridShape {
        GridShape::new(v, h, w, p).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, s: GridShape) -> DesignTensor {
        DesignTensor::from_fn(s, |_, _, _, _| rng.gen_range(1.1..2.3)).unwrap()
    }

    #[test]
    fn voxel_distance_basics() {
        let s = shape(2, 2, 2, 1);
        assert_eq!(squared_voxel_distance(3, 3, &s).unwrap(), 0.0);
        // (0,0,0) vs (0,0,1): adjacent along depth.
        assert_eq!(squared_voxel_distance(0, 1, &s).unwrap(), 1.0);
        // (0,0,0) vs (1,1,1).
        assert_eq!(squared_voxel_distance(0, 7, &s).unwrap(), 3.0);
    }

    #[test]
    fn metric_entries_match_generator() {
        let s = shape(3, 3, 1, 1);
        let g = build_metric(&s, &MetricParams::isotropic(1.0, 1)).unwrap();
        let block = g.property(0);
        assert_relative_eq!(block[(0, 0)], 1.0 / (2.0 * PI), max_relative = 1e-15);
        // adjacent voxels, d² = 1
        assert_relative_eq!(
            block[(0, 1)],
            (1.0 / (2.0 * PI)) * (-0.5f64).exp(),
            max_relative = 1e-15
        );
        assert_relative_eq!(block[(0, 0)], 0.159155, max_relative = 1e-5);
        assert_relative_eq!(block[(0, 1)], 0.096532, max_relative = 1e-5);
    }

    #[test]
    fn tiny_gamma_is_effectively_diagonal() {
        let s = shape(3, 2, 1, 1);
        let g = build_metric(&s, &MetricParams::isotropic(1e-3, 1)).unwrap();
        let block = g.property(0);
        let ratio = block[(0, 1)] / block[(0, 0)];
        assert!(ratio < 1e-100, "off-diagonal ratio {ratio} not negligible");
    }

    #[test]
    fn non_positive_gamma_rejected() {
        let s = shape(2, 2, 1, 1);
        assert!(build_metric(&s, &MetricParams::isotropic(0.0, 1)).is_err());
        assert!(build_metric(&s, &MetricParams::isotropic(-1.0, 1)).is_err());
        assert!(build_metric(&s, &MetricParams::isotropic(f64::NAN, 1)).is_err());
    }

    #[test]
    fn metric_symmetry_and_positive_spectrum() {
        for &gamma in &[0.1, 0.5, 1.0, 2.0, 5.0, 10.0] {
            for s in [shape(6, 3, 1, 1), shape(6, 6, 3, 1), shape(4, 3, 2, 2)] {
                let g = build_metric(&s, &MetricParams::isotropic(gamma, s.p)).unwrap();
                for prop in 0..s.p {
                    let block = g.property(prop);
                    for a in 0..block.nrows() {
                        for b in 0..block.ncols() {
                            assert_eq!(block[(a, b)], block[(b, a)]);
                        }
                    }
                }
                let t = factorize(&g).unwrap();
                for prop in 0..s.p {
                    assert!(t.eigenvalues(prop).min() > 0.0, "gamma={gamma} shape={s}");
                }
            }
        }
    }

    #[test]
    fn factorization_reconstructs_metric() {
        let s = shape(6, 3, 1, 1);
        let g = build_metric(&s, &MetricParams::isotropic(1.0, 1)).unwrap();
        let t = factorize(&g).unwrap();
        let err = t.reconstruction_error(&g);
        assert!(err < 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn factorization_reconstructs_at_large_gamma() {
        let s = shape(6, 6, 3, 1);
        for &gamma in &[5.0, 10.0] {
            let g = build_metric(&s, &MetricParams::isotropic(gamma, 1)).unwrap();
            let t = factorize(&g).unwrap();
            let tol = 1e-8 * g.property(0).amax();
            let err = t.reconstruction_error(&g);
            assert!(err < tol, "gamma={gamma}: {err} >= {tol}");
        }
    }

    #[test]
    fn oversized_gamma_trips_conditioning_floor() {
        let s = shape(6, 3, 1, 1);
        let g = build_metric(&s, &MetricParams::isotropic(1e4, 1)).unwrap();
        assert!(matches!(factorize(&g), Err(Error::Conditioning(_))));
    }

    #[test]
    fn identity_transform_is_vectorization() {
        let s = shape(2, 3, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, s);
        let t = MetricTransform::identity(s);
        let z = transform(&x, &t).unwrap();
        for (a, b) in z.iter().zip(x.values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_tensor_transforms_to_zero() {
        let s = shape(3, 2, 2, 1);
        let g = build_metric(&s, &MetricParams::isotropic(0.8, 1)).unwrap();
        let t = factorize(&g).unwrap();
        let x = DesignTensor::constant(s, 0.0).unwrap();
        let z = transform(&x, &t).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn imed_distance_of_identical_inputs_is_zero() {
        let s = shape(3, 3, 2, 1);
        let g = build_metric(&s, &MetricParams::isotropic(1.0, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, s);
        assert_eq!(imed_distance(&x, &x, &g).unwrap(), 0.0);
    }

    #[test]
    fn transform_distance_matches_quadratic_form() {
        let s = shape(6, 3, 1, 1);
        let g = build_metric(&s, &MetricParams::isotropic(1.0, 1)).unwrap();
        let t = factorize(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_tensor(&mut rng, s);
            let y = random_tensor(&mut rng, s);
            let d_quad = imed_distance(&x, &y, &g).unwrap();
            let dz = transform(&x, &t).unwrap() - transform(&y, &t).unwrap();
            let d_trans = dz.norm_squared();
            assert!(
                (d_quad - d_trans).abs() <= 1e-8 * (1.0 + d_quad),
                "quadratic {d_quad} vs transformed {d_trans}"
            );
        }
    }

    #[test]
    fn brute_force_quadratic_form_agrees() {
        // Hand-rolled dᵀGd accumulation, independent of nalgebra ops.
        let s = shape(6, 3, 1, 1);
        let g = build_metric(&s, &MetricParams::isotropic(1.0, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, s);
        let y = random_tensor(&mut rng, s);
        let dx: Vec<f64> = x
            .vectorize(0)
            .unwrap()
            .iter()
            .zip(y.vectorize(0).unwrap())
            .map(|(a, b)| a - b)
            .collect();
        let mut brute = 0.0;
        let block = g.property(0);
        for a in 0..dx.len() {
            for b in 0..dx.len() {
                brute += dx[a] * block[(a, b)] * dx[b];
            }
        }
        let d = imed_distance(&x, &y, &g).unwrap();
        assert!((brute - d).abs() < 1e-10, "{brute} vs {d}");
    }

    #[test]
    fn euclidean_limit_correlation() {
        // At γ = 0.01 the metric is essentially a scaled identity, so the
        // structured distance correlates with the Euclidean one to ~1.
        let s = shape(6, 3, 1, 1);
        let g = build_metric(&s, &MetricParams::isotropic(0.01, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ds_imed = Vec::new();
        let mut ds_euc = Vec::new();
        for _ in 0..100 {
            let x = random_tensor(&mut rng, s);
            let y = random_tensor(&mut rng, s);
            ds_imed.push(imed_distance(&x, &y, &g).unwrap());
            ds_euc.push(euclidean_distance_sq(&x, &y).unwrap());
        }
        let corr = pearson(&ds_imed, &ds_euc);
        assert!(corr > 1.0 - 1e-9, "correlation {corr}");
    }

    #[test]
    fn shifted_bump_distance_grows_with_displacement() {
        // A single-voxel bump moved one cell stays closer (in the structured
        // distance) than the same bump moved two cells, while the Euclidean
        // distance cannot tell the shifts apart.
        let s = shape(6, 3, 1, 1);
        let g = build_metric(&s, &MetricParams::isotropic(1.0, 1)).unwrap();
        let bump = |row: usize| {
            DesignTensor::from_fn(s, |_, i, j, _| if (i, j) == (row, 1) { 1.0 } else { 0.0 })
                .unwrap()
        };
        let base = bump(0);
        let by_one = bump(1);
        let by_two = bump(2);
        let d1 = imed_distance(&base, &by_one, &g).unwrap();
        let d2 = imed_distance(&base, &by_two, &g).unwrap();
        assert!(d1 < d2, "one-cell shift {d1} not closer than two-cell {d2}");
        let e1 = euclidean_distance_sq(&base, &by_one).unwrap();
        let e2 = euclidean_distance_sq(&base, &by_two).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn per_axis_scales_build_and_factorize() {
        let s = shape(4, 3, 2, 1);
        let params = MetricParams {
            scales: vec![AxisScales::PerAxis {
                gi: 0.7,
                gj: 1.3,
                gk: 2.0,
            }],
        };
        let g = build_metric(&s, &params).unwrap();
        let t = factorize(&g).unwrap();
        assert!(t.reconstruction_error(&g) < 1e-10);
        assert!(t.eigenvalues(0).min() > 0.0);
    }

    #[test]
    fn gamma_derivative_matches_finite_difference() {
        let s = shape(3, 3, 2, 1);
        let gamma = 0.9;
        let h = 1e-6;
        let d = metric_gamma_derivative(
            &build_metric(&s, &MetricParams::isotropic(gamma, 1)).unwrap(),
            0,
        )
        .unwrap();
        let gp = build_metric(&s, &MetricParams::isotropic(gamma + h, 1)).unwrap();
        let gm = build_metric(&s, &MetricParams::isotropic(gamma - h, 1)).unwrap();
        for a in 0..s.voxel_count() {
            for b in 0..s.voxel_count() {
                let fd = (gp.property(0)[(a, b)] - gm.property(0)[(a, b)]) / (2.0 * h);
                assert_relative_eq!(d[(a, b)], fd, max_relative = 1e-6, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cache_returns_shared_transform() {
        let s = shape(3, 2, 1, 1);
        let cache = MetricCache::new();
        let params = MetricParams::isotropic(1.0, 1);
        let a = cache.get_or_build(&s, &params).unwrap();
        let b = cache.get_or_build(&s, &params).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let other = cache
            .get_or_build(&s, &MetricParams::isotropic(2.0, 1))
            .unwrap();
        assert!(!Arc::ptr_eq(&a, &other));
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt())
    }
}
