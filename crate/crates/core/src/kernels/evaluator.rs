//! Compiled kernel evaluation: per-input feature precomputation, Gram
//! assembly, and weighted gradient accumulation for marginal-likelihood
//! optimization.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metric::{
    build_metric, metric_gamma_derivative, AxisScales, MetricCache, MetricParams, MetricTransform,
};
use crate::tensor::{DesignTensor, GridShape};

use super::{
    extract_patches, mlin, KernelFamily, KernelHyperparams, KernelSpec, ParamLayout,
};

/// Gram rows are assembled in parallel above this input count.
const PARALLEL_GRAM_THRESHOLD: usize = 64;

/// Per-input data a kernel family needs for repeated evaluation.
#[derive(Debug, Clone)]
pub enum Features {
    /// Raw flattened values (Euclidean families).
    Flat(DVector<f64>),
    /// Metric-transformed features plus the raw flattening (structured
    /// families; the raw copy feeds the analytic γ gradient).
    Transformed { z: DVector<f64>, raw: DVector<f64> },
    /// Sliding patches per property (convolutional kernel).
    Patches(Vec<DMatrix<f64>>),
    /// Full mode product (multi-linear kernel).
    ModeProduct(DVector<f64>),
}

/// A kernel spec and hyperparameters bound to one grid shape, with the
/// derived state (metric transform, layout) precomputed.
pub struct CompiledKernel {
    spec: KernelSpec,
    theta: KernelHyperparams,
    shape: GridShape,
    layout: ParamLayout,
    transform: Option<Arc<MetricTransform>>,
}

impl CompiledKernel {
    pub fn new(
        spec: KernelSpec,
        theta: KernelHyperparams,
        shape: GridShape,
        cache: &MetricCache,
    ) -> Result<Self> {
        let layout = ParamLayout::for_spec(&spec, &shape)?;
        theta.validate(&spec, &shape)?;
        let transform = if spec.family.uses_metric() {
            Some(cache.get_or_build(&shape, &metric_params(&spec, &theta, &shape))?)
        } else {
            None
        };
        Ok(Self {
            spec,
            theta,
            shape,
            layout,
            transform,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn theta(&self) -> &KernelHyperparams {
        &self.theta
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn transform(&self) -> Option<&MetricTransform> {
        self.transform.as_deref()
    }

    /// Precomputes features for one input.
    pub fn features(&self, x: &DesignTensor) -> Result<Features> {
        if x.shape() != &self.shape {
            return Err(Error::DimensionMismatch(format!(
                "input shape {} does not match compiled shape {}",
                x.shape(),
                self.shape
            )));
        }
        Ok(match self.spec.family {
            KernelFamily::Rbf | KernelFamily::ArdRbf => {
                Features::Flat(DVector::from_column_slice(x.values()))
            }
            KernelFamily::Imed | KernelFamily::ArdImed => {
                let t = self.transform.as_ref().expect("metric compiled");
                Features::Transformed {
                    z: crate::metric::transform(x, t)?,
                    raw: DVector::from_column_slice(x.values()),
                }
            }
            KernelFamily::WConv => {
                Features::Patches(extract_patches(x, self.spec.patch_shape.expect("validated"))?)
            }
            KernelFamily::MLin => Features::ModeProduct(DVector::from_vec(
                mlin::full_mode_product(x, &self.theta.kron_factors),
            )),
        })
    }

    pub fn features_for(&self, xs: &[DesignTensor]) -> Result<Vec<Features>> {
        xs.iter().map(|x| self.features(x)).collect()
    }

    /// Covariance of one pair from precomputed features.
    pub fn eval(&self, fx: &Features, fy: &Features) -> f64 {
        match (&self.spec.family, fx, fy) {
            (KernelFamily::Rbf, Features::Flat(a), Features::Flat(b)) => {
                let d = (a - b).norm_squared();
                self.theta.signal_variance * (-d / (2.0 * self.theta.lengthscales[0])).exp()
            }
            (KernelFamily::ArdRbf, Features::Flat(a), Features::Flat(b)) => {
                self.theta.signal_variance
                    * (-ard_exponent_slices(a.as_slice(), b.as_slice(), &self.theta.lengthscales))
                        .exp()
            }
            (KernelFamily::Imed, Features::Transformed { z: a, .. }, Features::Transformed { z: b, .. }) => {
                let d = (a - b).norm_squared();
                self.theta.signal_variance * (-d / (2.0 * self.theta.lengthscales[0])).exp()
            }
            (
                KernelFamily::ArdImed,
                Features::Transformed { z: a, .. },
                Features::Transformed { z: b, .. },
            ) => {
                self.theta.signal_variance
                    * (-ard_exponent_slices(a.as_slice(), b.as_slice(), &self.theta.lengthscales))
                        .exp()
            }
            (KernelFamily::WConv, Features::Patches(a), Features::Patches(b)) => {
                wconv_sum(a, b, &self.theta, self.spec.patch_shape.expect("validated"))
            }
            (KernelFamily::MLin, Features::ModeProduct(a), Features::ModeProduct(b)) => a.dot(b),
            _ => unreachable!("feature variant does not match kernel family"),
        }
    }

    /// Cross-covariance matrix: entry `(r, c)` is the kernel on
    /// `(fx[r], fy[c])`.
    pub fn gram(&self, fx: &[Features], fy: &[Features]) -> DMatrix<f64> {
        let rows = fx.len();
        let cols = fy.len();
        let mut out = DMatrix::zeros(rows, cols);
        if rows * cols >= PARALLEL_GRAM_THRESHOLD * PARALLEL_GRAM_THRESHOLD {
            let row_data: Vec<Vec<f64>> = fx
                .par_iter()
                .map(|a| fy.iter().map(|b| self.eval(a, b)).collect())
                .collect();
            for (r, row) in row_data.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    out[(r, c)] = v;
                }
            }
        } else {
            for r in 0..rows {
                for c in 0..cols {
                    out[(r, c)] = self.eval(&fx[r], &fy[c]);
                }
            }
        }
        out
    }

    /// Symmetric Gram matrix over one input list (upper triangle computed,
    /// mirrored).
    pub fn gram_sym(&self, fx: &[Features]) -> DMatrix<f64> {
        let n = fx.len();
        let mut out = DMatrix::zeros(n, n);
        let fill_row = |r: usize| -> Vec<f64> {
            (r..n).map(|c| self.eval(&fx[r], &fx[c])).collect()
        };
        if n >= PARALLEL_GRAM_THRESHOLD {
            let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(fill_row).collect();
            for (r, row) in rows.iter().enumerate() {
                for (offset, &v) in row.iter().enumerate() {
                    let c = r + offset;
                    out[(r, c)] = v;
                    out[(c, r)] = v;
                }
            }
        } else {
            for r in 0..n {
                for (offset, v) in fill_row(r).into_iter().enumerate() {
                    let c = r + offset;
                    out[(r, c)] = v;
                    out[(c, r)] = v;
                }
            }
        }
        out
    }

    /// Diagonal of the Gram for a feature list: `k(x, x)` per input.
    pub fn diag(&self, fx: &[Features]) -> DVector<f64> {
        DVector::from_iterator(fx.len(), fx.iter().map(|f| self.eval(f, f)))
    }

    /// Packed-parameter indices whose gradient must be obtained by finite
    /// differences of the likelihood (γ components whose analytic chain
    /// would require eigenvector derivatives).
    pub fn fd_component_indices(&self) -> Vec<usize> {
        match self.spec.family {
            KernelFamily::Imed if !self.spec.per_axis_gamma => Vec::new(),
            KernelFamily::Imed | KernelFamily::ArdImed => self.layout.gamma_range().collect(),
            _ => Vec::new(),
        }
    }

    /// Accumulates `Σ_{jk} weight[j,k] · ∂K[j,k]/∂ψ` over the packed
    /// parameters, with `weight` symmetric. Components listed by
    /// [`Self::fd_component_indices`] are left at zero for the caller to
    /// fill by finite differences.
    pub fn weighted_gradient(
        &self,
        xs: &[DesignTensor],
        feats: &[Features],
        weight: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        let n = feats.len();
        assert_eq!(weight.nrows(), n);
        assert_eq!(weight.ncols(), n);
        let mut grad = DVector::zeros(self.layout.packed_len());
        match self.spec.family {
            KernelFamily::Rbf => {
                let l = self.theta.lengthscales[0];
                for j in 0..n {
                    for k in j..n {
                        let scale = if j == k { 1.0 } else { 2.0 };
                        let wgt = scale * weight[(j, k)];
                        let (a, b) = (flat(&feats[j]), flat(&feats[k]));
                        let d = (a - b).norm_squared();
                        let kv = self.theta.signal_variance * (-d / (2.0 * l)).exp();
                        grad[0] += wgt * kv;
                        grad[1] += wgt * kv * d / (2.0 * l);
                    }
                }
            }
            KernelFamily::ArdRbf | KernelFamily::ArdImed => {
                let ls = &self.theta.lengthscales;
                let lrange = self.layout.lengthscale_range();
                for j in 0..n {
                    for k in j..n {
                        let scale = if j == k { 1.0 } else { 2.0 };
                        let wgt = scale * weight[(j, k)];
                        let (a, b) = (ard_view(&feats[j]), ard_view(&feats[k]));
                        let kv = self.theta.signal_variance
                            * (-ard_exponent_slices(a, b, ls)).exp();
                        grad[0] += wgt * kv;
                        let wk = wgt * kv;
                        for (q, idx) in lrange.clone().enumerate() {
                            let dq = a[q] - b[q];
                            grad[idx] += wk * dq * dq / (2.0 * ls[q]);
                        }
                    }
                }
                // γ components of ard-imed are finite-differenced upstream.
            }
            KernelFamily::Imed => {
                let l = self.theta.lengthscales[0];
                let analytic_gamma = !self.spec.per_axis_gamma;
                let dg = if analytic_gamma {
                    let params = metric_params(&self.spec, &self.theta, &self.shape);
                    let g = build_metric(&self.shape, &params)?;
                    Some(
                        (0..self.shape.p)
                            .map(|p| metric_gamma_derivative(&g, p))
                            .collect::<Result<Vec<_>>>()?,
                    )
                } else {
                    None
                };
                let nv = self.shape.voxel_count();
                let grange = self.layout.gamma_range();
                for j in 0..n {
                    for k in j..n {
                        let scale = if j == k { 1.0 } else { 2.0 };
                        let wgt = scale * weight[(j, k)];
                        let (zj, rawj) = transformed(&feats[j]);
                        let (zk, rawk) = transformed(&feats[k]);
                        let d = (zj - zk).norm_squared();
                        let kv = self.theta.signal_variance * (-d / (2.0 * l)).exp();
                        grad[0] += wgt * kv;
                        grad[1] += wgt * kv * d / (2.0 * l);
                        if let Some(dg) = &dg {
                            for (p, idx) in grange.clone().enumerate() {
                                let gamma = self.theta.gamma[p];
                                let mut quad = 0.0;
                                let dgp = &dg[p];
                                for a in 0..nv {
                                    let da = rawj[p * nv + a] - rawk[p * nv + a];
                                    if da == 0.0 {
                                        continue;
                                    }
                                    for b in 0..nv {
                                        let db = rawj[p * nv + b] - rawk[p * nv + b];
                                        quad += da * dgp[(a, b)] * db;
                                    }
                                }
                                // ∂k/∂log γ = k · (−γ/(2l)) · ΔᵀdGΔ
                                grad[idx] += wgt * kv * (-gamma / (2.0 * l)) * quad;
                            }
                        }
                    }
                }
            }
            KernelFamily::WConv => {
                let patch = self.spec.patch_shape.expect("validated");
                let d_patch = patch.0 * patch.1 * patch.2;
                let p_count = self.shape.p;
                let weights = &self.theta.patch_weights;
                let ls = &self.theta.lengthscales;
                let sig = self.theta.signal_variance;
                let l_start = self.layout.lengthscale_range().start;
                let w_start = self.layout.weight_range().start;
                for j in 0..n {
                    for k in j..n {
                        let scale = if j == k { 1.0 } else { 2.0 };
                        let wgt = scale * weight[(j, k)];
                        let (pj, pk) = (patches(&feats[j]), patches(&feats[k]));
                        for p in 0..p_count {
                            let m = pj[p].nrows();
                            let lblock = &ls[p * d_patch..(p + 1) * d_patch];
                            for mi in 0..m {
                                let row_a = pj[p].row(mi);
                                let w_a = weights[p * m + mi];
                                for mj in 0..m {
                                    let row_b = pk[p].row(mj);
                                    let w_b = weights[p * m + mj];
                                    let mut expo = 0.0;
                                    for q in 0..d_patch {
                                        let dq = row_a[q] - row_b[q];
                                        expo += dq * dq / lblock[q];
                                    }
                                    let e = sig * (-0.5 * expo).exp();
                                    let ww = w_a * w_b;
                                    grad[0] += wgt * ww * e;
                                    for q in 0..d_patch {
                                        let dq = row_a[q] - row_b[q];
                                        grad[l_start + p * d_patch + q] +=
                                            wgt * ww * e * dq * dq / (2.0 * lblock[q]);
                                    }
                                    grad[w_start + p * m + mi] += wgt * w_b * e;
                                    grad[w_start + p * m + mj] += wgt * w_a * e;
                                }
                            }
                        }
                    }
                }
            }
            KernelFamily::MLin => {
                // ∂(Σ W_jk K_jk)/∂U_n = 2·U_n·S with S = Σ_jk W_jk Y_j Y_kᵀ,
                // Y the mode-n unfolding of the partial product.
                let mut offset = self.layout.factor_range().start;
                for (fi, u) in self.theta.kron_factors.iter().enumerate() {
                    let d = u.nrows();
                    if d == 1 {
                        continue;
                    }
                    let mode = mlin::factor_index_to_mode(fi);
                    let unfolded: Vec<DMatrix<f64>> = xs
                        .iter()
                        .map(|x| mlin::partial_product_unfolded(x, &self.theta.kron_factors, mode))
                        .collect();
                    let rest = unfolded[0].ncols();
                    let mut s = DMatrix::zeros(d, d);
                    for j in 0..n {
                        let mut vj = DMatrix::zeros(d, rest);
                        for k in 0..n {
                            let w = weight[(j, k)];
                            if w != 0.0 {
                                vj += w * &unfolded[k];
                            }
                        }
                        s += &unfolded[j] * vj.transpose();
                    }
                    let block = 2.0 * u * s;
                    for r in 0..d {
                        for c in 0..d {
                            grad[offset + r * d + c] = block[(r, c)];
                        }
                    }
                    offset += d * d;
                }
            }
        }
        Ok(grad)
    }
}

fn flat(f: &Features) -> &DVector<f64> {
    match f {
        Features::Flat(v) => v,
        _ => unreachable!("expected flat features"),
    }
}

fn ard_view(f: &Features) -> &[f64] {
    match f {
        Features::Flat(v) => v.as_slice(),
        Features::Transformed { z, .. } => z.as_slice(),
        _ => unreachable!("expected vector features"),
    }
}

fn transformed(f: &Features) -> (&DVector<f64>, &DVector<f64>) {
    match f {
        Features::Transformed { z, raw } => (z, raw),
        _ => unreachable!("expected transformed features"),
    }
}

fn patches(f: &Features) -> &[DMatrix<f64>] {
    match f {
        Features::Patches(p) => p,
        _ => unreachable!("expected patch features"),
    }
}

fn ard_exponent_slices(a: &[f64], b: &[f64], lengthscales: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, y), l) in a.iter().zip(b).zip(lengthscales) {
        let d = x - y;
        s += d * d / l;
    }
    0.5 * s
}

/// Metric parameters implied by the spec's anisotropy flag and the γ values.
pub(super) fn metric_params(
    spec: &KernelSpec,
    theta: &KernelHyperparams,
    shape: &GridShape,
) -> MetricParams {
    let scales = if spec.per_axis_gamma {
        (0..shape.p)
            .map(|p| AxisScales::PerAxis {
                gi: theta.gamma[3 * p],
                gj: theta.gamma[3 * p + 1],
                gk: theta.gamma[3 * p + 2],
            })
            .collect()
    } else {
        theta.gamma.iter().map(|&g| AxisScales::Isotropic(g)).collect()
    };
    MetricParams { scales }
}

/// The weighted convolutional double sum over patch pairs, per property:
/// `Σ_p Σ_{m,m'} w_{mp} w_{m'p} k_p(patch, patch')` with an ARD patch
/// response.
pub(super) fn wconv_sum(
    px: &[DMatrix<f64>],
    py: &[DMatrix<f64>],
    theta: &KernelHyperparams,
    patch: (usize, usize, usize),
) -> f64 {
    let d_patch = patch.0 * patch.1 * patch.2;
    let mut total = 0.0;
    for (p, (a, b)) in px.iter().zip(py).enumerate() {
        let m = a.nrows();
        let lblock = &theta.lengthscales[p * d_patch..(p + 1) * d_patch];
        for mi in 0..m {
            let w_a = theta.patch_weights[p * m + mi];
            if w_a == 0.0 {
                continue;
            }
            for mj in 0..m {
                let w_b = theta.patch_weights[p * m + mj];
                if w_b == 0.0 {
                    continue;
                }
                let mut expo = 0.0;
                for q in 0..d_patch {
                    let dq = a[(mi, q)] - b[(mj, q)];
                    expo += dq * dq / lblock[q];
                }
                total += w_a * w_b * theta.signal_variance * (-0.5 * expo).exp();
            }
        }
    }
    total
}
