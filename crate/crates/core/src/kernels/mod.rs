//! Kernel families over design tensors: Euclidean and structured-distance
//! exponential kernels (isotropic and ARD), the weighted convolutional
//! kernel over sliding patches, and the multi-linear Kronecker kernel.
//!
//! All families share one hyperparameter container and one packed
//! optimizer-space layout (log-transformed where positivity is required),
//! so Gram assembly and marginal-likelihood gradients are uniform across
//! families.

mod evaluator;
mod mlin;
mod patches;

pub use evaluator::{CompiledKernel, Features};
pub use mlin::{mode_product, mode_unfolding};
pub use patches::{extract_patches, patch_count};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::metric::{MetricCache, MetricTransform};
use crate::tensor::{DesignTensor, GridShape};

/// The kernel families compared by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    /// Isotropic exponential kernel on the squared Euclidean distance.
    Rbf,
    /// Per-dimension lengthscales on the flattened tensor.
    ArdRbf,
    /// Isotropic exponential kernel on the structured voxel distance.
    Imed,
    /// Per-dimension lengthscales on the metric-transformed features.
    ArdImed,
    /// Weighted sum of patch-response kernel evaluations.
    WConv,
    /// Bilinear Kronecker-factored tensor kernel.
    MLin,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::ArdRbf => "ard-rbf",
            KernelFamily::Imed => "imed",
            KernelFamily::ArdImed => "ard-imed",
            KernelFamily::WConv => "wconv",
            KernelFamily::MLin => "mlin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" => Ok(KernelFamily::Rbf),
            "ard-rbf" | "ardrbf" | "ard_rbf" => Ok(KernelFamily::ArdRbf),
            "imed" => Ok(KernelFamily::Imed),
            "ard-imed" | "ardimed" | "ard_imed" => Ok(KernelFamily::ArdImed),
            "wconv" => Ok(KernelFamily::WConv),
            "mlin" | "m-lin" => Ok(KernelFamily::MLin),
            other => Err(Error::InvalidParameter(format!(
                "unknown kernel family '{other}'"
            ))),
        }
    }

    /// Whether the family operates on metric-transformed features.
    pub fn uses_metric(&self) -> bool {
        matches!(self, KernelFamily::Imed | KernelFamily::ArdImed)
    }
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Structural choice of kernel: family plus the options that are fixed
/// before training (patch geometry, metric anisotropy).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Patch shape `(v', h', w')` for the convolutional kernel.
    pub patch_shape: Option<(usize, usize, usize)>,
    /// Base family for patch responses. Only `ArdRbf` is supported.
    pub base_kernel: KernelFamily,
    /// Use separate metric lengthscales per spatial axis (structured
    /// families only). Default isotropic.
    pub per_axis_gamma: bool,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        Self {
            family,
            patch_shape: None,
            base_kernel: KernelFamily::ArdRbf,
            per_axis_gamma: false,
        }
    }

    pub fn rbf() -> Self {
        Self::new(KernelFamily::Rbf)
    }

    pub fn ard_rbf() -> Self {
        Self::new(KernelFamily::ArdRbf)
    }

    pub fn imed() -> Self {
        Self::new(KernelFamily::Imed)
    }

    pub fn ard_imed() -> Self {
        Self::new(KernelFamily::ArdImed)
    }

    pub fn wconv(patch: (usize, usize, usize)) -> Self {
        Self {
            patch_shape: Some(patch),
            ..Self::new(KernelFamily::WConv)
        }
    }

    pub fn mlin() -> Self {
        Self::new(KernelFamily::MLin)
    }

    pub fn validate(&self, shape: &GridShape) -> Result<()> {
        match self.family {
            KernelFamily::WConv => {
                let patch = self.patch_shape.ok_or_else(|| {
                    Error::InvalidParameter("wconv kernel requires a patch shape".into())
                })?;
                patches::validate_patch(shape, patch)?;
                if self.base_kernel != KernelFamily::ArdRbf {
                    return Err(Error::InvalidParameter(format!(
                        "wconv patch-response base must be ard-rbf, got {}",
                        self.base_kernel
                    )));
                }
            }
            _ => {
                if self.patch_shape.is_some() {
                    return Err(Error::InvalidParameter(format!(
                        "patch shape is only meaningful for wconv, not {}",
                        self.family
                    )));
                }
            }
        }
        if self.per_axis_gamma && !self.family.uses_metric() {
            return Err(Error::InvalidParameter(format!(
                "per-axis gamma only applies to structured families, not {}",
                self.family
            )));
        }
        Ok(())
    }
}

/// Hyperparameter values for any kernel family. Which fields are populated
/// (and their lengths) depends on the family; see [`ParamLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelHyperparams {
    /// Signal variance σ². Unused by the multi-linear kernel.
    pub signal_variance: f64,
    /// Lengthscales in squared-distance units: 1 entry (isotropic), one per
    /// flattened dimension (ARD), or `P·v'h'w'` base lengthscales (wconv).
    pub lengthscales: Vec<f64>,
    /// Metric lengthscales γ: one per property, or three per property with
    /// per-axis anisotropy. Structured families only.
    pub gamma: Vec<f64>,
    /// Patch weights, laid out property-major: `w[p·M + m]`. WConv only.
    pub patch_weights: Vec<f64>,
    /// Kronecker factors `[U_v, U_h, U_w, U_p]`, each square. MLin only.
    pub kron_factors: Vec<DMatrix<f64>>,
}

impl KernelHyperparams {
    /// Neutral hyperparameters for a family: unit variance and lengthscales,
    /// γ = 1, unit patch weights, identity factors.
    pub fn default_for(spec: &KernelSpec, shape: &GridShape) -> Result<Self> {
        let layout = ParamLayout::for_spec(spec, shape)?;
        Ok(Self {
            signal_variance: 1.0,
            lengthscales: vec![1.0; layout.n_lengthscales],
            gamma: vec![1.0; layout.n_gamma],
            patch_weights: vec![1.0; layout.n_weights],
            kron_factors: if spec.family == KernelFamily::MLin {
                [shape.v, shape.h, shape.w, shape.p]
                    .iter()
                    .map(|&d| DMatrix::identity(d, d))
                    .collect()
            } else {
                Vec::new()
            },
        })
    }

    pub fn validate(&self, spec: &KernelSpec, shape: &GridShape) -> Result<Self> {
        let layout = ParamLayout::for_spec(spec, shape)?;
        if spec.family != KernelFamily::MLin {
            if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "signal variance must be positive, got {}",
                    self.signal_variance
                )));
            }
        }
        if self.lengthscales.len() != layout.n_lengthscales {
            return Err(Error::InvalidParameter(format!(
                "{} expects {} lengthscale(s), got {}",
                spec.family,
                layout.n_lengthscales,
                self.lengthscales.len()
            )));
        }
        if self.lengthscales.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::InvalidParameter(
                "lengthscales must be positive and finite".into(),
            ));
        }
        if self.gamma.len() != layout.n_gamma {
            return Err(Error::InvalidParameter(format!(
                "{} expects {} gamma value(s), got {}",
                spec.family,
                layout.n_gamma,
                self.gamma.len()
            )));
        }
        if self.gamma.iter().any(|&g| !(g.is_finite() && g > 0.0)) {
            return Err(Error::InvalidParameter(
                "gamma values must be positive and finite".into(),
            ));
        }
        if self.patch_weights.len() != layout.n_weights {
            return Err(Error::InvalidParameter(format!(
                "{} expects {} patch weight(s), got {}",
                spec.family,
                layout.n_weights,
                self.patch_weights.len()
            )));
        }
        if self.patch_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("patch weights must be finite".into()));
        }
        if spec.family == KernelFamily::MLin {
            let dims = [shape.v, shape.h, shape.w, shape.p];
            if self.kron_factors.len() != 4 {
                return Err(Error::InvalidParameter(format!(
                    "mlin expects 4 Kronecker factors, got {}",
                    self.kron_factors.len()
                )));
            }
            for (u, &d) in self.kron_factors.iter().zip(&dims) {
                if u.nrows() != d || u.ncols() != d {
                    return Err(Error::InvalidParameter(format!(
                        "Kronecker factor is {}x{}, mode dimension is {d}",
                        u.nrows(),
                        u.ncols()
                    )));
                }
                if u.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidParameter(
                        "Kronecker factors must be finite".into(),
                    ));
                }
            }
        } else if !self.kron_factors.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "Kronecker factors are only meaningful for mlin, not {}",
                spec.family
            )));
        }
        Ok(self.clone())
    }
}

/// Packed optimizer-space layout of a kernel's hyperparameters.
///
/// Order: `[log σ²][log lengthscales..][log γ..][patch weights..][factor
/// entries row-major, non-singleton modes only]`. Weights and factor entries
/// stay linear; everything else is log-transformed to enforce positivity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub family: KernelFamily,
    pub n_signal: usize,
    pub n_lengthscales: usize,
    pub n_gamma: usize,
    pub n_weights: usize,
    /// Dimensions of the optimized (non-singleton) Kronecker modes, in
    /// `[v, h, w, p]` order.
    pub factor_dims: Vec<usize>,
}

impl ParamLayout {
    pub fn for_spec(spec: &KernelSpec, shape: &GridShape) -> Result<Self> {
        spec.validate(shape)?;
        let d_full = shape.value_count();
        let gamma_per_prop = if spec.per_axis_gamma { 3 } else { 1 };
        let (n_signal, n_lengthscales, n_gamma, n_weights, factor_dims) = match spec.family {
            KernelFamily::Rbf => (1, 1, 0, 0, Vec::new()),
            KernelFamily::ArdRbf => (1, d_full, 0, 0, Vec::new()),
            KernelFamily::Imed => (1, 1, gamma_per_prop * shape.p, 0, Vec::new()),
            KernelFamily::ArdImed => (1, d_full, gamma_per_prop * shape.p, 0, Vec::new()),
            KernelFamily::WConv => {
                let patch = spec.patch_shape.expect("validated above");
                let m = patch_count(shape, patch)?;
                let d_patch = patch.0 * patch.1 * patch.2;
                (1, shape.p * d_patch, 0, m * shape.p, Vec::new())
            }
            KernelFamily::MLin => {
                let dims: Vec<usize> = [shape.v, shape.h, shape.w, shape.p]
                    .into_iter()
                    .filter(|&d| d > 1)
                    .collect();
                (0, 0, 0, 0, dims)
            }
        };
        Ok(Self {
            family: spec.family,
            n_signal,
            n_lengthscales,
            n_gamma,
            n_weights,
            factor_dims,
        })
    }

    pub fn packed_len(&self) -> usize {
        self.n_signal
            + self.n_lengthscales
            + self.n_gamma
            + self.n_weights
            + self.factor_dims.iter().map(|d| d * d).sum::<usize>()
    }

    pub fn signal_index(&self) -> Option<usize> {
        (self.n_signal > 0).then_some(0)
    }

    pub fn lengthscale_range(&self) -> std::ops::Range<usize> {
        self.n_signal..self.n_signal + self.n_lengthscales
    }

    pub fn gamma_range(&self) -> std::ops::Range<usize> {
        let s = self.n_signal + self.n_lengthscales;
        s..s + self.n_gamma
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        let s = self.n_signal + self.n_lengthscales + self.n_gamma;
        s..s + self.n_weights
    }

    pub fn factor_range(&self) -> std::ops::Range<usize> {
        let s = self.n_signal + self.n_lengthscales + self.n_gamma + self.n_weights;
        s..self.packed_len()
    }

    /// Packs hyperparameter values into optimizer space.
    pub fn pack(&self, theta: &KernelHyperparams) -> Vec<f64> {
        let mut psi = Vec::with_capacity(self.packed_len());
        if self.n_signal > 0 {
            psi.push(theta.signal_variance.ln());
        }
        psi.extend(theta.lengthscales.iter().map(|l| l.ln()));
        psi.extend(theta.gamma.iter().map(|g| g.ln()));
        psi.extend(theta.patch_weights.iter().copied());
        if self.family == KernelFamily::MLin {
            for u in &theta.kron_factors {
                if u.nrows() > 1 {
                    for r in 0..u.nrows() {
                        for c in 0..u.ncols() {
                            psi.push(u[(r, c)]);
                        }
                    }
                }
            }
        }
        psi
    }

    /// Unpacks optimizer-space values into hyperparameters.
    pub fn unpack(&self, psi: &[f64], shape: &GridShape) -> Result<KernelHyperparams> {
        if psi.len() != self.packed_len() {
            return Err(Error::DimensionMismatch(format!(
                "packed vector has {} entries, layout needs {}",
                psi.len(),
                self.packed_len()
            )));
        }
        let mut pos = 0;
        let signal_variance = if self.n_signal > 0 {
            pos += 1;
            psi[0].exp()
        } else {
            1.0
        };
        let lengthscales: Vec<f64> = psi[pos..pos + self.n_lengthscales]
            .iter()
            .map(|x| x.exp())
            .collect();
        pos += self.n_lengthscales;
        let gamma: Vec<f64> = psi[pos..pos + self.n_gamma].iter().map(|x| x.exp()).collect();
        pos += self.n_gamma;
        let patch_weights: Vec<f64> = psi[pos..pos + self.n_weights].to_vec();
        pos += self.n_weights;
        let kron_factors = if self.family == KernelFamily::MLin {
            let mut factors = Vec::with_capacity(4);
            for d in [shape.v, shape.h, shape.w, shape.p] {
                if d > 1 {
                    let mut u = DMatrix::zeros(d, d);
                    for r in 0..d {
                        for c in 0..d {
                            u[(r, c)] = psi[pos];
                            pos += 1;
                        }
                    }
                    factors.push(u);
                } else {
                    factors.push(DMatrix::identity(1, 1));
                }
            }
            factors
        } else {
            Vec::new()
        };
        Ok(KernelHyperparams {
            signal_variance,
            lengthscales,
            gamma,
            patch_weights,
            kron_factors,
        })
    }
}

/// Number of hyperparameters a model of this spec reports: packed optimizer
/// parameters plus the constant mean, except for the multi-linear kernel
/// whose count is the factor entries alone.
pub fn hyperparameter_count(spec: &KernelSpec, shape: &GridShape) -> Result<usize> {
    let layout = ParamLayout::for_spec(spec, shape)?;
    Ok(match spec.family {
        KernelFamily::MLin => layout.packed_len(),
        _ => layout.packed_len() + 1,
    })
}

fn check_same_shape(x: &DesignTensor, x2: &DesignTensor) -> Result<()> {
    if x.shape() != x2.shape() {
        return Err(Error::DimensionMismatch(format!(
            "tensor shapes differ: {} vs {}",
            x.shape(),
            x2.shape()
        )));
    }
    Ok(())
}

/// Isotropic exponential kernel `σ²·exp(−d_E/(2l))` on the squared
/// Euclidean distance of the flattened tensors.
pub fn rbf_eval(x: &DesignTensor, x2: &DesignTensor, theta: &KernelHyperparams) -> Result<f64> {
    check_same_shape(x, x2)?;
    let spec = KernelSpec::rbf();
    theta.validate(&spec, x.shape())?;
    let d = crate::metric::euclidean_distance_sq(x, x2)?;
    Ok(theta.signal_variance * (-d / (2.0 * theta.lengthscales[0])).exp())
}

fn ard_exponent(a: &[f64], b: &[f64], lengthscales: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, y), l) in a.iter().zip(b).zip(lengthscales) {
        let d = x - y;
        s += d * d / l;
    }
    0.5 * s
}

/// ARD exponential kernel `σ²·exp(−½ Σ_q Δ_q²/l_q)` on the flattened
/// tensors; collapses to [`rbf_eval`] when all lengthscales are equal.
pub fn ard_rbf_eval(x: &DesignTensor, x2: &DesignTensor, theta: &KernelHyperparams) -> Result<f64> {
    check_same_shape(x, x2)?;
    let spec = KernelSpec::ard_rbf();
    theta.validate(&spec, x.shape())?;
    Ok(theta.signal_variance * (-ard_exponent(x.values(), x2.values(), &theta.lengthscales)).exp())
}

/// Structured-distance kernel: the isotropic exponential kernel evaluated on
/// metric-transformed features. The caller provides the transform built from
/// `theta.gamma` on the input shape.
pub fn imed_eval(
    x: &DesignTensor,
    x2: &DesignTensor,
    theta: &KernelHyperparams,
    transform: &MetricTransform,
) -> Result<f64> {
    check_same_shape(x, x2)?;
    let z = crate::metric::transform(x, transform)?;
    let z2 = crate::metric::transform(x2, transform)?;
    let d = (&z - &z2).norm_squared();
    if theta.lengthscales.len() != 1 {
        return Err(Error::InvalidParameter(format!(
            "imed expects 1 lengthscale, got {}",
            theta.lengthscales.len()
        )));
    }
    Ok(theta.signal_variance * (-d / (2.0 * theta.lengthscales[0])).exp())
}

/// ARD variant of the structured-distance kernel: per-dimension lengthscales
/// applied to the transformed features.
pub fn ard_imed_eval(
    x: &DesignTensor,
    x2: &DesignTensor,
    theta: &KernelHyperparams,
    transform: &MetricTransform,
) -> Result<f64> {
    check_same_shape(x, x2)?;
    let z = crate::metric::transform(x, transform)?;
    let z2 = crate::metric::transform(x2, transform)?;
    if theta.lengthscales.len() != z.len() {
        return Err(Error::InvalidParameter(format!(
            "ard-imed expects {} lengthscales, got {}",
            z.len(),
            theta.lengthscales.len()
        )));
    }
    Ok(theta.signal_variance
        * (-ard_exponent(z.as_slice(), z2.as_slice(), &theta.lengthscales)).exp())
}

/// Weighted convolutional kernel: the full double sum over patch pairs of
/// weighted patch-response evaluations, per property.
pub fn wconv_eval(
    x: &DesignTensor,
    x2: &DesignTensor,
    spec: &KernelSpec,
    theta: &KernelHyperparams,
) -> Result<f64> {
    check_same_shape(x, x2)?;
    theta.validate(spec, x.shape())?;
    let patch = spec.patch_shape.expect("validated");
    let px = extract_patches(x, patch)?;
    let py = extract_patches(x2, patch)?;
    Ok(evaluator::wconv_sum(&px, &py, theta, patch))
}

/// Multi-linear kernel: the bilinear form of the Kronecker-factored
/// covariance, evaluated through mode-wise products.
pub fn mlin_eval(x: &DesignTensor, x2: &DesignTensor, theta: &KernelHyperparams) -> Result<f64> {
    check_same_shape(x, x2)?;
    let spec = KernelSpec::mlin();
    theta.validate(&spec, x.shape())?;
    let zx = mlin::full_mode_product(x, &theta.kron_factors);
    let zy = mlin::full_mode_product(x2, &theta.kron_factors);
    Ok(zx.iter().zip(zy.iter()).map(|(a, b)| a * b).sum())
}

/// Covariance matrix over all pairs of the two input lists. Symmetric PSD
/// when the lists coincide.
pub fn gram(
    spec: &KernelSpec,
    theta: &KernelHyperparams,
    xs: &[DesignTensor],
    xs2: &[DesignTensor],
    cache: &MetricCache,
) -> Result<DMatrix<f64>> {
    if xs.is_empty() || xs2.is_empty() {
        return Err(Error::InvalidParameter("gram needs non-empty input lists".into()));
    }
    let compiled = CompiledKernel::new(spec.clone(), theta.clone(), *xs[0].shape(), cache)?;
    let fx = compiled.features_for(xs)?;
    let fy = compiled.features_for(xs2)?;
    Ok(compiled.gram(&fx, &fy))
}
