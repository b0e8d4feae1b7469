//! Exact Gaussian-process regression with a constant mean: posterior
//! prediction, log marginal likelihood, analytic gradients, and
//! quasi-Newton hyperparameter learning with random restarts.
//!
//! The constant mean is profiled in closed form
//! (`μ̂ = 1ᵀK⁻¹y / 1ᵀK⁻¹1`) at every objective evaluation, which is exact
//! for this model and removes one optimizer dimension.

mod document;
mod optimizer;

pub use document::ModelDocument;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    CompiledKernel, Features, KernelFamily, KernelHyperparams, KernelSpec, ParamLayout,
};
use crate::metric::MetricCache;
use crate::tensor::{DesignTensor, GridShape};

/// Observation variance for deterministic simulator outputs.
pub const DEFAULT_NOISE: f64 = 1e-4;
/// Jitter escalation cap: factorization failures raise ε tenfold up to here.
const MAX_NOISE: f64 = 1e-1;
/// Step for the finite-difference γ components, in log space.
const GAMMA_FD_STEP: f64 = 1e-6;

/// Optimizer settings for hyperparameter learning.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub grad_tolerance: f64,
    pub restarts: usize,
    /// Log-space draw ranges; `None` fields use the data-driven defaults.
    pub init_ranges: InitRanges,
    pub seed: u64,
}

/// Optional overrides of the data-driven initialization ranges (log space).
#[derive(Debug, Clone, Default)]
pub struct InitRanges {
    pub log_signal_variance: Option<(f64, f64)>,
    pub log_lengthscale: Option<(f64, f64)>,
    pub log_gamma: Option<(f64, f64)>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grad_tolerance: 1e-5,
            restarts: 3,
            init_ranges: InitRanges::default(),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::InvalidParameter(
                "gradient tolerance must be positive".into(),
            ));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministically derives an independent stream seed from a base seed
/// and a path of indices (splitmix64 steps).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = base;
    for &part in path {
        state = state ^ part.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        state = splitmix64(state);
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A trained (or directly constructed) GP regression model.
pub struct GpModel {
    spec: KernelSpec,
    theta: KernelHyperparams,
    mean: f64,
    noise: f64,
    shape: GridShape,
    train_x: Vec<DesignTensor>,
    train_y: DVector<f64>,
    compiled: CompiledKernel,
    train_features: Vec<Features>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    mll: f64,
}

/// Predictive output at a set of inputs.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    /// Variances that came out below −1e−10 before clamping to zero.
    pub clamped: usize,
}

fn validate_training_set(xs: &[DesignTensor], ys: &[f64]) -> Result<GridShape> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} inputs vs {} outputs",
            xs.len(),
            ys.len()
        )));
    }
    if xs.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let shape = *xs[0].shape();
    for x in xs {
        if x.shape() != &shape {
            return Err(Error::DimensionMismatch(format!(
                "mixed input shapes {} and {}",
                shape,
                x.shape()
            )));
        }
    }
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidParameter("non-finite training output".into()));
    }
    Ok(shape)
}

/// Cholesky of `K + εI` with tenfold jitter escalation up to [`MAX_NOISE`].
fn factor_with_jitter(k: &DMatrix<f64>, base_noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut eps = base_noise;
    while eps <= MAX_NOISE * (1.0 + 1e-12) {
        let mut kk = k.clone();
        for i in 0..kk.nrows() {
            kk[(i, i)] += eps;
        }
        if let Some(chol) = Cholesky::new(kk) {
            return Ok((chol, eps));
        }
        eps *= 10.0;
    }
    Err(Error::Conditioning(format!(
        "covariance factorization failed even at jitter {MAX_NOISE}"
    )))
}

/// Mean handling for likelihood evaluation.
#[derive(Clone, Copy)]
enum MeanMode {
    Profiled,
    Fixed(f64),
}

struct EvalState {
    compiled: CompiledKernel,
    features: Vec<Features>,
    chol: Cholesky<f64, Dyn>,
    noise_used: f64,
    mu: f64,
    alpha: DVector<f64>,
    mll: f64,
}

fn evaluate_state(
    spec: &KernelSpec,
    theta: &KernelHyperparams,
    shape: GridShape,
    xs: &[DesignTensor],
    y: &DVector<f64>,
    base_noise: f64,
    mean_mode: MeanMode,
    cache: &MetricCache,
) -> Result<EvalState> {
    let compiled = CompiledKernel::new(spec.clone(), theta.clone(), shape, cache)?;
    let features = compiled.features_for(xs)?;
    let k = compiled.gram_sym(&features);
    let (chol, noise_used) = factor_with_jitter(&k, base_noise)?;
    let n = xs.len();
    let mu = match mean_mode {
        MeanMode::Fixed(m) => m,
        MeanMode::Profiled => {
            let ones = DVector::from_element(n, 1.0);
            let kinv_ones = chol.solve(&ones);
            let denom = kinv_ones.sum();
            if denom.abs() < 1e-300 {
                0.0
            } else {
                kinv_ones.dot(y) / denom
            }
        }
    };
    let r = y - DVector::from_element(n, mu);
    let alpha = chol.solve(&r);
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let mll = -0.5 * r.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(EvalState {
        compiled,
        features,
        chol,
        noise_used,
        mu,
        alpha,
        mll,
    })
}

/// `Σ_jk W_jk ∂K_jk/∂ψ` with the γ components finite-differenced on the
/// (profiled or fixed-mean) log marginal likelihood.
#[allow(clippy::too_many_arguments)]
fn mll_gradient_packed(
    state: &EvalState,
    spec: &KernelSpec,
    layout: &ParamLayout,
    shape: GridShape,
    xs: &[DesignTensor],
    y: &DVector<f64>,
    base_noise: f64,
    mean_mode: MeanMode,
    cache: &MetricCache,
) -> Result<DVector<f64>> {
    let n = xs.len();
    // W = ½(ααᵀ − K⁻¹); the analytic part is Σ W ∘ dK.
    let kinv = state.chol.inverse();
    let mut w = &state.alpha * state.alpha.transpose();
    w -= &kinv;
    w *= 0.5;
    let mut grad = state
        .compiled
        .weighted_gradient(xs, &state.features, &w)?;
    let psi = DVector::from_vec(layout.pack(&state.theta_view()));
    for idx in state.compiled.fd_component_indices() {
        let h = GAMMA_FD_STEP;
        let mut up = psi.clone();
        up[idx] += h;
        let mut dn = psi.clone();
        dn[idx] -= h;
        let theta_up = layout.unpack(up.as_slice(), &shape)?;
        let theta_dn = layout.unpack(dn.as_slice(), &shape)?;
        let mll_up =
            evaluate_state(spec, &theta_up, shape, xs, y, base_noise, mean_mode, cache)?.mll;
        let mll_dn =
            evaluate_state(spec, &theta_dn, shape, xs, y, base_noise, mean_mode, cache)?.mll;
        grad[idx] = (mll_up - mll_dn) / (2.0 * h);
    }
    let _ = n;
    Ok(grad)
}

impl EvalState {
    fn theta_view(&self) -> KernelHyperparams {
        self.compiled.theta().clone()
    }
}

impl GpModel {
    /// Builds a model at fixed hyperparameters without optimization. The
    /// mean is profiled when `mean` is `None`. `noise` overrides the
    /// default observation variance (tests and oracles).
    pub fn with_hyperparams(
        xs: Vec<DesignTensor>,
        ys: Vec<f64>,
        spec: KernelSpec,
        theta: KernelHyperparams,
        mean: Option<f64>,
        noise: Option<f64>,
        cache: &MetricCache,
    ) -> Result<Self> {
        let shape = validate_training_set(&xs, &ys)?;
        theta.validate(&spec, &shape)?;
        let y = DVector::from_vec(ys);
        let mean_mode = match mean {
            Some(m) => MeanMode::Fixed(m),
            None => MeanMode::Profiled,
        };
        let state = evaluate_state(
            &spec,
            &theta,
            shape,
            &xs,
            &y,
            noise.unwrap_or(DEFAULT_NOISE),
            mean_mode,
            cache,
        )?;
        Ok(Self {
            spec,
            theta,
            mean: state.mu,
            noise: state.noise_used,
            shape,
            train_x: xs,
            train_y: y,
            compiled: state.compiled,
            train_features: state.features,
            chol: state.chol,
            alpha: state.alpha,
            mll: state.mll,
        })
    }

    /// Learns hyperparameters by quasi-Newton ascent of the log marginal
    /// likelihood over `restarts` random initializations, returning the
    /// best model.
    pub fn fit(
        xs: Vec<DesignTensor>,
        ys: Vec<f64>,
        spec: KernelSpec,
        opt: &OptimizerConfig,
        cache: &MetricCache,
    ) -> Result<Self> {
        opt.validate()?;
        let shape = validate_training_set(&xs, &ys)?;
        if xs.len() < 2 {
            return Err(Error::InvalidParameter(
                "fitting needs at least 2 training points".into(),
            ));
        }
        let layout = ParamLayout::for_spec(&spec, &shape)?;
        let y = DVector::from_vec(ys);
        let stats = InitStats::compute(&spec, &shape, &xs, &y, cache)?;

        let mut best: Option<(f64, DVector<f64>)> = None;
        let mut failures: Vec<String> = Vec::new();
        for restart in 0..opt.restarts {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opt.seed, &[restart as u64]));
            let psi0 = stats.draw_init(&spec, &layout, &shape, &opt.init_ranges, &mut rng)?;
            let mut objective = GpObjective {
                spec: &spec,
                layout: &layout,
                shape,
                xs: &xs,
                y: &y,
                cache,
                memo: None,
            };
            match optimizer::minimize(
                &mut objective,
                DVector::from_vec(psi0),
                opt.max_iters,
                opt.grad_tolerance,
            ) {
                Ok(out) => {
                    debug_assert!(
                        out.history.windows(2).all(|w| w[1] <= w[0] + 1e-9),
                        "line search must decrease the objective monotonically"
                    );
                    if out.value.is_finite()
                        && best.as_ref().map_or(true, |(v, _)| out.value < *v)
                    {
                        best = Some((out.value, out.psi));
                    }
                }
                Err(e) => failures.push(format!("restart {restart}: {e}")),
            }
        }
        let (_, psi) = best.ok_or_else(|| {
            Error::Conditioning(format!(
                "all {} restarts failed: {}",
                opt.restarts,
                failures.join("; ")
            ))
        })?;
        let theta = layout.unpack(psi.as_slice(), &shape)?;
        Self::with_hyperparams(xs, y.iter().cloned().collect(), spec, theta, None, None, cache)
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.theta
    }

    /// The constant mean μ.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Effective observation variance after any jitter escalation.
    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn train_len(&self) -> usize {
        self.train_x.len()
    }

    /// Number of hyperparameters this model reports (kernel parameters plus
    /// the constant mean, except for the multi-linear kernel).
    pub fn hyperparameter_count(&self) -> usize {
        crate::kernels::hyperparameter_count(&self.spec, &self.shape).expect("spec validated")
    }

    /// Log marginal likelihood of the training data at the model's
    /// hyperparameters (with `K = K(X,X) + εI`).
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.mll
    }

    /// Gradient of the log marginal likelihood over `Θ = (μ, log θ…)` at the
    /// model's own hyperparameters, mean held fixed at `μ`.
    pub fn mll_gradient(&self, cache: &MetricCache) -> Result<DVector<f64>> {
        let layout = ParamLayout::for_spec(&self.spec, &self.shape)?;
        let state = evaluate_state(
            &self.spec,
            &self.theta,
            self.shape,
            &self.train_x,
            &self.train_y,
            self.noise,
            MeanMode::Fixed(self.mean),
            cache,
        )?;
        let packed = mll_gradient_packed(
            &state,
            &self.spec,
            &layout,
            self.shape,
            &self.train_x,
            &self.train_y,
            self.noise,
            MeanMode::Fixed(self.mean),
            cache,
        )?;
        let mut grad = DVector::zeros(packed.len() + 1);
        // ∂MLL/∂μ = 1ᵀK⁻¹(y − μ1) = Σ α.
        grad[0] = state.alpha.sum();
        grad.rows_mut(1, packed.len()).copy_from(&packed);
        Ok(grad)
    }

    /// Posterior mean and variance at new inputs. Variances include the
    /// observation noise ε, so far-field predictions revert to
    /// `(μ, σ² + ε)` for stationary kernels.
    pub fn predict(&self, xs_star: &[DesignTensor]) -> Result<Prediction> {
        if xs_star.is_empty() {
            return Err(Error::InvalidParameter("no prediction inputs".into()));
        }
        for x in xs_star {
            if x.shape() != &self.shape {
                return Err(Error::DimensionMismatch(format!(
                    "prediction input shape {} does not match model shape {}",
                    x.shape(),
                    self.shape
                )));
            }
        }
        let f_star = self.compiled.features_for(xs_star)?;
        // K* is n_train × n_star.
        let k_star = self.compiled.gram(&self.train_features, &f_star);
        let mean = DVector::from_element(xs_star.len(), self.mean)
            + k_star.transpose() * &self.alpha;
        let k_diag = self.compiled.diag(&f_star);
        // v = L⁻¹ K*; var_i = k(x_i,x_i) + ε − ‖v_i‖².
        let l = self.chol.l_dirty();
        let v = l
            .solve_lower_triangular(&k_star)
            .ok_or_else(|| Error::Conditioning("triangular solve failed in predict".into()))?;
        let mut clamped = 0usize;
        let variance = DVector::from_iterator(
            xs_star.len(),
            (0..xs_star.len()).map(|i| {
                let reduction = v.column(i).norm_squared();
                let var = k_diag[i] + self.noise - reduction;
                if var < 0.0 {
                    if var < -1e-10 {
                        clamped += 1;
                    }
                    0.0
                } else {
                    var
                }
            }),
        );
        Ok(Prediction {
            mean,
            variance,
            clamped,
        })
    }

    /// `‖L·Lᵀ − (K + εI)‖_max`, for factor-validity checks.
    pub fn factor_residual(&self) -> f64 {
        let k = self.compiled.gram_sym(&self.train_features);
        let l = self.chol.l_dirty().lower_triangle();
        let recon = &l * l.transpose();
        let mut worst: f64 = 0.0;
        for i in 0..k.nrows() {
            for j in 0..k.ncols() {
                let target = k[(i, j)] + if i == j { self.noise } else { 0.0 };
                worst = worst.max((recon[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Objective adapter: negative log marginal likelihood over packed
/// parameters, with the most recent state memoized so the gradient call at
/// an accepted point reuses the factorization.
struct GpObjective<'a> {
    spec: &'a KernelSpec,
    layout: &'a ParamLayout,
    shape: GridShape,
    xs: &'a [DesignTensor],
    y: &'a DVector<f64>,
    cache: &'a MetricCache,
    memo: Option<(Vec<u64>, EvalState)>,
}

impl GpObjective<'_> {
    fn state_for(&mut self, psi: &DVector<f64>) -> Result<&EvalState> {
        let key: Vec<u64> = psi.iter().map(|v| v.to_bits()).collect();
        let hit = matches!(&self.memo, Some((k, _)) if *k == key);
        if !hit {
            let theta = self.layout.unpack(psi.as_slice(), &self.shape)?;
            let state = evaluate_state(
                self.spec,
                &theta,
                self.shape,
                self.xs,
                self.y,
                DEFAULT_NOISE,
                MeanMode::Profiled,
                self.cache,
            )?;
            self.memo = Some((key, state));
        }
        Ok(&self.memo.as_ref().unwrap().1)
    }
}

impl optimizer::Objective for GpObjective<'_> {
    fn value(&mut self, psi: &DVector<f64>) -> Result<f64> {
        Ok(-self.state_for(psi)?.mll)
    }

    fn value_grad(&mut self, psi: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.state_for(psi)?;
        let (_, state) = self.memo.as_ref().unwrap();
        let mll = state.mll;
        let grad_mll = mll_gradient_packed(
            state,
            self.spec,
            self.layout,
            self.shape,
            self.xs,
            self.y,
            DEFAULT_NOISE,
            MeanMode::Profiled,
            self.cache,
        )?;
        Ok((-mll, -grad_mll))
    }
}

/// Data-driven initialization statistics.
struct InitStats {
    median_sq_distance: f64,
    var_y: f64,
}

impl InitStats {
    fn compute(
        spec: &KernelSpec,
        shape: &GridShape,
        xs: &[DesignTensor],
        y: &DVector<f64>,
        cache: &MetricCache,
    ) -> Result<Self> {
        let n = xs.len();
        let mean_y = y.sum() / n as f64;
        let var_y = (y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum::<f64>() / n as f64)
            .max(1e-6);

        // Median pairwise squared distance in the family's own geometry,
        // on a bounded subsample.
        let max_points = 60.min(n);
        let vectors: Vec<DVector<f64>> = match spec.family {
            KernelFamily::Imed | KernelFamily::ArdImed => {
                let theta = KernelHyperparams::default_for(spec, shape)?;
                let compiled = CompiledKernel::new(spec.clone(), theta, *shape, cache)?;
                xs[..max_points]
                    .iter()
                    .map(|x| {
                        compiled.features(x).map(|f| match f {
                            Features::Transformed { z, .. } => z,
                            _ => unreachable!(),
                        })
                    })
                    .collect::<Result<_>>()?
            }
            KernelFamily::WConv => {
                let patch = spec.patch_shape.expect("validated");
                let mut out = Vec::new();
                for x in &xs[..max_points] {
                    for block in crate::kernels::extract_patches(x, patch)? {
                        for r in 0..block.nrows() {
                            out.push(block.row(r).transpose());
                        }
                    }
                }
                out.truncate(120);
                out
            }
            _ => xs[..max_points]
                .iter()
                .map(|x| DVector::from_column_slice(x.values()))
                .collect(),
        };
        let mut dists = Vec::new();
        for i in 0..vectors.len() {
            for j in (i + 1)..vectors.len() {
                let d = (&vectors[i] - &vectors[j]).norm_squared();
                if d > 0.0 {
                    dists.push(d);
                }
            }
        }
        dists.sort_by(f64::total_cmp);
        let median_sq_distance = if dists.is_empty() {
            1.0
        } else {
            dists[dists.len() / 2]
        };
        Ok(Self {
            median_sq_distance,
            var_y,
        })
    }

    fn draw_init(
        &self,
        spec: &KernelSpec,
        layout: &ParamLayout,
        shape: &GridShape,
        ranges: &InitRanges,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let (sig_lo, sig_hi) = ranges
            .log_signal_variance
            .unwrap_or(((0.1 * self.var_y).ln(), (10.0 * self.var_y).ln()));
        let (len_lo, len_hi) = ranges.log_lengthscale.unwrap_or((
            (0.1 * self.median_sq_distance).ln(),
            (10.0 * self.median_sq_distance).ln(),
        ));
        let (gam_lo, gam_hi) = ranges
            .log_gamma
            .unwrap_or((0.3f64.ln(), 3.0f64.ln()));
        let mut theta = KernelHyperparams::default_for(spec, shape)?;
        theta.signal_variance = rng.gen_range(sig_lo..=sig_hi).exp();
        let common_l = rng.gen_range(len_lo..=len_hi).exp();
        for l in theta.lengthscales.iter_mut() {
            *l = common_l;
        }
        for g in theta.gamma.iter_mut() {
            *g = rng.gen_range(gam_lo..=gam_hi).exp();
        }
        if !theta.patch_weights.is_empty() {
            let scale = 1.0 / (theta.patch_weights.len() as f64).sqrt();
            for w in theta.patch_weights.iter_mut() {
                *w = scale * (1.0 + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal));
            }
        }
        for u in theta.kron_factors.iter_mut() {
            if u.nrows() > 1 {
                for r in 0..u.nrows() {
                    for c in 0..u.ncols() {
                        u[(r, c)] = (if r == c { 1.0 } else { 0.0 })
                            + 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    }
                }
            }
        }
        Ok(layout.pack(&theta))
    }
}
