//! Experiment orchestration: seeded splits, per-coefficient GP training,
//! functional reconstruction, and metric aggregation with confidence
//! intervals.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use tensor_gp::bspline::{build_basis, fit_coefficients, reconstruct, BsplineBasis};
use tensor_gp::gp::{derive_seed, GpModel};
use tensor_gp::kernels::hyperparameter_count;
use tensor_gp::metric::MetricCache;
use tensor_gp::metrics::evaluate;
use tensor_gp::tensor::DesignTensor;

use crate::config::{ExperimentConfig, KernelConfig};
use crate::dataset::{load_dataset, Dataset};
use crate::error::{HarnessError, Result};
use crate::stats::{ci95_half_width, mean, paired_t_less, PairedT};

/// Metrics of one (kernel, repeat) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub split_seed: u64,
    pub rmse: f64,
    pub msll: f64,
    pub lobe_rmse: f64,
    pub lobe_msll: f64,
    /// Mean per-sample rooted residual of fitting the basis directly to the
    /// test curves: a hard lower bound on any coefficient-model RMSE.
    pub basis_floor_rmse: f64,
    pub floored_variances: usize,
    pub skipped_lobe_samples: usize,
}

/// Aggregated row of the result table for one kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelRow {
    pub kernel: String,
    pub hyperparameter_count: usize,
    pub repeats_configured: usize,
    pub rmse_mean: Option<f64>,
    pub rmse_ci95: Option<f64>,
    pub msll_mean: Option<f64>,
    pub msll_ci95: Option<f64>,
    pub lobe_rmse_mean: Option<f64>,
    pub lobe_rmse_ci95: Option<f64>,
    pub lobe_msll_mean: Option<f64>,
    pub lobe_msll_ci95: Option<f64>,
    pub per_repeat: Vec<RepeatResult>,
    pub errors: Vec<String>,
}

/// The machine-readable result table. Identical configs and seeds produce
/// byte-identical serializations; wall-clock timings live elsewhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultTable {
    pub dataset: String,
    pub n_samples: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub standardize: bool,
    pub basis_order: usize,
    pub num_basis: usize,
    pub lobe_half_width_deg: f64,
    pub rows: Vec<KernelRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelTiming {
    pub kernel: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub table: ResultTable,
    pub timings: Vec<KernelTiming>,
}

/// Deterministic train/test split: a seeded permutation cut at
/// `⌊ratio·n⌋`. The index sets are disjoint and exhaustive.
pub fn split(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = ((ratio * n as f64).floor() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = indices.split_off(n_train);
    (indices, test)
}

struct RepeatArtifacts {
    result: RepeatResult,
    test_indices: Vec<usize>,
    pred_mean: DMatrix<f64>,
    pred_var: DMatrix<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_repeat(
    config: &ExperimentConfig,
    dataset: &Dataset,
    basis: &BsplineBasis,
    kernel_index: usize,
    kernel: &KernelConfig,
    repeat: usize,
    wrap: bool,
    cache: &MetricCache,
) -> Result<RepeatArtifacts> {
    let spec = kernel.to_spec(&dataset.shape)?;
    let split_seed = derive_seed(config.seed, &[repeat as u64]);
    let (train_idx, test_idx) = split(dataset.len(), config.split_ratio, split_seed);
    let train_x: Vec<DesignTensor> = train_idx.iter().map(|&i| dataset.inputs[i].clone()).collect();
    let test_x: Vec<DesignTensor> = test_idx.iter().map(|&i| dataset.inputs[i].clone()).collect();
    let l = dataset.angles.len();
    let lp = basis.num_basis;

    // Coefficients of every training curve.
    let mut a_train = DMatrix::zeros(train_idx.len(), lp);
    for (row, &i) in train_idx.iter().enumerate() {
        let curve: Vec<f64> = (0..l).map(|c| dataset.outputs[(i, c)]).collect();
        let (a, _) = fit_coefficients(&curve, basis).map_err(HarnessError::from_core)?;
        a_train.set_row(row, &a.transpose());
    }

    // The basis-residual floor on the test curves bounds any achievable RMSE.
    let mut floor_sum = 0.0;
    for &i in &test_idx {
        let curve: Vec<f64> = (0..l).map(|c| dataset.outputs[(i, c)]).collect();
        let (_, residual) = fit_coefficients(&curve, basis).map_err(HarnessError::from_core)?;
        floor_sum += residual / (l as f64).sqrt();
    }
    let basis_floor_rmse = floor_sum / test_idx.len() as f64;

    // One GP per coefficient, trained independently.
    let coefficient_predictions: Vec<Result<(DVector<f64>, DVector<f64>)>> = (0..lp)
        .into_par_iter()
        .map(|j| {
            let targets: Vec<f64> = (0..train_idx.len()).map(|r| a_train[(r, j)]).collect();
            let (shift, scale) = if config.standardize {
                let m = mean(&targets);
                let var = targets.iter().map(|t| (t - m) * (t - m)).sum::<f64>()
                    / targets.len() as f64;
                (m, var.sqrt().max(1e-12))
            } else {
                (0.0, 1.0)
            };
            let zs: Vec<f64> = targets.iter().map(|t| (t - shift) / scale).collect();
            let opt = config.optimizer.to_core(derive_seed(
                config.seed,
                &[kernel_index as u64, repeat as u64, j as u64],
            ));
            let model = GpModel::fit(train_x.clone(), zs, spec.clone(), &opt, cache)
                .map_err(HarnessError::from_core)?;
            let pred = model.predict(&test_x).map_err(HarnessError::from_core)?;
            let mean_j = pred.mean.map(|m| shift + scale * m);
            let var_j = pred.variance.map(|v| scale * scale * v);
            Ok((mean_j, var_j))
        })
        .collect();

    let mut coef_means = DMatrix::zeros(test_idx.len(), lp);
    let mut coef_vars = DMatrix::zeros(test_idx.len(), lp);
    for (j, outcome) in coefficient_predictions.into_iter().enumerate() {
        let (m, v) = outcome.map_err(|e| {
            HarnessError::Numerical(format!("coefficient {j}: {e}"))
        })?;
        coef_means.set_column(j, &m);
        coef_vars.set_column(j, &v);
    }

    // Per-sample functional reconstruction.
    let mut pred_mean = DMatrix::zeros(test_idx.len(), l);
    let mut pred_var = DMatrix::zeros(test_idx.len(), l);
    for r in 0..test_idx.len() {
        let means = coef_means.row(r).transpose();
        let vars = coef_vars.row(r).transpose();
        let fp = reconstruct(&means, &vars, basis).map_err(HarnessError::from_core)?;
        pred_mean.set_row(r, &fp.mean.transpose());
        pred_var.set_row(r, &fp.variance.transpose());
    }

    let truth = DMatrix::from_fn(test_idx.len(), l, |r, c| dataset.outputs[(test_idx[r], c)]);
    let report = evaluate(
        &truth,
        &pred_mean,
        &pred_var,
        &dataset.angles,
        config.lobe_half_width_deg,
        wrap,
    )
    .map_err(HarnessError::from_core)?;
    debug_assert!(
        report.rmse >= basis_floor_rmse - 1e-9,
        "GP RMSE {} below the basis floor {}",
        report.rmse,
        basis_floor_rmse
    );

    Ok(RepeatArtifacts {
        result: RepeatResult {
            repeat,
            split_seed,
            rmse: report.rmse,
            msll: report.msll,
            lobe_rmse: report.lobe_rmse,
            lobe_msll: report.lobe_msll,
            basis_floor_rmse,
            floored_variances: report.warnings.floored_variances,
            skipped_lobe_samples: report.warnings.skipped_lobe_samples,
        },
        test_indices: test_idx,
        pred_mean,
        pred_var,
    })
}

fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn dump_predictions(
    dir: &Path,
    label: &str,
    repeat: usize,
    dataset: &Dataset,
    artifacts: &RepeatArtifacts,
) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| HarnessError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(format!("{}_rep{repeat}.csv", sanitize_label(label)));
    let mut out = String::from("sample,angle_deg,truth,pred_mean,pred_var\n");
    for (r, &idx) in artifacts.test_indices.iter().enumerate() {
        for (c, angle) in dataset.angles.iter().enumerate() {
            out.push_str(&format!(
                "{idx},{angle},{},{},{}\n",
                dataset.outputs[(idx, c)],
                artifacts.pred_mean[(r, c)],
                artifacts.pred_var[(r, c)]
            ));
        }
    }
    fs::write(&path, out)
        .map_err(|e| HarnessError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Runs the configured experiment against an already loaded dataset.
pub fn run_experiment_on(config: &ExperimentConfig, dataset: &Dataset) -> Result<ExperimentOutcome> {
    config.validate()?;
    if dataset.len() < 5 {
        return Err(HarnessError::Data(format!(
            "dataset has only {} samples; too few to split",
            dataset.len()
        )));
    }
    let wrap = dataset.full_circle();
    let first = dataset.angles[0];
    let domain = if wrap {
        (first, first + 360.0)
    } else {
        (first, *dataset.angles.last().expect("non-empty"))
    };
    let basis = build_basis(
        domain,
        config.basis.order,
        config.basis.num_basis,
        &dataset.angles,
    )
    .map_err(|e| HarnessError::Config(e.to_string()))?;

    let pool = match config.workers {
        Some(k) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?,
        ),
        None => None,
    };

    let cache = MetricCache::new();
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for (kernel_index, kernel) in config.kernels.iter().enumerate() {
        let spec = kernel.to_spec(&dataset.shape)?;
        let count = hyperparameter_count(&spec, &dataset.shape)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let repeats = kernel.effective_repeats(config.repeats);
        let started = Instant::now();
        let mut per_repeat = Vec::new();
        let mut errors = Vec::new();
        for repeat in 0..repeats {
            let work = || {
                run_repeat(
                    config,
                    dataset,
                    &basis,
                    kernel_index,
                    kernel,
                    repeat,
                    wrap,
                    &cache,
                )
            };
            let outcome = match &pool {
                Some(p) => p.install(work),
                None => work(),
            };
            match outcome {
                Ok(artifacts) => {
                    if config.dump_predictions {
                        dump_predictions(
                            &config.output.join("predictions"),
                            &kernel.label(),
                            repeat,
                            dataset,
                            &artifacts,
                        )?;
                    }
                    per_repeat.push(artifacts.result);
                }
                Err(e) => errors.push(format!("repeat {repeat}: {e}")),
            }
        }
        let seconds = started.elapsed().as_secs_f64();
        let pick = |f: fn(&RepeatResult) -> f64| -> (Option<f64>, Option<f64>) {
            let values: Vec<f64> = per_repeat.iter().map(f).collect();
            if values.is_empty() {
                (None, None)
            } else {
                (Some(mean(&values)), ci95_half_width(&values))
            }
        };
        let (rmse_mean, rmse_ci95) = pick(|r| r.rmse);
        let (msll_mean, msll_ci95) = pick(|r| r.msll);
        let (lobe_rmse_mean, lobe_rmse_ci95) = pick(|r| r.lobe_rmse);
        let (lobe_msll_mean, lobe_msll_ci95) = pick(|r| r.lobe_msll);
        rows.push(KernelRow {
            kernel: kernel.label(),
            hyperparameter_count: count,
            repeats_configured: repeats,
            rmse_mean,
            rmse_ci95,
            msll_mean,
            msll_ci95,
            lobe_rmse_mean,
            lobe_rmse_ci95,
            lobe_msll_mean,
            lobe_msll_ci95,
            per_repeat,
            errors,
        });
        timings.push(KernelTiming {
            kernel: kernel.label(),
            seconds,
        });
    }
    Ok(ExperimentOutcome {
        table: ResultTable {
            dataset: dataset.name.clone(),
            n_samples: dataset.len(),
            split_ratio: config.split_ratio,
            seed: config.seed,
            standardize: config.standardize,
            basis_order: config.basis.order,
            num_basis: config.basis.num_basis,
            lobe_half_width_deg: config.lobe_half_width_deg,
            rows,
        },
        timings,
    })
}

/// Loads the configured dataset and runs the experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let dataset = load_dataset(&config.dataset)?;
    run_experiment_on(config, &dataset)
}

/// Which metric a paired comparison tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComparisonMetric {
    Rmse,
    Msll,
}

/// One-sided paired t-test of "kernel A beats kernel B" on per-repeat
/// values, paired by split seed.
pub fn paired_comparison(
    a: &KernelRow,
    b: &KernelRow,
    metric: ComparisonMetric,
) -> Result<PairedT> {
    if a.per_repeat.len() != b.per_repeat.len() {
        return Err(HarnessError::Config(format!(
            "unpaired repeat counts: {} vs {}",
            a.per_repeat.len(),
            b.per_repeat.len()
        )));
    }
    let mut lhs = Vec::with_capacity(a.per_repeat.len());
    let mut rhs = Vec::with_capacity(a.per_repeat.len());
    for ra in &a.per_repeat {
        let rb = b
            .per_repeat
            .iter()
            .find(|r| r.split_seed == ra.split_seed)
            .ok_or_else(|| {
                HarnessError::Config(format!(
                    "no matching split seed {} in second result set",
                    ra.split_seed
                ))
            })?;
        let (x, y) = match metric {
            ComparisonMetric::Rmse => (ra.rmse, rb.rmse),
            ComparisonMetric::Msll => (ra.msll, rb.msll),
        };
        lhs.push(x);
        rhs.push(y);
    }
    paired_t_less(&lhs, &rhs)
}
