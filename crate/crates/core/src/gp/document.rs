//! JSON serialization of trained models for reproducible prediction.
//!
//! The document stores hyperparameters, the constant mean, the effective
//! noise, the kernel spec, and a fingerprint of the training set; restoring
//! requires the original training data, which the fingerprint verifies.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelHyperparams, KernelSpec};
use crate::metric::MetricCache;
use crate::tensor::{DesignTensor, GridShape};

use super::GpModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub kernel: KernelSpecDoc,
    pub shape: GridShape,
    pub hyperparams: HyperparamsDoc,
    pub mean: f64,
    pub noise: f64,
    pub n_train: usize,
    /// FNV-1a hash (hex) over the training inputs and outputs.
    pub train_fingerprint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpecDoc {
    pub family: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub patch_shape: Option<[usize; 3]>,
    #[serde(default)]
    pub per_axis_gamma: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperparamsDoc {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub gamma: Vec<f64>,
    pub patch_weights: Vec<f64>,
    pub kron_factors: Vec<FactorDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorDoc {
    pub dim: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

fn fnv1a_bytes(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Order-sensitive fingerprint of a training set.
pub(crate) fn training_fingerprint(xs: &[DesignTensor], ys: &[f64]) -> String {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    if let Some(first) = xs.first() {
        let s = first.shape();
        for d in [s.v, s.h, s.w, s.p] {
            h = fnv1a_bytes(h, &(d as u64).to_le_bytes());
        }
    }
    for x in xs {
        for v in x.values() {
            h = fnv1a_bytes(h, &v.to_bits().to_le_bytes());
        }
    }
    for y in ys {
        h = fnv1a_bytes(h, &y.to_bits().to_le_bytes());
    }
    format!("{h:016x}")
}

impl ModelDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::InvalidParameter(format!("malformed model document: {e}")))
    }

    pub fn spec(&self) -> Result<KernelSpec> {
        let family = KernelFamily::parse(&self.kernel.family)?;
        Ok(KernelSpec {
            family,
            patch_shape: self.kernel.patch_shape.map(|[a, b, c]| (a, b, c)),
            base_kernel: KernelFamily::ArdRbf,
            per_axis_gamma: self.kernel.per_axis_gamma,
        })
    }

    pub fn hyperparams(&self) -> KernelHyperparams {
        KernelHyperparams {
            signal_variance: self.hyperparams.signal_variance,
            lengthscales: self.hyperparams.lengthscales.clone(),
            gamma: self.hyperparams.gamma.clone(),
            patch_weights: self.hyperparams.patch_weights.clone(),
            kron_factors: self
                .hyperparams
                .kron_factors
                .iter()
                .map(|f| DMatrix::from_row_slice(f.dim, f.dim, &f.data))
                .collect(),
        }
    }
}

impl GpModel {
    /// Serializable summary sufficient to rebuild the model from the same
    /// training data.
    pub fn document(&self) -> ModelDocument {
        let ys: Vec<f64> = self.train_y.iter().cloned().collect();
        ModelDocument {
            kernel: KernelSpecDoc {
                family: self.spec.family.name().to_string(),
                patch_shape: self.spec.patch_shape.map(|(a, b, c)| [a, b, c]),
                per_axis_gamma: self.spec.per_axis_gamma,
            },
            shape: self.shape,
            hyperparams: HyperparamsDoc {
                signal_variance: self.theta.signal_variance,
                lengthscales: self.theta.lengthscales.clone(),
                gamma: self.theta.gamma.clone(),
                patch_weights: self.theta.patch_weights.clone(),
                kron_factors: self
                    .theta
                    .kron_factors
                    .iter()
                    .map(|u| {
                        let mut data = Vec::with_capacity(u.nrows() * u.ncols());
                        for r in 0..u.nrows() {
                            for c in 0..u.ncols() {
                                data.push(u[(r, c)]);
                            }
                        }
                        FactorDoc { dim: u.nrows(), data }
                    })
                    .collect(),
            },
            mean: self.mean,
            noise: self.noise,
            n_train: self.train_x.len(),
            train_fingerprint: training_fingerprint(&self.train_x, &ys),
        }
    }

    /// Rebuilds a model from a document and the original training data,
    /// verifying the fingerprint.
    pub fn restore(
        doc: &ModelDocument,
        xs: Vec<DesignTensor>,
        ys: Vec<f64>,
        cache: &MetricCache,
    ) -> Result<Self> {
        let fp = training_fingerprint(&xs, &ys);
        if fp != doc.train_fingerprint {
            return Err(Error::InvalidParameter(format!(
                "training data fingerprint {fp} does not match document {}",
                doc.train_fingerprint
            )));
        }
        let spec = doc.spec()?;
        Self::with_hyperparams(
            xs,
            ys,
            spec,
            doc.hyperparams(),
            Some(doc.mean),
            Some(doc.noise),
            cache,
        )
    }
}
