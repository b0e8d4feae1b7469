//! Experiment configuration: a JSON document with unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tensor_gp::gp::OptimizerConfig;
use tensor_gp::kernels::{KernelFamily, KernelSpec};
use tensor_gp::tensor::GridShape;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset directory.
    pub dataset: PathBuf,
    /// Kernels to compare.
    pub kernels: Vec<KernelConfig>,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    /// Z-score coefficient targets with training statistics before fitting.
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_lobe_half_width")]
    pub lobe_half_width_deg: f64,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    /// Worker threads for per-coefficient fits; default: rayon's choice.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub workers: Option<usize>,
    /// Output directory for results, report, and prediction dumps.
    pub output: PathBuf,
    #[serde(default = "default_true")]
    pub dump_predictions: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: String,
    /// Patch shape `[v', h', w']`; weighted convolutional kernel only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub patch: Option<[usize; 3]>,
    #[serde(default)]
    pub per_axis_gamma: bool,
    /// Per-kernel repeat override. The multi-linear kernel defaults to a
    /// single repeat; everything else uses the experiment-wide count.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_num_basis")]
    pub num_basis: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_grad_tolerance")]
    pub grad_tolerance: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_split_ratio() -> f64 {
    0.8
}
fn default_repeats() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_lobe_half_width() -> f64 {
    7.0
}
fn default_order() -> usize {
    4
}
fn default_num_basis() -> usize {
    21
}
fn default_max_iters() -> usize {
    100
}
fn default_grad_tolerance() -> f64 {
    1e-5
}
fn default_restarts() -> usize {
    3
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            order: default_order(),
            num_basis: default_num_basis(),
        }
    }
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            grad_tolerance: default_grad_tolerance(),
            restarts: default_restarts(),
        }
    }
}

impl OptimizerSettings {
    pub fn to_core(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            max_iters: self.max_iters,
            grad_tolerance: self.grad_tolerance,
            restarts: self.restarts,
            seed,
            ..OptimizerConfig::default()
        }
    }
}

impl KernelConfig {
    pub fn named(family: &str) -> Self {
        Self {
            family: family.to_string(),
            patch: None,
            per_axis_gamma: false,
            repeats: None,
        }
    }

    pub fn to_spec(&self, shape: &GridShape) -> Result<KernelSpec> {
        let family = KernelFamily::parse(&self.family)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let spec = KernelSpec {
            family,
            patch_shape: self.patch.map(|[a, b, c]| (a, b, c)),
            base_kernel: KernelFamily::ArdRbf,
            per_axis_gamma: self.per_axis_gamma,
        };
        spec.validate(shape)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Display label, including the patch geometry for convolutional kernels.
    pub fn label(&self) -> String {
        match self.patch {
            Some([a, b, c]) => format!("{}({a}x{b}x{c})", self.family),
            None => self.family.clone(),
        }
    }

    pub fn effective_repeats(&self, experiment_repeats: usize) -> usize {
        if let Some(r) = self.repeats {
            return r.max(1);
        }
        if self.family.eq_ignore_ascii_case("mlin") || self.family.eq_ignore_ascii_case("m-lin") {
            1
        } else {
            experiment_repeats
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(HarnessError::Config(format!(
                "split_ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        if self.repeats == 0 {
            return Err(HarnessError::Config("repeats must be >= 1".into()));
        }
        if self.kernels.is_empty() {
            return Err(HarnessError::Config("no kernels configured".into()));
        }
        if self.basis.order == 0 || self.basis.num_basis < self.basis.order {
            return Err(HarnessError::Config(format!(
                "basis needs order >= 1 and num_basis >= order, got order {} with {} functions",
                self.basis.order, self.basis.num_basis
            )));
        }
        if !(self.lobe_half_width_deg >= 0.0) {
            return Err(HarnessError::Config(
                "lobe_half_width_deg must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let json = r#"{
            "dataset": "data/demo",
            "kernels": [{"family": "rbf"}, {"family": "wconv", "patch": [3, 3, 1]}],
            "output": "out"
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.split_ratio, 0.8);
        assert_eq!(cfg.repeats, 10);
        assert!(cfg.standardize);
        assert_eq!(cfg.basis.order, 4);
        assert_eq!(cfg.basis.num_basis, 21);
        assert_eq!(cfg.lobe_half_width_deg, 7.0);
        assert_eq!(cfg.kernels[1].label(), "wconv(3x3x1)");
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{
            "dataset": "d", "kernels": [{"family": "rbf"}], "output": "o",
            "unекспected": 1
        }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
        let json = r#"{
            "dataset": "d", "kernels": [{"family": "rbf", "oops": true}], "output": "o"
        }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
    }

    #[test]
    fn bad_ratio_rejected() {
        let json = r#"{
            "dataset": "d", "kernels": [{"family": "rbf"}], "output": "o",
            "split_ratio": 1.5
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mlin_defaults_to_one_repeat() {
        let kc = KernelConfig::named("mlin");
        assert_eq!(kc.effective_repeats(10), 1);
        let kc = KernelConfig::named("rbf");
        assert_eq!(kc.effective_repeats(10), 10);
        let mut kc = KernelConfig::named("mlin");
        kc.repeats = Some(5);
        assert_eq!(kc.effective_repeats(10), 5);
    }
}
