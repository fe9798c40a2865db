//! Experiment configuration files (JSON, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{DatasetDescriptor, OodSpec, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_BINS, DEFAULT_NBAUCC_STEPS, DEFAULT_NBAUCC_TAU};
use crate::trainer::TrainConfig;

fn default_bins() -> usize {
    DEFAULT_BINS
}

fn default_tau() -> f64 {
    DEFAULT_NBAUCC_TAU
}

fn default_steps() -> usize {
    DEFAULT_NBAUCC_STEPS
}

fn default_repeats() -> usize {
    1
}

fn default_mc_samples() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_tau")]
    pub nbaucc_tau: f64,
    #[serde(default = "default_steps")]
    pub nbaucc_steps: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            bins: DEFAULT_BINS,
            nbaucc_tau: DEFAULT_NBAUCC_TAU,
            nbaucc_steps: DEFAULT_NBAUCC_STEPS,
        }
    }
}

/// Optional comparison models trained alongside each repeat.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineOptions {
    /// Deep ensemble size; 0 disables it.
    #[serde(default)]
    pub ensemble_members: usize,
    /// Dropout rate for the MC-dropout baseline; absent disables it.
    #[serde(default)]
    pub mc_dropout_rate: Option<f64>,
    #[serde(default = "default_mc_samples")]
    pub mc_dropout_samples: usize,
}

/// One swept parameter, addressed by a dotted path into the config,
/// e.g. `train.weight_decay` or `train.regularizer.coefficient`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub param: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: DatasetDescriptor,
    #[serde(default)]
    pub split: SplitSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<OodSpec>,
    #[serde(default)]
    pub baselines: BaselineOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Independent training seeds; repeat `r > 0` uses a seed derived from
    /// `train.seed`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<GridAxis>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::parse("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("cli", m));
        match self.dataset {
            DatasetDescriptor::Blobs { k, n, d, spread, .. } => {
                if k < 2 || d < 2 || n == 0 || !(spread > 0.0 && spread.is_finite()) {
                    return bad(format!("invalid blobs dataset k={k} n={n} d={d} spread={spread}"));
                }
            }
            DatasetDescriptor::TwoMoons { n, noise, .. } => {
                if n < 2 || !(noise >= 0.0 && noise.is_finite()) {
                    return bad(format!("invalid two_moons dataset n={n} noise={noise}"));
                }
            }
        }
        self.split.sizes(self.dataset.n())?;
        self.train.validate()?;
        if self.metrics.bins == 0 {
            return bad("metrics.bins must be >= 1".into());
        }
        if !(self.metrics.nbaucc_tau > 0.0 && self.metrics.nbaucc_tau <= 1.0) {
            return bad(format!("metrics.nbaucc_tau must lie in (0, 1], got {}", self.metrics.nbaucc_tau));
        }
        if self.metrics.nbaucc_steps == 0 {
            return bad("metrics.nbaucc_steps must be >= 1".into());
        }
        if let Some(o) = &self.ood {
            if o.n == 0 || !(o.shift > 1.0 && o.shift.is_finite()) {
                return bad("ood needs n >= 1 and shift > 1".into());
            }
        }
        if self.baselines.ensemble_members == 1 {
            return bad("baselines.ensemble_members must be 0 or >= 2".into());
        }
        if let Some(r) = self.baselines.mc_dropout_rate {
            if !(r > 0.0 && r < 1.0) {
                return bad(format!("baselines.mc_dropout_rate must lie in (0, 1), got {r}"));
            }
            if self.baselines.mc_dropout_samples == 0 {
                return bad("baselines.mc_dropout_samples must be >= 1".into());
            }
        }
        if self.repeats == 0 {
            return bad("repeats must be >= 1".into());
        }
        if self.grid.len() > 2 {
            return bad(format!("a grid sweeps one or two parameters, got {}", self.grid.len()));
        }
        for axis in &self.grid {
            if axis.values.is_empty() {
                return bad(format!("grid axis {} is empty", axis.param));
            }
            // Patch with the first value to catch bad paths and types early.
            self.with_param(&axis.param, &axis.values[0])?;
        }
        if self.grid.len() == 2 && self.grid[0].param == self.grid[1].param {
            return bad("grid axes must name different parameters".into());
        }
        Ok(())
    }

    /// Copy with one dotted-path parameter replaced.
    pub fn with_param(&self, path: &str, value: &Value) -> Result<ExperimentConfig> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        let (parents, last) = match path.rsplit_once('.') {
            Some((head, last)) => (head.split('.').collect::<Vec<_>>(), last),
            None => (Vec::new(), path),
        };
        let mut node = &mut tree;
        for part in parents {
            node = node
                .get_mut(part)
                .ok_or_else(|| Error::invalid("cli", format!("grid parameter {path}: no key {part}")))?;
        }
        node.as_object_mut()
            .ok_or_else(|| Error::invalid("cli", format!("grid parameter {path}: {last} is not inside an object")))?
            .insert(last.to_string(), value.clone());
        let mut patched: ExperimentConfig = serde_json::from_value(tree)
            .map_err(|e| Error::invalid("cli", format!("grid parameter {path}: {e}")))?;
        patched.grid.clear();
        Ok(patched)
    }
}
