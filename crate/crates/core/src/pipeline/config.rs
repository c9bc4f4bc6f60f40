use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::metrics::{FeatureSpace, DEFAULT_K, DEFAULT_SPLITS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Cifar10 {
        path: PathBuf,
    },
    Toy {
        classes: usize,
        per_class: usize,
        side: usize,
        /// Samples per class in the held-out reference split.
        test_per_class: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSpec {
    Iid,
    LabelSkew {
        classes_per_client: usize,
    },
    DataSharing {
        beta_pct: f64,
        alpha_pct: f64,
        classes_per_client: usize,
    },
}

impl PartitionSpec {
    pub fn label(&self) -> &'static str {
        match self {
            PartitionSpec::Iid => "iid",
            PartitionSpec::LabelSkew { .. } => "label_skew",
            PartitionSpec::DataSharing { .. } => "data_sharing",
        }
    }
}

/// Either a preset name or an explicit layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Explicit(DenoiserConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<DenoiserConfig> {
        match self {
            ModelSpec::Preset(name) => {
                DenoiserConfig::preset(name).ok_or_else(|| Error::Config(format!("unknown model preset `{name}`")))
            }
            ModelSpec::Explicit(c) => Ok(*c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub schedule: ScheduleKind,
    pub steps: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_splits() -> usize {
    DEFAULT_SPLITS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSpec {
    pub feature_space: FeatureSpace,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Samples generated for the end-of-run report.
    pub eval_samples: usize,
    pub classifier_epochs: usize,
    #[serde(default = "default_splits")]
    pub splits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub model: ModelSpec,
    pub diffusion: DiffusionSpec,
    pub federation: FederationConfig,
    pub metrics: MetricsSpec,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const DESK_JSON: &str = include_str!("../../configs/desk.json");
const PAPER_JSON: &str = include_str!("../../configs/paper.json");

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "desk" => DESK_JSON,
            "paper" => PAPER_JSON,
            other => return Err(Error::Config(format!("unknown run preset `{other}`"))),
        };
        Self::from_json(text)
    }

    pub fn desk() -> Self {
        Self::preset("desk").expect("bundled desk preset parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.federation.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads a config file, or a bundled preset when `path` names one.
    pub fn load(path: &Path) -> Result<Self> {
        if let Some(name) = path.to_str().filter(|p| matches!(*p, "desk" | "paper")) {
            return Self::preset(name);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// `PHOENIX_SEED` and `PHOENIX_OUTPUT_DIR` override the file.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("PHOENIX_SEED") {
            let seed = s
                .parse()
                .map_err(|_| Error::Config(format!("PHOENIX_SEED `{s}` is not an integer")))?;
            self.set_seed(seed);
        }
        if let Ok(dir) = std::env::var("PHOENIX_OUTPUT_DIR") {
            self.output_dir = dir.into();
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.federation.seed = seed;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.resolve()?;
        model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.federation.validate()?;
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!("run_id `{}` is not a plain name", self.run_id)));
        }
        if self.diffusion.steps < 1 {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        let (channels, side, classes) = match &self.dataset {
            DatasetSpec::Cifar10 { .. } => (3, 32, 10),
            DatasetSpec::Toy {
                classes,
                per_class,
                side,
                test_per_class,
            } => {
                if *per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Config("toy dataset needs per_class and test_per_class >= 1".into()));
                }
                (1, *side, *classes)
            }
        };
        if model.image_channels != channels || model.image_side != side {
            return Err(Error::Config(format!(
                "model expects {}x{}x{} images, dataset yields {channels}x{side}x{side}",
                model.image_channels, model.image_side, model.image_side
            )));
        }
        match &self.partition {
            PartitionSpec::Iid => {}
            PartitionSpec::LabelSkew { classes_per_client } | PartitionSpec::DataSharing { classes_per_client, .. } => {
                if *classes_per_client == 0 {
                    return Err(Error::Config("classes_per_client must be >= 1".into()));
                }
                if self.federation.client_count * classes_per_client < classes && self.federation.client_count > 1 {
                    return Err(Error::Config(format!(
                        "{} clients x {classes_per_client} classes cannot cover {classes} classes",
                        self.federation.client_count
                    )));
                }
            }
        }
        if let PartitionSpec::DataSharing { beta_pct, alpha_pct, .. } = self.partition {
            if !(beta_pct > 0.0 && beta_pct <= 25.0) {
                // |S| = |C| / 4 under the 80/20 split, so β above 25% cannot fit.
                return Err(Error::Config(format!("beta_pct {beta_pct} outside (0, 25]")));
            }
            if !(0.0..=100.0).contains(&alpha_pct) {
                return Err(Error::Config(format!("alpha_pct {alpha_pct} outside [0, 100]")));
            }
        }
        let m = &self.metrics;
        if m.k == 0 || m.eval_samples < m.k + 1 || m.splits == 0 {
            return Err(Error::Config(format!(
                "metrics need k >= 1, eval_samples > k and splits >= 1 (k = {}, eval_samples = {})",
                m.k, m.eval_samples
            )));
        }
        if self.federation.threshold_filtering && self.federation.eval_sample_count < m.k + 1 {
            return Err(Error::Config("eval_sample_count must exceed k".into()));
        }
        Ok(())
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        self.model.resolve()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(&self.run_id)
    }

    /// A short label for reports.
    pub fn strategy_label(&self) -> String {
        let f = &self.federation;
        let mut parts = vec![match self.partition {
            PartitionSpec::Iid => "iid",
            PartitionSpec::LabelSkew { .. } => "non_iid",
            PartitionSpec::DataSharing { .. } => "data_sharing",
        }
        .to_string()];
        if f.personalization {
            parts.push("personalization".into());
        }
        if f.threshold_filtering {
            parts.push(format!("filtering_{}", f.drop_policy.label()));
        }
        parts.join("+")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in ["desk", "paper"] {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn desk_preset_matches_documented_defaults() {
        let c = RunConfig::desk();
        assert_eq!(c.federation.client_count, 4);
        assert_eq!(c.diffusion.steps, 50);
        assert_eq!(c.federation.local_epochs, 5);
        assert_eq!(c.federation.server_rounds, 5);
        let p = RunConfig::preset("paper").unwrap();
        assert_eq!(p.federation.client_count, 10);
        assert_eq!(p.diffusion.steps, 1000);
        assert_eq!(p.federation.local_epochs, 100);
        assert_eq!(p.federation.server_rounds, 10);
    }

    #[test]
    fn mismatched_model_and_unknown_preset_fail() {
        let mut c = RunConfig::desk();
        c.model = ModelSpec::Preset("paper".into());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.model = ModelSpec::Preset("huge".into());
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::desk();
        c.run_id = "../escape".into();
        assert!(c.validate().is_err());
    }
}
