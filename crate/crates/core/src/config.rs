//! Run configuration: sectioned key=value (TOML) with typed parsing.
//! Unknown keys are hard errors, so hyperparameter typos fail loudly.
//! Every field has a default; the fully resolved config is echoed into each
//! output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MatchRule;
use crate::featurize::{DasConfig, DbmConfig, RlapConfig, SaeConfig};
use crate::lm::LmConfig;
use crate::world::{SplitMode, WorldSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Worker threads for tuple scoring and sweep cells (0 = all cores).
    pub threads: usize,
    pub world: WorldSpec,
    pub lm: LmConfig,
    pub tuples: TupleCounts,
    pub filter: FilterConfig,
    pub featurize: FeaturizeConfig,
    pub eval: EvalConfig,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            world: WorldSpec::default(),
            lm: LmConfig::default(),
            tuples: TupleCounts::default(),
            filter: FilterConfig::default(),
            featurize: FeaturizeConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepGrid::default(),
        }
    }
}

/// Intervention tuples generated per (mode, part, attribute).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TupleCounts {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for TupleCounts {
    fn default() -> Self {
        TupleCounts {
            n_train: 400,
            n_dev: 200,
            n_test: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Minimum first-token accuracy for an entity or template to survive.
    pub threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { threshold: 0.9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeConfig {
    pub das: DasConfig,
    pub dbm: DbmConfig,
    pub sae: SaeConfig,
    pub rlap: RlapConfig,
    pub pca: PcaSelectConfig,
    /// Cap on activations collected for PCA/SAE/RLAP fitting.
    pub activation_cap: usize,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        FeaturizeConfig {
            das: DasConfig::default(),
            dbm: DbmConfig::default(),
            sae: SaeConfig::default(),
            rlap: RlapConfig::default(),
            pca: PcaSelectConfig::default(),
            activation_cap: 4000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSelectConfig {
    /// Inverse L1 penalty of the selection classifier.
    pub c: f64,
    /// Weight threshold for selecting a dimension.
    pub eps: f64,
}

impl Default for PcaSelectConfig {
    fn default() -> Self {
        PcaSelectConfig { c: 10.0, eps: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split_mode: SplitMode,
    /// Site layer used by fit-featurizer and evaluate (sweep overrides).
    pub layer: usize,
    pub match_rule: MatchRule,
    /// Dump per-tuple traces next to scores.csv.
    pub traces: bool,
    /// Use the raw (non-residual-restoring) SAE edit.
    pub sae_raw_edit: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split_mode: SplitMode::Entity,
            layer: 3,
            match_rule: MatchRule::FirstToken,
            traces: false,
            sae_raw_edit: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub layers: Vec<usize>,
    pub ks: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            layers: vec![1, 2, 3, 4, 5],
            ks: vec![2, 4, 8, 16, 32],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::spec(format!(
                "config file not found: {}",
                path.display()
            )));
        }
        let body = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&body).map_err(|e| Error::spec(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.lm.validate()?;
        if !(0.0..=1.0).contains(&self.filter.threshold) && self.filter.threshold <= 1.0 {
            return Err(Error::spec("filter.threshold must be a fraction".to_string()));
        }
        Ok(())
    }

    /// Serialized form echoed into output directories.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}
