//! Experiment configuration, read from TOML.
//!
//! ```toml
//! algorithm = "fedalign"
//! seed = 0
//! seeds = 5
//! target = "all"
//! out_dir = "runs/default"
//!
//! [federation]
//! rounds = 10
//! clients = 3
//!
//! [loss]
//! lambda1 = 1.0
//! ```
//!
//! Every key has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::federation::{Algorithm, FederationConfig, RunSettings};
use crate::losses::LossConfig;
use crate::mixstyle::MixConfig;
use crate::model::ArchConfig;

/// Held-out domain selection: `"all"` or a domain id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    Id(u16),
    Name(String),
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::Name("all".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub algorithms: Vec<Algorithm>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            algorithms: vec![Algorithm::FedAlign, Algorithm::FedAvg],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub clients: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            clients: vec![4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub seeds: usize,
    pub target: TargetSpec,
    pub out_dir: PathBuf,
    pub federation: FederationConfig,
    pub loss: LossConfig,
    pub mixstyle: MixConfig,
    pub data: DataConfig,
    pub compare: CompareConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedAlign,
            seed: 0,
            seeds: 5,
            target: TargetSpec::default(),
            out_dir: PathBuf::from("runs/default"),
            federation: FederationConfig::default(),
            loss: LossConfig::default(),
            mixstyle: MixConfig::default(),
            data: DataConfig::default(),
            compare: CompareConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Collects every problem before reporting.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.seeds == 0 {
            errors.push("seeds must be ≥ 1".to_string());
        }
        match &self.target {
            TargetSpec::Name(n) if n != "all" => {
                errors.push(format!("target must be \"all\" or a domain id, got {n:?}"))
            }
            TargetSpec::Id(d) if *d as usize >= self.data.domains => errors.push(format!(
                "target {d} out of range for {} domains",
                self.data.domains
            )),
            _ => {}
        }
        self.federation.validate(&mut errors, "federation");
        self.loss.validate(&mut errors, "loss");
        self.mixstyle.validate(&mut errors, "mixstyle");
        self.data.validate(&mut errors, "data");
        if self.compare.algorithms.len() < 2 {
            errors.push("compare.algorithms needs at least two entries".to_string());
        }
        if self.sweep.clients.is_empty() || self.sweep.clients.contains(&0) {
            errors.push("sweep.clients must be a nonempty list of positive counts".to_string());
        }
        let train_samples = self.data.per_domain * self.data.domains.saturating_sub(1);
        if self.data.path.is_none() && self.federation.clients > train_samples {
            errors.push(format!(
                "federation.clients = {} exceeds the {train_samples} training samples",
                self.federation.clients
            ));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Held-out domains this config covers.
    pub fn targets(&self, domains: usize) -> Vec<u16> {
        match self.target {
            TargetSpec::Id(d) => vec![d],
            TargetSpec::Name(_) => (0..domains as u16).collect(),
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn run_settings(&self, algorithm: Algorithm, num_classes: usize) -> RunSettings {
        RunSettings {
            algorithm,
            federation: self.federation.clone(),
            loss: self.loss.clone(),
            mix: self.mixstyle.clone(),
            arch: ArchConfig::with_classes(num_classes),
        }
    }
}
