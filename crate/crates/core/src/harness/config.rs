use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsh::{LshConfig, MAX_DISTANCE};
use crate::model::ModelConfig;
use crate::recompute::{AR_THRESHOLD, OMEGA_COLD, OMEGA_HOT};
use crate::retention::PatternKind;
use crate::schedule::{RetentionShape, ScheduleParams};
use crate::store::RopeMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    Zero,
    Random,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::None, Ablation::Zero, Ablation::Random];

    pub fn variant(self) -> &'static str {
        match self {
            Ablation::None => "semshare",
            Ablation::Zero => "ablation-zero",
            Ablation::Random => "ablation-random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    Eliminate,
    Replace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetentionConfig {
    pub enabled: bool,
    pub kind: PatternKind,
    /// Omitted: halve retention between the first and the last layer.
    pub rate: Option<f64>,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self { enabled: true, kind: PatternKind::ExpDecay, rate: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub mode: PerturbMode,
    pub fraction: f64,
    /// Number of corpus entries used by the corpus-level experiments.
    pub pairs: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { mode: PerturbMode::Replace, fraction: 0.3, pairs: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub similarity_threshold: f64,
    pub hot_cold_thres: f64,
    pub omega_cold: f64,
    pub omega_hot: f64,
    /// Per-layer ratios for layers after the first; empty selects 0.5 to 0.9.
    pub alpha_recomp: Vec<f64>,
    pub rope_storage_mode: RopeMode,
    pub ablation: Ablation,
    /// JSONL corpus; omitted selects the built-in synthetic corpus.
    pub corpus: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub n_new_tokens: usize,
    pub max_distance: f64,
    pub model: ModelConfig,
    pub lsh: LshConfig,
    pub retention: RetentionConfig,
    pub perturb: PerturbConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            similarity_threshold: 0.8,
            hot_cold_thres: AR_THRESHOLD,
            omega_cold: OMEGA_COLD,
            omega_hot: OMEGA_HOT,
            alpha_recomp: Vec::new(),
            rope_storage_mode: RopeMode::PostRope,
            ablation: Ablation::None,
            corpus: None,
            output: None,
            n_new_tokens: 16,
            max_distance: MAX_DISTANCE,
            model: ModelConfig::default(),
            lsh: LshConfig::default(),
            retention: RetentionConfig::default(),
            perturb: PerturbConfig::default(),
        }
    }
}

fn unit_open(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {x} must lie in (0, 1)")))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lsh.validate()?;
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(Error::Config(format!("similarity_threshold {} outside [0, 1]", self.similarity_threshold)));
        }
        unit_open("hot_cold_thres", self.hot_cold_thres)?;
        for (name, w) in [("omega_cold", self.omega_cold), ("omega_hot", self.omega_hot)] {
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::Config(format!("{name} = {w} must lie in (0, 1]")));
            }
        }
        if !self.alpha_recomp.is_empty() && self.alpha_recomp.len() + 1 != self.model.n_layers {
            return Err(Error::Config(format!(
                "alpha_recomp has {} entries; {} layers need {}",
                self.alpha_recomp.len(),
                self.model.n_layers,
                self.model.n_layers - 1
            )));
        }
        if self.n_new_tokens == 0 {
            return Err(Error::Config("n_new_tokens must be positive".into()));
        }
        if !(self.max_distance > 0.0) {
            return Err(Error::Config("max_distance must be positive".into()));
        }
        if let Some(rate) = self.retention.rate {
            if !(rate > 0.0) {
                return Err(Error::Config(format!("retention rate {rate} must be positive")));
            }
        }
        unit_open("perturb.fraction", self.perturb.fraction)?;
        Ok(())
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            omega_cold: self.omega_cold,
            omega_hot: self.omega_hot,
            alpha_recomp: self.alpha_recomp.clone(),
            retention: self
                .retention
                .enabled
                .then_some(RetentionShape { kind: self.retention.kind, rate: self.retention.rate }),
        }
    }
}
