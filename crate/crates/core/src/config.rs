//! Whole-run configuration as read from `--config cfg.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{PurgeCandidateSet, SelectionMode, TtaOptions, Variant};
use crate::corruptions::{CorruptionKind, CorruptionSpec};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::{reset_batchnorm, BnMode, ModelConfig, TrainerConfig};
use crate::purge::StatsOrigin;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub variant: Variant,
    pub corruption: CorruptionKind,
    pub severity: u8,
    pub candidates: Vec<usize>,
    pub batch_size: usize,
    /// `None` picks the variant's default.
    pub bn_mode: Option<BnMode>,
    pub selection: SelectionMode,
    pub concurrent_arms: bool,
    pub stats_origin: StatsOrigin,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PgSp,
            corruption: CorruptionKind::Background,
            severity: 3,
            candidates: PurgeCandidateSet::default_for(ModelConfig::default().num_tokens).as_slice().to_vec(),
            batch_size: 32,
            bn_mode: None,
            selection: SelectionMode::PerSample,
            concurrent_arms: false,
            stats_origin: StatsOrigin::EmbeddingOutput,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub weights: PathBuf,
    pub stats: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            weights: "weights.pgw".into(),
            stats: "stats.pgw".into(),
            out_dir: "runs".into(),
        }
    }
}

/// Everything a pipeline run depends on.
///
/// `seed` is the root seed; data, initialization, training order and
/// corruptions each derive their own stream from it. `trainer.seed` is
/// ignored in favour of the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub dataset: DatasetSpec,
    pub tta: TtaConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            dataset: DatasetSpec::default(),
            tta: TtaConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid_arg(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid_arg(format!("{}: {e}", path.display())))
    }

    /// Cross-field checks; every subcommand calls this before doing work.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        let n = self.dataset.points_per_cloud;
        if self.model.num_tokens > n {
            return Err(Error::invalid_arg(format!(
                "model.num_tokens ({}) exceeds dataset.points_per_cloud ({n})",
                self.model.num_tokens
            )));
        }
        if self.model.k > n {
            return Err(Error::invalid_arg(format!(
                "model.k ({}) exceeds dataset.points_per_cloud ({n})",
                self.model.k
            )));
        }
        if self.model.n_classes != self.dataset.classes.len() {
            return Err(Error::invalid_arg(format!(
                "model.n_classes ({}) differs from the number of dataset classes ({})",
                self.model.n_classes,
                self.dataset.classes.len()
            )));
        }
        if self.trainer.epochs == 0 || self.trainer.batch_size == 0 {
            return Err(Error::invalid_arg("trainer epochs and batch_size must be positive"));
        }
        if !(self.trainer.learning_rate > 0.0) || !(0.0..1.0).contains(&self.trainer.momentum) {
            return Err(Error::invalid_arg(
                "trainer needs learning_rate > 0 and momentum in [0, 1)",
            ));
        }
        self.corruption_spec()?;
        self.candidate_set()?;
        if self.tta.batch_size == 0 {
            return Err(Error::invalid_arg("tta.batch_size must be positive"));
        }
        reset_batchnorm(self.tta.batch_size, self.bn_mode())?;
        Ok(())
    }

    pub fn candidate_set(&self) -> Result<PurgeCandidateSet> {
        PurgeCandidateSet::new(self.tta.candidates.clone(), self.model.num_tokens)
    }

    pub fn bn_mode(&self) -> BnMode {
        self.tta.bn_mode.unwrap_or_else(|| self.tta.variant.default_bn_mode())
    }

    /// Corruption with its seed drawn from the root seed's corruption stream.
    pub fn corruption_spec(&self) -> Result<CorruptionSpec> {
        CorruptionSpec::new(
            self.tta.corruption,
            self.tta.severity,
            seed::derive(self.seed, Stream::Corruption),
        )
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            seed: self.seed,
            ..self.trainer.clone()
        }
    }

    pub fn tta_options(&self) -> Result<TtaOptions> {
        let mut o = TtaOptions::new(self.tta.variant, self.candidate_set()?);
        o.batch_size = self.tta.batch_size;
        o.bn_mode = self.bn_mode();
        o.selection = self.tta.selection;
        o.concurrent_arms = self.tta.concurrent_arms;
        o.corruption = self.corruption_spec()?;
        Ok(o)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON, with output
    /// paths excluded so relocating a run keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        c.trainer.seed = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn cross_field_errors() {
        let mut c = RunConfig::default();
        c.dataset.points_per_cloud = 20;
        assert!(c.validate().unwrap_err().to_string().contains("num_tokens"));

        let mut c = RunConfig::default();
        c.tta.candidates = vec![0, 32];
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.model.n_classes = 3;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.tta.batch_size = 1;
        assert!(c.validate().is_err());
        c.tta.bn_mode = Some(BnMode::Frozen);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = RunConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "tta": {"severity": 5}}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.tta.severity, 5);
        assert_eq!(partial.tta.batch_size, 32);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 4}"#).is_err());
    }

    #[test]
    fn hash_ignores_paths_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
