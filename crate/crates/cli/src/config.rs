//! Run configuration: every pipeline parameter in one structure, loaded from
//! a TOML file with `--set` flag overrides (flags win), validated once, and
//! content-hashed so artifacts can be checked against the configuration that
//! produced them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gsecnet_core::geometry::NormalConfig;
use gsecnet_core::model::{InferConfig, ModelConfig, TrainConfig};
use gsecnet_core::neuralnet::{FocalLoss, Plateau};
use gsecnet_core::pillars::GridConfig;

use crate::{usage, CliError};

/// All module parameters for one run. Field defaults are the shipped
/// defaults; the content hash changes iff any field changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Base seed; per-frame work derives its stream by offsetting this.
    pub seed: u64,
    /// Pillar grid geometry: 0.8 m pillars on a 128x128 grid over +-51.2 m,
    /// 64 points per pillar.
    pub grid: GridConfig,
    pub normals: NormalsSection,
    pub sampling: SamplingSection,
    pub labels: LabelsSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub infer: InferSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridConfig::default(),
            normals: NormalsSection::default(),
            sampling: SamplingSection::default(),
            labels: LabelsSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            infer: InferSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalsSection {
    /// Plane-fit neighborhood size (the point itself included).
    pub k: usize,
    /// Flip the fitted normal to the geometric surface direction.
    pub corrected_sign: bool,
}

impl Default for NormalsSection {
    fn default() -> Self {
        Self {
            k: 30,
            corrected_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSection {
    /// Global point budget for distribution-controlled undersampling.
    pub budget: usize,
    /// Ring width of the distance histogram, meters.
    pub section_interval: f64,
    /// Undersampling range cutoff, meters.
    pub range_max: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            budget: 100_000,
            section_interval: 0.8,
            range_max: 51.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelsSection {
    /// Semantic classes counted as ground (SemanticKITTI: road, parking,
    /// sidewalk, other-ground). Class 0 is always treated as unscored.
    pub ground_classes: Vec<u16>,
    /// A pillar is labelled ground when at least this fraction of its
    /// retained points carries a ground class.
    pub fraction_threshold: f64,
}

impl Default for LabelsSection {
    fn default() -> Self {
        Self {
            ground_classes: gsecnet_core::pillars::DEFAULT_GROUND_CLASSES.to_vec(),
            fraction_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Use all 12 point features; `false` drops the 3 normal components.
    pub with_normals: bool,
    /// Attach channel+spatial attention after each encoder block.
    pub attention: bool,
    /// Pseudo-image channels produced by the pillar encoder.
    pub encoder_channels: usize,
    /// (enc1, enc2, enc3, bottleneck) output channels.
    pub ladder: [usize; 4],
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            with_normals: true,
            attention: true,
            encoder_channels: 64,
            ladder: [64, 64, 128, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Focal-loss ground-class weight.
    pub focal_alpha: f64,
    /// Focal-loss focusing exponent.
    pub focal_power: f64,
    /// Learning-rate multiplier applied when the loss plateaus.
    pub plateau_factor: f64,
    /// Epochs without sufficient improvement before the rate drops.
    pub plateau_patience: usize,
    /// Relative improvement below which an epoch counts as stalled.
    pub plateau_rel_threshold: f64,
    /// Score the validation set every this many epochs.
    pub val_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 0.003,
            weight_decay: 0.0005,
            focal_alpha: 0.25,
            focal_power: 2.0,
            plateau_factor: 0.35,
            plateau_patience: 3,
            plateau_rel_threshold: 1e-4,
            val_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSection {
    /// Ground probability threshold on the sigmoid output.
    pub threshold: f64,
    /// Apply the sampling budget before inference. Off by default so
    /// prediction lines stay index-aligned with the input scan.
    pub apply_budget: bool,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            apply_budget: false,
        }
    }
}

impl RunConfig {
    /// Loads the file (when given), applies `--set key=value` overrides on
    /// top, and validates the result. Unknown keys are rejected.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
        let schema = toml::Table::try_from(RunConfig::default())
            .expect("default config serializes to a table");
        let mut table = schema.clone();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| {
                CliError::Data(format!("config file {}: {e}", p.display()))
            })?;
            let user: toml::Table = text
                .parse()
                .map_err(|e| CliError::Usage(format!("config file {}: {e}", p.display())))?;
            check_known(&user, &schema, "")?;
            merge(&mut table, user);
        }
        for set in sets {
            apply_set(&mut table, set)?;
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Content hash over the canonical JSON form: stable across runs, and
    /// different whenever any field differs.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config always serializes");
        let digest = Sha256::digest(&json);
        u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.grid.validate().map_err(usage)?;
        self.model_config().validate().map_err(usage)?;
        if self.normals.k < 3 {
            return Err(CliError::Usage("normals.k must be at least 3".into()));
        }
        if self.sampling.budget == 0 {
            return Err(CliError::Usage("sampling.budget must be positive".into()));
        }
        if !(self.sampling.section_interval > 0.0) || !(self.sampling.range_max > 0.0) {
            return Err(CliError::Usage(
                "sampling.section_interval and sampling.range_max must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.labels.fraction_threshold) {
            return Err(CliError::Usage(
                "labels.fraction_threshold must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.infer.threshold) {
            return Err(CliError::Usage("infer.threshold must lie in [0, 1]".into()));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.val_every == 0 {
            return Err(CliError::Usage(
                "train.epochs, train.batch_size, and train.val_every must be >= 1".into(),
            ));
        }
        if !(t.lr > 0.0) || t.weight_decay < 0.0 {
            return Err(CliError::Usage(
                "train.lr must be positive and train.weight_decay non-negative".into(),
            ));
        }
        if !(t.plateau_factor > 0.0 && t.plateau_factor < 1.0) || t.plateau_patience == 0 {
            return Err(CliError::Usage(
                "train.plateau_factor must lie in (0, 1) and plateau_patience be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn normal_config(&self) -> NormalConfig {
        NormalConfig {
            k: self.normals.k,
            corrected_sign: self.normals.corrected_sign,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            with_normals: self.model.with_normals,
            encoder_channels: self.model.encoder_channels,
            ladder: self.model.ladder,
            attention: self.model.attention,
            dims: self.grid.dims,
            max_points: self.grid.max_points,
        }
    }

    pub fn train_config(&self, checkpoint: Option<PathBuf>) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            focal: FocalLoss {
                alpha: t.focal_alpha,
                power: t.focal_power,
            },
            plateau: Plateau::new(t.plateau_factor, t.plateau_patience, t.plateau_rel_threshold),
            seed: self.seed,
            val_every: t.val_every,
            checkpoint,
            config_hash: self.hash(),
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            grid: self.grid,
            normals: self.normal_config(),
            budget: self.infer.apply_budget.then_some(self.sampling.budget),
            section_interval: self.sampling.section_interval,
            range_max: self.sampling.range_max,
            threshold: self.infer.threshold,
            seed: self.seed,
        }
    }
}

/// Recursively overlays `user` onto `base`; scalar and array values replace,
/// tables merge key by key.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Rejects keys that do not exist in the default-config schema, so typos
/// fail loudly instead of silently configuring nothing.
fn check_known(user: &toml::Table, schema: &toml::Table, prefix: &str) -> Result<(), CliError> {
    for (key, value) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match schema.get(key) {
            None => return Err(CliError::Usage(format!("unknown config key `{path}`"))),
            Some(toml::Value::Table(s)) => {
                if let toml::Value::Table(u) = value {
                    check_known(u, s, &path)?;
                }
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Applies one `--set section.key=value` override. The value is parsed as a
/// TOML literal (numbers, booleans, arrays); anything unparseable is taken
/// as a bare string.
fn apply_set(table: &mut toml::Table, set: &str) -> Result<(), CliError> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{set}`")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    let mut current = table;
    for (i, segment) in segments.iter().enumerate() {
        if i + 1 == segments.len() {
            if !current.contains_key(*segment) {
                return Err(CliError::Usage(format!("unknown config key `{path}`")));
            }
            current.insert(segment.to_string(), value);
            return Ok(());
        }
        current = match current.get_mut(*segment) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(CliError::Usage(format!("unknown config key `{path}`"))),
        };
    }
    Err(CliError::Usage(format!("empty --set key in `{set}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(config.hash(), RunConfig::default().hash());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = RunConfig::default().hash();
        let mut c = RunConfig::default();
        c.seed = 1;
        assert_ne!(c.hash(), base);
        let mut c = RunConfig::default();
        c.train.lr = 0.004;
        assert_ne!(c.hash(), base);
        let mut c = RunConfig::default();
        c.model.with_normals = false;
        assert_ne!(c.hash(), base);
        let mut c = RunConfig::default();
        c.grid.pillar_size = (1.6, 1.6);
        assert_ne!(c.hash(), base);
    }

    #[test]
    fn set_overrides_win_over_file_defaults() {
        let config = RunConfig::load(
            None,
            &[
                "train.epochs=7".to_string(),
                "model.ladder=[16, 16, 32, 64]".to_string(),
                "infer.apply_budget=true".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.train.epochs, 7);
        assert_eq!(config.model.ladder, [16, 16, 32, 64]);
        assert!(config.infer.apply_budget);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let err = RunConfig::load(None, &["train.epoch=7".to_string()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[grid]\npilar_size = [1.6, 1.6]\n").unwrap();
        let err = RunConfig::load(Some(&path), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("pilar_size"));
    }

    #[test]
    fn file_then_flags_layering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 9\n[train]\nepochs = 3\nbatch_size = 4\n",
        )
        .unwrap();
        let config = RunConfig::load(Some(&path), &["train.epochs=5".to_string()]).unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.train.epochs, 5);
        assert_eq!(config.train.batch_size, 4);
        // untouched fields keep shipped defaults
        assert_eq!(config.train.lr, 0.003);
        assert_eq!(config.grid.pillar_size, (0.8, 0.8));
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        for set in [
            "infer.threshold=1.5",
            "train.epochs=0",
            "sampling.budget=0",
            "normals.k=2",
            "train.plateau_factor=1.0",
        ] {
            let err = RunConfig::load(None, &[set.to_string()]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{set} should be a usage error");
        }
    }
}
