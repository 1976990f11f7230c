//! Run configuration: one flat TOML table.
//!
//! Only `seed` is required; every other key has a default, and unknown keys
//! are rejected. [`RunConfig::to_toml`] prints the resolved table with all
//! defaults filled in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::modulation::{ModulationConfig, SelfWeightMode};
use crate::trainer::TrainConfig;

/// Added to the run seed to generate the held-out synthetic classes.
pub const HELDOUT_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    /// UBC PhotoTour subset directory; synthetic data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ubc_dir: Option<PathBuf>,
    /// Subset evaluated with `pairs_file`; defaults to `ubc_dir`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_ubc_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs_file: Option<PathBuf>,
    pub patch_size: usize,

    pub synth_classes: usize,
    pub synth_patches_per_class: usize,
    pub synth_max_rotation: f64,
    pub synth_max_translation: f64,
    pub synth_max_brightness: f64,
    pub synth_max_contrast: f64,
    pub synth_noise_std: f64,
    pub synth_blobs: usize,
    /// Held-out synthetic classes used for evaluation.
    pub eval_classes: usize,
    pub eval_matches: usize,
    pub eval_non_matches: usize,

    pub aug_rot90_flip: bool,
    pub aug_max_angle: f64,
    pub aug_min_crop: f64,

    pub widths: Vec<usize>,
    pub output_dim: usize,
    pub dropout: f64,
    pub use_frn: bool,

    pub batch_size: usize,
    pub iterations: u64,
    pub lr_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,

    pub m: f64,
    pub alpha: f64,
    pub tau: f64,
    pub self_weight: SelfWeightMode,
    pub power_adjust: bool,

    pub out_dir: PathBuf,
    /// Metrics are written every `log_interval` iterations and at the end.
    pub log_interval: u64,
    /// Extra numbered checkpoints every this many iterations; 0 keeps only
    /// the final one.
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let aug = AugmentConfig::default();
        let enc = EncoderConfig::default();
        let train = TrainConfig::default();
        let md = ModulationConfig::default();
        Self {
            seed: 0,
            ubc_dir: None,
            eval_ubc_dir: None,
            pairs_file: None,
            patch_size: synth.patch_size,
            synth_classes: synth.num_classes,
            synth_patches_per_class: synth.patches_per_class,
            synth_max_rotation: synth.max_rotation,
            synth_max_translation: synth.max_translation,
            synth_max_brightness: synth.max_brightness,
            synth_max_contrast: synth.max_contrast,
            synth_noise_std: synth.noise_std,
            synth_blobs: synth.blobs,
            eval_classes: 500,
            eval_matches: 1000,
            eval_non_matches: 1000,
            aug_rot90_flip: aug.rot90_flip,
            aug_max_angle: aug.max_angle,
            aug_min_crop: aug.min_crop,
            widths: enc.widths,
            output_dim: enc.output_dim,
            dropout: enc.dropout_rate,
            use_frn: enc.use_frn,
            batch_size: train.batch_size,
            iterations: train.total_iterations,
            lr_init: train.lr_init,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            warmup_fraction: train.warmup_fraction,
            m: md.m,
            alpha: md.alpha,
            tau: md.tau,
            self_weight: md.self_weight,
            power_adjust: md.power_adjust,
            out_dir: PathBuf::from("runs/sdgm"),
            log_interval: 1,
            checkpoint_interval: 0,
        }
    }
}

fn toml_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim().replace('\n', " "))
}

impl RunConfig {
    /// Parses TOML text. `seed_override` replaces (or supplies) `seed`.
    pub fn from_toml_str(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(toml_error)?;
        if let Some(seed) = seed_override {
            let seed = i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} exceeds i64")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        if !table.contains_key("seed") {
            return Err(Error::Config("missing required key `seed`".into()));
        }
        let cfg: Self = table.try_into().map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, seed_override).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat table of plain values")
    }

    pub fn validate(&self) -> Result<()> {
        for (key, path) in [
            ("ubc_dir", &self.ubc_dir),
            ("eval_ubc_dir", &self.eval_ubc_dir),
            ("pairs_file", &self.pairs_file),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("`{key}` path {} does not exist", p.display())));
                }
            }
        }
        if self.log_interval == 0 {
            return Err(Error::Config("`log_interval` must be positive".into()));
        }
        if self.eval_matches == 0 || self.eval_non_matches == 0 {
            return Err(Error::Config("`eval_matches` and `eval_non_matches` must be positive".into()));
        }
        self.synth().validate()?;
        self.augment().validate()?;
        self.encoder().validate()?;
        self.train().validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.patch_size * self.patch_size,
            widths: self.widths.clone(),
            output_dim: self.output_dim,
            dropout_rate: self.dropout,
            use_frn: self.use_frn,
            seed: self.seed,
        }
    }

    pub fn modulation(&self) -> ModulationConfig {
        ModulationConfig {
            m: self.m,
            alpha: self.alpha,
            tau: self.tau,
            self_weight: self.self_weight,
            power_adjust: self.power_adjust,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            total_iterations: self.iterations,
            lr_init: self.lr_init,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
            modulation: self.modulation(),
            seed: self.seed,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_classes: self.synth_classes,
            patches_per_class: self.synth_patches_per_class,
            patch_size: self.patch_size,
            max_rotation: self.synth_max_rotation,
            max_translation: self.synth_max_translation,
            max_brightness: self.synth_max_brightness,
            max_contrast: self.synth_max_contrast,
            noise_std: self.synth_noise_std,
            blobs: self.synth_blobs,
            seed: self.seed,
        }
    }

    /// Same generator, disjoint classes.
    pub fn heldout_synth(&self) -> SynthConfig {
        SynthConfig {
            num_classes: self.eval_classes,
            seed: self.seed.wrapping_add(HELDOUT_SEED_OFFSET),
            ..self.synth()
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            rot90_flip: self.aug_rot90_flip,
            max_angle: self.aug_max_angle,
            min_crop: self.aug_min_crop,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        let err = RunConfig::from_toml_str("batch_size = 8\n", None).unwrap_err();
        assert!(err.to_string().contains("`seed`"), "{err}");
        assert_eq!(RunConfig::from_toml_str("", Some(3)).unwrap().seed, 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("seed = 1\nbatchsize = 8\n", None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("batchsize"), "{err}");
    }

    #[test]
    fn wrong_type_is_a_config_error() {
        let err = RunConfig::from_toml_str("seed = 1\nself_weight = \"cosine\"\n", None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = RunConfig::from_toml_str("seed = 5\nwidths = [8, 4]\nself_weight = \"l2\"\n", None).unwrap();
        assert_eq!(cfg.self_weight, SelfWeightMode::L2);
        let back = RunConfig::from_toml_str(&cfg.to_toml(), None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn override_wins_and_derived_configs_follow() {
        let cfg = RunConfig::from_toml_str("seed = 5\npatch_size = 8\n", Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.encoder().input_dim, 64);
        assert_eq!(cfg.train().seed, 9);
        assert_eq!(cfg.heldout_synth().seed, 9 + HELDOUT_SEED_OFFSET);
        assert_eq!(cfg.heldout_synth().num_classes, cfg.eval_classes);
    }

    #[test]
    fn missing_path_is_rejected() {
        let err = RunConfig::from_toml_str("seed = 1\nubc_dir = \"/nonexistent/liberty\"\n", None).unwrap_err();
        assert!(err.to_string().contains("ubc_dir"), "{err}");
    }
}
