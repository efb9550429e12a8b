use std::path::{Path, PathBuf};

use gues_core::adapt::{Emission, GuesConfig};
use gues_core::classifier::TrainConfig;
use gues_core::data::{ShiftParams, DEFAULT_GRADE_DISTRIBUTION};
use gues_core::pipeline::{AdaptMode, OnlineSettings};
use gues_core::tta::{DEFAULT_TTA_LR, DEFAULT_TTA_MOMENTUM};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Flat experiment configuration. Every key is optional; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub source_size: usize,
    pub target_size: usize,
    pub heldout_size: usize,
    pub grade_distribution: Vec<f64>,

    pub brightness_delta: f64,
    pub tint: [f64; 3],
    pub noise_sigma: f64,
    pub gamma: f64,
    pub blur_radius: usize,

    pub epochs: usize,
    pub train_batch_size: usize,
    pub train_learning_rate: f64,
    pub smoothing: f64,

    pub alpha: f64,
    pub beta: f64,
    pub gues_learning_rate: f64,
    pub gues_momentum: f64,
    pub batch_size: usize,
    pub steps_per_batch: usize,
    pub emission: String,

    pub mode: String,
    pub tta_learning_rate: f64,
    pub tta_momentum: f64,

    pub sweep_modes: Vec<String>,
    pub sweep_batch_sizes: Vec<usize>,
    pub sweep_alphas: Vec<f64>,
    pub sweep_betas: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
}

/// Generator learning rate for 64x64 retina-toy images. The library
/// default barely moves the generator within one pass; rates near 1 make
/// it oscillate with momentum 0.9, so the state it ends in is arbitrary.
pub const CALIBRATED_GUES_LEARNING_RATE: f64 = 0.1;

/// `start, start + step, ...` up to and including `end`, rounded to the
/// step's decimal grid so the values print cleanly.
pub fn grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step).round() as usize;
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    (0..=n)
        .map(|i| format!("{:.*}", decimals, start + i as f64 * step).parse().expect("formatted float"))
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let gues = GuesConfig::default();
        let shift = ShiftParams::DEFAULT_TARGET;
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("gues-out"),
            source_size: 2000,
            target_size: 1000,
            heldout_size: 500,
            grade_distribution: DEFAULT_GRADE_DISTRIBUTION.to_vec(),
            brightness_delta: shift.brightness_delta,
            tint: shift.tint,
            noise_sigma: shift.noise_sigma,
            gamma: shift.gamma,
            blur_radius: shift.blur_radius,
            epochs: train.epochs,
            train_batch_size: train.batch_size,
            train_learning_rate: train.learning_rate,
            smoothing: train.smoothing,
            alpha: gues.alpha,
            beta: gues.beta,
            gues_learning_rate: CALIBRATED_GUES_LEARNING_RATE,
            gues_momentum: gues.momentum,
            batch_size: gues.batch_size,
            steps_per_batch: gues.steps_per_batch,
            emission: gues.emission.as_str().to_string(),
            mode: AdaptMode::Gues.as_str().to_string(),
            tta_learning_rate: DEFAULT_TTA_LR,
            tta_momentum: DEFAULT_TTA_MOMENTUM,
            sweep_modes: ["tent", "gues", "gues+tent"].map(String::from).to_vec(),
            sweep_batch_sizes: vec![2, 4, 8, 16, 32, 64],
            sweep_alphas: grid(0.5, 1.5, 0.1),
            sweep_betas: grid(5e-5, 1.4e-4, 1e-5),
            sweep_seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.source_size == 0 || self.target_size == 0 || self.heldout_size == 0 {
            return bad("dataset sizes must be at least 1".into());
        }
        self.shift().validate()?;
        self.train_config().validate()?;
        self.gues_config()?.validate()?;
        self.adapt_mode()?;
        for m in &self.sweep_modes {
            parse_mode(m)?;
        }
        if self.sweep_batch_sizes.contains(&0) {
            return bad("sweep batch sizes must be at least 1".into());
        }
        if !(self.tta_learning_rate > 0.0) || !(0.0..1.0).contains(&self.tta_momentum) {
            return bad(format!(
                "tta learning rate {} / momentum {} out of range",
                self.tta_learning_rate, self.tta_momentum
            ));
        }
        Ok(())
    }

    pub fn shift(&self) -> ShiftParams {
        ShiftParams {
            brightness_delta: self.brightness_delta,
            tint: self.tint,
            noise_sigma: self.noise_sigma,
            gamma: self.gamma,
            blur_radius: self.blur_radius,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.train_batch_size,
            learning_rate: self.train_learning_rate,
            smoothing: self.smoothing,
            seed: self.seed,
        }
    }

    pub fn gues_config(&self) -> Result<GuesConfig, CliError> {
        let emission = Emission::parse(&self.emission)
            .ok_or_else(|| CliError::Config(format!("unknown emission '{}' (pre-update or post-update)", self.emission)))?;
        Ok(GuesConfig {
            alpha: self.alpha,
            beta: self.beta,
            learning_rate: self.gues_learning_rate,
            momentum: self.gues_momentum,
            batch_size: self.batch_size,
            seed: self.seed,
            steps_per_batch: self.steps_per_batch,
            emission,
        })
    }

    pub fn adapt_mode(&self) -> Result<AdaptMode, CliError> {
        parse_mode(&self.mode)
    }

    pub fn online_settings(&self, mode: AdaptMode) -> Result<OnlineSettings, CliError> {
        Ok(OnlineSettings {
            mode,
            gues: self.gues_config()?,
            tta_learning_rate: self.tta_learning_rate,
            tta_momentum: self.tta_momentum,
        })
    }
}

pub fn parse_mode(s: &str) -> Result<AdaptMode, CliError> {
    s.parse::<AdaptMode>().map_err(|_| {
        let known: Vec<&str> = AdaptMode::ALL.iter().map(|m| m.as_str()).collect();
        CliError::Usage(format!("unknown mode '{s}' (expected one of {})", known.join(", ")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_json(r#"{"seed": 1, "learning_rat": 0.1}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn grids_match_documented_ranges() {
        let a = grid(0.5, 1.5, 0.1);
        assert_eq!(a.len(), 11);
        assert_eq!(a[0], 0.5);
        assert_eq!(a[10], 1.5);
        let b = grid(5e-5, 1.4e-4, 1e-5);
        assert_eq!(b.len(), 10);
        assert_eq!(b[1], 6e-5);
        assert_eq!(b[9], 1.4e-4);
        assert_eq!(a[1], 0.6);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert_eq!(ExperimentConfig::from_json(r#"{"gamma": -1}"#).unwrap_err().exit_code(), 2);
        assert_eq!(ExperimentConfig::from_json(r#"{"mode": "bogus"}"#).unwrap_err().exit_code(), 2);
        assert_eq!(ExperimentConfig::from_json(r#"{"emission": "later"}"#).unwrap_err().exit_code(), 2);
    }
}
