use std::path::{Path, PathBuf};

use autograd::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::attack::DistortionKind;
use crate::audio::{StftConfig, MAX_MASK_RATIO};
use crate::error::{Error, Result};
use crate::manipulator::ManipulatorConfig;
use crate::models::ModelConfig;
use crate::vq::{ConvNetConfig, ReinitConfig, DEFAULT_LAMBDA_ADV};

use super::corpus::SyntheticSpeech;

/// Learning-rate warmup followed by inverse-square-root decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
}

impl Schedule {
    /// Learning rate for 1-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub clip_seconds: f64,
    pub schedule: Schedule,
    pub grad_clip: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub lambda_res: f64,
    pub lambda_res_late: f64,
    /// Fraction of `steps` after which `lambda_res_late` applies.
    pub lambda_res_switch: f64,
    pub lambda_adv: f64,
    /// Requires an adversarial objective to be supplied to the trainer.
    pub adversarial: bool,
    pub catalog: Vec<DistortionKind>,
    /// Probability that a training clip has its masked tokens replaced by
    /// uniformly random ids; such clips carry no reconstruction term.
    pub substitute_prob: f64,
    /// Within a substituted clip, the share of masked frames that get the
    /// nearest code of the other parity instead of a uniform id.
    pub nearest_substitute_prob: f64,
    pub reinit: ReinitConfig,
    /// Steps between dead-code checks; 0 disables reinitialization.
    pub reinit_every: usize,
}

impl Stage1Config {

    /// Restoration weight in effect at 1-based `step`.
    pub fn lambda_res_at(&self, step: usize) -> f64 {
        if (step as f64) > self.lambda_res_switch * self.steps as f64 {
            self.lambda_res_late
        } else {
            self.lambda_res
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch_size: usize,
    pub clip_seconds: f64,
    pub schedule: Schedule,
    pub grad_clip: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Held-out synthetic clips (or the last clips of a WAV corpus).
    pub clips: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Folder of WAV files; the synthetic generator is used when absent.
    pub dir: Option<PathBuf>,
    pub resample: bool,
    pub synthetic: SyntheticSpeech,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub calibration: CalibrationConfig,
    pub corpus: CorpusConfig,
}

impl Default for TrainConfig {
    /// Full-size networks with desk-scale step counts.
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            stage1: Stage1Config {
                steps: 5_000,
                batch_size: 8,
                clip_seconds: 1.0,
                schedule: Schedule { peak_lr: 1e-3, warmup_steps: 500 },
                grad_clip: 5.0,
                gamma_min: 0.1,
                gamma_max: MAX_MASK_RATIO,
                lambda_res: 1.0,
                lambda_res_late: 0.5,
                lambda_res_switch: 0.5,
                lambda_adv: DEFAULT_LAMBDA_ADV,
                adversarial: false,
                catalog: DistortionKind::ALL.to_vec(),
                substitute_prob: 0.5,
                nearest_substitute_prob: 0.5,
                reinit: ReinitConfig::default(),
                reinit_every: 50,
            },
            stage2: Stage2Config {
                steps: 2_000,
                batch_size: 8,
                clip_seconds: 2.0,
                schedule: Schedule { peak_lr: 1e-3, warmup_steps: 200 },
                grad_clip: 5.0,
                gamma_min: 0.1,
                gamma_max: MAX_MASK_RATIO,
            },
            calibration: CalibrationConfig { clips: 16, ratio: 0.1 },
            corpus: CorpusConfig { dir: None, resample: true, synthetic: SyntheticSpeech { clips: 64, ..Default::default() } },
        }
    }
}

impl TrainConfig {
    /// Small networks and a few hundred steps on synthetic audio: minutes on one core.
    pub fn smoke() -> Self {
        let base = Self::default();
        Self {
            model: ModelConfig {
                codebook_size: 32,
                code_dim: 32,
                encoder: ConvNetConfig { hidden: 64, kernel: 3, dilations: vec![1, 1, 1] },
                decoder: ConvNetConfig { hidden: 64, kernel: 3, dilations: vec![1, 2, 1] },
                manipulator: ManipulatorConfig {
                    layers: 2,
                    hidden: 64,
                    heads: 2,
                    filter: 128,
                    kernel: 5,
                    embedding: 64,
                    max_len: 512,
                },
                ..ModelConfig::default()
            },
            stage1: Stage1Config {
                steps: 1500,
                batch_size: 4,
                clip_seconds: 0.5,
                schedule: Schedule { peak_lr: 2e-3, warmup_steps: 200 },
                grad_clip: 1.0,
                catalog: vec![DistortionKind::NONE],
                ..base.stage1
            },
            stage2: Stage2Config {
                steps: 300,
                batch_size: 4,
                clip_seconds: 1.0,
                schedule: Schedule { peak_lr: 2e-3, warmup_steps: 30 },
                ..base.stage2
            },
            calibration: CalibrationConfig { clips: 8, ratio: 0.1 },
            corpus: CorpusConfig {
                dir: None,
                resample: true,
                synthetic: SyntheticSpeech { clips: 24, seconds: 2.0, ..Default::default() },
            },
            ..base
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        for (lo, hi) in [(s1.gamma_min, s1.gamma_max), (s2.gamma_min, s2.gamma_max)] {
            if !(lo > 0.0 && lo <= hi && hi <= MAX_MASK_RATIO) {
                return Err(Error::Config(format!("mask ratio range [{lo}, {hi}] must lie within (0, 0.5]")));
            }
        }
        let weights = [s1.lambda_res, s1.lambda_res_late, s1.lambda_adv, s1.grad_clip, s2.grad_clip];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights and clip norms must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&s1.substitute_prob) || !(0.0..=1.0).contains(&s1.nearest_substitute_prob) {
            return Err(Error::Config("substitute_prob is a probability".into()));
        }
        if !(0.0..=1.0).contains(&s1.lambda_res_switch) {
            return Err(Error::Config("lambda_res_switch is a fraction of the run".into()));
        }
        if s1.batch_size == 0 || s2.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if s1.catalog.is_empty() {
            return Err(Error::Config("distortion catalog must not be empty".into()));
        }
        let frames = |secs: f64| self.model.stft.frames((secs * self.model.sample_rate as f64) as usize);
        let min_len = crate::audio::StftEngine::new(self.model.stft)?.min_len();
        if ((s1.clip_seconds * self.model.sample_rate as f64) as usize) < min_len.max(2048) {
            return Err(Error::Config("stage-1 clips are shorter than the widest loss window".into()));
        }
        if frames(s2.clip_seconds) < 2 {
            return Err(Error::Config("stage-2 clips are too short".into()));
        }
        if !(self.calibration.ratio > 0.0 && self.calibration.ratio <= MAX_MASK_RATIO) {
            return Err(Error::Config("calibration ratio must lie in (0, 0.5]".into()));
        }
        Ok(())
    }

    pub fn stft(&self) -> StftConfig {
        self.model.stft
    }
}
