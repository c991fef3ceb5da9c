//! Flat `key = value` run configuration.
//!
//! Model keys: `image_height`, `image_width`, `stage_blocks`,
//! `stage_channels`, `cbr`, `csi`, `state_dim`, `expand`, `conv_kernel`,
//! `abar_rule`, `csi_len`, `csi_max_db`, `embed_kernel`.
//!
//! Training keys: `learning_rate`, `batch_size`, `steps`, `channel`,
//! `snr_min`, `snr_max`, `seed`, `crop`, `synthetic_images`, `grad_clip`.
//!
//! `#` starts a comment line. Unknown keys are errors.

use std::path::Path;

use mambajscc_core::{ChannelKind, ModelConfig};

use crate::error::{io_err, HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub channel: ChannelKind,
    /// Training SNRs are drawn uniformly from `[snr_min, snr_max]` dB.
    pub snr_min: f64,
    pub snr_max: f64,
    pub seed: u64,
    /// Side of the square training crops.
    pub crop: usize,
    /// Size of the generated corpus when no image directory is given.
    pub synthetic_images: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 2,
            steps: 2000,
            channel: ChannelKind::Awgn,
            snr_min: 1.0,
            snr_max: 20.0,
            seed: 0,
            crop: 32,
            synthetic_images: 16,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.crop == 0 || self.synthetic_images == 0 {
            return bad("batch_size, crop and synthetic_images must be positive".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("grad_clip must be finite and >= 0, got {}", self.grad_clip));
        }
        if !self.snr_min.is_finite() || !self.snr_max.is_finite() || self.snr_min > self.snr_max {
            return bad(format!("bad snr range [{}, {}]", self.snr_min, self.snr_max));
        }
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn p<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e: T::Err| e.to_string())
        }
        match key {
            "learning_rate" => self.learning_rate = p(value)?,
            "batch_size" => self.batch_size = p(value)?,
            "steps" => self.steps = p(value)?,
            "channel" => self.channel = value.parse()?,
            "snr_min" => self.snr_min = p(value)?,
            "snr_max" => self.snr_max = p(value)?,
            "seed" => self.seed = p(value)?,
            "crop" => self.crop = p(value)?,
            "synthetic_images" => self.synthetic_images = p(value)?,
            "grad_clip" => self.grad_clip = p(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        format!(
            "learning_rate = {:e}\nbatch_size = {}\nsteps = {}\nchannel = {}\nsnr_min = {}\n\
             snr_max = {}\nseed = {}\ncrop = {}\nsynthetic_images = {}\ngrad_clip = {}\n",
            self.learning_rate,
            self.batch_size,
            self.steps,
            self.channel,
            self.snr_min,
            self.snr_max,
            self.seed,
            self.crop,
            self.synthetic_images,
            self.grad_clip,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| HarnessError::Config { line: i + 1, reason };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            let known = cfg.model.apply(k, v).map_err(|e| err(e.to_string()))?
                || cfg.train.apply(k, v).map_err(|e| err(format!("{k}: {e}")))?;
            if !known {
                return Err(err(format!("unknown key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.crop != self.model.image_height || self.train.crop != self.model.image_width {
            return Err(HarnessError::Invalid(format!(
                "crop {} does not match the {}x{} model input",
                self.train.crop, self.model.image_height, self.model.image_width
            )));
        }
        Ok(())
    }

    /// Every resolved setting, model keys first.
    pub fn to_text(&self) -> String {
        format!("{}{}", self.model.to_manifest(), self.train.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mambajscc_core::CsiMode;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::parse(
            "# desk run\nlearning_rate = 2e-3\nsteps = 10\ncsi = off\nchannel = rayleigh\n",
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 2e-3);
        assert_eq!(cfg.train.channel, ChannelKind::Rayleigh);
        assert_eq!(cfg.model.csi_mode, CsiMode::Off);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("steps = 3\nmomentum = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn rejects_negative_rate() {
        assert!(RunConfig::parse("learning_rate = -1\n").is_err());
        assert!(RunConfig::parse("batch_size = 0\n").is_err());
    }
}
