use std::fmt;
use std::str::FromStr;

use super::CodecError;
use crate::ssm::{AbarRule, SsmConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CsiMode {
    Off,
    Embed,
}

impl fmt::Display for CsiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CsiMode::Off => "off",
            CsiMode::Embed => "embed",
        })
    }
}

impl FromStr for CsiMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(CsiMode::Off),
            "embed" => Ok(CsiMode::Embed),
            other => Err(format!("unknown csi mode {other:?} (off|embed)")),
        }
    }
}

/// Channel bandwidth ratio as an exact fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cbr {
    pub num: u64,
    pub den: u64,
}

impl Cbr {
    pub const fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Cbr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Cbr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (n, d) = s
            .split_once('/')
            .ok_or_else(|| format!("cbr must be a fraction like 3/128, got {s:?}"))?;
        let num: u64 = n.trim().parse().map_err(|e| format!("cbr numerator: {e}"))?;
        let den: u64 = d.trim().parse().map_err(|e| format!("cbr denominator: {e}"))?;
        if num == 0 || den == 0 {
            return Err("cbr terms must be positive".into());
        }
        Ok(Self { num, den })
    }
}

/// Complex channels `c` such that `c·h·w = cbr·3·H·W` exactly.
pub fn compressed_channels(
    image_h: usize,
    image_w: usize,
    cbr: Cbr,
    h: usize,
    w: usize,
) -> Result<usize, CodecError> {
    let scaled = 3 * (image_h * image_w) as u64 * cbr.num;
    if !scaled.is_multiple_of(cbr.den) {
        return Err(CodecError::Config(format!(
            "cbr {cbr} on 3x{image_h}x{image_w} is not a whole number of symbols"
        )));
    }
    let symbols = scaled / cbr.den;
    let grid = (h * w) as u64;
    if !symbols.is_multiple_of(grid) {
        return Err(CodecError::Config(format!(
            "{symbols} complex symbols do not fill whole {h}x{w} channels ({} per grid)",
            symbols as f64 / grid as f64
        )));
    }
    Ok((symbols / grid) as usize)
}

/// One rung of the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub stage_blocks: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub cbr: Cbr,
    pub csi_mode: CsiMode,
    pub ssm: SsmConfig,
    /// CSI vector length `m`; the sinusoidal code has the same length.
    pub csi_len: usize,
    /// SNRs above this (including the noiseless `+∞`) reach the CSI
    /// encoders as this value.
    pub csi_max_db: f64,
    /// Kernel of the stride-2 patch embedding (even).
    pub embed_kernel: usize,
}

impl ModelConfig {
    /// Two stages on 32×32 images, sized for CPU runs.
    pub fn desk() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            stage_blocks: vec![1, 1],
            stage_channels: vec![8, 16],
            cbr: Cbr::new(1, 16),
            csi_mode: CsiMode::Embed,
            ssm: SsmConfig {
                state_dim: 4,
                ..SsmConfig::default()
            },
            csi_len: 16,
            csi_max_db: 20.0,
            embed_kernel: 2,
        }
    }

    /// The four-stage 256×256 layout.
    pub fn full_scale() -> Self {
        Self {
            image_height: 256,
            image_width: 256,
            stage_blocks: vec![2, 2, 6, 2],
            stage_channels: vec![128, 192, 256, 320],
            cbr: Cbr::new(3, 128),
            csi_mode: CsiMode::Embed,
            ssm: SsmConfig::default(),
            csi_len: 128,
            csi_max_db: 20.0,
            embed_kernel: 2,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn stages(&self) -> Vec<StageConfig> {
        (0..self.num_stages())
            .map(|k| StageConfig {
                blocks: self.stage_blocks[k],
                channels: self.stage_channels[k],
                height: self.image_height >> (k + 1),
                width: self.image_width >> (k + 1),
            })
            .collect()
    }

    /// Shape `[2c, h, w]` of the real-valued channel input.
    pub fn latent_shape(&self) -> Result<[usize; 3], CodecError> {
        let last = *self.stages().last().ok_or_else(|| CodecError::Config("no stages".into()))?;
        let c = self.complex_channels()?;
        Ok([2 * c, last.height, last.width])
    }

    pub fn complex_channels(&self) -> Result<usize, CodecError> {
        let last = *self.stages().last().ok_or_else(|| CodecError::Config("no stages".into()))?;
        compressed_channels(self.image_height, self.image_width, self.cbr, last.height, last.width)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let err = |m: String| Err(CodecError::Config(m));
        let l = self.stage_channels.len();
        if l == 0 {
            return err("at least one stage is required".into());
        }
        if self.stage_blocks.len() != l {
            return err(format!(
                "{} block counts for {l} stages",
                self.stage_blocks.len()
            ));
        }
        if self.stage_channels.windows(2).any(|w| w[1] <= w[0]) {
            return err(format!(
                "stage channels must strictly increase: {:?}",
                self.stage_channels
            ));
        }
        let step = 1usize << l;
        if !self.image_height.is_multiple_of(step) || !self.image_width.is_multiple_of(step) {
            return err(format!(
                "image {}x{} not divisible by 2^{l}",
                self.image_height, self.image_width
            ));
        }
        if self.embed_kernel < 2 || !self.embed_kernel.is_multiple_of(2) {
            return err(format!("embed_kernel must be even and >= 2, got {}", self.embed_kernel));
        }
        if self.ssm.conv_kernel.is_multiple_of(2) {
            return err(format!("conv_kernel must be odd, got {}", self.ssm.conv_kernel));
        }
        if self.ssm.state_dim == 0 || self.ssm.expand == 0 {
            return err("state_dim and expand must be positive".into());
        }
        if self.csi_len == 0 || !self.csi_len.is_multiple_of(2) {
            return err(format!("csi_len must be even and positive, got {}", self.csi_len));
        }
        if !self.csi_max_db.is_finite() {
            return err(format!("csi_max_db must be finite, got {}", self.csi_max_db));
        }
        self.complex_channels()?;
        Ok(())
    }

    /// Sets one `key = value` pair. Returns `Ok(false)` for keys that are
    /// not model settings.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool, CodecError> {
        let bad = |e: String| CodecError::Config(format!("{key}: {e}"));
        let int = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(e.to_string()));
        let list = |v: &str| -> Result<Vec<usize>, CodecError> {
            v.split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|e| bad(e.to_string())))
                .collect()
        };
        match key {
            "image_height" => self.image_height = int(value)?,
            "image_width" => self.image_width = int(value)?,
            "stage_blocks" => self.stage_blocks = list(value)?,
            "stage_channels" => self.stage_channels = list(value)?,
            "cbr" => self.cbr = value.trim().parse().map_err(bad)?,
            "csi" => self.csi_mode = value.trim().parse().map_err(bad)?,
            "state_dim" => self.ssm.state_dim = int(value)?,
            "expand" => self.ssm.expand = int(value)?,
            "conv_kernel" => self.ssm.conv_kernel = int(value)?,
            "abar_rule" => self.ssm.abar_rule = value.trim().parse::<AbarRule>().map_err(bad)?,
            "csi_len" => self.csi_len = int(value)?,
            "csi_max_db" => {
                self.csi_max_db = value.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?
            }
            "embed_kernel" => self.embed_kernel = int(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines, one per setting, in a fixed order.
    pub fn to_manifest(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "image_height = {}\nimage_width = {}\nstage_blocks = {}\nstage_channels = {}\n\
             cbr = {}\ncsi = {}\nstate_dim = {}\nexpand = {}\nconv_kernel = {}\n\
             abar_rule = {}\ncsi_len = {}\ncsi_max_db = {}\nembed_kernel = {}\n",
            self.image_height,
            self.image_width,
            join(&self.stage_blocks),
            join(&self.stage_channels),
            self.cbr,
            self.csi_mode,
            self.ssm.state_dim,
            self.ssm.expand,
            self.ssm.conv_kernel,
            self.ssm.abar_rule.as_str(),
            self.csi_len,
            self.csi_max_db,
            self.embed_kernel,
        )
    }

    /// Parses text produced by [`ModelConfig::to_manifest`]. Unknown keys
    /// are errors.
    pub fn from_manifest(text: &str) -> Result<Self, CodecError> {
        let mut cfg = Self::desk();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CodecError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            if !cfg.apply(k.trim(), v.trim())? {
                return Err(CodecError::Config(format!(
                    "line {}: unknown key {:?}",
                    lineno + 1,
                    k.trim()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
