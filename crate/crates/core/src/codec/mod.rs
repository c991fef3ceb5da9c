//! Encoder/decoder ladder and the end-to-end transmission pipeline.
//!
//! ```text
//! s [3,H,W] → embed → stage 1 → merge → stage 2 … → compress → [2c,h,w]
//! [2c,h,w] → expand → stage L → divide → … stage 1 → divide → ŝ [3,H,W]
//! ```

mod config;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{compressed_channels, Cbr, CsiMode, ModelConfig, StageConfig};

use crate::channel::{self, ChannelRealization, ChannelSignal};
use crate::csi::{CsiEmbed, CsiEncoder};
use crate::graph::{Graph, Var};
use crate::params::{normal, Bindings, ParamId, ParamStore};
use crate::ssm::{VssmBlock, NORM_EPS, PROJ_INIT_STD};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CodecError>;

pub const MANIFEST_FILE: &str = "manifest.txt";

fn lecun<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    normal(rng, shape, (1.0 / fan_in as f64).sqrt())
}

/// Bias-carrying convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            lecun(rng, &[c_out, c_in, kernel, kernel], c_in * kernel * kernel),
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[c_out]));
        Self {
            w,
            b,
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.w], self.stride, self.padding)?;
        Ok(g.add_bias(y, p[self.b], true)?)
    }
}

/// Space-to-depth by 2 followed by a bias-free linear map `4c → c_out`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub w: ParamId,
}

impl PatchMerge {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{prefix}.w"), normal(rng, &[c_out, 4 * c_in], PROJ_INIT_STD));
        Self { w }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        Ok(patch_merge(g, x, p[self.w])?)
    }
}

/// `[c, h, w] → [c_out, h/2, w/2]` with `w: [c_out, 4c]`.
pub fn patch_merge(g: &mut Graph, x: Var, w: Var) -> std::result::Result<Var, TensorError> {
    let u = g.pixel_unshuffle(x, 2)?;
    let s = g.shape(u).to_vec();
    let flat = g.reshape(u, &[s[0], s[1] * s[2]])?;
    let y = g.matmul(w, flat)?;
    let c_out = g.shape(y)[0];
    g.reshape(y, &[c_out, s[1], s[2]])
}

/// Layer norm, linear map `c → 4c_out` with bias, depth-to-space by 2.
#[derive(Clone, Debug)]
pub struct PatchDivide {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

impl PatchDivide {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.norm.gamma"), Tensor::ones(&[c_in])),
            beta: store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[c_in])),
            w: store.add(format!("{prefix}.w"), normal(rng, &[4 * c_out, c_in], PROJ_INIT_STD)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[4 * c_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let tokens = g.transpose2d(flat)?;
        let normed = g.layer_norm(tokens, p[self.gamma], p[self.beta], NORM_EPS)?;
        let normed = g.transpose2d(normed)?;
        let y = g.matmul(p[self.w], normed)?;
        let y = g.add_bias(y, p[self.b], true)?;
        let c4 = g.shape(y)[0];
        let y = g.reshape(y, &[c4, s[1], s[2]])?;
        Ok(g.pixel_shuffle(y, 2)?)
    }
}

/// A VSSM block with its CSI projection (absent when CSI is off).
#[derive(Clone, Debug)]
pub struct CodecBlock {
    pub block: VssmBlock,
    pub csi: Option<CsiEmbed>,
}

impl CodecBlock {
    fn forward(&self, g: &mut Graph, p: &Bindings, x: Var, u: Option<Var>) -> Result<Var> {
        let add = match (&self.csi, u) {
            (Some(embed), Some(u)) => Some(embed.project(g, p, u)?),
            _ => None,
        };
        Ok(self.block.forward(g, p, x, add)?)
    }
}

fn make_blocks<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    stage: StageConfig,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Vec<CodecBlock> {
    (0..stage.blocks)
        .map(|j| {
            let name = format!("{prefix}.b{j}");
            let block = VssmBlock::new(store, &name, stage.channels, stage.height, stage.width, cfg.ssm, rng);
            let csi = (cfg.csi_mode == CsiMode::Embed).then(|| {
                CsiEmbed::new(store, &format!("{name}.csi"), cfg.csi_len, block.inner_channels(), rng)
            });
            CodecBlock { block, csi }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    /// Absent for the first stage, which follows the patch embedding.
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<CodecBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub csi: Option<CsiEncoder>,
    pub embed: Conv,
    pub stages: Vec<EncoderStage>,
    pub compress: Conv,
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub blocks: Vec<CodecBlock>,
    pub divide: PatchDivide,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub csi: Option<CsiEncoder>,
    pub expand: Conv,
    /// Deepest stage first.
    pub stages: Vec<DecoderStage>,
}

/// Values produced by one pass through encoder, channel and decoder.
#[derive(Clone, Copy, Debug)]
pub struct PipelineOutput {
    pub latent: Var,
    pub transmitted: ChannelSignal,
    pub received: ChannelSignal,
    pub reconstruction: Var,
}

#[derive(Clone, Debug)]
pub struct JsccModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl JsccModel {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stages = cfg.stages();
        let c_sym = cfg.complex_channels()?;
        let embed_csi = cfg.csi_mode == CsiMode::Embed;

        let enc_csi = embed_csi.then(|| CsiEncoder::new(&mut store, "enc.csi", cfg.csi_len, cfg.csi_len, &mut rng));
        let k = cfg.embed_kernel;
        let embed = Conv::new(&mut store, "enc.embed", 3, stages[0].channels, k, 2, (k - 2) / 2, &mut rng);
        let mut enc_stages = Vec::with_capacity(stages.len());
        for (i, st) in stages.iter().enumerate() {
            let prefix = format!("enc.s{i}");
            let merge = (i > 0).then(|| {
                PatchMerge::new(&mut store, &format!("{prefix}.merge"), stages[i - 1].channels, st.channels, &mut rng)
            });
            let blocks = make_blocks(&mut store, &prefix, *st, &cfg, &mut rng);
            enc_stages.push(EncoderStage { merge, blocks });
        }
        let last = *stages.last().expect("validated");
        let compress = Conv::new(&mut store, "enc.compress", last.channels, 2 * c_sym, 1, 1, 0, &mut rng);

        let dec_csi = embed_csi.then(|| CsiEncoder::new(&mut store, "dec.csi", cfg.csi_len, cfg.csi_len, &mut rng));
        let expand = Conv::new(&mut store, "dec.expand", 2 * c_sym, last.channels, 1, 1, 0, &mut rng);
        let mut dec_stages = Vec::with_capacity(stages.len());
        for i in (0..stages.len()).rev() {
            let prefix = format!("dec.s{i}");
            let blocks = make_blocks(&mut store, &prefix, stages[i], &cfg, &mut rng);
            let c_out = if i == 0 { 3 } else { stages[i - 1].channels };
            let divide = PatchDivide::new(&mut store, &format!("{prefix}.divide"), stages[i].channels, c_out, &mut rng);
            dec_stages.push(DecoderStage { blocks, divide });
        }

        Ok(Self {
            cfg,
            store,
            encoder: Encoder {
                csi: enc_csi,
                embed,
                stages: enc_stages,
                compress,
            },
            decoder: Decoder {
                csi: dec_csi,
                expand,
                stages: dec_stages,
            },
        })
    }

    fn check_shape(g: &Graph, x: Var, want: &[usize], op: &'static str) -> Result<()> {
        if g.shape(x) != want {
            return Err(TensorError::InvalidShape {
                op,
                shape: g.shape(x).to_vec(),
                reason: format!("expected {want:?}"),
            }
            .into());
        }
        Ok(())
    }

    /// SNR seen by the CSI encoders: `snr_db` saturated at `csi_max_db`.
    pub fn csi_snr(&self, snr_db: f64) -> f64 {
        snr_db.min(self.cfg.csi_max_db)
    }

    /// `[3, H, W]` image → `[2c, h, w]` latent.
    pub fn encode(&self, g: &mut Graph, p: &Bindings, image: Var, snr_db: f64) -> Result<Var> {
        Self::check_shape(g, image, &[3, self.cfg.image_height, self.cfg.image_width], "encode")?;
        let u = match &self.encoder.csi {
            Some(enc) => Some(enc.forward(g, p, self.csi_snr(snr_db))?),
            None => None,
        };
        let mut x = self.encoder.embed.forward(g, p, image)?;
        for stage in &self.encoder.stages {
            if let Some(merge) = &stage.merge {
                x = merge.forward(g, p, x)?;
            }
            for blk in &stage.blocks {
                x = blk.forward(g, p, x, u)?;
            }
        }
        self.encoder.compress.forward(g, p, x)
    }

    /// `[2c, h, w]` received latent → `[3, H, W]` reconstruction.
    pub fn decode(&self, g: &mut Graph, p: &Bindings, latent: Var, snr_db: f64) -> Result<Var> {
        Self::check_shape(g, latent, &self.cfg.latent_shape()?, "decode")?;
        let u = match &self.decoder.csi {
            Some(enc) => Some(enc.forward(g, p, self.csi_snr(snr_db))?),
            None => None,
        };
        let mut x = self.decoder.expand.forward(g, p, latent)?;
        for stage in &self.decoder.stages {
            for blk in &stage.blocks {
                x = blk.forward(g, p, x, u)?;
            }
            x = stage.divide.forward(g, p, x)?;
        }
        Ok(x)
    }

    /// Encode, normalize power, pass through the channel, equalize, decode.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        image: Var,
        real: &ChannelRealization,
    ) -> Result<PipelineOutput> {
        let latent = self.encode(g, p, image, real.snr_db)?;
        let [_, h, w] = self.cfg.latent_shape()?;
        let packed = channel::pack_complex(g, latent)?;
        let transmitted = channel::power_normalize(g, packed)?;
        let noisy = channel::transmit(g, transmitted, real)?;
        let received = channel::mmse_equalize(g, noisy, real)?;
        let y = channel::unpack_complex(g, received.symbols, h, w)?;
        let reconstruction = self.decode(g, p, y, real.snr_db)?;
        Ok(PipelineOutput {
            latent,
            transmitted,
            received,
            reconstruction,
        })
    }

    /// Inference-only reconstruction of one image.
    pub fn reconstruct(&self, image: &Tensor, real: &ChannelRealization) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, x, real)?;
        Ok(g.value(out.reconstruction).clone())
    }

    /// Identifiers of the CSI encoders, one per half when CSI is on.
    pub fn csi_encoders(&self) -> Vec<&CsiEncoder> {
        self.encoder.csi.iter().chain(self.decoder.csi.iter()).collect()
    }

    /// Writes `manifest.txt` and one file per parameter into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| CodecError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let manifest = dir.join(MANIFEST_FILE);
        fs::write(&manifest, self.cfg.to_manifest()).map_err(|source| CodecError::Io {
            path: manifest.display().to_string(),
            source,
        })?;
        self.store.save_dir(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).map_err(|source| CodecError::Io {
            path: manifest.display().to_string(),
            source,
        })?;
        let cfg = ModelConfig::from_manifest(&text)?;
        let mut model = Self::new(cfg, 0)?;
        model.store.load_dir(dir)?;
        Ok(model)
    }
}
