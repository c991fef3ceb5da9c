use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mambajscc_core::{ChannelKind, ChannelRealization, CsiMode};
use mambajscc_harness::checks::pipeline_gradcheck;
use mambajscc_harness::config::RunConfig;
use mambajscc_harness::count::{attention_macs, count_macs_params, csi_overhead_formula, LayerKind};
use mambajscc_harness::data::{center_crop, ingest_images, synthetic_dataset, Dataset};
use mambajscc_harness::metrics::PixelMode;
use mambajscc_harness::run::{load_checkpoint, sweep_run, train_run, CHECKPOINT_DIR};
use mambajscc_harness::timing::{time_inference, MIN_REPS};

#[derive(Parser)]
#[command(name = "mambajscc", about = "State-space JSCC image link: train, evaluate, count")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    channel: Option<ChannelKind>,
    /// Comma-separated SNRs in dB; `inf` for a noiseless channel.
    #[arg(long, value_delimiter = ',')]
    snr: Vec<String>,
    #[arg(long)]
    csi: Option<CsiMode>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Directory of .ppm / .mjt images; a synthetic corpus is used otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; a single `--snr` fixes the training SNR, two give the range.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print mean PSNR per SNR for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (defaults to `<out>/checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        round_pixels: bool,
    },
    /// Write per-image and aggregate PSNR tables for a checkpoint.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        round_pixels: bool,
    },
    /// Analytic MACs and parameters of the configured model.
    Count {
        #[command(flatten)]
        common: Common,
    },
    /// Median wall-clock delay of one encode, channel and decode pass.
    Timeit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = MIN_REPS)]
        reps: usize,
    },
    /// Finite-difference check of the full pipeline gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 2)]
        coords: usize,
    },
}

fn parse_snrs(raw: &[String]) -> Result<Vec<f64>> {
    raw.iter()
        .map(|s| match s.trim() {
            "inf" => Ok(f64::INFINITY),
            t => t.parse::<f64>().with_context(|| format!("bad SNR {t:?}")),
        })
        .collect()
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(ch) = common.channel {
        cfg.train.channel = ch;
    }
    if let Some(csi) = common.csi {
        cfg.model.csi_mode = csi;
    }
    Ok(cfg)
}

fn dataset(common: &Common, cfg: &RunConfig) -> Result<Dataset> {
    match &common.data {
        Some(dir) => {
            let (ds, warnings) = ingest_images(dir, cfg.train.crop)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            Ok(ds)
        }
        None => Ok(synthetic_dataset(cfg.train.synthetic_images, cfg.train.crop, cfg.train.seed)),
    }
}

fn checkpoint_dir(common: &Common, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| common.out.join(CHECKPOINT_DIR))
}

fn eval_snrs(common: &Common) -> Result<Vec<f64>> {
    if common.snr.is_empty() {
        Ok(vec![1.0, 5.0, 10.0, 15.0, 20.0])
    } else {
        parse_snrs(&common.snr)
    }
}

fn pixel_mode(round: bool) -> PixelMode {
    if round {
        PixelMode::Rounded
    } else {
        PixelMode::Continuous
    }
}

fn cmd_train(common: Common, steps: Option<usize>) -> Result<()> {
    let mut cfg = resolve(&common)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    match parse_snrs(&common.snr)?.as_slice() {
        [] => {}
        [s] => (cfg.train.snr_min, cfg.train.snr_max) = (*s, *s),
        [lo, hi] => (cfg.train.snr_min, cfg.train.snr_max) = (*lo, *hi),
        _ => bail!("train takes one SNR or a min,max range"),
    }
    let data = dataset(&common, &cfg)?;
    let every = (cfg.train.steps / 20).max(1);
    let (_, losses) = train_run(&cfg, &data, &common.out, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step:>6}  loss {loss:.6e}");
        }
    })?;
    println!(
        "trained {} steps, final loss {:.6e}, artifacts in {}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        common.out.display()
    );
    Ok(())
}

fn cmd_eval(common: Common, checkpoint: Option<PathBuf>, round: bool, write: bool) -> Result<()> {
    let cfg = resolve(&common)?;
    let model = load_checkpoint(&checkpoint_dir(&common, &checkpoint))?;
    let data = dataset(&common, &cfg)?;
    let snrs = eval_snrs(&common)?;
    let report = if write {
        sweep_run(&model, &data, &snrs, cfg.train.channel, cfg.train.seed, pixel_mode(round), &common.out)?
    } else {
        mambajscc_harness::eval::eval_sweep(&model, &data, &snrs, cfg.train.channel, cfg.train.seed, pixel_mode(round))?
    };
    print!("{}", report.aggregates_csv());
    Ok(())
}

fn cmd_count(common: Common) -> Result<()> {
    let cfg = resolve(&common)?;
    let report = count_macs_params(&cfg.model)?;
    print!("{}", report.to_table());
    println!("scan_core_macs\t{}", report.macs_of(LayerKind::ScanCore));
    println!(
        "csi_params\t{}\tformula\t{}",
        report.params_of(LayerKind::Csi),
        csi_overhead_formula(&cfg.model)
    );
    for st in cfg.model.stages() {
        let d = st.height * st.width;
        println!(
            "stage {}x{}: tokens {d}, one attention layer would cost {} MACs",
            st.height,
            st.width,
            attention_macs(d, cfg.model.ssm.expand * st.channels)
        );
    }
    Ok(())
}

fn cmd_timeit(common: Common, checkpoint: Option<PathBuf>, reps: usize) -> Result<()> {
    let cfg = resolve(&common)?;
    let ckpt = checkpoint_dir(&common, &checkpoint);
    let model = if Path::new(&ckpt).exists() {
        load_checkpoint(&ckpt)?
    } else {
        mambajscc_core::JsccModel::new(cfg.model.clone(), cfg.train.seed)?
    };
    let data = dataset(&common, &cfg)?;
    let image = center_crop(&data.images[0], model.cfg.image_height)?;
    let snr = eval_snrs(&common)?.first().copied().unwrap_or(10.0);
    let real = ChannelRealization::new(cfg.train.channel, snr, cfg.train.seed);
    let t = time_inference(&model, &image, &real, reps)?;
    println!(
        "reps {}  median_ms {:.3}  min_ms {:.3}  max_ms {:.3}",
        t.reps, t.median_ms, t.min_ms, t.max_ms
    );
    Ok(())
}

fn cmd_gradcheck(common: Common, coords: usize) -> Result<()> {
    let cfg = resolve(&common)?;
    let snr = eval_snrs(&common)?.first().copied().unwrap_or(10.0);
    let r = pipeline_gradcheck(&cfg.model, cfg.train.channel, snr, cfg.train.seed, coords)?;
    println!(
        "checked {}  max_rel_error {:.3e}  max_abs_error {:.3e}",
        r.checked, r.max_rel_error, r.max_abs_error
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Command::Train { common, steps } => cmd_train(common, steps),
        Command::Eval {
            common,
            checkpoint,
            round_pixels,
        } => cmd_eval(common, checkpoint, round_pixels, false),
        Command::Sweep {
            common,
            checkpoint,
            round_pixels,
        } => cmd_eval(common, checkpoint, round_pixels, true),
        Command::Count { common } => cmd_count(common),
        Command::Timeit {
            common,
            checkpoint,
            reps,
        } => cmd_timeit(common, checkpoint, reps),
        Command::Gradcheck { common, coords } => cmd_gradcheck(common, coords),
    }
}
