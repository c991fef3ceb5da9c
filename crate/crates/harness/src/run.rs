//! File-producing entry points shared by the CLI and the tests.

use std::fs;
use std::path::Path;

use mambajscc_core::{ChannelKind, JsccModel};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{io_err, HarnessError, Result};
use crate::eval::{eval_sweep, EvalReport};
use crate::manifest::run_manifest;
use crate::metrics::PixelMode;
use crate::train::{loss_curve_csv, train};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const RUN_MANIFEST: &str = "run_manifest.txt";
pub const SWEEP_ROWS: &str = "sweep_rows.csv";
pub const SWEEP_AGGREGATES: &str = "sweep_aggregates.csv";
pub const SWEEP_PLOT: &str = "sweep_plot.dat";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Trains a fresh model (initialized from the training seed) and writes
/// `checkpoint/`, `loss_curve.csv` and `run_manifest.txt` under `out`.
pub fn train_run(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    on_step: impl FnMut(usize, f64),
) -> Result<(JsccModel, Vec<f64>)> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut model = JsccModel::new(cfg.model.clone(), cfg.train.seed)?;
    let losses = train(&mut model, &cfg.train, data, on_step)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    model.save(&ckpt)?;
    write(&out.join(LOSS_CURVE), &loss_curve_csv(&losses))?;
    write(&out.join(RUN_MANIFEST), &run_manifest(&cfg.to_text(), &ckpt)?)?;
    Ok((model, losses))
}

pub fn load_checkpoint(dir: &Path) -> Result<JsccModel> {
    if !dir.join(mambajscc_core::codec::MANIFEST_FILE).is_file() {
        return Err(HarnessError::MissingCheckpoint(dir.to_path_buf()));
    }
    Ok(JsccModel::load(dir)?)
}

/// Sweeps `snrs` and writes the row, aggregate and plot-data files to `out`.
pub fn sweep_run(
    model: &JsccModel,
    data: &Dataset,
    snrs: &[f64],
    channel: ChannelKind,
    seed: u64,
    mode: PixelMode,
    out: &Path,
) -> Result<EvalReport> {
    let report = eval_sweep(model, data, snrs, channel, seed, mode)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write(&out.join(SWEEP_ROWS), &report.rows_csv())?;
    write(&out.join(SWEEP_AGGREGATES), &report.aggregates_csv())?;
    let series = format!("{channel}-csi-{}", model.cfg.csi_mode);
    write(&out.join(SWEEP_PLOT), &report.plot_data(&series))?;
    Ok(report)
}
