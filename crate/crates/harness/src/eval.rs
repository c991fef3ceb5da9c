//! PSNR sweeps over images and SNRs.

use mambajscc_core::{ChannelKind, ChannelRealization, JsccModel};
use rayon::prelude::*;

use crate::data::{center_crop, Dataset};
use crate::error::Result;
use crate::metrics::{image_psnr, PixelMode};
use crate::train::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub snr_db: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnrAggregate {
    pub snr_db: f64,
    pub mean_psnr_db: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub channel: Option<ChannelKind>,
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<SnrAggregate>,
}

fn fmt_db(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.6}")
    }
}

/// Noise seed of one `(image, snr)` cell.
pub fn cell_seed(global_seed: u64, image_index: usize, snr_db: f64) -> u64 {
    derive_seed(&[global_seed, image_index as u64, snr_db.to_bits()])
}

/// Evaluates every image (centre-cropped to the model input) at every
/// SNR. Rows are ordered image-major, then by the order of `snrs`.
pub fn eval_sweep(
    model: &JsccModel,
    data: &Dataset,
    snrs: &[f64],
    channel: ChannelKind,
    global_seed: u64,
    mode: PixelMode,
) -> Result<EvalReport> {
    let size = model.cfg.image_height;
    let crops = data
        .images
        .iter()
        .map(|img| center_crop(img, size))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..crops.len())
        .flat_map(|i| (0..snrs.len()).map(move |j| (i, j)))
        .collect();
    let psnrs = cells
        .par_iter()
        .map(|&(i, j)| {
            let real = ChannelRealization::new(channel, snrs[j], cell_seed(global_seed, i, snrs[j]));
            let out = model.reconstruct(&crops[i], &real)?;
            image_psnr(&crops[i], &out, mode).map_err(Into::into)
        })
        .collect::<Result<Vec<f64>>>()?;
    let rows: Vec<EvalRow> = cells
        .iter()
        .zip(&psnrs)
        .map(|(&(i, j), &p)| EvalRow {
            image_id: data.ids[i].clone(),
            snr_db: snrs[j],
            psnr_db: p,
        })
        .collect();
    let aggregates = snrs
        .iter()
        .enumerate()
        .map(|(j, &snr)| {
            let vals: Vec<f64> = cells
                .iter()
                .zip(&psnrs)
                .filter(|((_, jj), _)| *jj == j)
                .map(|(_, &p)| p)
                .collect();
            SnrAggregate {
                snr_db: snr,
                mean_psnr_db: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
                count: vals.len(),
            }
        })
        .collect();
    Ok(EvalReport {
        channel: Some(channel),
        rows,
        aggregates,
    })
}

impl EvalReport {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("image_id,snr_db,psnr_db\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.image_id, fmt_db(r.snr_db), fmt_db(r.psnr_db)));
        }
        out
    }

    pub fn aggregates_csv(&self) -> String {
        let mut out = String::from("channel,snr_db,mean_psnr_db,count\n");
        let ch = self.channel.map(|c| c.to_string()).unwrap_or_default();
        for a in &self.aggregates {
            out.push_str(&format!("{ch},{},{},{}\n", fmt_db(a.snr_db), fmt_db(a.mean_psnr_db), a.count));
        }
        out
    }

    /// `# series <name>` followed by whitespace-separated `x y` pairs.
    pub fn plot_data(&self, series: &str) -> String {
        let mut out = format!("# series {series}\n");
        for a in &self.aggregates {
            out.push_str(&format!("{} {}\n", fmt_db(a.snr_db), fmt_db(a.mean_psnr_db)));
        }
        out
    }

    pub fn mean_psnr(&self) -> f64 {
        let n = self.aggregates.len().max(1) as f64;
        self.aggregates.iter().map(|a| a.mean_psnr_db).sum::<f64>() / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mambajscc_core::ModelConfig;

    use crate::data::synthetic_dataset;

    #[test]
    fn empty_snr_list_gives_empty_report() {
        let model = JsccModel::new(ModelConfig::desk(), 0).unwrap();
        let data = synthetic_dataset(2, 32, 0);
        let r = eval_sweep(&model, &data, &[], ChannelKind::Awgn, 0, PixelMode::Continuous).unwrap();
        assert!(r.rows.is_empty() && r.aggregates.is_empty());
        assert_eq!(r.rows_csv(), "image_id,snr_db,psnr_db\n");
    }

    #[test]
    fn sweep_is_reproducible() {
        let model = JsccModel::new(ModelConfig::desk(), 0).unwrap();
        let data = synthetic_dataset(2, 32, 0);
        let run = || {
            eval_sweep(&model, &data, &[1.0, f64::INFINITY], ChannelKind::Rayleigh, 9, PixelMode::Continuous)
                .unwrap()
                .rows_csv()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.lines().count(), 5);
        assert!(a.contains("synth001,inf,"));
    }
}
