//! Adam training through the simulated channel.

use mambajscc_core::{ChannelRealization, Graph, JsccModel, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::{random_crop, Dataset};
use crate::error::{HarnessError, Result};
use crate::metrics::mse_loss;

/// Mixes `parts` into one seed (SplitMix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x6a09_e667_f3bc_c908;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for (i, &gi) in grads[k].data().iter().enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Loss and parameter gradients of one image through one realization.
pub fn item_gradients(model: &JsccModel, image: &Tensor, real: &ChannelRealization) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let x = g.constant(image.clone());
    let out = model.forward(&mut g, &p, x, real)?;
    let loss = mse_loss(&mut g, x, out.reconstruction)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), model.store.grads(&g, &p)))
}

/// Batch-mean loss and gradients. Items run in parallel; the reduction
/// order is fixed, so the result does not depend on scheduling.
pub fn batch_gradients(model: &JsccModel, batch: &[(Tensor, ChannelRealization)]) -> Result<(f64, Vec<Tensor>)> {
    let items: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|(img, real)| item_gradients(model, img, real))
        .collect::<Result<_>>()?;
    let inv = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    let mut total: Vec<Tensor> = items[0].1.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (l, grads) in &items {
        loss += l;
        for (acc, gr) in total.iter_mut().zip(grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                *a += b;
            }
        }
    }
    for t in &mut total {
        t.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    Ok((loss * inv, total))
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Index of the image used by sample `k` of the run (shuffled per epoch).
struct Sampler {
    seed: u64,
    n: usize,
    epoch: Option<usize>,
    order: Vec<usize>,
}

impl Sampler {
    fn index(&mut self, k: usize) -> usize {
        let epoch = k / self.n;
        if self.epoch != Some(epoch) {
            self.order = (0..self.n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0xe90c, epoch as u64]));
            self.order.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.order[k % self.n]
    }
}

/// Runs `cfg.steps` Adam steps and returns the per-step loss (measured
/// before each update). `on_step` sees `(step, loss)`.
pub fn train(
    model: &mut JsccModel,
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    let mut sampler = Sampler {
        seed: cfg.seed,
        n: data.len(),
        epoch: None,
        order: Vec::new(),
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch_seed = derive_seed(&[cfg.seed, step as u64]);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let idx = sampler.index(step * cfg.batch_size + b);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[batch_seed, b as u64]));
            let img = random_crop(&data.images[idx], cfg.crop, &mut rng)?;
            let snr = if cfg.snr_min == cfg.snr_max {
                cfg.snr_min
            } else {
                rng.random_range(cfg.snr_min..=cfg.snr_max)
            };
            let real = ChannelRealization::new(cfg.channel, snr, rng.random());
            batch.push((img, real));
        }
        let (loss, mut grads) = batch_gradients(model, &batch)?;
        if !loss.is_finite() {
            return Err(HarnessError::NonFiniteLoss { step, loss, batch_seed });
        }
        if cfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, cfg.grad_clip);
        }
        adam.step(&mut model.store, &grads);
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l:.12e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use mambajscc_core::ModelConfig;

    use crate::data::synthetic_dataset;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.image_height = 8;
        cfg.image_width = 8;
        cfg.stage_channels = vec![4, 6];
        cfg.ssm.state_dim = 2;
        cfg.csi_len = 4;
        cfg.cbr = mambajscc_core::codec::Cbr::new(1, 6);
        cfg
    }

    fn tiny_train(lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            steps: 3,
            crop: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_rate_leaves_weights_untouched() {
        let mut model = JsccModel::new(tiny(), 5).unwrap();
        let before = model.store.clone();
        let data = synthetic_dataset(3, 8, 0);
        train(&mut model, &tiny_train(0.0), &data, |_, _| {}).unwrap();
        for ((_, _, a), (_, _, b)) in before.iter().zip(model.store.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_curves() {
        let data = synthetic_dataset(3, 8, 0);
        let run = || {
            let mut model = JsccModel::new(tiny(), 5).unwrap();
            train(&mut model, &tiny_train(1e-3), &data, |_, _| {}).unwrap()
        };
        let a = run();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), run().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut model = JsccModel::new(tiny(), 5).unwrap();
        let data = Dataset {
            ids: vec![],
            images: vec![],
        };
        assert!(matches!(
            train(&mut model, &tiny_train(0.0), &data, |_, _| {}),
            Err(HarnessError::EmptyDataset)
        ));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
    }
}
