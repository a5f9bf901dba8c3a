use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OceanError, Result};
use crate::numcore::{bind, AdamConfig, Gradients, Tape};
use crate::rng::{stream_rng, streams};
use crate::scenegen::Dataset;
use crate::slotcoder::{slot_noise, Slotcoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear learning-rate ramp length in optimizer steps.
    pub lr_ramp: usize,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            epochs: 10,
            batch_size: 8,
            lr: 3e-3,
            lr_ramp: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupEpoch {
    pub epoch: usize,
    pub recon: f64,
    pub seconds: f64,
}

/// Noise key for the slot initialization of image `index` at optimizer
/// step `step`; distinct from evaluation keys.
pub(crate) fn train_noise_key(step: u64, index: u64) -> u64 {
    (1 << 62) | (step << 24) | index
}

/// Per-image reconstruction losses and gradients, in batch order.
pub(crate) fn recon_grads(sc: &Slotcoder, ds: &Dataset, batch: &[usize], seed: u64, step: u64) -> Result<Vec<(f32, Gradients<f32>)>> {
    let (n, d) = (sc.cfg().num_slots, sc.cfg().slot_dim);
    batch
        .par_iter()
        .map(|&i| {
            let noise = slot_noise(seed, train_noise_key(step, i as u64), n, d);
            let mut tape = Tape::new();
            let p = bind(&mut tape, &sc.params, true);
            let out = sc.arch.forward(&mut tape, &p, &ds.images[i], &noise)?;
            let loss = tape.scalar(out.loss);
            Ok((loss, tape.backward(out.loss)?))
        })
        .collect()
}

pub(crate) fn ramp_lr(base: f64, ramp: usize, step: u64) -> AdamConfig {
    let k = if ramp == 0 { 1.0 } else { (step as f64 / ramp as f64).min(1.0) };
    AdamConfig::with_lr(base * k)
}

/// Images of the 1-based global optimizer step `step`: epoch
/// `(step−1) / batches_per_epoch` is a fresh shuffle, and the step picks its
/// slice. Warm-up and reward-injected training share this schedule, so
/// either can continue the other.
pub(crate) fn recon_batch(len: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let bs = batch_size.max(1);
    let per_epoch = len.div_ceil(bs) as u64;
    let epoch = (step - 1) / per_epoch;
    let b = ((step - 1) % per_epoch) as usize;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, streams::WARMUP_ORDER, epoch));
    order[b * bs..((b + 1) * bs).min(len)].to_vec()
}

/// Pure reconstruction training of the slot autoencoder, continuing from
/// the store's step counter.
pub fn warmup_slots(
    ds: &Dataset,
    sc: &mut Slotcoder,
    cfg: &WarmupConfig,
    mut on_epoch: impl FnMut(&WarmupEpoch),
) -> Result<Vec<WarmupEpoch>> {
    if ds.is_empty() {
        return Err(OceanError::invalid("warm-up needs a nonempty dataset"));
    }
    let per_epoch = ds.len().div_ceil(cfg.batch_size.max(1));
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut total = 0f64;
        let mut seen = 0usize;
        for _ in 0..per_epoch {
            let step = sc.params.step_count() + 1;
            let batch = recon_batch(ds.len(), cfg.batch_size, cfg.seed, step);
            let grads = recon_grads(sc, ds, &batch, cfg.seed, step)?;
            let scale = 1.0 / batch.len() as f32;
            for (loss, g) in &grads {
                if !loss.is_finite() {
                    return Err(OceanError::Diverged(format!(
                        "warm-up epoch {epoch} step {step}: recon loss {loss}; last epoch {:?}",
                        history.last()
                    )));
                }
                total += *loss as f64;
                sc.params.accumulate(g, scale);
            }
            seen += batch.len();
            sc.params.adam_step(&ramp_lr(cfg.lr, cfg.lr_ramp, step), step)?;
        }
        let stats = WarmupEpoch {
            epoch,
            recon: total / seen as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!("warm-up epoch {epoch}: recon {:.5} ({:.1}s)", stats.recon, stats.seconds);
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Mean reconstruction loss with evaluation noise (no updates).
pub fn mean_recon_loss(sc: &Slotcoder, ds: &Dataset, seed: u64) -> Result<f64> {
    let (n, d) = (sc.cfg().num_slots, sc.cfg().slot_dim);
    let losses: Vec<f32> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let noise = slot_noise(seed, eval_noise_key(ds, i), n, d);
            Ok(sc.reconstruct(&ds.images[i], &noise)?.1)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().map(|&l| l as f64).sum::<f64>() / ds.len().max(1) as f64)
}

/// Noise key used whenever slots are extracted for the game; depends only
/// on the split and scene id.
pub fn eval_noise_key(ds: &Dataset, i: usize) -> u64 {
    (ds.header.split.stream() << 32) | ds.scenes[i].id
}
