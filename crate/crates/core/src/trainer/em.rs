use std::time::Instant;

use log::{info, warn};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, Player, PlayerArch};
use crate::error::{OceanError, Result};
use crate::game::{Episode, GameConfig};
use crate::numcore::{bind, Bound, Gradients, Real, Tape, Tensor, Var};
use crate::rng::{stream_rng, streams};
use crate::scenegen::Dataset;
use crate::slotcoder::{slot_noise, SlotcoderArch, Slotcoder};

use super::game::{extract_slots, train_game_epoch, EpochStats, SlotCache, TrainConfig};
use super::warmup::{mean_recon_loss, ramp_lr, recon_batch, train_noise_key};

/// Fixed-length game used while injecting rewards into the slotcoder.
fn m1_game(game: &GameConfig, cfg: &TrainConfig) -> GameConfig {
    GameConfig {
        fixed_turns: cfg.fixed_turns,
        max_turns: game.max_turns.max(cfg.fixed_turns),
        ..game.training()
    }
}

/// Values of one reward-injected loss evaluation.
pub struct EmLoss {
    pub loss: Var,
    pub recon: f64,
    pub mean_reward: f64,
    /// Actions taken, for replaying the same episode.
    pub actions: Vec<usize>,
}

/// `L_recon − λ·r̄` for one image, where `r̄` is the mean per-action reward
/// of both players, differentiable in the slots through the (frozen)
/// player networks. Actions are sampled from `rng` unless `actions` is
/// given. With `λ = 0` no game is played and the loss is the
/// reconstruction loss itself.
#[allow(clippy::too_many_arguments)]
pub fn em_loss<T: Real>(
    tape: &mut Tape<T>,
    sc: (&SlotcoderArch, &Bound),
    image: &Tensor<T>,
    noise: &Tensor<T>,
    players: ([&PlayerArch; 2], [Bound; 2]),
    label: usize,
    game: &GameConfig,
    lambda: f64,
    start: usize,
    rng: &mut ChaCha8Rng,
    actions: Option<&[usize]>,
) -> Result<EmLoss> {
    let out = sc.0.forward(tape, sc.1, image, noise)?;
    let recon = tape.scalar(out.loss).as_f64();
    if lambda == 0.0 {
        return Ok(EmLoss {
            loss: out.loss,
            recon,
            mean_reward: 0.0,
            actions: Vec::new(),
        });
    }
    let mut ep = Episode::new(tape, players.0, players.1, out.slots, label, game, start)?;
    match actions {
        Some(a) => ep.run_forced(tape, a)?,
        None => ep.run(tape, rng, ActMode::Sample)?,
    }
    let rewards: Vec<Var> = ep.vars.rewards.iter().flatten().copied().collect();
    let total = tape.add_all(&rewards)?;
    let mean = tape.scale(total, T::lit(1.0 / rewards.len() as f64));
    let mean_reward = tape.scalar(mean).as_f64();
    let injected = tape.scale(mean, T::lit(-lambda));
    let loss = tape.add(out.loss, injected)?;
    Ok(EmLoss {
        loss,
        recon,
        mean_reward,
        actions: ep.state.selections().iter().map(|s| s.1).collect(),
    })
}

pub struct M1Step {
    pub loss: f64,
    pub recon: f64,
    pub reward: f64,
}

/// One reward-injected optimizer step of the slotcoder at its next global
/// step. Players are bound as constants, so their parameters cannot move.
pub fn em_step_slots(
    ds: &Dataset,
    sc: &mut Slotcoder,
    players: &[Player; 2],
    game: &GameConfig,
    cfg: &TrainConfig,
) -> Result<M1Step> {
    let step = sc.params.step_count() + 1;
    let batch = recon_batch(ds.len(), cfg.batch_size, cfg.seed, step);
    let game = m1_game(game, cfg);
    let (n, d) = (sc.cfg().num_slots, sc.cfg().slot_dim);
    let labels = ds.labels();
    let frozen: &Slotcoder = sc;
    let results = batch
        .par_iter()
        .map(|&i| -> Result<(f64, f64, f64, Gradients<f32>)> {
            let key = train_noise_key(step, i as u64);
            let noise = slot_noise(cfg.seed, key, n, d);
            let mut tape = Tape::<f32>::new();
            let p = bind(&mut tape, &frozen.params, true);
            let pb = [players[0].bind(&mut tape, false), players[1].bind(&mut tape, false)];
            let mut rng = stream_rng(cfg.seed, streams::EM_ACTIONS, key);
            let out = em_loss(
                &mut tape,
                (&frozen.arch, &p),
                &ds.images[i],
                &noise,
                ([&players[0].arch, &players[1].arch], pb),
                labels[i],
                &game,
                cfg.lambda,
                (step % 2) as usize,
                &mut rng,
                None,
            )?;
            let value = tape.scalar(out.loss) as f64;
            if !value.is_finite() {
                return Err(OceanError::Diverged(format!("M1 step {step}: loss {value}")));
            }
            Ok((value, out.recon, out.mean_reward, tape.backward(out.loss)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f32;
    let mut agg = M1Step {
        loss: 0.0,
        recon: 0.0,
        reward: 0.0,
    };
    for (loss, recon, reward, g) in &results {
        sc.params.accumulate(g, scale);
        agg.loss += loss;
        agg.recon += recon;
        agg.reward += reward;
    }
    let b = batch.len() as f64;
    agg.loss /= b;
    agg.recon /= b;
    agg.reward /= b;
    sc.params.adam_step(&ramp_lr(cfg.lr_slotcoder, 0, step), step)?;
    Ok(agg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmReport {
    pub history: Vec<EpochStats>,
    pub recon_before: f64,
    pub recon_after: f64,
    /// Next global game epoch.
    pub next_game_epoch: u64,
}

impl EmReport {
    pub fn recon_ratio(&self) -> f64 {
        self.recon_after / self.recon_before
    }
}

/// Alternates reward-injected slotcoder steps (players frozen) with game
/// epochs on refreshed slots (slotcoder frozen). `probe` measures the
/// reconstruction drift; `on_cycle` runs after every cycle, e.g. to write
/// checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn em_loop(
    ds: &Dataset,
    probe: &Dataset,
    sc: &mut Slotcoder,
    players: &mut [Player; 2],
    game: &GameConfig,
    cfg: &TrainConfig,
    first_game_epoch: u64,
    mut on_cycle: impl FnMut(usize, &Slotcoder, &[Player; 2]) -> Result<()>,
) -> Result<(EmReport, SlotCache)> {
    cfg.validate()?;
    let recon_before = mean_recon_loss(sc, probe, cfg.seed)?;
    let mut history = Vec::new();
    let mut game_epoch = first_game_epoch;
    let mut cache = extract_slots(sc, ds, cfg.seed)?;
    let mut recon_after = recon_before;
    for cycle in 0..cfg.em_cycles {
        if cfg.em_m1_steps > 0 {
            let t0 = Instant::now();
            let mut s = EpochStats {
                phase: "m1".into(),
                epoch: cycle,
                ..Default::default()
            };
            for _ in 0..cfg.em_m1_steps {
                let m = em_step_slots(ds, sc, players, game, cfg)?;
                s.recon += m.recon;
                s.reward += m.reward;
            }
            s.recon /= cfg.em_m1_steps as f64;
            s.reward /= cfg.em_m1_steps as f64;
            s.seconds = t0.elapsed().as_secs_f64();
            info!("M1 cycle {cycle}: recon {:.5} reward {:.4}", s.recon, s.reward);
            history.push(s);
            cache = extract_slots(sc, ds, cfg.seed)?;
        }
        for _ in 0..cfg.em_m2_epochs {
            history.push(train_game_epoch(&cache, players, game, cfg, game_epoch)?);
            game_epoch += 1;
        }
        recon_after = mean_recon_loss(sc, probe, cfg.seed)?;
        let ratio = recon_after / recon_before;
        if ratio > 2.0 {
            return Err(OceanError::Diverged(format!(
                "EM cycle {cycle}: reconstruction loss {recon_after:.5} is {:.0}% above the pre-EM {recon_before:.5}",
                (ratio - 1.0) * 100.0
            )));
        }
        if ratio > 1.2 {
            warn!("EM cycle {cycle}: reconstruction drifted {:.1}% from pre-EM", (ratio - 1.0) * 100.0);
        } else {
            info!("EM cycle {cycle}: reconstruction within {:.1}% of pre-EM", (ratio - 1.0) * 100.0);
        }
        on_cycle(cycle, sc, players)?;
    }
    Ok((
        EmReport {
            history,
            recon_before,
            recon_after,
            next_game_epoch: game_epoch,
        },
        cache,
    ))
}
