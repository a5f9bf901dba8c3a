use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, Player};
use crate::error::{OceanError, Result};
use crate::game::{Episode, EpisodeState, GameConfig};
use crate::numcore::{AdamConfig, Gradients, Real, Tape, Var, LOG_FLOOR};
use crate::rng::{stream_rng, streams};
use crate::scenegen::Dataset;
use crate::slotcoder::{slot_noise, SlotSet, Slotcoder};

use super::eval_noise_key;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_players: f64,
    pub lr_slotcoder: f64,
    /// Weight of the policy-gradient term.
    pub alpha_pg: f64,
    pub alpha_ce: f64,
    pub alpha_base: f64,
    /// Weight of the mean reward subtracted from the reconstruction loss.
    pub lambda: f64,
    pub gamma: f64,
    /// Reward-injected slotcoder steps per EM cycle.
    pub em_m1_steps: usize,
    /// Game-training epochs per EM cycle.
    pub em_m2_epochs: usize,
    pub em_cycles: usize,
    pub seed: u64,
    pub fixed_turns: usize,
    /// Cross-entropy on the last action only instead of every action.
    pub final_turn_ce: bool,
    /// Global gradient-norm cap per player; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_players: 3e-4,
            lr_slotcoder: 1e-4,
            alpha_pg: 1.0,
            alpha_ce: 1.0,
            alpha_base: 0.5,
            lambda: 0.1,
            gamma: 1.0,
            em_m1_steps: 50,
            em_m2_epochs: 2,
            em_cycles: 2,
            seed: 0,
            fixed_turns: 4,
            final_turn_ce: false,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lr_players, self.lr_slotcoder, self.alpha_pg, self.alpha_ce, self.alpha_base, self.lambda, self.gamma, self.clip_norm];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(OceanError::invalid(format!("negative or non-finite weight in {self:?}")));
        }
        if self.batch_size == 0 {
            return Err(OceanError::invalid("batch size must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub phase: String,
    pub epoch: usize,
    pub reinforce: f64,
    pub ce: f64,
    pub baseline: f64,
    pub recon: f64,
    pub reward: f64,
    pub consensus: f64,
    pub accuracy: f64,
    /// Fraction of selections not made earlier by the same player.
    pub slot_unique: f64,
    pub seconds: f64,
}

impl EpochStats {
    pub fn is_finite(&self) -> bool {
        [self.reinforce, self.ce, self.baseline, self.recon, self.reward, self.consensus, self.accuracy, self.slot_unique]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Extracted slots of a whole dataset with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotCache {
    pub sets: Vec<SlotSet>,
    pub labels: Vec<usize>,
}

impl SlotCache {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

/// Slots of every image with the evaluation noise keys.
pub fn extract_slots(sc: &Slotcoder, ds: &Dataset, seed: u64) -> Result<SlotCache> {
    let (n, d) = (sc.cfg().num_slots, sc.cfg().slot_dim);
    let sets = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let noise = slot_noise(seed, eval_noise_key(ds, i), n, d);
            sc.extract(&ds.images[i], &noise, ds.scenes[i].id)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SlotCache {
        sets,
        labels: ds.labels(),
    })
}

/// `−Σ_t log π(a_t) · (G_t − b_t)` with the advantages as constants.
pub fn reinforce_loss<T: Real>(tape: &mut Tape<T>, log_probs: &[Var], returns: &[f64], baselines: &[f64]) -> Result<Var> {
    if log_probs.len() != returns.len() || returns.len() != baselines.len() {
        return Err(OceanError::invalid(format!(
            "reinforce_loss lengths {} / {} / {}",
            log_probs.len(),
            returns.len(),
            baselines.len()
        )));
    }
    let terms: Vec<Var> = log_probs
        .iter()
        .zip(returns.iter().zip(baselines))
        .map(|(&lp, (g, b))| tape.scale(lp, T::lit(-(g - b))))
        .collect();
    if terms.is_empty() {
        return Ok(tape.constant_scalar(T::zero()));
    }
    tape.add_all(&terms)
}

/// Loss components of one finished episode.
pub(crate) struct EpisodeLoss {
    pub total: Var,
    pub reinforce: f64,
    pub ce: f64,
    pub baseline: f64,
}

/// REINFORCE for each actor, cross-entropy of both players' read-outs and
/// the baseline regression, summed over both players.
pub(crate) fn episode_loss<T: Real>(tape: &mut Tape<T>, ep: &Episode, cfg: &TrainConfig) -> Result<EpisodeLoss> {
    let st = &ep.state;
    let g = ep.returns(cfg.gamma);
    let steps = st.len();
    let actor_g: Vec<f64> = (0..steps).map(|t| g[st.actor(t)][t]).collect();
    let reinforce = reinforce_loss(tape, &ep.vars.log_probs, &actor_g, &st.baselines)?;

    let label = [st.label];
    let mut ce_terms = Vec::new();
    for probs in &ep.vars.class_probs {
        let used: &[Var] = if cfg.final_turn_ce { &probs[steps - 1..] } else { probs };
        for &p in used {
            ce_terms.push(tape.cross_entropy(p, &label, T::lit(LOG_FLOOR))?);
        }
    }
    let ce_sum = tape.add_all(&ce_terms)?;
    let ce = tape.scale(ce_sum, T::lit(1.0 / (ce_terms.len() / 2) as f64));

    let mut base_terms = Vec::with_capacity(steps);
    for (t, &b) in ep.vars.baselines.iter().enumerate() {
        let target = tape.constant_scalar(T::lit(actor_g[t]));
        base_terms.push(tape.mse(b, target)?);
    }
    let base = tape.add_all(&base_terms)?;

    let weighted_pg = tape.scale(reinforce, T::lit(cfg.alpha_pg));
    let weighted_ce = tape.scale(ce, T::lit(cfg.alpha_ce));
    let weighted_base = tape.scale(base, T::lit(cfg.alpha_base));
    let total = tape.add_all(&[weighted_pg, weighted_ce, weighted_base])?;
    Ok(EpisodeLoss {
        total,
        reinforce: tape.scalar(reinforce).as_f64(),
        ce: tape.scalar(ce).as_f64(),
        baseline: tape.scalar(base).as_f64(),
    })
}

pub(crate) struct Rollout {
    pub state: EpisodeState,
    pub grads: Gradients<f32>,
    pub reinforce: f64,
    pub ce: f64,
    pub baseline: f64,
}

/// Plays one training episode on cached slots and backpropagates its loss
/// into both players.
pub(crate) fn train_episode(
    players: &[Player; 2],
    set: &SlotSet,
    label: usize,
    game: &GameConfig,
    cfg: &TrainConfig,
    start: usize,
    rng_key: u64,
) -> Result<Rollout> {
    let mut tape = Tape::<f32>::new();
    let bound = [players[0].bind(&mut tape, true), players[1].bind(&mut tape, true)];
    let slots = tape.constant(set.slots.clone());
    let mut ep = Episode::new(&mut tape, [&players[0].arch, &players[1].arch], bound, slots, label, game, start)?;
    let mut rng = stream_rng(cfg.seed, streams::GAME_ACTIONS, rng_key);
    ep.run(&mut tape, &mut rng, ActMode::Sample)?;
    let loss = episode_loss(&mut tape, &ep, cfg)?;
    let value = tape.scalar(loss.total);
    if !value.is_finite() {
        return Err(OceanError::Diverged(format!("episode loss {value} (key {rng_key})")));
    }
    let grads = tape.backward(loss.total)?;
    Ok(Rollout {
        state: ep.into_state(),
        grads,
        reinforce: loss.reinforce,
        ce: loss.ce,
        baseline: loss.baseline,
    })
}

/// One pass over the cached slots. `epoch` is the global game epoch and
/// selects the shuffle; the starting player flips with every batch.
pub fn train_game_epoch(
    cache: &SlotCache,
    players: &mut [Player; 2],
    game: &GameConfig,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<EpochStats> {
    cfg.validate()?;
    if cache.is_empty() {
        return Err(OceanError::invalid("game training needs a nonempty dataset"));
    }
    let n = players[0].cfg().num_slots;
    if let Some(bad) = cache.sets.iter().find(|s| s.num_slots() != n) {
        return Err(OceanError::shape("slot set", bad.slots.shape(), &[n, players[0].cfg().slot_dim]));
    }
    let game = GameConfig {
        fixed_turns: cfg.fixed_turns,
        max_turns: game.max_turns.max(cfg.fixed_turns),
        ..game.training()
    };
    let start_time = Instant::now();
    let mut order: Vec<usize> = (0..cache.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, streams::GAME_ORDER, epoch));
    let adam = AdamConfig::with_lr(cfg.lr_players);
    let mut stats = EpochStats {
        phase: "game".into(),
        epoch: epoch as usize,
        ..Default::default()
    };
    let mut episodes = 0usize;
    let mut reward_terms = 0usize;
    let mut selections = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let step = players[0].params.step_count() + 1;
        let start = (step % 2) as usize;
        let frozen: &[Player; 2] = players;
        let rollouts = batch
            .par_iter()
            .map(|&i| {
                let key = (epoch << 32) | i as u64;
                train_episode(frozen, &cache.sets[i], cache.labels[i], &game, cfg, start, key)
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f32;
        for r in &rollouts {
            for p in players.iter_mut() {
                p.params.accumulate(&r.grads, scale);
            }
            stats.reinforce += r.reinforce;
            stats.ce += r.ce;
            stats.baseline += r.baseline;
            stats.reward += r.state.rewards.iter().flatten().sum::<f64>();
            reward_terms += r.state.rewards.iter().map(Vec::len).sum::<usize>();
            stats.consensus += r.state.consensus() as u8 as f64;
            stats.accuracy += r.state.correct() as u8 as f64;
            let sel = r.state.selections();
            stats.slot_unique += (0..sel.len()).filter(|&t| !sel[..t].contains(&sel[t])).count() as f64;
            selections += sel.len();
            episodes += 1;
        }
        for p in players.iter_mut() {
            if !p.params.grads_finite() {
                return Err(OceanError::Diverged(format!("non-finite player gradient at step {step}")));
            }
            if cfg.clip_norm > 0.0 {
                p.params.clip_grad_norm(cfg.clip_norm);
            }
            p.params.adam_step(&adam, step)?;
        }
    }
    let e = episodes as f64;
    stats.reinforce /= e;
    stats.ce /= e;
    stats.baseline /= e;
    stats.consensus /= e;
    stats.accuracy /= e;
    stats.slot_unique /= selections.max(1) as f64;
    stats.reward /= reward_terms.max(1) as f64;
    stats.seconds = start_time.elapsed().as_secs_f64();
    if !stats.is_finite() {
        return Err(OceanError::Diverged(format!("game epoch {epoch}: {stats:?}")));
    }
    info!(
        "game epoch {epoch}: reward {:.4} ce {:.4} acc {:.3} consensus {:.3} unique {:.3} ({:.1}s)",
        stats.reward, stats.ce, stats.accuracy, stats.consensus, stats.slot_unique, stats.seconds
    );
    Ok(stats)
}
