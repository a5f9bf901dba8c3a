//! One player of the consensus game: slot-index embedding, a residual
//! modulator, separate policy and classifier recurrent paths, and the
//! policy, classifier and baseline heads.
//!
//! Everything runs on a caller-supplied [`Tape`] so that an episode's
//! losses can be backpropagated into the players (game training) or into
//! the slots (reward injection).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OceanError, Result};
use crate::numcore::{bind, Activation, Bound, Gru, Linear, Mlp, ParamStore, Real, Tape, Tensor, Var, LOG_FLOOR};
use crate::rng::{stream_rng, streams};


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlayerConfig {
    pub num_slots: usize,
    pub slot_dim: usize,
    pub hidden: usize,
    pub modulator_hidden: usize,
    pub num_classes: usize,
    /// Standard deviation of the index-embedding table at init.
    pub embed_std: f64,
}

impl PlayerConfig {
    pub fn new(num_slots: usize, slot_dim: usize, num_classes: usize) -> Self {
        PlayerConfig {
            num_slots,
            slot_dim,
            hidden: 64,
            modulator_hidden: 64,
            num_classes,
            embed_std: 0.1,
        }
    }
}

/// Block layout of one player inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PlayerArch {
    pub cfg: PlayerConfig,
    pub embed: usize,
    pub modulator: Mlp,
    pub policy_rnn: Gru,
    pub classifier_rnn: Gru,
    pub policy: Linear,
    pub classifier: Linear,
    pub baseline: Linear,
}

impl PlayerArch {
    /// Modulator output layer and all heads start at zero, so a fresh
    /// player embeds `slot + index` unchanged, acts uniformly and predicts
    /// the uniform class distribution.
    pub fn build<T: Real, R: Rng>(cfg: &PlayerConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        if cfg.num_slots == 0 || cfg.slot_dim == 0 || cfg.hidden == 0 || cfg.num_classes < 2 {
            return Err(OceanError::invalid(format!("bad player config {cfg:?}")));
        }
        let (n, d, h) = (cfg.num_slots, cfg.slot_dim, cfg.hidden);
        let embed = if cfg.embed_std > 0.0 {
            store.normal("embed", &[n, d], cfg.embed_std, rng)
        } else {
            store.zeros("embed", &[n, d])
        };
        let modulator = Mlp::new(store, "modulator", d, cfg.modulator_hidden, d, Activation::Relu, 0.0, rng);
        let policy_rnn = Gru::new(store, "policy_rnn", d, h, rng);
        let classifier_rnn = Gru::new(store, "classifier_rnn", d, h, rng);
        let policy = Linear::new(store, "policy", h, n, 0.0, rng);
        let classifier = Linear::new(store, "classifier", h, cfg.num_classes, 0.0, rng);
        let baseline = Linear::new(store, "baseline", h, 1, 0.0, rng);
        Ok(PlayerArch {
            cfg: cfg.clone(),
            embed,
            modulator,
            policy_rnn,
            classifier_rnn,
            policy,
            classifier,
            baseline,
        })
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.cfg.num_slots {
            return Err(OceanError::Index {
                what: "slot index",
                index,
                len: self.cfg.num_slots,
            });
        }
        Ok(())
    }

    /// `e = M(s + p_index)` with the residual modulator `M(x) = x + mlp(x)`,
    /// for a `[1, D]` slot row.
    pub fn embed_argument<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, slot: Var, index: usize) -> Result<Var> {
        self.check_index(index)?;
        let row = tape.rows(p.get(self.embed), &[index])?;
        let x = tape.add(slot, row)?;
        self.modulate(tape, p, x)
    }

    fn modulate<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let m = self.modulator.forward(tape, p, x)?;
        tape.add(x, m)
    }

    /// Embeds every slot of `[N, D]` at once and projects the embeddings
    /// into both recurrent cells.
    pub fn prepare<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, slots: Var) -> Result<Prepared> {
        let (n, d) = (self.cfg.num_slots, self.cfg.slot_dim);
        if tape.shape(slots) != [n, d] {
            return Err(OceanError::shape("player slots", tape.shape(slots), &[n, d]));
        }
        let x = tape.add(slots, p.get(self.embed))?;
        let e = self.modulate(tape, p, x)?;
        Ok(Prepared {
            embedded: e,
            gx_policy: self.policy_rnn.project_input(tape, p, e)?,
            gx_classifier: self.classifier_rnn.project_input(tape, p, e)?,
        })
    }

    /// Fresh state: the policy path has read every slot in index order,
    /// the classifier path is zero.
    pub fn policy_init<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, prep: &Prepared) -> Result<PlayerState> {
        let mut h = self.policy_rnn.zero_state(tape, 1);
        for n in 0..self.cfg.num_slots {
            let gx = tape.rows(prep.gx_policy, &[n])?;
            h = self.policy_rnn.step_projected(tape, p, gx, h)?;
        }
        Ok(PlayerState {
            h_policy: h,
            h_classifier: self.classifier_rnn.zero_state(tape, 1),
            turns: 0,
        })
    }

    /// Both paths read the selected slot.
    pub fn observe<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, prep: &Prepared, state: &PlayerState, index: usize) -> Result<PlayerState> {
        self.check_index(index)?;
        let gp = tape.rows(prep.gx_policy, &[index])?;
        let gc = tape.rows(prep.gx_classifier, &[index])?;
        Ok(PlayerState {
            h_policy: self.policy_rnn.step_projected(tape, p, gp, state.h_policy)?,
            h_classifier: self.classifier_rnn.step_projected(tape, p, gc, state.h_classifier)?,
            turns: state.turns + 1,
        })
    }

    /// Action distribution `[1, N]`; masked entries get probability 0.
    pub fn policy_probs<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, state: &PlayerState, mask: Option<&[bool]>) -> Result<Var> {
        if let Some(m) = mask {
            if m.len() != self.cfg.num_slots {
                return Err(OceanError::shape("action mask", &[m.len()], &[self.cfg.num_slots]));
            }
            if !m.iter().any(|&a| a) {
                return Err(OceanError::Game("every action is masked".into()));
            }
        }
        let logits = self.policy.forward(tape, p, state.h_policy)?;
        tape.softmax_axis(logits, 1, mask)
    }

    /// Picks an action and returns it with its log-probability.
    pub fn act<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        state: &PlayerState,
        rng: &mut ChaCha8Rng,
        mode: ActMode,
        mask: Option<&[bool]>,
    ) -> Result<Action> {
        let probs = self.policy_probs(tape, p, state, mask)?;
        let dist: Vec<f64> = tape.value(probs).data().iter().map(|v| v.as_f64()).collect();
        let index = match mode {
            ActMode::Sample => sample_index(&dist, rng),
            ActMode::Greedy => argmax(&dist),
            ActMode::Forced(i) => {
                self.check_index(i)?;
                if dist[i] == 0.0 {
                    return Err(OceanError::Game(format!("forced action {i} is masked")));
                }
                i
            }
        };
        let picked = tape.pick(probs, index)?;
        let log_prob = tape.log(picked, T::lit(LOG_FLOOR));
        Ok(Action {
            index,
            log_prob,
            probs,
            distribution: dist,
        })
    }

    /// Class distribution `[1, Y]` from the classifier path.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, state: &PlayerState) -> Result<Claim> {
        let logits = self.classifier.forward(tape, p, state.h_classifier)?;
        let probs = tape.softmax_axis(logits, 1, None)?;
        let dist: Vec<f64> = tape.value(probs).data().iter().map(|v| v.as_f64()).collect();
        let claim = argmax(&dist);
        Ok(Claim {
            probs,
            claim,
            confidence: dist[claim],
            distribution: dist,
        })
    }

    /// Scalar value estimate from a detached policy state, so the baseline
    /// loss only trains the baseline head.
    pub fn baseline_value<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, state: &PlayerState) -> Result<Var> {
        let h = tape.detach(state.h_policy);
        let b = self.baseline.forward(tape, p, h)?;
        tape.reshape(b, &[])
    }
}

/// Per-episode embeddings of all slots and their recurrent projections.
#[derive(Clone, Copy, Debug)]
pub struct Prepared {
    /// `[N, D]`
    pub embedded: Var,
    /// `[N, 3H]`
    pub gx_policy: Var,
    /// `[N, 3H]`
    pub gx_classifier: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PlayerState {
    pub h_policy: Var,
    pub h_classifier: Var,
    pub turns: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActMode {
    Sample,
    Greedy,
    /// Replays a logged action.
    Forced(usize),
}

#[derive(Clone, Debug)]
pub struct Action {
    pub index: usize,
    pub log_prob: Var,
    pub probs: Var,
    pub distribution: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Claim {
    pub probs: Var,
    pub claim: usize,
    pub confidence: f64,
    pub distribution: Vec<f64>,
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; zero-probability entries are never chosen.
pub fn sample_index(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen::<f64>() * dist.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// A player's architecture together with its parameters.
#[derive(Clone, Debug)]
pub struct Player {
    pub arch: PlayerArch,
    pub params: ParamStore<f32>,
}

impl Player {
    /// `tag` identifies this player's gradients on a shared tape; `index`
    /// selects its initialization stream.
    pub fn new(cfg: &PlayerConfig, tag: u32, seed: u64, index: u64) -> Result<Self> {
        let mut params = ParamStore::new(tag);
        let mut rng = stream_rng(seed, streams::INIT_PLAYERS, index);
        let arch = PlayerArch::build(cfg, &mut params, &mut rng)?;
        Ok(Player { arch, params })
    }

    pub fn cfg(&self) -> &PlayerConfig {
        &self.arch.cfg
    }

    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Bound {
        bind(tape, &self.params, trainable)
    }
}

/// Tags of the two players' stores; the slotcoder uses 0.
pub const PLAYER_TAGS: [u32; 2] = [1, 2];

/// A fresh pair of independent players.
pub fn new_players(cfg: &PlayerConfig, seed: u64) -> Result<[Player; 2]> {
    Ok([Player::new(cfg, PLAYER_TAGS[0], seed, 0)?, Player::new(cfg, PLAYER_TAGS[1], seed, 1)?])
}

/// `[N, D]` constant of a slot matrix.
pub fn slots_constant<T: Real>(tape: &mut Tape<T>, slots: &Tensor<f32>) -> Var {
    tape.constant(slots.cast())
}
