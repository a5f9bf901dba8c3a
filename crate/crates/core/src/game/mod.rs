//! Two-player consensus game over one image's slots.
//!
//! Players alternate selecting slots. Both observe every selection, both
//! classifiers are read after every action, and both receive a dense reward
//! from their own true-class confidence. The episode lives on a caller
//! supplied tape so its losses can be differentiated.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, PlayerArch, PlayerState, Prepared};
use crate::error::{OceanError, Result};
use crate::numcore::{Bound, Real, Tape, Var};


#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndCondition {
    Consensus,
    Repetition,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardScheme {
    Absolute,
    Relative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum P0Mode {
    Zero,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub end_condition: EndCondition,
    pub confidence_threshold: f64,
    pub max_turns: usize,
    pub fixed_turns: usize,
    pub reward_scheme: RewardScheme,
    pub p0_mode: P0Mode,
    /// Added to the actor's reward for a repeated selection that does not
    /// lower its true-class confidence, when `reward_repeats` is set.
    pub repetition_bonus: f64,
    /// Kept by [`training`](Self::training), so a repetition-ended game
    /// trains with the same bonus it is meant to encourage.
    pub reward_repeats: bool,
    /// Forbid a player from re-selecting its own earlier slots. Ignored
    /// under repetition ending.
    pub mask_repeats: bool,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            end_condition: EndCondition::Consensus,
            confidence_threshold: 0.70,
            max_turns: 10,
            fixed_turns: 4,
            reward_scheme: RewardScheme::Absolute,
            p0_mode: P0Mode::Uniform,
            repetition_bonus: 0.1,
            reward_repeats: false,
            mask_repeats: false,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(OceanError::invalid(format!(
                "confidence threshold {} outside (0, 1)",
                self.confidence_threshold
            )));
        }
        if self.max_turns == 0 || self.fixed_turns == 0 || self.fixed_turns > self.max_turns {
            return Err(OceanError::invalid(format!(
                "need 1 ≤ fixed_turns ({}) ≤ max_turns ({})",
                self.fixed_turns, self.max_turns
            )));
        }
        Ok(())
    }

    pub fn p0(&self, num_classes: usize) -> f64 {
        match self.p0_mode {
            P0Mode::Zero => 0.0,
            P0Mode::Uniform => 1.0 / num_classes as f64,
        }
    }

    /// The same game played for a fixed number of actions.
    pub fn training(&self) -> GameConfig {
        GameConfig {
            end_condition: EndCondition::Fixed,
            ..self.clone()
        }
    }

    fn masking(&self) -> bool {
        self.mask_repeats && self.end_condition != EndCondition::Repetition
    }

    fn bonus(&self) -> f64 {
        if self.reward_repeats {
            self.repetition_bonus
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndStatus {
    Running,
    Consensus,
    Repetition,
    Fixed,
    Truncated,
}

/// One player's classifier read-out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimView {
    pub claim: usize,
    pub confidence: f64,
    /// Probability of the true class.
    pub p_true: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Argument {
    /// Action counter `t`, starting at 0.
    pub step: usize,
    /// Shared turn number `k = t / 2`.
    pub turn: usize,
    pub player: usize,
    pub slot: usize,
    pub slot_vec: Vec<f32>,
    pub claim: usize,
    pub confidence: f64,
    pub distribution: Vec<f64>,
}

/// Serializable record of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub label: usize,
    pub num_classes: usize,
    pub starting_player: usize,
    pub history: Vec<Argument>,
    /// Both players' read-outs after each action.
    pub claims: Vec<[ClaimView; 2]>,
    /// `rewards[i][t]`: player `i`'s reward for action `t`.
    pub rewards: [Vec<f64>; 2],
    pub log_probs: Vec<f64>,
    pub baselines: Vec<f64>,
    pub status: EndStatus,
    pub final_claims: Option<[ClaimView; 2]>,
    pub prediction: Option<usize>,
}

impl EpisodeState {
    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn actor(&self, step: usize) -> usize {
        (self.starting_player + step) % 2
    }

    pub fn selections(&self) -> Vec<(usize, usize)> {
        self.history.iter().map(|a| (a.player, a.slot)).collect()
    }

    pub fn consensus(&self) -> bool {
        self.final_claims.map_or(false, |c| c[0].claim == c[1].claim)
    }

    pub fn correct(&self) -> bool {
        self.prediction == Some(self.label)
    }

    /// Sum of both players' rewards.
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().flatten().sum()
    }
}

/// `r = p_true − p0`.
pub fn turn_reward(p_true: f64, p0: f64) -> f64 {
    p_true - p0
}

/// `r = p − p_other_prev`.
pub fn relative_turn_reward(p: f64, p_other_prev: f64) -> f64 {
    p - p_other_prev
}

/// Status after `selections` (player, slot) with both players' current
/// read-outs `claims`.
pub fn check_end(cfg: &GameConfig, selections: &[(usize, usize)], claims: &[ClaimView; 2]) -> EndStatus {
    let t = selections.len();
    if t == 0 {
        return EndStatus::Running;
    }
    let ended = match cfg.end_condition {
        EndCondition::Consensus => {
            let th = cfg.confidence_threshold;
            (claims[0].claim == claims[1].claim && claims[0].confidence >= th && claims[1].confidence >= th)
                .then_some(EndStatus::Consensus)
        }
        EndCondition::Repetition => {
            let (p, s) = selections[t - 1];
            selections[..t - 1]
                .iter()
                .any(|&(q, r)| q == p && r == s)
                .then_some(EndStatus::Repetition)
        }
        EndCondition::Fixed => (t == cfg.fixed_turns).then_some(EndStatus::Fixed),
    };
    match ended {
        Some(s) => s,
        None if t >= cfg.max_turns => EndStatus::Truncated,
        None => EndStatus::Running,
    }
}

/// The shared claim after consensus, otherwise the more confident player's
/// claim with player 0 winning ties.
pub fn final_prediction(status: EndStatus, claims: &[ClaimView; 2]) -> Result<usize> {
    match status {
        EndStatus::Running => Err(OceanError::Game("final prediction of a running episode".into())),
        EndStatus::Consensus => Ok(claims[0].claim),
        _ if claims[1].confidence > claims[0].confidence => Ok(claims[1].claim),
        _ => Ok(claims[0].claim),
    }
}

/// Replays logged selections and read-outs through the end rule; returns
/// the status, the number of actions consumed and the prediction.
pub fn replay_outcome(cfg: &GameConfig, selections: &[(usize, usize)], claims: &[[ClaimView; 2]]) -> Result<(EndStatus, usize, usize)> {
    for t in 1..=selections.len().min(claims.len()) {
        let status = check_end(cfg, &selections[..t], &claims[t - 1]);
        if status != EndStatus::Running {
            return Ok((status, t, final_prediction(status, &claims[t - 1])?));
        }
    }
    Err(OceanError::Game(format!(
        "transcript of {} actions never ends",
        selections.len()
    )))
}

/// Reward-to-go `G_k = Σ_{k'≥k} γ^{k'−k} r_{k'}`.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for k in (0..rewards.len()).rev() {
        acc = rewards[k] + gamma * acc;
        out[k] = acc;
    }
    out
}

/// Tape handles of an episode.
#[derive(Clone, Debug, Default)]
pub struct EpisodeVars {
    /// Actor's log-probability per action.
    pub log_probs: Vec<Var>,
    /// Actor's baseline per action (head input detached).
    pub baselines: Vec<Var>,
    /// `class_probs[i][t]`: player `i`'s `[1, Y]` distribution after action `t`.
    pub class_probs: [Vec<Var>; 2],
    /// `rewards[i][t]` as differentiable scalars.
    pub rewards: [Vec<Var>; 2],
}

/// A live episode.
pub struct Episode<'a> {
    pub cfg: GameConfig,
    pub state: EpisodeState,
    pub vars: EpisodeVars,
    archs: [&'a PlayerArch; 2],
    bound: [Bound; 2],
    prep: [Prepared; 2],
    pstate: [PlayerState; 2],
    slot_rows: Vec<Vec<f32>>,
    p_true_vars: [Option<Var>; 2],
}

impl<'a> Episode<'a> {
    /// Sets up both players on `tape` for the `[N, D]` slots `slots`.
    /// `bound[i]` is player `i`'s parameters bound on the same tape.
    pub fn new<T: Real>(
        tape: &mut Tape<T>,
        archs: [&'a PlayerArch; 2],
        bound: [Bound; 2],
        slots: Var,
        label: usize,
        cfg: &GameConfig,
        starting_player: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if starting_player > 1 {
            return Err(OceanError::invalid(format!("starting player {starting_player}")));
        }
        let num_classes = archs[0].cfg.num_classes;
        if archs[1].cfg.num_classes != num_classes || label >= num_classes {
            return Err(OceanError::invalid(format!(
                "label {label} for players with {} / {} classes",
                num_classes, archs[1].cfg.num_classes
            )));
        }
        let prep = [
            archs[0].prepare(tape, &bound[0], slots)?,
            archs[1].prepare(tape, &bound[1], slots)?,
        ];
        let pstate = [
            archs[0].policy_init(tape, &bound[0], &prep[0])?,
            archs[1].policy_init(tape, &bound[1], &prep[1])?,
        ];
        let sv = tape.value(slots);
        let slot_rows = (0..sv.dim(0))
            .map(|i| sv.row(i).iter().map(|v| v.as_f64() as f32).collect())
            .collect();
        Ok(Episode {
            cfg: cfg.clone(),
            state: EpisodeState {
                label,
                num_classes,
                starting_player,
                history: Vec::new(),
                claims: Vec::new(),
                rewards: [Vec::new(), Vec::new()],
                log_probs: Vec::new(),
                baselines: Vec::new(),
                status: EndStatus::Running,
                final_claims: None,
                prediction: None,
            },
            vars: EpisodeVars::default(),
            archs,
            bound,
            prep,
            pstate,
            slot_rows,
            p_true_vars: [None, None],
        })
    }

    pub fn player_state(&self, i: usize) -> &PlayerState {
        &self.pstate[i]
    }

    pub fn is_running(&self) -> bool {
        self.state.status == EndStatus::Running
    }

    fn mask_for(&self, actor: usize) -> Option<Vec<bool>> {
        if !self.cfg.masking() {
            return None;
        }
        let mut m = vec![true; self.slot_rows.len()];
        for a in self.state.history.iter().filter(|a| a.player == actor) {
            m[a.slot] = false;
        }
        m.iter().any(|&x| x).then_some(m)
    }

    /// One action by the player whose turn it is.
    pub fn play_turn<T: Real>(&mut self, tape: &mut Tape<T>, rng: &mut ChaCha8Rng, mode: ActMode) -> Result<&Argument> {
        if !self.is_running() {
            return Err(OceanError::Game(format!(
                "play_turn after the episode ended ({:?})",
                self.state.status
            )));
        }
        let t = self.state.len();
        let actor = self.state.actor(t);
        let arch = self.archs[actor];
        let baseline = arch.baseline_value(tape, &self.bound[actor], &self.pstate[actor])?;
        let mask = self.mask_for(actor);
        let action = arch.act(tape, &self.bound[actor], &self.pstate[actor], rng, mode, mask.as_deref())?;
        let slot = action.index;
        let repeated = self.state.history.iter().any(|a| a.player == actor && a.slot == slot);

        let label = self.state.label;
        let p0 = self.cfg.p0(self.state.num_classes);
        let mut views = [ClaimView {
            claim: 0,
            confidence: 0.0,
            p_true: 0.0,
        }; 2];
        let mut claims = Vec::with_capacity(2);
        let mut p_true = Vec::with_capacity(2);
        for i in 0..2 {
            self.pstate[i] = self.archs[i].observe(tape, &self.bound[i], &self.prep[i], &self.pstate[i], slot)?;
            let c = self.archs[i].classify(tape, &self.bound[i], &self.pstate[i])?;
            p_true.push(tape.pick(c.probs, label)?);
            views[i] = ClaimView {
                claim: c.claim,
                confidence: c.confidence,
                p_true: c.distribution[label],
            };
            self.vars.class_probs[i].push(c.probs);
            claims.push(c);
        }
        for i in 0..2 {
            let mut r = match self.cfg.reward_scheme {
                RewardScheme::Absolute => tape.shift(p_true[i], T::lit(-p0)),
                RewardScheme::Relative => match self.p_true_vars[1 - i] {
                    Some(prev) => tape.sub(p_true[i], prev)?,
                    None => tape.shift(p_true[i], T::lit(-p0)),
                },
            };
            let bonus = self.cfg.bonus();
            if i == actor && repeated && bonus != 0.0 {
                let prev = self.state.claims.last().map_or(p0, |c| c[i].p_true);
                if views[i].p_true >= prev {
                    r = tape.shift(r, T::lit(bonus));
                }
            }
            self.state.rewards[i].push(tape.scalar(r).as_f64());
            self.vars.rewards[i].push(r);
        }
        self.p_true_vars = [Some(p_true[0]), Some(p_true[1])];

        self.state.log_probs.push(tape.scalar(action.log_prob).as_f64());
        self.state.baselines.push(tape.scalar(baseline).as_f64());
        self.vars.log_probs.push(action.log_prob);
        self.vars.baselines.push(baseline);
        let own = &claims[actor];
        self.state.history.push(Argument {
            step: t,
            turn: t / 2,
            player: actor,
            slot,
            slot_vec: self.slot_rows[slot].clone(),
            claim: own.claim,
            confidence: own.confidence,
            distribution: own.distribution.clone(),
        });
        self.state.claims.push(views);

        let status = check_end(&self.cfg, &self.state.selections(), &views);
        if status != EndStatus::Running {
            self.state.status = status;
            self.state.final_claims = Some(views);
            self.state.prediction = Some(final_prediction(status, &views)?);
        }
        Ok(self.state.history.last().expect("pushed"))
    }

    /// Plays until the end rule fires.
    pub fn run<T: Real>(&mut self, tape: &mut Tape<T>, rng: &mut ChaCha8Rng, mode: ActMode) -> Result<()> {
        while self.is_running() {
            self.play_turn(tape, rng, mode)?;
        }
        Ok(())
    }

    /// Replays logged actions instead of choosing.
    pub fn run_forced<T: Real>(&mut self, tape: &mut Tape<T>, actions: &[usize]) -> Result<()> {
        let mut rng = crate::rng::stream_rng(0, 0, 0);
        for &a in actions {
            if !self.is_running() {
                break;
            }
            self.play_turn(tape, &mut rng, ActMode::Forced(a))?;
        }
        Ok(())
    }

    /// Per-player reward-to-go, `[player][step]`.
    pub fn returns(&self, gamma: f64) -> [Vec<f64>; 2] {
        [returns(&self.state.rewards[0], gamma), returns(&self.state.rewards[1], gamma)]
    }

    pub fn into_state(self) -> EpisodeState {
        self.state
    }
}

/// Input to [`estimate_utility`]: one slot matrix and its label.
pub struct Sample<'s> {
    pub slots: &'s crate::numcore::Tensor<f32>,
    pub label: usize,
}

/// Monte-Carlo mean of the summed rewards of both players over `episodes`
/// sampled episodes, cycling through `samples`.
pub fn estimate_utility(
    players: [&crate::agent::Player; 2],
    samples: &[Sample],
    cfg: &GameConfig,
    episodes: usize,
    seed: u64,
    mode: ActMode,
) -> Result<f64> {
    use crate::rng::{stream_rng, streams};
    if episodes == 0 || samples.is_empty() {
        return Err(OceanError::invalid("estimate_utility needs M ≥ 1 and samples"));
    }
    let mut total = 0.0;
    for m in 0..episodes {
        let s = &samples[m % samples.len()];
        let mut tape = Tape::<f32>::new();
        let bound = [players[0].bind(&mut tape, false), players[1].bind(&mut tape, false)];
        let slots = tape.constant(s.slots.clone());
        let mut ep = Episode::new(&mut tape, [&players[0].arch, &players[1].arch], bound, slots, s.label, cfg, m % 2)?;
        let mut rng = stream_rng(seed, streams::UTILITY, m as u64);
        ep.run(&mut tape, &mut rng, mode)?;
        total += ep.state.total_reward();
    }
    Ok(total / episodes as f64)
}
