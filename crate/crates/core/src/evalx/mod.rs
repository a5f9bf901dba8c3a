//! Episode logs, metrics, explanation export and report tables.

mod explain;
mod metrics;
mod report;
#[cfg(test)]
mod tests;

pub use explain::{export_explanation, read_explanation, ExplanationRecord, FinalBlock, TurnRecord, EXPLANANDUM_SCHEMA};
pub use metrics::{accuracy_f1, consensus_rate, game_stats, metrics_report, GameStats, MetricsReport, Uniqueness};
pub use report::{emit_report, read_metrics_csv, Curve, METRICS_COLUMNS};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, Player};
use crate::error::{OceanError, Result};
use crate::game::{replay_outcome, ClaimView, EndStatus, Episode, GameConfig};
use crate::numcore::Tape;
use crate::rng::{stream_rng, streams};
use crate::scenegen::SceneAnnotation;
use crate::slotcoder::empty_slot_mask;
use crate::trainer::SlotCache;

/// Pixel box `[x0, y0, x1, y1)` around a slot's attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Box over the feature-grid cells holding at least half of the row's
/// peak attention, scaled to image pixels.
pub fn mask_box(attention: &[f32], side: usize, resolution: usize) -> MaskBox {
    let peak = attention.iter().copied().fold(0f32, f32::max);
    let scale = resolution / side.max(1);
    let (mut x0, mut y0, mut x1, mut y1) = (side, side, 0, 0);
    for (i, &a) in attention.iter().enumerate() {
        if peak > 0.0 && a >= 0.5 * peak {
            let (y, x) = (i / side, i % side);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    if x1 == 0 {
        return MaskBox { x0: 0, y0: 0, x1: 0, y1: 0 };
    }
    MaskBox {
        x0: x0 * scale,
        y0: y0 * scale,
        x1: x1 * scale,
        y1: y1 * scale,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoggedArgument {
    pub step: usize,
    pub player: usize,
    pub slot: usize,
    pub claim: usize,
    pub confidence: f64,
    /// Attention row of the selected slot over the feature grid.
    pub mask: Vec<f32>,
    pub mask_box: MaskBox,
    pub empty: bool,
}

/// Everything needed to recompute metrics and re-render an explanation
/// without model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub scene_id: u64,
    pub label: usize,
    pub num_classes: usize,
    pub confounder_present: bool,
    pub game: GameConfig,
    pub starting_player: usize,
    pub arguments: Vec<LoggedArgument>,
    /// Both players' read-outs after each argument.
    pub claims: Vec<[ClaimView; 2]>,
    pub status: EndStatus,
    pub final_claims: [ClaimView; 2],
    pub prediction: usize,
    /// Empty flag of every slot of the image.
    pub empty_slots: Vec<bool>,
    /// Side of the attention grid.
    pub mask_side: usize,
    pub resolution: usize,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.arguments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arguments.is_empty()
    }

    pub fn selections(&self) -> Vec<(usize, usize)> {
        self.arguments.iter().map(|a| (a.player, a.slot)).collect()
    }

    pub fn consensus(&self) -> bool {
        self.final_claims[0].claim == self.final_claims[1].claim
    }

    pub fn correct(&self) -> bool {
        self.prediction == self.label
    }

    /// Replays the logged selections through the logged claims and checks
    /// the recorded outcome.
    pub fn faithful(&self) -> Result<bool> {
        let (status, len, pred) = replay_outcome(&self.game, &self.selections(), &self.claims)?;
        Ok(status == self.status && len == self.len() && pred == self.prediction)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Greedy,
    Sampled,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub seed: u64,
    /// Empty-slot threshold on attention mass.
    pub tau: f64,
    pub resolution: usize,
}

/// Plays one game per cached image with the evaluation rule set. Image `i`
/// starts with player `i % 2`.
pub fn evaluate(
    players: &[Player; 2],
    cache: &SlotCache,
    scenes: &[SceneAnnotation],
    game: &GameConfig,
    cfg: &EvalConfig,
) -> Result<Vec<EpisodeLog>> {
    game.validate()?;
    if cache.len() != scenes.len() {
        return Err(OceanError::invalid(format!("{} slot sets for {} scenes", cache.len(), scenes.len())));
    }
    (0..cache.len())
        .into_par_iter()
        .map(|i| {
            let set = &cache.sets[i];
            let scene = &scenes[i];
            if set.image_id != scene.id {
                return Err(OceanError::invalid(format!("slot set {} is for image {}, scene is {}", i, set.image_id, scene.id)));
            }
            let mut tape = Tape::<f32>::new();
            let bound = [players[0].bind(&mut tape, false), players[1].bind(&mut tape, false)];
            let slots = tape.constant(set.slots.clone());
            let start = i % 2;
            let mut ep = Episode::new(&mut tape, [&players[0].arch, &players[1].arch], bound, slots, cache.labels[i], game, start)?;
            let mode = match cfg.mode {
                EvalMode::Greedy => ActMode::Greedy,
                EvalMode::Sampled => ActMode::Sample,
            };
            let mut rng = stream_rng(cfg.seed, streams::EVAL_ACTIONS, i as u64);
            ep.run(&mut tape, &mut rng, mode)?;
            let st = ep.into_state();
            let empty = empty_slot_mask(set, cfg.tau);
            let l = set.attention.dim(1);
            let side = (l as f64).sqrt().round() as usize;
            let arguments = st
                .history
                .iter()
                .map(|a| {
                    let mask = set.attention.row(a.slot).to_vec();
                    LoggedArgument {
                        step: a.step,
                        player: a.player,
                        slot: a.slot,
                        claim: a.claim,
                        confidence: a.confidence,
                        mask_box: mask_box(&mask, side, cfg.resolution),
                        mask,
                        empty: empty[a.slot],
                    }
                })
                .collect();
            let (final_claims, prediction) = match (st.final_claims, st.prediction) {
                (Some(c), Some(p)) => (c, p),
                _ => return Err(OceanError::Game(format!("episode for image {} did not finish", scene.id))),
            };
            Ok(EpisodeLog {
                scene_id: scene.id,
                label: st.label,
                num_classes: st.num_classes,
                confounder_present: scene.confounder_present,
                game: game.clone(),
                starting_player: st.starting_player,
                arguments,
                claims: st.claims,
                status: st.status,
                final_claims,
                prediction,
                empty_slots: empty,
                mask_side: side,
                resolution: cfg.resolution,
            })
        })
        .collect()
}
