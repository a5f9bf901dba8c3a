use serde::{Deserialize, Serialize};

use super::EpisodeLog;
use crate::error::{OceanError, Result};

fn nonempty(logs: &[EpisodeLog], what: &str) -> Result<()> {
    if logs.is_empty() {
        return Err(OceanError::invalid(format!("{what} of an empty log set")));
    }
    Ok(())
}

/// Fraction of episodes whose final claims agree.
pub fn consensus_rate(logs: &[EpisodeLog]) -> Result<f64> {
    nonempty(logs, "consensus rate")?;
    Ok(logs.iter().filter(|l| l.consensus()).count() as f64 / logs.len() as f64)
}

/// Accuracy and macro F1. Classes without support or predictions score 0.
pub fn accuracy_f1(logs: &[EpisodeLog]) -> Result<(f64, f64)> {
    nonempty(logs, "accuracy")?;
    let k = logs.iter().map(|l| l.num_classes).max().unwrap_or(0);
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut correct = 0;
    for l in logs {
        if l.prediction == l.label {
            tp[l.label] += 1;
            correct += 1;
        } else {
            fp[l.prediction] += 1;
            fn_[l.label] += 1;
        }
    }
    let f1: f64 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum::<f64>()
        / k as f64;
    Ok((correct as f64 / logs.len() as f64, f1))
}

/// Who a repeat is counted against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Uniqueness {
    /// Only the same player's earlier selections count.
    #[default]
    PerPlayer,
    /// Any earlier selection in the episode counts.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameStats {
    pub game_length: f64,
    pub slot_unique: f64,
    pub empty_slot: f64,
}

/// Mean arguments per episode; unique and empty selections pooled over all
/// arguments.
pub fn game_stats(logs: &[EpisodeLog], uniqueness: Uniqueness) -> Result<GameStats> {
    nonempty(logs, "game statistics")?;
    let mut total = 0usize;
    let mut unique = 0usize;
    let mut empty = 0usize;
    for l in logs {
        for (t, a) in l.arguments.iter().enumerate() {
            let repeated = l.arguments[..t]
                .iter()
                .any(|b| b.slot == a.slot && (uniqueness == Uniqueness::Shared || b.player == a.player));
            unique += !repeated as usize;
            empty += l.empty_slots.get(a.slot).copied().unwrap_or(a.empty) as usize;
            total += 1;
        }
    }
    let frac = |x: usize| if total == 0 { 0.0 } else { x as f64 / total as f64 };
    Ok(GameStats {
        game_length: total as f64 / logs.len() as f64,
        slot_unique: frac(unique),
        empty_slot: frac(empty),
    })
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub config: String,
    pub consensus: f64,
    pub accuracy: f64,
    pub f1_score: f64,
    pub game_length: f64,
    pub empty_slot: f64,
    pub slot_unique: f64,
}

pub fn metrics_report(dataset: &str, config: &str, logs: &[EpisodeLog], uniqueness: Uniqueness) -> Result<MetricsReport> {
    let consensus = consensus_rate(logs)?;
    let (accuracy, f1_score) = accuracy_f1(logs)?;
    let g = game_stats(logs, uniqueness)?;
    Ok(MetricsReport {
        dataset: dataset.to_string(),
        config: config.to_string(),
        consensus,
        accuracy,
        f1_score,
        game_length: g.game_length,
        empty_slot: g.empty_slot,
        slot_unique: g.slot_unique,
    })
}
