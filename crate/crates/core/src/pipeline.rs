//! Named configuration presets and the warm-up → game → evaluation run
//! shared by the command line and the acceptance suite.

use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::agent::{new_players, Player, PlayerConfig};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{OceanError, Result};
use crate::evalx::{evaluate, metrics_report, Curve, EpisodeLog, EvalConfig, EvalMode, MetricsReport, Uniqueness};
use crate::game::{EndCondition, GameConfig};
use crate::scenegen::{Dataset, RuleSet};
use crate::slotcoder::{Slotcoder, SlotcoderConfig};
use crate::trainer::{extract_slots, mean_recon_loss, train_game_epoch, warmup_slots, EpochStats, TrainConfig, WarmupConfig, WarmupEpoch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PresetName {
    A,
    B,
    C,
}

impl FromStr for PresetName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" | "a" => Ok(PresetName::A),
            "B" | "b" => Ok(PresetName::B),
            "C" | "c" => Ok(PresetName::C),
            other => Err(format!("unknown preset `{other}` (A | B | C)")),
        }
    }
}

impl std::fmt::Display for PresetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Everything that defines a run apart from data and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: PresetName,
    pub slotcoder: SlotcoderConfig,
    pub player_hidden: usize,
    pub modulator_hidden: usize,
    pub game: GameConfig,
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
    pub eval_mode: EvalMode,
    pub uniqueness: Uniqueness,
}

impl Preset {
    pub fn named(name: PresetName) -> Preset {
        let base = Preset {
            name,
            slotcoder: SlotcoderConfig::desk32(),
            player_hidden: 64,
            modulator_hidden: 64,
            game: GameConfig::default(),
            warmup: WarmupConfig::default(),
            train: TrainConfig {
                batch_size: 8,
                lr_players: 1e-3,
                ..TrainConfig::default()
            },
            eval_mode: EvalMode::Greedy,
            uniqueness: Uniqueness::PerPlayer,
        };
        match name {
            PresetName::A => base,
            PresetName::B => Preset {
                game: GameConfig {
                    end_condition: EndCondition::Repetition,
                    reward_repeats: true,
                    ..base.game
                },
                ..base
            },
            PresetName::C => Preset {
                slotcoder: SlotcoderConfig::desk64(),
                player_hidden: 128,
                modulator_hidden: 128,
                ..base
            },
        }
    }

    pub fn resolution(&self) -> usize {
        self.slotcoder.resolution
    }

    pub fn player_config(&self, num_classes: usize) -> PlayerConfig {
        PlayerConfig {
            hidden: self.player_hidden,
            modulator_hidden: self.modulator_hidden,
            ..PlayerConfig::new(self.slotcoder.num_slots, self.slotcoder.slot_dim, num_classes)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.warmup.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            mode: self.eval_mode,
            seed: self.train.seed,
            tau: self.slotcoder.empty_tau,
            resolution: self.slotcoder.resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.game.validate()?;
        self.train.validate()
    }
}

/// Checks that a dataset matches the preset's image size.
pub fn check_resolution(ds: &Dataset, preset: &Preset) -> Result<()> {
    if ds.header.resolution != preset.resolution() {
        return Err(OceanError::invalid(format!(
            "{} data is {}×{}, preset {} expects {}×{}",
            ds.header.split.file_stem(),
            ds.header.resolution,
            ds.header.resolution,
            preset.name,
            preset.resolution(),
            preset.resolution()
        )));
    }
    Ok(())
}

pub fn class_names(ds: &Dataset) -> Vec<String> {
    RuleSet::new(ds.header.rule_set).classes.iter().map(|c| c.description.to_string()).collect()
}

pub fn warmup_stage(preset: &Preset, train: &Dataset) -> Result<(Slotcoder, Vec<WarmupEpoch>)> {
    check_resolution(train, preset)?;
    let mut sc = Slotcoder::new(&preset.slotcoder, preset.warmup.seed)?;
    let history = warmup_slots(train, &mut sc, &preset.warmup, |e| {
        info!("warm-up epoch {}: recon {:.5} ({:.1}s)", e.epoch, e.recon, e.seconds)
    })?;
    Ok((sc, history))
}

/// Fresh players trained for the preset's epoch count on frozen slots.
pub fn game_stage(preset: &Preset, sc: &Slotcoder, train: &Dataset) -> Result<([Player; 2], Vec<EpochStats>)> {
    preset.validate()?;
    let num_classes = RuleSet::new(train.header.rule_set).num_classes();
    let mut players = new_players(&preset.player_config(num_classes), preset.train.seed)?;
    let cache = extract_slots(sc, train, preset.train.seed)?;
    let history = (0..preset.train.epochs as u64)
        .map(|e| train_game_epoch(&cache, &mut players, &preset.game, &preset.train, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((players, history))
}

pub fn eval_stage(preset: &Preset, sc: &Slotcoder, players: &[Player; 2], ds: &Dataset) -> Result<Vec<EpisodeLog>> {
    check_resolution(ds, preset)?;
    let cache = extract_slots(sc, ds, preset.train.seed)?;
    evaluate(players, &cache, &ds.scenes, &preset.game, &preset.eval_config())
}

/// Row label for a dataset, e.g. `hans3-lite/test`.
pub fn dataset_label(ds: &Dataset) -> String {
    format!("{}/{}", ds.header.rule_set, ds.header.split.file_stem())
}

/// Outcome of a full desk-scale run.
pub struct DeskRun {
    pub slotcoder: Slotcoder,
    pub players: [Player; 2],
    pub warmup: Vec<WarmupEpoch>,
    pub game: Vec<EpochStats>,
    pub recon_eval: Vec<(String, f64)>,
    /// One row per evaluation dataset.
    pub reports: Vec<MetricsReport>,
    pub logs: Vec<Vec<EpisodeLog>>,
    pub seconds: f64,
}

impl DeskRun {
    pub fn curves(&self) -> Vec<Curve> {
        let series = |name: &str, f: &dyn Fn(&EpochStats) -> f64| Curve {
            name: name.to_string(),
            points: self.game.iter().map(|s| (s.epoch as f64, f(s))).collect(),
        };
        vec![
            Curve {
                name: "warmup_recon".into(),
                points: self.warmup.iter().map(|e| (e.epoch as f64, e.recon)).collect(),
            },
            series("game_reward", &|s| s.reward),
            series("game_ce", &|s| s.ce),
            series("game_accuracy", &|s| s.accuracy),
            series("game_consensus", &|s| s.consensus),
        ]
    }
}

/// Warm-up, game training and evaluation on every `eval` dataset.
pub fn run_desk(preset: &Preset, train: &Dataset, eval: &[&Dataset]) -> Result<DeskRun> {
    let t0 = Instant::now();
    let (slotcoder, warmup) = warmup_stage(preset, train)?;
    let (players, game) = game_stage(preset, &slotcoder, train)?;
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    let mut recon_eval = Vec::new();
    for ds in eval {
        let l = eval_stage(preset, &slotcoder, &players, ds)?;
        reports.push(metrics_report(&dataset_label(ds), &preset.name.to_string(), &l, preset.uniqueness)?);
        recon_eval.push((dataset_label(ds), mean_recon_loss(&slotcoder, ds, preset.train.seed)?));
        logs.push(l);
    }
    Ok(DeskRun {
        slotcoder,
        players,
        warmup,
        game,
        recon_eval,
        reports,
        logs,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

pub const SLOTCODER_FILE: &str = "slotcoder.ockp";
pub const PLAYERS_FILE: &str = "players.ockp";
const PLAYER_PREFIXES: [&str; 2] = ["p1.", "p2."];

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    preset: Preset,
    num_classes: Option<usize>,
}

pub fn save_slotcoder(dir: &std::path::Path, preset: &Preset, sc: &Slotcoder) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(SLOTCODER_FILE);
    let meta = serde_json::to_value(CheckpointMeta {
        preset: preset.clone(),
        num_classes: None,
    })?;
    write_checkpoint(&path, &[("", &sc.params)], meta)?;
    Ok(path)
}

pub fn save_players(dir: &std::path::Path, preset: &Preset, players: &[Player; 2]) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(PLAYERS_FILE);
    let meta = serde_json::to_value(CheckpointMeta {
        preset: preset.clone(),
        num_classes: Some(players[0].cfg().num_classes),
    })?;
    write_checkpoint(&path, &[(PLAYER_PREFIXES[0], &players[0].params), (PLAYER_PREFIXES[1], &players[1].params)], meta)?;
    Ok(path)
}

/// Slotcoder stored in `dir` together with the preset it was trained with.
pub fn load_slotcoder(dir: &std::path::Path) -> Result<(Preset, Slotcoder)> {
    let ck = read_checkpoint(&dir.join(SLOTCODER_FILE))?;
    let meta: CheckpointMeta = serde_json::from_value(ck.manifest.meta.clone())?;
    let mut sc = Slotcoder::new(&meta.preset.slotcoder, meta.preset.warmup.seed)?;
    ck.load_into("", &mut sc.params)?;
    Ok((meta.preset, sc))
}

pub fn load_players(dir: &std::path::Path) -> Result<(Preset, [Player; 2])> {
    let ck = read_checkpoint(&dir.join(PLAYERS_FILE))?;
    let meta: CheckpointMeta = serde_json::from_value(ck.manifest.meta.clone())?;
    let classes = meta
        .num_classes
        .ok_or_else(|| OceanError::invalid("player checkpoint lacks the class count"))?;
    let mut players = new_players(&meta.preset.player_config(classes), meta.preset.train.seed)?;
    for (p, prefix) in players.iter_mut().zip(PLAYER_PREFIXES) {
        ck.load_into(prefix, &mut p.params)?;
    }
    Ok((meta.preset, players))
}
