mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use ocean_core::evalx::{emit_report, export_explanation, metrics_report, read_metrics_csv, Curve, EpisodeLog, EvalMode, MetricsReport};
use ocean_core::pipeline::{self, Preset, PresetName};
use ocean_core::scenegen::{generate_split, read_archive, write_archive, Dataset, RuleSet, RuleSetName, SceneConfig, Split};
use ocean_core::trainer::{em_loop, mean_recon_loss, EpochStats};
use ocean_core::{OceanError, Result};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "ocean", version, about = "Consensus-game image classifier with slot-based explanations")]
struct Cli {
    /// Root seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render train / confounded-val / non-confounded-test archives.
    GenData(GenData),
    /// Train the slot autoencoder on reconstruction alone.
    Warmup(Warmup),
    /// Train both players on frozen slots.
    TrainGame(TrainGame),
    /// Warm-up, game training and alternating end-to-end cycles.
    TrainE2e(TrainE2e),
    /// Play evaluation games and write the metrics table.
    Eval(Eval),
    /// Export explananda (JSON record and SVG composite) per image.
    Explain(Explain),
    /// Merge metrics tables and draw learning curves.
    Report(Report),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value = "hans3-lite")]
    rules: RuleSetName,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_val: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Preset name (A, B, C) or a JSON preset file.
    #[arg(long, default_value = "A")]
    config: String,
    /// Overrides the preset's epoch count for this stage.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct Warmup {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainGame {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Directory holding the warmed-up slotcoder.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainE2e {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Val,
    Test,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Val => vec![Split::ValConfounded],
            SplitArg::Test => vec![Split::TestNonconfounded],
            SplitArg::All => vec![Split::ValConfounded, Split::TestNonconfounded],
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Greedy,
    Sampled,
}

#[derive(Args, Debug)]
struct Eval {
    /// Preset name or file; defaults to the one stored in the checkpoint.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
struct Explain {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Number of images, taken in archive order.
    #[arg(long, default_value_t = 10)]
    count: usize,
}

#[derive(Args, Debug)]
struct Report {
    /// Run directories containing metrics.csv (and optionally train_stats.csv).
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_preset(spec: &str, seed: u64) -> Result<Preset> {
    let preset = match spec.parse::<PresetName>() {
        Ok(name) => Preset::named(name),
        Err(_) if Path::new(spec).is_file() => serde_json::from_str(&std::fs::read_to_string(spec)?)?,
        Err(e) => return Err(OceanError::invalid(e)),
    };
    let preset = preset.with_seed(seed);
    preset.validate()?;
    Ok(preset)
}

fn archive_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.ocds", split.file_stem()))
}

fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let path = archive_path(dir, split);
    read_archive(&path).map_err(|e| OceanError::invalid(format!("{}: {e}", path.display())))
}

fn write_stats(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

fn write_logs(path: &Path, logs: &[EpisodeLog]) -> Result<()> {
    let mut text = String::new();
    for l in logs {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn gen_data(a: &GenData, seed: u64, m: &mut RunManifest) -> Result<()> {
    let rules = RuleSet::new(a.rules);
    std::fs::create_dir_all(&a.out)?;
    for (split, n) in [(Split::Train, a.n_train), (Split::ValConfounded, a.n_val), (Split::TestNonconfounded, a.n_test)] {
        let ds = generate_split(&rules, split, n, a.res, seed, &SceneConfig::default())?;
        let path = archive_path(&a.out, split);
        write_archive(&path, &ds)?;
        info!("wrote {} scenes to {}", n, path.display());
        m.outputs.push(path);
    }
    m.config = serde_json::json!({"rules": a.rules, "n_train": a.n_train, "n_val": a.n_val, "n_test": a.n_test, "res": a.res});
    Ok(())
}

fn warmup(a: &Warmup, seed: u64, m: &mut RunManifest) -> Result<()> {
    let mut preset = resolve_preset(&a.cfg.config, seed)?;
    if let Some(e) = a.cfg.epochs {
        preset.warmup.epochs = e;
    }
    let train = load_split(&a.data, Split::Train)?;
    m.hash_input(&archive_path(&a.data, Split::Train))?;
    let (sc, history) = pipeline::warmup_stage(&preset, &train)?;
    std::fs::create_dir_all(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("warmup_stats.csv"))?;
    for h in &history {
        w.serialize(h)?;
    }
    w.flush()?;
    m.outputs.push(a.out.join("warmup_stats.csv"));
    m.outputs.push(pipeline::save_slotcoder(&a.out, &preset, &sc)?);
    m.config = serde_json::to_value(&preset)?;
    Ok(())
}

fn train_game(a: &TrainGame, seed: u64, m: &mut RunManifest) -> Result<()> {
    let mut preset = resolve_preset(&a.cfg.config, seed)?;
    if let Some(e) = a.cfg.epochs {
        preset.train.epochs = e;
    }
    let (stored, sc) = pipeline::load_slotcoder(&a.checkpoint)?;
    if stored.slotcoder != preset.slotcoder {
        return Err(OceanError::invalid(format!("checkpoint slotcoder was trained with preset {}, not {}", stored.name, preset.name)));
    }
    m.hash_input(&a.checkpoint.join(pipeline::SLOTCODER_FILE))?;
    m.hash_input(&archive_path(&a.data, Split::Train))?;
    let train = load_split(&a.data, Split::Train)?;
    let (players, history) = pipeline::game_stage(&preset, &sc, &train)?;
    std::fs::create_dir_all(&a.out)?;
    write_stats(&a.out.join("train_stats.csv"), &history)?;
    m.outputs.push(a.out.join("train_stats.csv"));
    if a.out != a.checkpoint {
        m.outputs.push(pipeline::save_slotcoder(&a.out, &preset, &sc)?);
    }
    m.outputs.push(pipeline::save_players(&a.out, &preset, &players)?);
    m.config = serde_json::to_value(&preset)?;
    Ok(())
}

fn train_e2e(a: &TrainE2e, seed: u64, m: &mut RunManifest) -> Result<()> {
    let mut preset = resolve_preset(&a.cfg.config, seed)?;
    if let Some(e) = a.cfg.epochs {
        preset.train.epochs = e;
    }
    let train = load_split(&a.data, Split::Train)?;
    let probe = load_split(&a.data, Split::ValConfounded)?;
    m.hash_input(&archive_path(&a.data, Split::Train))?;
    m.hash_input(&archive_path(&a.data, Split::ValConfounded))?;
    let (mut sc, _) = pipeline::warmup_stage(&preset, &train)?;
    let (mut players, mut history) = pipeline::game_stage(&preset, &sc, &train)?;
    std::fs::create_dir_all(&a.out)?;
    let out = a.out.clone();
    let (report, _) = em_loop(&train, &probe, &mut sc, &mut players, &preset.game, &preset.train, preset.train.epochs as u64, |cycle, sc, ps| {
        info!("EM cycle {cycle} done; checkpointing");
        pipeline::save_slotcoder(&out, &preset, sc)?;
        pipeline::save_players(&out, &preset, ps)?;
        Ok(())
    })?;
    info!("EM reconstruction {:.5} → {:.5} ({:+.1}%)", report.recon_before, report.recon_after, (report.recon_ratio() - 1.0) * 100.0);
    history.extend(report.history);
    write_stats(&a.out.join("train_stats.csv"), &history)?;
    m.outputs.push(a.out.join("train_stats.csv"));
    m.outputs.push(pipeline::save_slotcoder(&a.out, &preset, &sc)?);
    m.outputs.push(pipeline::save_players(&a.out, &preset, &players)?);
    m.config = serde_json::to_value(&preset)?;
    Ok(())
}

/// Checkpointed preset unless `--config` overrides it.
fn eval_preset(config: Option<&str>, stored: Preset, seed: u64) -> Result<Preset> {
    match config {
        Some(c) => {
            let p = resolve_preset(c, seed)?;
            if p.slotcoder != stored.slotcoder || p.player_config(2).hidden != stored.player_config(2).hidden {
                return Err(OceanError::invalid(format!("checkpoint was trained with preset {}, not {}", stored.name, p.name)));
            }
            Ok(p)
        }
        None => Ok(stored.with_seed(seed)),
    }
}

fn eval(a: &Eval, seed: u64, m: &mut RunManifest) -> Result<()> {
    let (_, sc) = pipeline::load_slotcoder(&a.checkpoint)?;
    let (stored, players) = pipeline::load_players(&a.checkpoint)?;
    let mut preset = eval_preset(a.config.as_deref(), stored, seed)?;
    if let Some(mode) = a.mode {
        preset.eval_mode = match mode {
            ModeArg::Greedy => EvalMode::Greedy,
            ModeArg::Sampled => EvalMode::Sampled,
        };
    }
    m.hash_input(&a.checkpoint.join(pipeline::SLOTCODER_FILE))?;
    m.hash_input(&a.checkpoint.join(pipeline::PLAYERS_FILE))?;
    std::fs::create_dir_all(&a.out)?;
    let mut reports: Vec<MetricsReport> = Vec::new();
    for split in a.split.splits() {
        m.hash_input(&archive_path(&a.data, split))?;
        let ds = load_split(&a.data, split)?;
        let logs = pipeline::eval_stage(&preset, &sc, &players, &ds)?;
        let r = metrics_report(&pipeline::dataset_label(&ds), &preset.name.to_string(), &logs, preset.uniqueness)?;
        info!(
            "{}: accuracy {:.3} consensus {:.3} length {:.2} unique {:.3} recon {:.5}",
            r.dataset,
            r.accuracy,
            r.consensus,
            r.game_length,
            r.slot_unique,
            mean_recon_loss(&sc, &ds, preset.train.seed)?
        );
        let path = a.out.join(format!("episodes_{}.jsonl", split.file_stem()));
        write_logs(&path, &logs)?;
        m.outputs.push(path);
        reports.push(r);
    }
    let curves = match std::fs::metadata(a.checkpoint.join("train_stats.csv")) {
        Ok(_) => curves_from_stats(&a.checkpoint.join("train_stats.csv"))?,
        Err(_) => Vec::new(),
    };
    m.outputs.extend(emit_report(&reports, &curves, &a.out)?);
    m.config = serde_json::to_value(&preset)?;
    Ok(())
}

fn explain(a: &Explain, seed: u64, m: &mut RunManifest) -> Result<()> {
    let (_, sc) = pipeline::load_slotcoder(&a.checkpoint)?;
    let (stored, players) = pipeline::load_players(&a.checkpoint)?;
    let preset = eval_preset(a.config.as_deref(), stored, seed)?;
    m.hash_input(&a.checkpoint.join(pipeline::PLAYERS_FILE))?;
    for split in a.split.splits() {
        m.hash_input(&archive_path(&a.data, split))?;
        let ds = load_split(&a.data, split)?.truncated(a.count);
        let names = pipeline::class_names(&ds);
        let logs = pipeline::eval_stage(&preset, &sc, &players, &ds)?;
        let dir = a.out.join(split.file_stem());
        let mut unfaithful = 0;
        for l in &logs {
            if !l.faithful()? {
                unfaithful += 1;
                error!("explanandum {} does not replay to its prediction", l.scene_id);
            }
            let (_, json, svg) = export_explanation(l, &ds, &names, &dir)?;
            m.outputs.push(json);
            m.outputs.push(svg);
        }
        if unfaithful > 0 {
            return Err(OceanError::Game(format!("{unfaithful} of {} explananda failed replay", logs.len())));
        }
        info!("exported {} explananda to {}", logs.len(), dir.display());
    }
    m.config = serde_json::to_value(&preset)?;
    Ok(())
}

fn curves_from_stats(path: &Path) -> Result<Vec<Curve>> {
    let mut r = csv::Reader::from_path(path)?;
    let stats: Vec<EpochStats> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    let game: Vec<&EpochStats> = stats.iter().filter(|s| s.phase == "game").collect();
    let series = |name: &str, f: fn(&EpochStats) -> f64| Curve {
        name: name.to_string(),
        points: game.iter().enumerate().map(|(i, s)| (i as f64, f(s))).collect(),
    };
    Ok(vec![
        series("game_reward", |s| s.reward),
        series("game_ce", |s| s.ce),
        series("game_accuracy", |s| s.accuracy),
        series("game_consensus", |s| s.consensus),
    ])
}

fn report(a: &Report, m: &mut RunManifest) -> Result<()> {
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for dir in &a.inputs {
        let metrics = dir.join("metrics.csv");
        m.hash_input(&metrics)?;
        rows.extend(read_metrics_csv(&metrics)?);
        let stats = dir.join("train_stats.csv");
        if stats.is_file() {
            let tag = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            for mut c in curves_from_stats(&stats)? {
                c.name = format!("{tag}_{}", c.name);
                curves.push(c);
            }
        }
    }
    m.outputs.extend(emit_report(&rows, &curves, &a.out)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let (name, out) = match &cli.command {
        Command::GenData(a) => ("gen-data", &a.out),
        Command::Warmup(a) => ("warmup", &a.out),
        Command::TrainGame(a) => ("train-game", &a.out),
        Command::TrainE2e(a) => ("train-e2e", &a.out),
        Command::Eval(a) => ("eval", &a.out),
        Command::Explain(a) => ("explain", &a.out),
        Command::Report(a) => ("report", &a.out),
    };
    let mut m = RunManifest::start(name, cli.seed);
    match &cli.command {
        Command::GenData(a) => gen_data(a, cli.seed, &mut m)?,
        Command::Warmup(a) => warmup(a, cli.seed, &mut m)?,
        Command::TrainGame(a) => train_game(a, cli.seed, &mut m)?,
        Command::TrainE2e(a) => train_e2e(a, cli.seed, &mut m)?,
        Command::Eval(a) => eval(a, cli.seed, &mut m)?,
        Command::Explain(a) => explain(a, cli.seed, &mut m)?,
        Command::Report(a) => report(a, &mut m)?,
    }
    m.finish(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = std::env::var("OCEAN_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
