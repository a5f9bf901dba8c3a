use super::*;
use crate::game::{check_end, final_prediction};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn view(claim: usize, confidence: f64) -> ClaimView {
    ClaimView {
        claim,
        confidence,
        p_true: confidence,
    }
}

/// Log with the given selections; claims are fixed per argument.
fn log(label: usize, prediction: usize, agree: bool, selections: &[(usize, usize)], empty: &[bool]) -> EpisodeLog {
    let other = if agree { prediction } else { (prediction + 1) % 3 };
    let final_claims = [view(prediction, 0.9), view(other, 0.6)];
    EpisodeLog {
        scene_id: 0,
        label,
        num_classes: 3,
        confounder_present: false,
        game: GameConfig::default(),
        starting_player: 0,
        arguments: selections
            .iter()
            .enumerate()
            .map(|(t, &(player, slot))| LoggedArgument {
                step: t,
                player,
                slot,
                claim: prediction,
                confidence: 0.5,
                mask: vec![],
                mask_box: MaskBox { x0: 0, y0: 0, x1: 4, y1: 4 },
                empty: empty[slot],
            })
            .collect(),
        claims: vec![final_claims; selections.len()],
        status: if agree { EndStatus::Consensus } else { EndStatus::Truncated },
        final_claims,
        prediction,
        empty_slots: empty.to_vec(),
        mask_side: 2,
        resolution: 8,
    }
}

#[test]
fn consensus_rate_examples() {
    let logs = vec![log(0, 0, true, &[(0, 1)], &[false; 3]), log(0, 1, true, &[(0, 1)], &[false; 3]), log(1, 1, false, &[(0, 1)], &[false; 3])];
    assert!((consensus_rate(&logs).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(consensus_rate(&logs[..2]).unwrap(), 1.0);
    assert!(consensus_rate(&[]).is_err());
}

#[test]
fn accuracy_f1_examples() {
    let perfect: Vec<_> = (0..3).map(|c| log(c, c, true, &[(0, 0)], &[false])).collect();
    assert_eq!(accuracy_f1(&perfect).unwrap(), (1.0, 1.0));
    assert!(accuracy_f1(&[]).is_err());

    // labels/predictions over a 3-class log set, F1 via confusion matrix
    let pairs = [(0, 0), (0, 1), (1, 1), (2, 1), (2, 2), (2, 0)];
    let logs: Vec<_> = pairs.iter().map(|&(y, p)| log(y, p, true, &[(0, 0)], &[false])).collect();
    let mut cm = [[0usize; 3]; 3];
    for &(y, p) in &pairs {
        cm[y][p] += 1;
    }
    let f1: f64 = (0..3)
        .map(|c| {
            let tp = cm[c][c] as f64;
            let pred: usize = (0..3).map(|y| cm[y][c]).sum();
            let sup: usize = cm[c].iter().sum();
            let (p, r) = (tp / pred as f64, tp / sup as f64);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .sum::<f64>()
        / 3.0;
    let (acc, got) = accuracy_f1(&logs).unwrap();
    assert!((acc - 0.5).abs() < 1e-12);
    assert!((got - f1).abs() < 1e-12, "{got} vs {f1}");
}

#[test]
fn class_without_support_scores_zero() {
    let logs = vec![log(0, 0, true, &[(0, 0)], &[false]), log(1, 1, true, &[(0, 0)], &[false])];
    let (acc, f1) = accuracy_f1(&logs).unwrap();
    assert_eq!(acc, 1.0);
    assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn chance_predictions_give_chance_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 30_000;
    let logs: Vec<_> = (0..n).map(|_| log(rng.gen_range(0..3), rng.gen_range(0..3), true, &[(0, 0)], &[false])).collect();
    let (acc, _) = accuracy_f1(&logs).unwrap();
    let se = (1.0 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
    assert!((acc - 1.0 / 3.0).abs() < 3.0 * se, "{acc}");
}

#[test]
fn game_stats_example() {
    let empty = [false, false, true, false, false, true, false];
    let l = log(0, 0, true, &[(0, 2), (1, 5), (0, 2)], &empty);
    let g = game_stats(&[l.clone()], Uniqueness::PerPlayer).unwrap();
    assert_eq!(g.game_length, 3.0);
    assert!((g.slot_unique - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(g.empty_slot, 1.0);

    let distinct = log(0, 0, true, &[(0, 1), (1, 1), (0, 3)], &empty);
    assert_eq!(game_stats(&[distinct.clone()], Uniqueness::PerPlayer).unwrap().slot_unique, 1.0);
    assert!((game_stats(&[distinct], Uniqueness::Shared).unwrap().slot_unique - 2.0 / 3.0).abs() < 1e-12);
    assert!(game_stats(&[], Uniqueness::PerPlayer).is_err());
}

fn random_log(rng: &mut ChaCha8Rng) -> EpisodeLog {
    let len = rng.gen_range(1..8);
    let sel: Vec<_> = (0..len).map(|t| (t % 2, rng.gen_range(0..5))).collect();
    let empty: Vec<bool> = (0..5).map(|_| rng.gen_bool(0.3)).collect();
    log(rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_bool(0.5), &sel, &empty)
}

proptest! {
    #[test]
    fn metrics_match_recount_and_survive_serialization(seed in 0u64..500, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logs: Vec<_> = (0..n).map(|_| random_log(&mut rng)).collect();
        let r = metrics_report("d", "A", &logs, Uniqueness::PerPlayer).unwrap();
        // recount from raw transcripts
        let agree = logs.iter().filter(|l| l.final_claims[0].claim == l.final_claims[1].claim).count();
        prop_assert_eq!(r.consensus, agree as f64 / n as f64);
        let args: usize = logs.iter().map(|l| l.arguments.len()).sum();
        prop_assert_eq!(r.game_length, args as f64 / n as f64);
        let mut uniq = 0;
        let mut emp = 0;
        for l in &logs {
            let mut seen = std::collections::HashSet::new();
            for a in &l.arguments {
                uniq += seen.insert((a.player, a.slot)) as usize;
                emp += l.empty_slots[a.slot] as usize;
            }
        }
        prop_assert_eq!(r.slot_unique, uniq as f64 / args as f64);
        prop_assert_eq!(r.empty_slot, emp as f64 / args as f64);
        for v in [r.consensus, r.accuracy, r.f1_score, r.slot_unique, r.empty_slot] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let json = serde_json::to_string(&logs).unwrap();
        let back: Vec<EpisodeLog> = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(metrics_report("d", "A", &back, Uniqueness::PerPlayer).unwrap(), r);
    }
}

#[test]
fn mask_box_covers_peak_cells() {
    let mut a = vec![0f32; 16];
    a[5] = 1.0;
    a[6] = 0.6;
    a[10] = 0.2;
    assert_eq!(mask_box(&a, 4, 32), MaskBox { x0: 8, y0: 8, x1: 24, y1: 16 });
    assert_eq!(mask_box(&[0.0; 16], 4, 32), MaskBox { x0: 0, y0: 0, x1: 0, y1: 0 });
}

fn fake_dataset() -> crate::scenegen::Dataset {
    use crate::scenegen::*;
    let rules = RuleSet::new(RuleSetName::Hans3Lite);
    generate_split(&rules, Split::Train, 2, 8, 1, &SceneConfig::default()).unwrap()
}

#[test]
fn explanation_has_one_entry_per_turn_and_round_trips() {
    let ds = fake_dataset();
    let dir = tempfile::tempdir().unwrap();
    let empty = [false, true, false];
    let mut l = log(0, 0, true, &[(0, 0), (1, 1)], &empty);
    l.scene_id = ds.scenes[1].id;
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let (rec, json, svg) = export_explanation(&l, &ds, &names, dir.path()).unwrap();
    assert_eq!(rec.turns.len(), 2);
    assert!(!rec.turns[0].empty && rec.turns[1].empty);
    let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(raw["schema"], EXPLANANDUM_SCHEMA);
    assert_eq!(raw["turns"].as_array().unwrap().len(), 2);
    assert!(raw["final"].is_object());
    assert_eq!(read_explanation(&json).unwrap(), rec);
    let svg = std::fs::read_to_string(svg).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("(empty)"));

    l.scene_id = 987_654;
    assert!(export_explanation(&l, &ds, &names, dir.path()).is_err());
}

#[test]
fn report_csv_round_trips_in_column_order() {
    let dir = tempfile::tempdir().unwrap();
    let r = MetricsReport {
        dataset: "hans3-lite/test".into(),
        config: "A".into(),
        consensus: 0.9,
        accuracy: 0.1 + 0.2,
        f1_score: 1.0 / 3.0,
        game_length: 2.5,
        empty_slot: 0.0,
        slot_unique: 1.0,
    };
    let curve = Curve {
        name: "reward".into(),
        points: vec![(0.0, 0.1), (1.0, 0.3)],
    };
    emit_report(&[r.clone()], &[curve], dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], METRICS_COLUMNS.join(","));
    assert_eq!(read_metrics_csv(&dir.path().join("metrics.csv")).unwrap(), vec![r]);
    assert!(std::fs::read_to_string(dir.path().join("reward.svg")).unwrap().contains("polyline"));
    assert!(emit_report(&[], &[], dir.path()).is_err());
}

#[test]
fn unwritable_report_path_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("f");
    std::fs::write(&file, "x").unwrap();
    let r = metrics_report("d", "A", &[log(0, 0, true, &[(0, 0)], &[false])], Uniqueness::PerPlayer).unwrap();
    assert!(emit_report(&[r], &[], &file.join("sub")).is_err());
}

#[test]
fn consistent_logs_replay_faithfully() {
    // claims chosen so the rules end the game exactly where the log does
    let game = GameConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let mut sel = Vec::new();
        let mut claims = Vec::new();
        let status = loop {
            let t = sel.len();
            sel.push((t % 2, rng.gen_range(0..4)));
            claims.push([view(rng.gen_range(0..2), rng.gen_range(0.4..1.0)), view(rng.gen_range(0..2), rng.gen_range(0.4..1.0))]);
            let s = check_end(&game, &sel, claims.last().unwrap());
            if s != EndStatus::Running {
                break s;
            }
        };
        let last = *claims.last().unwrap();
        let mut l = log(0, final_prediction(status, &last).unwrap(), true, &sel, &[false; 4]);
        l.claims = claims;
        l.final_claims = last;
        l.status = status;
        assert!(l.faithful().unwrap());
        l.prediction = 1 - l.prediction;
        assert!(!l.faithful().unwrap());
    }
}
