use ocean_core::agent::{new_players, ActMode, Player, PlayerConfig};
use ocean_core::game::{EndCondition, GameConfig};
use ocean_core::numcore::{bind, finite_diff_check, Bound, ParamStore, Tape, Tensor};
use ocean_core::rng::stream_rng;
use ocean_core::scenegen::*;
use ocean_core::slotcoder::*;
use ocean_core::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_data(n: usize, seed: u64) -> Dataset {
    let rules = RuleSet::new(RuleSetName::Hans3Lite);
    generate_split(&rules, Split::Train, n, 8, seed, &SceneConfig::default()).unwrap()
}

fn tiny_players(classes: usize, seed: u64) -> [Player; 2] {
    let cfg = SlotcoderConfig::tiny();
    let pc = PlayerConfig {
        hidden: 5,
        modulator_hidden: 4,
        ..PlayerConfig::new(cfg.num_slots, cfg.slot_dim, classes)
    };
    new_players(&pc, seed).unwrap()
}

fn randomize(p: &mut ParamStore<f32>, seed: u64, scale: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..p.len() {
        for v in p.block_mut(i).value.data_mut() {
            *v = if scale > 0.0 { rng.gen_range(-scale..scale) } else { 0.0 };
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = tiny_data(6, 1);
    let mut sc = Slotcoder::new(&SlotcoderConfig::tiny(), 3).unwrap();
    let before = sc.params.clone();
    let wc = WarmupConfig {
        epochs: 2,
        batch_size: 4,
        lr: 0.0,
        lr_ramp: 0,
        seed: 0,
    };
    warmup_slots(&ds, &mut sc, &wc, |_| {}).unwrap();
    assert!(sc.params.values_bit_identical(&before));
    assert_eq!(sc.params.step_count(), 4);
}

#[test]
fn warmup_rejects_empty_dataset() {
    let ds = tiny_data(3, 1).truncated(0);
    let mut sc = Slotcoder::new(&SlotcoderConfig::tiny(), 3).unwrap();
    assert!(warmup_slots(&ds, &mut sc, &WarmupConfig::default(), |_| {}).is_err());
}

#[test]
fn single_image_is_memorized_in_500_steps() {
    let rules = RuleSet::new(RuleSetName::Hans3Lite);
    let ds = generate_split(&rules, Split::Train, 1, 32, 7, &SceneConfig::default()).unwrap();
    let mut sc = Slotcoder::new(&SlotcoderConfig::desk32(), 7).unwrap();
    let wc = WarmupConfig {
        epochs: 500,
        batch_size: 1,
        ..WarmupConfig::default()
    };
    warmup_slots(&ds, &mut sc, &wc, |_| {}).unwrap();
    let recon = mean_recon_loss(&sc, &ds, 7).unwrap();
    assert!(recon < 1e-3, "recon {recon}");
}

#[test]
fn warmup_loss_trends_down() {
    let rules = RuleSet::new(RuleSetName::Hans3Lite);
    let ds = generate_split(&rules, Split::Train, 32, 32, 2, &SceneConfig::default()).unwrap();
    let mut sc = Slotcoder::new(&SlotcoderConfig::desk32(), 2).unwrap();
    let wc = WarmupConfig {
        epochs: 11,
        batch_size: 8,
        ..WarmupConfig::default()
    };
    let hist = warmup_slots(&ds, &mut sc, &wc, |_| {}).unwrap();
    let pairs = hist.windows(2).filter(|w| w[1].recon <= w[0].recon).count();
    assert!(pairs * 10 >= 8 * (hist.len() - 1), "{:?}", hist.iter().map(|h| h.recon).collect::<Vec<_>>());
}

#[test]
fn reinforce_loss_examples() {
    let mut tape = Tape::<f64>::new();
    let lp = tape.constant_scalar(-1.0);
    let l = reinforce_loss(&mut tape, &[lp], &[0.5], &[0.0]).unwrap();
    assert_eq!(tape.scalar(l), 0.5);
    let lps: Vec<_> = [-0.3, -2.0].iter().map(|&v| tape.constant_scalar(v)).collect();
    let l = reinforce_loss(&mut tape, &lps, &[0.4, 0.1], &[0.4, 0.1]).unwrap();
    assert_eq!(tape.scalar(l), 0.0);
    assert!(reinforce_loss(&mut tape, &lps, &[0.4], &[0.4, 0.1]).is_err());
}

/// Policy-gradient estimate on a 2-armed bandit with logits `theta`.
fn bandit_grad(theta: [f64; 2], rewards: [f64; 2], baseline: f64, samples: usize, seed: u64) -> (Vec<[f64; 2]>, [f64; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new(0);
    store.add("theta", Tensor::from_f64(&[1, 2], &theta).unwrap());
    let mut all = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut tape = Tape::new();
        let t = tape.param(&store, 0);
        let probs = tape.softmax_axis(t, 1, None).unwrap();
        let p0 = tape.value(probs).data()[0];
        let a = if rng.gen::<f64>() < p0 { 0 } else { 1 };
        let picked = tape.pick(probs, a).unwrap();
        let lp = tape.log(picked, 1e-12);
        let loss = reinforce_loss(&mut tape, &[lp], &[rewards[a]], &[baseline]).unwrap();
        let g = tape.backward(loss).unwrap();
        let gd = g.get(store.key(0)).unwrap().data();
        all.push([gd[0], gd[1]]);
    }
    let mean = [0, 1].map(|k| all.iter().map(|g| g[k]).sum::<f64>() / samples as f64);
    (all, mean)
}

#[test]
fn bandit_gradient_favors_positive_advantage() {
    let (_, g) = bandit_grad([0.0, 0.0], [1.0, 0.0], 0.5, 2000, 3);
    // descending the loss raises the logit of the rewarded arm
    assert!(g[0] < 0.0 && g[1] > 0.0, "{g:?}");
}

#[test]
fn baseline_does_not_bias_the_gradient() {
    let theta = [0.3, -0.2];
    let rewards = [1.0, 0.2];
    let n = 20_000;
    let (a, ga) = bandit_grad(theta, rewards, 0.0, n, 11);
    let (b, gb) = bandit_grad(theta, rewards, 0.6, n, 12);
    for k in 0..2 {
        let var = |xs: &[[f64; 2]], m: f64| xs.iter().map(|g| (g[k] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = ((var(&a, ga[k]) + var(&b, gb[k])) / n as f64).sqrt();
        assert!((ga[k] - gb[k]).abs() <= 4.0 * se, "k={k}: {} vs {} (se {se})", ga[k], gb[k]);
    }
    // exact expected gradient of −E[r]
    let p0 = 1.0 / (1.0 + (theta[1] - theta[0]).exp());
    let exact0 = -p0 * (1.0 - p0) * (rewards[0] - rewards[1]);
    assert!((gb[0] - exact0).abs() < 0.01, "{} vs {exact0}", gb[0]);
}

/// Two-class task: one slot carries the class in its first coordinate.
fn separable_cache(n: usize, slots: usize, dim: usize, seed: u64, classes: usize) -> SlotCache {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = i % classes;
        let mut data: Vec<f32> = (0..slots * dim).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let key = rng.gen_range(0..slots);
        data[key * dim] = if label == 0 { 1.5 } else { -1.5 };
        sets.push(SlotSet {
            slots: Tensor::new(&[slots, dim], data).unwrap(),
            attention: Tensor::zeros(&[slots, 4]),
            image_id: i as u64,
        });
        labels.push(label);
    }
    SlotCache { sets, labels }
}

fn fast_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr_players: 3e-3,
        fixed_turns: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn game_epoch_is_deterministic() {
    let cache = separable_cache(40, 3, 4, 1, 2);
    let pc = PlayerConfig {
        hidden: 8,
        ..PlayerConfig::new(3, 4, 2)
    };
    let run = || {
        let mut ps = new_players(&pc, 9).unwrap();
        let mut s = train_game_epoch(&cache, &mut ps, &GameConfig::default(), &fast_cfg(), 0).unwrap();
        s.seconds = 0.0;
        (s, ps[0].params.clone(), ps[1].params.clone())
    };
    let (a, pa0, pa1) = run();
    let (b, pb0, pb1) = run();
    assert_eq!(a, b);
    assert!(pa0.values_bit_identical(&pb0) && pa1.values_bit_identical(&pb1));
}

#[test]
fn cross_entropy_alone_learns_a_single_class() {
    let mut cache = separable_cache(64, 3, 4, 2, 2);
    cache.labels.iter_mut().for_each(|l| *l = 0);
    let pc = PlayerConfig {
        hidden: 8,
        ..PlayerConfig::new(3, 4, 2)
    };
    let mut ps = new_players(&pc, 1).unwrap();
    let cfg = TrainConfig {
        alpha_pg: 0.0,
        alpha_base: 0.0,
        lr_players: 1e-2,
        ..fast_cfg()
    };
    // 8 batches per epoch, 25 epochs = 200 steps
    for e in 0..25 {
        train_game_epoch(&cache, &mut ps, &GameConfig::default(), &cfg, e).unwrap();
    }
    let mut conf = 0.0;
    for (i, set) in cache.sets.iter().enumerate() {
        let mut tape = Tape::<f32>::new();
        let bound = [ps[0].bind(&mut tape, false), ps[1].bind(&mut tape, false)];
        let sv = tape.constant(set.slots.clone());
        let game = GameConfig {
            end_condition: EndCondition::Fixed,
            fixed_turns: 2,
            ..GameConfig::default()
        };
        let mut ep = ocean_core::game::Episode::new(&mut tape, [&ps[0].arch, &ps[1].arch], bound, sv, 0, &game, 0).unwrap();
        ep.run(&mut tape, &mut stream_rng(0, 0, i as u64), ActMode::Sample).unwrap();
        conf += ep.state.claims.last().unwrap().iter().map(|c| c.p_true).sum::<f64>() / 2.0;
    }
    conf /= cache.len() as f64;
    assert!(conf > 0.95, "{conf}");
}

#[test]
fn mean_reward_rises_on_a_separable_task() {
    let cache = separable_cache(128, 3, 4, 3, 2);
    let pc = PlayerConfig {
        hidden: 8,
        ..PlayerConfig::new(3, 4, 2)
    };
    let mut ps = new_players(&pc, 4).unwrap();
    let cfg = fast_cfg();
    let rewards: Vec<f64> = (0..10)
        .map(|e| train_game_epoch(&cache, &mut ps, &GameConfig::default(), &cfg, e).unwrap().reward)
        .collect();
    assert!(rewards.windows(2).all(|w| w[1] > w[0]), "{rewards:?}");
}

fn m1_setup(lambda: f64) -> (Dataset, Slotcoder, [Player; 2], TrainConfig) {
    let ds = tiny_data(8, 4);
    let sc = Slotcoder::new(&SlotcoderConfig::tiny(), 5).unwrap();
    let mut ps = tiny_players(3, 6);
    randomize(&mut ps[0].params, 1, 0.5);
    randomize(&mut ps[1].params, 2, 0.5);
    let cfg = TrainConfig {
        batch_size: 4,
        lambda,
        lr_slotcoder: 1e-3,
        em_m1_steps: 3,
        em_m2_epochs: 1,
        em_cycles: 2,
        fixed_turns: 2,
        ..TrainConfig::default()
    };
    (ds, sc, ps, cfg)
}

#[test]
fn m1_keeps_players_frozen() {
    let (ds, mut sc, ps, cfg) = m1_setup(0.5);
    let before = [ps[0].params.clone(), ps[1].params.clone()];
    let sc_before = sc.params.clone();
    em_step_slots(&ds, &mut sc, &ps, &GameConfig::default(), &cfg).unwrap();
    assert!(ps[0].params.values_bit_identical(&before[0]));
    assert!(ps[1].params.values_bit_identical(&before[1]));
    assert!(!sc.params.values_bit_identical(&sc_before));
}

#[test]
fn zero_lambda_m1_is_pure_reconstruction() {
    let (ds, mut sc, ps, cfg) = m1_setup(0.0);
    let mut reference = sc.clone();
    let wc = WarmupConfig {
        epochs: 1,
        batch_size: cfg.batch_size,
        lr: cfg.lr_slotcoder,
        lr_ramp: 0,
        seed: cfg.seed,
    };
    // two steps each way, continuing the same schedule
    warmup_slots(&ds, &mut reference, &wc, |_| {}).unwrap();
    for _ in 0..2 {
        let m = em_step_slots(&ds, &mut sc, &ps, &GameConfig::default(), &cfg).unwrap();
        assert_eq!(m.loss, m.recon);
    }
    assert!(sc.params.values_bit_identical(&reference.params));
}

#[test]
fn constant_players_add_no_gradient() {
    let (ds, sc, mut ps, _) = m1_setup(0.7);
    for p in ps.iter_mut() {
        randomize(&mut p.params, 0, 0.0);
    }
    let game = GameConfig {
        end_condition: EndCondition::Fixed,
        fixed_turns: 3,
        ..GameConfig::default()
    };
    let noise = slot_noise::<f32>(0, 1, 3, 4);
    let grads = |lambda: f64| {
        let mut tape = Tape::<f32>::new();
        let p = bind(&mut tape, &sc.params, true);
        let pb = [ps[0].bind(&mut tape, false), ps[1].bind(&mut tape, false)];
        let out = em_loss(
            &mut tape,
            (&sc.arch, &p),
            &ds.images[0],
            &noise,
            ([&ps[0].arch, &ps[1].arch], pb),
            ds.scenes[0].label,
            &game,
            lambda,
            0,
            &mut stream_rng(0, 0, 0),
            None,
        )
        .unwrap();
        let v = tape.scalar(out.loss);
        (v, out.recon, tape.backward(out.loss).unwrap())
    };
    let (v0, r0, g0) = grads(0.0);
    let (v1, _, g1) = grads(0.7);
    assert_eq!(v0 as f64, r0);
    // uniform confidence gives exactly zero reward
    assert!((v1 - v0).abs() < 1e-7);
    for (k, a) in &g0.entries {
        let b = g1.get(*k).unwrap();
        assert!(a.max_abs_diff(b) < 1e-7);
    }
}

#[test]
fn reward_injected_loss_passes_gradcheck() {
    let cfg = SlotcoderConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::<f64>::new(0);
    let arch = SlotcoderArch::build(&cfg, &mut store, &mut rng).unwrap();
    let ps = {
        let mut ps = tiny_players(3, 8);
        randomize(&mut ps[0].params, 3, 0.5);
        randomize(&mut ps[1].params, 4, 0.5);
        ps
    };
    let pstores = [ps[0].params.cast::<f64>(), ps[1].params.cast::<f64>()];
    let ds = tiny_data(1, 9);
    let image: Tensor<f64> = ds.images[0].cast();
    let noise = slot_noise::<f64>(0, 2, cfg.num_slots, cfg.slot_dim);
    let game = GameConfig {
        end_condition: EndCondition::Fixed,
        fixed_turns: 3,
        ..GameConfig::default()
    };
    let label = ds.scenes[0].label;
    // sample once, then hold the actions fixed
    let actions = {
        let mut tape = Tape::<f64>::new();
        let p = bind(&mut tape, &store, false);
        let pb = [bind(&mut tape, &pstores[0], false), bind(&mut tape, &pstores[1], false)];
        em_loss(&mut tape, (&arch, &p), &image, &noise, ([&ps[0].arch, &ps[1].arch], pb), label, &game, 0.8, 1, &mut stream_rng(1, 2, 3), None)
            .unwrap()
            .actions
    };
    assert_eq!(actions.len(), 3);
    let report = finite_diff_check(
        &store,
        |tape, vars| {
            let p = Bound(vars.to_vec());
            let pb = [bind(tape, &pstores[0], false), bind(tape, &pstores[1], false)];
            let out = em_loss(
                tape,
                (&arch, &p),
                &image,
                &noise,
                ([&ps[0].arch, &ps[1].arch], pb),
                label,
                &game,
                0.8,
                1,
                &mut stream_rng(0, 0, 0),
                Some(&actions),
            )?;
            Ok(out.loss)
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn em_phases_respect_freezing_and_reduce_correctly() {
    // λ = 0: the slotcoder follows pure reconstruction training
    let (ds, mut sc, mut ps, cfg) = m1_setup(0.0);
    let mut reference = sc.clone();
    let mut sc_snapshots = Vec::new();
    em_loop(&ds, &ds, &mut sc, &mut ps, &GameConfig::default(), &cfg, 0, |_, s, _| {
        sc_snapshots.push(s.params.clone());
        Ok(())
    })
    .unwrap();
    let wc = WarmupConfig {
        epochs: 1,
        batch_size: cfg.batch_size,
        lr: cfg.lr_slotcoder,
        lr_ramp: 0,
        seed: cfg.seed,
    };
    // 2 cycles × 3 steps = 6 steps = 3 warm-up epochs of 2 batches
    for _ in 0..3 {
        warmup_slots(&ds, &mut reference, &wc, |_| {}).unwrap();
    }
    assert!(sc.params.values_bit_identical(&reference.params));

    // no M1 steps: identical to game training on fixed slots, slotcoder untouched
    let (ds, mut sc, mut ps, cfg) = m1_setup(0.5);
    let cfg = TrainConfig { em_m1_steps: 0, ..cfg };
    let sc_before = sc.params.clone();
    let mut pipelined = ps.clone();
    let (report, _) = em_loop(&ds, &ds, &mut sc, &mut ps, &GameConfig::default(), &cfg, 0, |_, _, _| Ok(())).unwrap();
    assert!(sc.params.values_bit_identical(&sc_before));
    assert_eq!(report.recon_before, report.recon_after);
    let cache = extract_slots(&sc, &ds, cfg.seed).unwrap();
    for e in 0..2 {
        train_game_epoch(&cache, &mut pipelined, &GameConfig::default(), &cfg, e).unwrap();
    }
    assert!(ps[0].params.values_bit_identical(&pipelined[0].params));
    assert!(ps[1].params.values_bit_identical(&pipelined[1].params));
}
