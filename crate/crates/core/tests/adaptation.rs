use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vemu::adaptation::{
    adapt_chain, blend, fine_tune, interpolate_weights, reservoir_fine_tune, reservoir_mask,
    weight_trajectory_linearity, AdaptError, Provenance, RegimeModelSet,
};
use vemu::analysis::evaluate;
use vemu::dataset::{Split, SymbolDataset};
use vemu::network::{self, BiLstm, Block, BlockMask, TrainConfig, HIDDEN_SIZE};
use vemu::signal::PAM4_LEVELS;

const H: usize = 6;

/// Toy regime family: compression of a two-tap channel that strengthens
/// with the bias `v`.
fn regime_dataset(v: f64, seed: u64) -> SymbolDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |n: usize| {
        let x: Vec<f64> = (0..n).map(|_| PAM4_LEVELS[rng.random_range(0..4)]).collect();
        let y: Vec<f64> = (0..n)
            .map(|k| {
                let lin = 0.7 * x[k] + 0.3 * if k > 0 { x[k - 1] } else { 0.0 };
                (v * lin).tanh() + 0.1 * v
            })
            .collect();
        (x, y)
    };
    let (x, y) = gen(80 * 40);
    let (xt, yt) = gen(80 * 10);
    SymbolDataset::from_captures((&x, &y), (&xt, &yt), v, 80).unwrap()
}

fn desk() -> TrainConfig {
    TrainConfig {
        batch_words: 8,
        max_epochs: 60,
        learning_rate: 1e-2,
        patience: 8,
        seed: 3,
        hidden_size: H,
        ..TrainConfig::default()
    }
}

fn random_model(hidden: usize, seed: u64, v: f64) -> BiLstm<f64> {
    let mut m = BiLstm::init_uniform(hidden, &mut ChaCha8Rng::seed_from_u64(seed));
    m.regime_voltage = v;
    m
}

fn filled(hidden: usize, value: f64, v: f64) -> BiLstm<f64> {
    let mut m = BiLstm::<f64>::zeros(hidden);
    for b in Block::ALL {
        m.block_mut(b).fill(value);
    }
    m.regime_voltage = v;
    m
}

#[test]
fn reservoir_trains_505_of_6777() {
    let m = BiLstm::<f64>::zeros(HIDDEN_SIZE);
    assert_eq!(m.params.n_params(), 6777);
    assert_eq!(reservoir_mask().trainable_count(HIDDEN_SIZE), 112 + 112 + 112 + 112 + 56 + 1);
    assert_eq!(reservoir_mask().trainable_count(HIDDEN_SIZE), 505);
    assert!(!reservoir_mask().get(Block::WRecFwd));
    assert!(!reservoir_mask().get(Block::WRecBwd));
}

#[test]
fn reservoir_fine_tune_leaves_recurrence_untouched() {
    let ds = regime_dataset(1.2, 1);
    let (base, _) = network::train::<f64>(&regime_dataset(1.0, 2), &desk(), None).unwrap();
    let (m, rep) = reservoir_fine_tune(&base, &ds, &desk()).unwrap();
    assert!(rep.epochs_run > 0);
    for b in [Block::WRecFwd, Block::WRecBwd] {
        let same = m.block(b).iter().zip(base.block(b)).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{} changed", b.name());
    }
    assert_ne!(m.block(Block::WFc), base.block(Block::WFc));
    assert_eq!(m.regime_voltage, 1.2);
}

#[test]
fn frozen_fine_tune_returns_base_weights() {
    let ds = regime_dataset(1.4, 3);
    let base = random_model(H, 4, 1.0);
    let cfg = TrainConfig {
        trainable_mask: BlockMask::none(),
        ..desk()
    };
    let (m, _) = fine_tune(&base, &ds, &cfg).unwrap();
    assert_eq!(m.params, base.params);
    assert_eq!(m.regime_voltage, 1.4);
    assert_eq!(m.norm_stats, ds.norm_stats);
}

#[test]
fn fine_tune_on_own_regime_stops_quickly() {
    let ds = regime_dataset(1.0, 5);
    let converge = TrainConfig {
        max_epochs: 1000,
        ..desk()
    };
    let (base, scratch) = network::train::<f64>(&ds, &converge, None).unwrap();
    assert!(scratch.stopped_early);
    let (m, rep) = fine_tune(&base, &ds, &desk()).unwrap();
    assert!(rep.epochs_run <= desk().patience + 3, "ran {} epochs", rep.epochs_run);
    assert!(rep.best_val_mse <= scratch.best_val_mse * 1.0001);
    assert_eq!(m.regime_voltage, 1.0);
}

#[test]
fn warm_start_reaches_threshold_sooner() {
    let (base, _) = network::train::<f64>(&regime_dataset(1.0, 6), &desk(), None).unwrap();
    let target = regime_dataset(1.3, 7);
    let (_, scratch) = network::train::<f64>(&target, &desk(), None).unwrap();
    let (_, warm) = fine_tune(&base, &target, &desk()).unwrap();
    let thr = 1.1 * scratch.best_val_mse;
    let e_scratch = scratch.epochs_to_reach(thr).unwrap();
    let e_warm = warm.epochs_to_reach(thr).expect("warm start never reached the threshold");
    assert!(e_warm < e_scratch, "warm {e_warm} vs scratch {e_scratch}");
}

#[test]
fn blend_arithmetic() {
    let a = filled(3, 0.0, 1.0);
    let b = filled(3, 2.0, 2.0);
    let mid = interpolate_weights(&a, &b, 1.5).unwrap();
    for blk in Block::ALL {
        assert!(mid.block(blk).iter().all(|&w| w == 1.0));
    }
    assert_eq!(mid.regime_voltage, 1.5);

    let (a, b) = (random_model(4, 1, 1.2), random_model(4, 2, 1.6));
    assert_eq!(blend(&a, &b, 1.2).unwrap().params, a.params);
    assert_eq!(blend(&a, &b, 1.6).unwrap().params, b.params);
    assert_eq!(blend(&a, &b, 1.2).unwrap().norm_stats, a.norm_stats);

    let a2 = BiLstm { regime_voltage: 1.6, ..a.clone() };
    let same = interpolate_weights(&a, &a2, 1.37).unwrap();
    for blk in Block::ALL {
        for (x, y) in same.block(blk).iter().zip(a.block(blk)) {
            assert!((x - y).abs() <= 4.0 * f64::EPSILON * y.abs());
        }
    }
}

#[test]
fn interpolation_refuses_to_extrapolate() {
    let (a, b) = (random_model(4, 1, 1.2), random_model(4, 2, 1.6));
    for v in [1.2, 1.6, 1.0, 2.0] {
        assert!(matches!(interpolate_weights(&a, &b, v), Err(AdaptError::Extrapolation { .. })));
    }
    assert!(interpolate_weights(&b, &a, 1.4).is_err());
    let c = random_model(5, 3, 1.6);
    assert!(matches!(interpolate_weights(&a, &c, 1.4), Err(AdaptError::ShapeMismatch(4, 5))));
}

#[test]
fn interpolated_error_varies_continuously() {
    let (base, _) = network::train::<f64>(&regime_dataset(1.0, 8), &desk(), None).unwrap();
    let (a, _) = fine_tune(&base, &regime_dataset(1.0, 9), &desk()).unwrap();
    let (b, _) = fine_tune(&a, &regime_dataset(1.4, 10), &desk()).unwrap();
    let probe = regime_dataset(1.2, 11);
    let at = |m: &BiLstm<f64>| evaluate(m, &probe, Split::Test, Provenance::Interpolated).unwrap().nmse;
    let mut curve = vec![at(&blend(&a, &b, 1.0).unwrap())];
    for k in 1..=5 {
        curve.push(at(&interpolate_weights(&a, &b, 1.0 + 0.4 * k as f64 / 6.0).unwrap()));
    }
    curve.push(at(&blend(&a, &b, 1.4).unwrap()));
    assert_eq!(curve[0].to_bits(), at(&a).to_bits());
    assert_eq!(curve[6].to_bits(), at(&b).to_bits());
    for w in curve.windows(2) {
        assert!((w[1] - w[0]).abs() <= 0.02, "jump in {curve:?}");
    }
}

#[test]
fn model_set_orders_and_round_trips() {
    let mut set = RegimeModelSet::new();
    for (seed, v) in [(1, 1.6), (2, 1.0), (3, 1.2)] {
        set.insert(random_model(4, seed, v), Provenance::Transfer).unwrap();
    }
    set.insert(random_model(4, 9, 1.0), Provenance::Scratch).unwrap();
    let vs: Vec<f64> = set.entries().iter().map(|e| e.regime_voltage).collect();
    assert_eq!(vs, [1.0, 1.2, 1.6]);
    assert_eq!(set.get(1.0).unwrap().provenance, Provenance::Scratch);
    assert_eq!(set.nearest(1.45).unwrap().regime_voltage, 1.6);
    assert!(set.insert(random_model(5, 1, 2.0), Provenance::Scratch).is_err());

    let mid = set.interpolate(1.4).unwrap();
    let direct = interpolate_weights(&set.get(1.2).unwrap().model, &set.get(1.6).unwrap().model, 1.4).unwrap();
    assert_eq!(mid, direct);
    assert!(set.interpolate(1.8).is_err());

    let dir = tempfile::tempdir().unwrap();
    set.save(dir.path()).unwrap();
    let back = RegimeModelSet::load(dir.path()).unwrap();
    assert_eq!(back, set);

    let file = dir.path().join("model_1200mV.vemw");
    let mut bytes = std::fs::read(&file).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&file, bytes).unwrap();
    assert!(matches!(RegimeModelSet::load(dir.path()), Err(AdaptError::Checksum { .. })));
}

#[test]
fn chain_visits_nearest_regimes_first() {
    let base = random_model(H, 1, 1.4);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..desk()
    };
    let ds: Vec<SymbolDataset> = [1.0, 1.2, 1.6, 1.8].iter().map(|&v| regime_dataset(v, 20)).collect();
    let refs: Vec<&SymbolDataset> = ds.iter().collect();
    let (set, reports) = adapt_chain(base, Provenance::Scratch, &refs, &cfg).unwrap();
    let visited: Vec<f64> = reports.iter().map(|r| r.0).collect();
    assert_eq!(visited, [1.2, 1.6, 1.0, 1.8]);
    assert_eq!(set.len(), 5);
    for e in set.entries() {
        let want = if e.regime_voltage == 1.4 { Provenance::Scratch } else { Provenance::Transfer };
        assert_eq!(e.provenance, want);
    }
}

#[test]
fn chain_matches_scratch_accuracy() {
    let grid = [1.0, 1.2, 1.4, 1.6];
    let ds: Vec<SymbolDataset> = grid.iter().enumerate().map(|(i, &v)| regime_dataset(v, 30 + i as u64)).collect();
    let (base, _) = network::train::<f64>(&ds[0], &desk(), None).unwrap();
    let refs: Vec<&SymbolDataset> = ds.iter().collect();
    let (set, _) = adapt_chain(base, Provenance::Scratch, &refs, &desk()).unwrap();
    for d in &ds[1..] {
        let (scratch, _) = network::train::<f64>(d, &desk(), None).unwrap();
        let s = evaluate(&scratch, d, Split::Val, Provenance::Scratch).unwrap().nmse;
        let t = evaluate(&set.get(d.regime_voltage).unwrap().model, d, Split::Val, Provenance::Transfer)
            .unwrap()
            .nmse;
        assert!(t <= 1.5 * s, "{} V: transfer {t} vs scratch {s}", d.regime_voltage);
    }
}

#[test]
fn linearity_summary_conventions() {
    let mut set = RegimeModelSet::new();
    let a = random_model(4, 1, 0.0);
    let slope = random_model(4, 2, 0.0);
    for v in [1.0, 1.2, 1.5, 2.0] {
        let mut m = a.clone();
        for b in Block::ALL {
            for (w, s) in m.block_mut(b).iter_mut().zip(slope.block(b)) {
                *w += v * s;
            }
        }
        m.regime_voltage = v;
        set.insert(m, Provenance::Transfer).unwrap();
    }
    let s = weight_trajectory_linearity(&set, Block::WInFwd).unwrap();
    assert_eq!(s.n_elements, 4 * 4);
    assert!((1.0 - s.min).abs() < 1e-9);

    let mut flat = RegimeModelSet::new();
    for v in [1.0, 1.2, 1.4] {
        flat.insert(BiLstm { regime_voltage: v, ..a.clone() }, Provenance::Transfer).unwrap();
    }
    let s = weight_trajectory_linearity(&flat, Block::WRecBwd).unwrap();
    assert_eq!((s.min, s.mean), (1.0, 1.0));

    let mut two = RegimeModelSet::new();
    two.insert(a.clone(), Provenance::Scratch).unwrap();
    assert!(matches!(
        weight_trajectory_linearity(&two, Block::WFc),
        Err(AdaptError::TooFewModels { needed: 3, got: 1 })
    ));

    // Random trajectories are far from linear somewhere.
    let mut noisy = RegimeModelSet::new();
    for (i, v) in [1.0, 1.2, 1.4, 1.6].into_iter().enumerate() {
        noisy.insert(random_model(4, 50 + i as u64, v), Provenance::Transfer).unwrap();
    }
    assert!(weight_trajectory_linearity(&noisy, Block::WFc).unwrap().min < 0.9);
}
