use proptest::prelude::*;

use vemu::dataset::{load_dataset, make_words, save_dataset, Capture, LinkConfig, Split, SymbolDataset, ZScore};

fn small_link() -> LinkConfig {
    LinkConfig {
        train_symbols: 4000,
        test_symbols: 800,
        ..LinkConfig::default()
    }
}

#[test]
fn oracle_dataset_is_reproducible_and_persists_bitwise() {
    let cfg = small_link();
    let a = cfg.build_dataset(1.4).unwrap();
    let b = cfg.build_dataset(1.4).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.vemu");
    save_dataset(&a, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(std::fs::read(&path).unwrap(), a.to_bytes());

    let other_seed = LinkConfig { seed: 2, ..cfg }.build_dataset(1.4).unwrap();
    assert_ne!(other_seed.targets, a.targets);
}

#[test]
fn oracle_dataset_shape() {
    let cfg = small_link();
    let ds = cfg.build_dataset(1.2).unwrap();
    assert_eq!(ds.word_length, 80);
    assert_eq!(ds.regime_voltage, 1.2);
    assert_eq!(ds.splits.train.len(), 40);
    assert_eq!(ds.splits.val.len(), 10);
    assert_eq!(ds.splits.test.len(), 10);
    assert_eq!(ds.inputs.len(), 60 * 80);

    // Train block is standardised with population statistics.
    let (x, y) = ds.split_series(Split::Train);
    for s in [x, y] {
        let z = ZScore::of(&s).unwrap();
        assert!(z.mean.abs() < 1e-12);
        assert!((z.std - 1.0).abs() < 1e-12);
    }
}

#[test]
fn test_capture_is_an_independent_sequence() {
    let cfg = small_link();
    let train = cfg.symbols(Capture::Train).unwrap().levels;
    let test = cfg.symbols(Capture::Test).unwrap().levels;
    let n = test.len();
    let agree = train[..n].iter().zip(&test).filter(|(a, b)| a == b).count() as f64 / n as f64;
    // Independent uniform PAM-4 draws agree a quarter of the time.
    assert!((agree - 0.25).abs() < 0.05, "agreement {agree}");
    assert_ne!(
        LinkConfig::noise_stream_id(1.4, Capture::Train),
        LinkConfig::noise_stream_id(1.4, Capture::Test)
    );
    assert_ne!(
        LinkConfig::noise_stream_id(1.4, Capture::Train),
        LinkConfig::noise_stream_id(1.6, Capture::Train)
    );
}

#[test]
fn regimes_do_not_share_noise() {
    let cfg = small_link();
    let a = cfg.capture(1.4, Capture::Train).unwrap();
    let quiet = LinkConfig { noise: false, ..cfg.clone() }.capture(1.4, Capture::Train).unwrap();
    let b = cfg.capture(1.6, Capture::Train).unwrap();
    let quiet_b = LinkConfig { noise: false, ..cfg }.capture(1.6, Capture::Train).unwrap();
    let na: Vec<f64> = a.received.iter().zip(&quiet.received).map(|(x, y)| x - y).collect();
    let nb: Vec<f64> = b.received.iter().zip(&quiet_b.received).map(|(x, y)| x - y).collect();
    let dot: f64 = na.iter().zip(&nb).map(|(x, y)| x * y).sum();
    let norm = (na.iter().map(|x| x * x).sum::<f64>() * nb.iter().map(|x| x * x).sum::<f64>()).sqrt();
    assert!((dot / norm).abs() < 0.05, "noise correlation {}", dot / norm);
}

proptest! {
    #[test]
    fn splits_partition_the_words(
        train_words in 5usize..60,
        test_words in 0usize..20,
        extra in 0usize..80,
        wl in prop::sample::select(vec![1usize, 7, 80]),
    ) {
        let n = train_words * wl + extra;
        let x: Vec<f64> = (0..n).map(|k| (k as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let nt = test_words * wl;
        let xt: Vec<f64> = (0..nt).map(|k| (k as f64 * 0.11).cos()).collect();
        let ds = SymbolDataset::from_captures((&x, &y), (&xt, &xt), 1.0, wl).unwrap();
        let pool = n / wl;
        let mut all: Vec<usize> = ds.splits.train.iter().chain(&ds.splits.val).chain(&ds.splits.test).copied().collect();
        all.sort_unstable();
        let expected: Vec<usize> = (0..ds.n_words()).collect();
        prop_assert_eq!(all, expected);
        prop_assert_eq!(ds.splits.val.len(), pool / 5);
        prop_assert_eq!(ds.splits.train.len() + ds.splits.val.len(), pool);
        prop_assert_eq!(ds.splits.test.len(), nt / wl);
        // Validation words follow the train words; test words come last.
        prop_assert!(ds.splits.train.iter().all(|t| ds.splits.val.iter().all(|v| t < v)));
        prop_assert!(ds.splits.val.iter().all(|v| ds.splits.test.iter().all(|t| v < t)));
    }

    #[test]
    fn words_tile_without_overlap(n in 0usize..500, wl in 1usize..90) {
        let x: Vec<f64> = (0..n).map(|k| k as f64).collect();
        let words = make_words(&x, &x, wl);
        prop_assert_eq!(words.len(), n / wl);
        for (i, w) in words.iter().enumerate() {
            prop_assert_eq!(w.index, i * wl);
            prop_assert_eq!(w.x.len(), wl);
            prop_assert_eq!(w.x[0], (i * wl) as f64);
        }
    }

    #[test]
    fn zscore_round_trip(v in prop::collection::vec(-1e3f64..1e3, 2..100)) {
        prop_assume!(v.iter().any(|x| *x != v[0]));
        let z = ZScore::of(&v).unwrap();
        let back = z.invert(&z.apply(&v));
        for (a, b) in back.iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
