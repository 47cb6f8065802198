use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vemu::analysis::fit_linear_baseline;
use vemu::dataset::{Capture, LinkConfig, Split};
use vemu::physics::{
    apply_rin, bias_to_current, detect, integrate_drive, integrate_rate_equations, noise_stream,
    relaxation_oscillation_hz, sample_interval, simulate_link, steady_state, BesselLowpass, LaserState,
    ReceiverParams, VcselParams, SAMPLES_PER_SYMBOL,
};
use vemu::signal::{FfeTaps, SymbolSequence, PAM4_LEVELS, SYMBOL_RATE_HZ};

fn dt() -> f64 {
    sample_interval(SYMBOL_RATE_HZ)
}

#[test]
fn default_device_design_targets() {
    let p = VcselParams::default();
    assert!(p.threshold_voltage() < 1.0, "threshold at {} V", p.threshold_voltage());
    let f = relaxation_oscillation_hz(bias_to_current(1.4, &p), &p).unwrap();
    assert!((15e9..=30e9).contains(&f), "fR = {f:.3e}");
    for v in [1.0, 1.2, 1.4, 1.6, 1.8, 2.0] {
        let st = steady_state(bias_to_current(v, &p), &p).unwrap();
        assert!(st.photons > 0.0, "no lasing at {v} V");
    }
}

#[test]
fn sample_grid_is_exact() {
    let t = dt() * SAMPLES_PER_SYMBOL as f64;
    assert!((t * SYMBOL_RATE_HZ - 1.0).abs() < 1e-12);
}

#[test]
fn long_integration_from_empty_cavity_reaches_steady_state() {
    let p = VcselParams::default();
    let i = bias_to_current(1.4, &p);
    let target = steady_state(i, &p).unwrap();
    let start = LaserState {
        carriers: 0.0,
        photons: 1.0,
    };
    // Twenty carrier lifetimes.
    let n = (20.0 * p.tau_n / 0.5e-12) as usize;
    let states = integrate_drive(&p, start, |_| i, 0.5e-12, n).unwrap();
    let end = states.last().unwrap();
    assert!((end.photons - target.photons).abs() / target.photons < 1e-6);
    assert!((end.carriers - target.carriers).abs() / target.carriers < 1e-6);
}

#[test]
fn rk4_global_error_is_fourth_order() {
    let p = VcselParams::default();
    let i0 = bias_to_current(1.4, &p);
    let amp = 0.4 * i0;
    let f = 20e9;
    let drive = move |t: f64| i0 + amp * (2.0 * std::f64::consts::PI * f * t).sin();
    let init = steady_state(i0, &p).unwrap();
    let horizon = 200e-12;
    let base = 0.5e-12;
    let run = |h: f64| {
        let n = (horizon / h).round() as usize;
        integrate_drive(&p, init, drive, h, n).unwrap()
    };
    let reference = run(base / 16.0);
    let coarse = run(base);
    let fine = run(base / 2.0);
    // Compare on the coarse grid.
    let err = |states: &[LaserState], stride: usize| {
        (0..coarse.len())
            .map(|k| (states[k * stride].photons - reference[k * 16].photons).abs())
            .fold(0.0, f64::max)
    };
    let ratio = err(&coarse, 1) / err(&fine, 2);
    assert!((12.0..=20.0).contains(&ratio), "error ratio {ratio}");
}

#[test]
fn rin_sample_spread_matches_variance_formula() {
    let dt = dt();
    let p0 = 2.5e-3;
    let power = vec![p0; 200_000];
    let out = apply_rin(&power, -138.0, dt, &mut ChaCha8Rng::seed_from_u64(4));
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let expected = (10f64.powf(-13.8) / (2.0 * dt)).sqrt();
    assert!((expected - 0.0895).abs() < 5e-4, "closed form {expected}");
    assert!((std / p0 - expected).abs() / expected < 0.01, "{} vs {expected}", std / p0);
    assert!((mean / p0 - 1.0).abs() < 1e-3);
}

#[test]
fn receiver_filter_is_three_db_down_at_cutoff() {
    let dt = dt();
    let fc = 30e9;
    let filt = BesselLowpass::design(4, fc, dt).unwrap();
    let n = 40_000;
    let x: Vec<f64> = (0..n)
        .map(|k| (2.0 * std::f64::consts::PI * fc * k as f64 * dt).sin())
        .collect();
    let y = filt.filter(&x);
    // Amplitude from the RMS of the settled second half.
    let tail = &y[n / 2..];
    let amp = (2.0 * tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt();
    let g = std::f64::consts::FRAC_1_SQRT_2;
    assert!((amp - g).abs() / g < 0.05, "gain {amp}");
}

#[test]
fn transparent_noiseless_receiver_is_a_scale() {
    let dt = dt();
    let rx = ReceiverParams {
        noise_density: 0.0,
        bandwidth_hz: 10.0 / dt,
        ..ReceiverParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let power: Vec<f64> = (0..500).map(|_| rng.random::<f64>() * 1e-3).collect();
    let out = detect(&power, &rx, dt, &mut rng).unwrap();
    for (o, p) in out.iter().zip(&power) {
        let want = rx.responsivity * p;
        assert!((o - want).abs() <= 1e-6 * want.abs().max(1e-12));
    }
}

fn pam4_symbols(n: usize, seed: u64) -> SymbolSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SymbolSequence::new((0..n).map(|_| PAM4_LEVELS[rng.random_range(0..4)]).collect())
}

#[test]
fn simulate_link_is_deterministic() {
    let (p, rx) = (VcselParams::default(), ReceiverParams::default());
    let s = pam4_symbols(2000, 1);
    let taps = FfeTaps::cursor_only();
    let a = simulate_link(&s, &taps, &p, &rx, 1.4, 1.2, Some(&mut noise_stream(9, 3))).unwrap();
    let b = simulate_link(&s, &taps, &p, &rx, 1.4, 1.2, Some(&mut noise_stream(9, 3))).unwrap();
    assert_eq!(a, b);
    let c = simulate_link(&s, &taps, &p, &rx, 1.4, 1.2, Some(&mut noise_stream(9, 4))).unwrap();
    assert_ne!(a.received, c.received);
    assert_eq!(a.drive.len(), a.received.len());
    assert_eq!(a.drive.len(), s.len() * a.sps);
}

#[test]
fn constant_symbols_settle() {
    let (p, rx) = (VcselParams::default(), ReceiverParams::default());
    let s = SymbolSequence::new(vec![1.0 / 3.0; 400]);
    let pair = simulate_link::<ChaCha8Rng>(&s, &FfeTaps::cursor_only(), &p, &rx, 1.4, 1.2, None).unwrap();
    let tail = &pair.received[pair.received.len() / 2..];
    let last = *tail.last().unwrap();
    let spread = tail.iter().map(|v| (v - last).abs()).fold(0.0, f64::max);
    assert!(spread <= 1e-9 * last.abs(), "spread {spread}");
}

#[test]
fn received_is_aligned_with_drive() {
    let (p, rx) = (VcselParams::default(), ReceiverParams::default());
    let s = pam4_symbols(3000, 2);
    let pair = simulate_link::<ChaCha8Rng>(&s, &FfeTaps::cursor_only(), &p, &rx, 1.4, 1.2, None).unwrap();
    let sps = pair.sps;
    let centre = |v: &[f64]| v.iter().skip(sps / 2).step_by(sps).copied().collect::<Vec<_>>();
    let (x, y) = (centre(&pair.drive), centre(&pair.received));
    let n = x.len();
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let corr = |lag: usize| {
        (0..n - lag)
            .map(|k| (x[k] - mx) * (y[k + lag] - my))
            .sum::<f64>()
            / (n - lag) as f64
    };
    let c0 = corr(0);
    for lag in 1..4 {
        assert!(c0 > corr(lag), "lag {lag} beats zero lag");
    }
}

#[test]
fn noiseless_eye_has_four_ordered_levels() {
    let cfg = LinkConfig {
        noise: false,
        train_symbols: 6000,
        ..LinkConfig::default()
    }
    .with_adapted_ffe()
    .unwrap();
    let symbols = cfg.symbols(Capture::Train).unwrap();
    for v in [1.0, 1.4, 2.0] {
        let pair = cfg.capture(v, Capture::Train).unwrap();
        let y: Vec<f64> = pair
            .received
            .iter()
            .skip(cfg.phase)
            .step_by(pair.sps)
            .copied()
            .collect();
        let mut groups = [(f64::INFINITY, f64::NEG_INFINITY); 4];
        for (s, r) in symbols.levels.iter().zip(&y).skip(8) {
            let i = PAM4_LEVELS.iter().position(|l| l == s).unwrap();
            groups[i] = (groups[i].0.min(*r), groups[i].1.max(*r));
        }
        for w in groups.windows(2) {
            assert!(w[0].1 < w[1].0, "levels overlap at {v} V: {groups:?}");
        }
    }
}

#[test]
fn linear_residual_does_not_fall_with_bias() {
    let cfg = LinkConfig {
        train_symbols: 40_000,
        test_symbols: 8_000,
        ..LinkConfig::default()
    }
    .with_adapted_ffe()
    .unwrap();
    let mut last = 0.0;
    for v in [1.0, 1.2, 1.4, 1.6, 1.8, 2.0] {
        let ds = cfg.build_dataset(v).unwrap();
        let nmse = fit_linear_baseline(&ds, 7).unwrap().nmse(&ds, Split::Test).unwrap();
        assert!(nmse >= last, "{v} V: {nmse} < {last}");
        last = nmse;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn populations_stay_non_negative(
        levels in prop::collection::vec(0.0f64..1.0, 50..120),
        bias in 1.0f64..2.0,
    ) {
        let p = VcselParams::default();
        let current: Vec<f64> = levels
            .iter()
            .flat_map(|&u| std::iter::repeat_n(bias_to_current(bias + 0.6 * (2.0 * u - 1.0), &p), 19))
            .collect();
        let init = steady_state(current[0], &p).unwrap();
        let states = vemu::physics::integrate_sampled(&p, init, &current, dt()).unwrap();
        prop_assert!(states.iter().all(|s| s.photons >= 0.0 && s.carriers >= 0.0));
        let power = integrate_rate_equations(&current, &p, dt()).unwrap();
        prop_assert!(power.iter().all(|&w| w >= 0.0));
    }
}
