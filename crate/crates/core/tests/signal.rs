use proptest::prelude::*;
use rand_mt::Mt;

use vemu::mt19937::Mt19937;
use vemu::signal::{
    apply_ffe, demap_pam4, generate_prbs, lms_optimize_ffe, map_pam4_bits, FfeTaps, SignalError, SymbolSequence,
    PAM4_LEVELS,
};

#[test]
fn mt19937_matches_reference_implementation() {
    for seed in [0u32, 1, 5489, 0xdead_beef] {
        let mut ours = Mt19937::new(seed);
        let mut theirs = Mt::new(seed);
        for _ in 0..5000 {
            assert_eq!(ours.next_u32(), theirs.next_u32());
        }
    }
}

#[test]
fn mt19937_canonical_ten_thousandth_output() {
    // Reference value for the default seed.
    let mut mt = Mt19937::new(5489);
    let v = (0..10_000).map(|_| mt.next_u32()).last().unwrap();
    assert_eq!(v, 4_123_659_995);
}

#[test]
fn prbs_bits_are_msb_first_words() {
    let bits = generate_prbs(7, 96).unwrap().bits;
    let mut mt = Mt::new(7);
    let expected: Vec<u8> = (0..3)
        .flat_map(|_| {
            let w = mt.next_u32();
            (0..32).rev().map(move |k| ((w >> k) & 1) as u8)
        })
        .collect();
    assert_eq!(bits, expected);
}

#[test]
fn prbs_mean_is_balanced() {
    for seed in [1u32, 2, 3] {
        let b = generate_prbs(seed, 100_000).unwrap().bits;
        let mean = b.iter().map(|&x| x as f64).sum::<f64>() / b.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "seed {seed}: mean {mean}");
    }
}

#[test]
fn lms_identity_channel_converges_from_bad_start() {
    let bits = generate_prbs(3, 4000).unwrap();
    let s = map_pam4_bits(&bits.bits, true).unwrap();
    let init = FfeTaps::new([0.2, 0.6, -0.1, 0.05], 1).unwrap();
    let r = lms_optimize_ffe(&s, |d| Ok(d.to_vec()), init, 1e-2, 10_000).unwrap();
    assert!(r.final_mse < 1e-3 * r.initial_mse, "{} -> {}", r.initial_mse, r.final_mse);
}

#[test]
fn lms_improves_on_low_pass_channel() {
    let bits = generate_prbs(11, 4000).unwrap();
    let s = map_pam4_bits(&bits.bits, true).unwrap();
    // One-pole ISI channel: y[k] = 0.7 x[k] + 0.3 x[k-1].
    let channel = |d: &[f64]| -> Result<Vec<f64>, SignalError> {
        Ok((0..d.len())
            .map(|k| 0.7 * d[k] + if k > 0 { 0.3 * d[k - 1] } else { 0.0 })
            .collect())
    };
    let before = {
        let y = channel(&s.levels).unwrap();
        y.iter().zip(&s.levels).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
    };
    let r = lms_optimize_ffe(&s, channel, FfeTaps::cursor_only(), 5e-3, 8000).unwrap();
    assert!((r.initial_mse - before).abs() < 1e-12);
    assert!(r.final_mse < 0.5 * before, "{before} -> {}", r.final_mse);
}

fn bit_vec(n_pairs: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, 2 * n_pairs)
}

proptest! {
    #[test]
    fn pam4_round_trip(bits in (1usize..200).prop_flat_map(bit_vec), gray in any::<bool>()) {
        let s = map_pam4_bits(&bits, gray).unwrap();
        prop_assert!(s.levels.iter().all(|l| PAM4_LEVELS.contains(l)));
        prop_assert_eq!(demap_pam4(&s, gray), bits.clone());
        let again = map_pam4_bits(&demap_pam4(&s, gray), gray).unwrap();
        prop_assert_eq!(again.levels, s.levels);
    }

    #[test]
    fn gray_neighbours_differ_in_one_bit(i in 0usize..3) {
        let lo = SymbolSequence::new(vec![PAM4_LEVELS[i]]);
        let hi = SymbolSequence::new(vec![PAM4_LEVELS[i + 1]]);
        let (a, b) = (demap_pam4(&lo, true), demap_pam4(&hi, true));
        let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        prop_assert_eq!(diff, 1);
    }

    #[test]
    fn ffe_is_linear(
        x in prop::collection::vec(-2.0f64..2.0, 4..64),
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        taps in prop::array::uniform4(-1.0f64..1.0),
    ) {
        let y: Vec<f64> = x.iter().enumerate().map(|(k, _)| ((seed >> (k % 60)) & 7) as f64 - 3.5).collect();
        let t = FfeTaps::new(taps, 1).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = apply_ffe(&mix, &t).unwrap();
        let fx = apply_ffe(&x, &t).unwrap();
        let fy = apply_ffe(&y, &t).unwrap();
        for k in 0..x.len() {
            let rhs = a * fx[k] + b * fy[k];
            prop_assert!((lhs[k] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn ffe_matches_direct_convolution(
        x in prop::collection::vec(-1.0f64..1.0, 4..40),
        taps in prop::array::uniform4(-1.0f64..1.0),
    ) {
        // Cursor at index 1: out[k] = t0 x[k+1] + t1 x[k] + t2 x[k-1] + t3 x[k-2].
        let t = FfeTaps::new(taps, 1).unwrap();
        let out = apply_ffe(&x, &t).unwrap();
        let at = |i: isize| if i >= 0 && (i as usize) < x.len() { x[i as usize] } else { 0.0 };
        for k in 0..x.len() {
            let ki = k as isize;
            let want = taps[0] * at(ki + 1) + taps[1] * at(ki) + taps[2] * at(ki - 1) + taps[3] * at(ki - 2);
            prop_assert!((out[k] - want).abs() < 1e-12);
        }
    }
}
