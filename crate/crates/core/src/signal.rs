//! Transmit-side electrical chain: PRBS, PAM-4 mapping, DAC quantization and
//! the 4-tap feed-forward equalizer with its LMS tap search.

use thiserror::Error;

use crate::mt19937::Mt19937;
use crate::scalar::Scalar;

/// Symbol rate of the emulated link.
pub const SYMBOL_RATE_HZ: f64 = 53.125e9;

/// Number of FFE taps in the DAC.
pub const FFE_TAPS: usize = 4;

/// PAM-4 amplitude alphabet, lowest to highest.
pub const PAM4_LEVELS: [f64; 4] = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("requested an empty bit sequence")]
    EmptyRequest,
    #[error("PAM-4 mapping needs an even number of bits, got {0}")]
    OddBitCount(usize),
    #[error("DAC resolution must lie in 1..=16 bits, got {0}")]
    DacResolution(u32),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("FFE needs at least {FFE_TAPS} symbols, got {0}")]
    TooShort(usize),
    #[error("invalid FFE taps: {0}")]
    InvalidTaps(String),
    #[error("LMS step size must be non-negative and finite, got {0}")]
    InvalidStep(f64),
    #[error("LMS diverged at step size {step}: window MSE {mse:.3e} exceeds 10x the initial {initial:.3e}")]
    Diverged { step: f64, mse: f64, initial: f64 },
    #[error("channel returned {got} samples for {expected} symbols")]
    ChannelLength { expected: usize, got: usize },
    #[error("channel failed: {0}")]
    Channel(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitSequence {
    pub bits: Vec<u8>,
    pub seed: u32,
    pub generator_id: &'static str,
}

impl BitSequence {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// PAM-4 symbols at one sample per symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolSequence {
    pub levels: Vec<f64>,
    pub symbol_rate_hz: f64,
}

impl SymbolSequence {
    pub fn new(levels: Vec<f64>) -> Self {
        Self {
            levels,
            symbol_rate_hz: SYMBOL_RATE_HZ,
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Transmit FFE coefficients. Tap `center_index` multiplies the current
/// symbol; lower indices are precursors, higher ones postcursors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfeTaps<T = f64> {
    pub taps: [T; FFE_TAPS],
    pub center_index: usize,
}

impl<T: Scalar> FfeTaps<T> {
    pub fn new(taps: [T; FFE_TAPS], center_index: usize) -> Result<Self, SignalError> {
        let t = Self { taps, center_index };
        t.validate()?;
        Ok(t)
    }

    /// Cursor-only taps: one precursor, cursor at index 1, two postcursors.
    pub fn cursor_only() -> Self {
        Self {
            taps: [T::zero(), T::one(), T::zero(), T::zero()],
            center_index: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.center_index >= FFE_TAPS {
            return Err(SignalError::InvalidTaps(format!(
                "center index {} out of range",
                self.center_index
            )));
        }
        if let Some(i) = self.taps.iter().position(|t| !t.is_finite()) {
            return Err(SignalError::InvalidTaps(format!("tap {i} is not finite")));
        }
        Ok(())
    }

    /// Sum of absolute tap values: the peak FFE output for a unit-peak alphabet.
    pub fn full_scale(&self) -> T {
        self.taps.iter().map(|t| t.abs()).sum()
    }
}

/// Draws `n_bits` bits from MT19937, most significant bit of each 32-bit
/// word first.
pub fn generate_prbs(seed: u32, n_bits: usize) -> Result<BitSequence, SignalError> {
    if n_bits == 0 {
        return Err(SignalError::EmptyRequest);
    }
    let mut mt = Mt19937::new(seed);
    let mut bits = Vec::with_capacity(n_bits);
    while bits.len() < n_bits {
        let word = mt.next_u32();
        let take = (n_bits - bits.len()).min(32);
        bits.extend((0..take).map(|k| ((word >> (31 - k)) & 1) as u8));
    }
    Ok(BitSequence {
        bits,
        seed,
        generator_id: "mt19937",
    })
}

/// Level index (0 = lowest) for the bit pair `(b1, b0)`.
fn pam4_index(b1: u8, b0: u8, gray: bool) -> usize {
    let natural = ((b1 & 1) << 1 | (b0 & 1)) as usize;
    if gray {
        // 00 -> 0, 01 -> 1, 11 -> 2, 10 -> 3
        natural ^ (natural >> 1)
    } else {
        natural
    }
}

/// Maps consecutive bit pairs onto the PAM-4 alphabet.
pub fn map_pam4(bits: &BitSequence, gray: bool) -> Result<SymbolSequence, SignalError> {
    map_pam4_bits(&bits.bits, gray)
}

pub fn map_pam4_bits(bits: &[u8], gray: bool) -> Result<SymbolSequence, SignalError> {
    if bits.len() % 2 != 0 {
        return Err(SignalError::OddBitCount(bits.len()));
    }
    let levels = bits
        .chunks_exact(2)
        .map(|p| PAM4_LEVELS[pam4_index(p[0], p[1], gray)])
        .collect();
    Ok(SymbolSequence::new(levels))
}

/// Inverse of [`map_pam4`]: nearest alphabet level back to its bit pair.
pub fn demap_pam4(symbols: &SymbolSequence, gray: bool) -> Vec<u8> {
    let mut bits = Vec::with_capacity(symbols.len() * 2);
    for &s in &symbols.levels {
        let level = PAM4_LEVELS
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - s).abs().total_cmp(&(b.1 - s).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let natural = (0..4)
            .find(|&n| pam4_index((n >> 1) as u8, (n & 1) as u8, gray) == level)
            .unwrap_or(0);
        bits.push((natural >> 1) as u8);
        bits.push((natural & 1) as u8);
    }
    bits
}

/// Uniform mid-rise quantizer spanning the input's own `[min, max]` range with
/// `2^n_bits` levels. Codes are placed so that the extreme codes land exactly
/// on `min` and `max`.
pub fn quantize_dac<T: Scalar>(waveform: &[T], n_bits: u32) -> Result<Vec<T>, SignalError> {
    if !(1..=16).contains(&n_bits) {
        return Err(SignalError::DacResolution(n_bits));
    }
    if let Some(i) = waveform.iter().position(|x| !x.is_finite()) {
        return Err(SignalError::NonFinite(i));
    }
    let Some(&first) = waveform.first() else {
        return Ok(Vec::new());
    };
    let (lo, hi) = waveform
        .iter()
        .fold((first, first), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if range <= T::zero() {
        return Ok(waveform.to_vec());
    }
    let levels = 1u32 << n_bits;
    let max_code = T::of_usize(levels as usize - 1);
    let step_in = range / T::of_usize(levels as usize);
    let step_out = range / max_code;
    Ok(waveform
        .iter()
        .map(|&x| {
            let code = ((x - lo) / step_in).floor().min(max_code).max(T::zero());
            lo + code * step_out
        })
        .collect())
}

/// Symbol-rate FIR: `out[k] = sum_j taps[j] * s[k - j + center]`, with
/// zero padding outside the sequence.
pub fn apply_ffe<T: Scalar>(symbols: &[T], taps: &FfeTaps<T>) -> Result<Vec<T>, SignalError> {
    taps.validate()?;
    if symbols.len() < FFE_TAPS {
        return Err(SignalError::TooShort(symbols.len()));
    }
    Ok(fir_centered(symbols, &taps.taps, taps.center_index))
}

fn fir_centered<T: Scalar>(x: &[T], taps: &[T], center: usize) -> Vec<T> {
    let n = x.len() as isize;
    (0..n)
        .map(|k| {
            let mut acc = T::zero();
            for (j, &t) in taps.iter().enumerate() {
                let idx = k - j as isize + center as isize;
                if (0..n).contains(&idx) {
                    acc += t * x[idx as usize];
                }
            }
            acc
        })
        .collect()
}

/// Outcome of an LMS tap search.
#[derive(Debug, Clone, PartialEq)]
pub struct LmsResult {
    pub taps: FfeTaps<f64>,
    pub initial_mse: f64,
    pub final_mse: f64,
    pub iterations: usize,
}

fn symbol_mse(received: &[f64], target: &[f64]) -> f64 {
    received
        .iter()
        .zip(target)
        .map(|(r, s)| (r - s) * (r - s))
        .sum::<f64>()
        / target.len().max(1) as f64
}

/// Adapts the transmit FFE by per-symbol LMS against the ideal PAM-4 levels.
///
/// `channel` maps a symbol-rate drive sequence to the received symbol-rate
/// samples, already aligned and scaled to the PAM-4 alphabet. The channel is
/// linearised around the current drive once per pass over the training
/// symbols; within a pass every symbol contributes one tap update. The taps
/// with the lowest measured channel MSE are returned, so the result never
/// does worse than `init`.
pub fn lms_optimize_ffe<F>(
    tx_symbols: &SymbolSequence,
    mut channel: F,
    init: FfeTaps<f64>,
    step: f64,
    n_iterations: usize,
) -> Result<LmsResult, SignalError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, SignalError>,
{
    init.validate()?;
    if !(step.is_finite() && step >= 0.0) {
        return Err(SignalError::InvalidStep(step));
    }
    let s = &tx_symbols.levels;
    let n = s.len();
    if n < FFE_TAPS {
        return Err(SignalError::TooShort(n));
    }
    let mut run = |drive: &[f64]| -> Result<Vec<f64>, SignalError> {
        let out = channel(drive)?;
        if out.len() != n {
            return Err(SignalError::ChannelLength {
                expected: n,
                got: out.len(),
            });
        }
        Ok(out)
    };

    // Each tap's contribution to the drive is the symbol sequence shifted by
    // (center - j).
    let shifted: Vec<Vec<f64>> = (0..FFE_TAPS)
        .map(|j| {
            let mut unit = [0.0; FFE_TAPS];
            unit[j] = 1.0;
            fir_centered(s, &unit, init.center_index)
        })
        .collect();

    let mut taps = init;
    let mut received = run(&apply_ffe(s, &taps)?)?;
    let initial_mse = symbol_mse(&received, s);
    let mut best = (initial_mse, taps);
    if step == 0.0 || n_iterations == 0 || initial_mse == 0.0 {
        return Ok(LmsResult {
            taps,
            initial_mse,
            final_mse: initial_mse,
            iterations: 0,
        });
    }

    let window = (n / 4).clamp(16, 1000);
    let delta = 1e-3;
    let mut first_window_mse: Option<f64> = None;
    let mut win_acc = 0.0;
    let mut win_len = 0usize;
    let mut done = 0usize;

    while done < n_iterations {
        // Linearise: regressor u_j = d(received)/d(tap_j) around the current drive.
        let drive = apply_ffe(s, &taps)?;
        let mut regressors = Vec::with_capacity(FFE_TAPS);
        for shift in &shifted {
            let plus: Vec<f64> = drive.iter().zip(shift).map(|(d, u)| d + delta * u).collect();
            let minus: Vec<f64> = drive.iter().zip(shift).map(|(d, u)| d - delta * u).collect();
            let rp = run(&plus)?;
            let rm = run(&minus)?;
            regressors.push(
                rp.iter()
                    .zip(&rm)
                    .map(|(a, b)| (a - b) / (2.0 * delta))
                    .collect::<Vec<f64>>(),
            );
        }
        let pass_taps = taps.taps;
        let steps = (n_iterations - done).min(n);
        for k in 0..steps {
            let mut y = received[k];
            for j in 0..FFE_TAPS {
                y += (taps.taps[j] - pass_taps[j]) * regressors[j][k];
            }
            let e = y - s[k];
            for j in 0..FFE_TAPS {
                taps.taps[j] -= step * e * regressors[j][k];
            }
            if !taps.taps.iter().all(|t| t.is_finite()) {
                return Err(SignalError::Diverged {
                    step,
                    mse: f64::INFINITY,
                    initial: first_window_mse.unwrap_or(initial_mse),
                });
            }
            win_acc += e * e;
            win_len += 1;
            if win_len == window {
                let mse = win_acc / window as f64;
                match first_window_mse {
                    None => first_window_mse = Some(mse.max(f64::MIN_POSITIVE)),
                    Some(first) if mse > 10.0 * first => {
                        return Err(SignalError::Diverged {
                            step,
                            mse,
                            initial: first,
                        })
                    }
                    _ => {}
                }
                win_acc = 0.0;
                win_len = 0;
            }
        }
        done += steps;
        received = run(&apply_ffe(s, &taps)?)?;
        let mse = symbol_mse(&received, s);
        if !mse.is_finite() {
            return Err(SignalError::Diverged {
                step,
                mse,
                initial: initial_mse,
            });
        }
        if mse < best.0 {
            best = (mse, taps);
        }
    }
    Ok(LmsResult {
        taps: best.1,
        initial_mse,
        final_mse: best.0,
        iterations: done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prbs_rejects_empty_request() {
        assert_eq!(generate_prbs(1, 0), Err(SignalError::EmptyRequest));
    }

    #[test]
    fn prbs_is_deterministic() {
        let a = generate_prbs(42, 32).unwrap();
        let b = generate_prbs(42, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.generator_id, "mt19937");
        assert!(a.bits.iter().all(|&b| b <= 1));
    }

    #[test]
    fn prbs_single_bit_is_msb_of_first_word() {
        // 3499211612 = 0xD091BB5C, MSB set.
        let b = generate_prbs(5489, 1).unwrap();
        assert_eq!(b.bits, vec![1]);
    }

    #[test]
    fn gray_mapping_table() {
        let s = map_pam4_bits(&[0, 0, 1, 0], true).unwrap();
        assert_eq!(s.levels, vec![-1.0, 1.0]);
        let s = map_pam4_bits(&[0, 1, 1, 1], true).unwrap();
        assert_eq!(s.levels, vec![-1.0 / 3.0, 1.0 / 3.0]);
        let s = map_pam4_bits(&[1, 1], false).unwrap();
        assert_eq!(s.levels, vec![1.0]);
        let s = map_pam4_bits(&[1, 0], false).unwrap();
        assert_eq!(s.levels, vec![1.0 / 3.0]);
        assert_eq!(s.symbol_rate_hz, SYMBOL_RATE_HZ);
    }

    #[test]
    fn odd_bits_rejected() {
        assert_eq!(
            map_pam4_bits(&[1, 0, 1], true),
            Err(SignalError::OddBitCount(3))
        );
    }

    #[test]
    fn dac_one_bit_ramp_splits_at_half() {
        let ramp: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let q = quantize_dac(&ramp, 1).unwrap();
        for (x, y) in ramp.iter().zip(&q) {
            let expect = if *x < 0.5 { 0.0 } else { 1.0 };
            assert_eq!(*y, expect, "x = {x}");
        }
    }

    #[test]
    fn dac_constant_input_unchanged() {
        let x = vec![0.3f64; 10];
        assert_eq!(quantize_dac(&x, 6).unwrap(), x);
    }

    #[test]
    fn dac_sixteen_bit_error_bound() {
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 2.5).collect();
        let q = quantize_dac(&x, 16).unwrap();
        let range = 5.0;
        for (a, b) in x.iter().zip(&q) {
            assert!((a - b).abs() <= range / 65536.0 + 1e-12);
        }
    }

    #[test]
    fn dac_preserves_pam4_levels() {
        let s: Vec<f64> = (0..40).map(|i| PAM4_LEVELS[i % 4]).collect();
        let q = quantize_dac(&s, 6).unwrap();
        let mut distinct: Vec<f64> = q.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
        assert_eq!(distinct[0], -1.0);
        assert_eq!(distinct[3], 1.0);
    }

    #[test]
    fn dac_rejects_bad_resolution() {
        assert!(quantize_dac(&[0.0f64, 1.0], 0).is_err());
        assert!(quantize_dac(&[0.0f64, 1.0], 17).is_err());
        assert_eq!(
            quantize_dac(&[0.0f64, f64::NAN], 6),
            Err(SignalError::NonFinite(1))
        );
    }

    #[test]
    fn ffe_identity_and_scaling() {
        let x = vec![1.0, -1.0, 1.0 / 3.0, -1.0 / 3.0, 1.0];
        let id = FfeTaps::cursor_only();
        assert_eq!(apply_ffe(&x, &id).unwrap(), x);
        let half = FfeTaps::new([0.0, 0.5, 0.0, 0.0], 1).unwrap();
        let y = apply_ffe(&x, &half).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(a * 0.5, *b);
        }
    }

    #[test]
    fn ffe_impulse_response() {
        let x = [0.0, 0.0, 1.0, 0.0, 0.0];
        let taps = FfeTaps::new([0.1, 0.7, -0.2, 0.05], 1).unwrap();
        let y = apply_ffe(&x, &taps).unwrap();
        // Precursor lands one symbol before the impulse, postcursors after.
        assert_eq!(y, vec![0.0, 0.1, 0.7, -0.2, 0.05]);
    }

    #[test]
    fn ffe_rejects_short_input() {
        assert_eq!(
            apply_ffe(&[1.0, 0.0, 1.0], &FfeTaps::cursor_only()),
            Err(SignalError::TooShort(3))
        );
    }

    #[test]
    fn lms_identity_channel_keeps_optimal_taps() {
        let s = map_pam4(&generate_prbs(3, 2000).unwrap(), true).unwrap();
        let r = lms_optimize_ffe(&s, |d| Ok(d.to_vec()), FfeTaps::cursor_only(), 0.01, 5000)
            .unwrap();
        assert_eq!(r.taps, FfeTaps::cursor_only());
        assert_eq!(r.final_mse, 0.0);
    }

    #[test]
    fn lms_zero_step_returns_init() {
        let s = map_pam4(&generate_prbs(3, 2000).unwrap(), true).unwrap();
        let init = FfeTaps::new([0.1, 0.8, 0.1, 0.0], 1).unwrap();
        let r = lms_optimize_ffe(&s, |d| Ok(d.to_vec()), init, 0.0, 5000).unwrap();
        assert_eq!(r.taps, init);
    }

    #[test]
    fn lms_reports_divergence_with_step() {
        let s = map_pam4(&generate_prbs(3, 4000).unwrap(), true).unwrap();
        let init = FfeTaps::new([0.1, 0.8, 0.1, 0.0], 1).unwrap();
        let gain = |d: &[f64]| Ok(d.iter().map(|x| 3.0 * x).collect());
        match lms_optimize_ffe(&s, gain, init, 5.0, 4000) {
            Err(SignalError::Diverged { step, .. }) => assert_eq!(step, 5.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn lms_channel_length_checked() {
        let s = map_pam4(&generate_prbs(3, 40).unwrap(), true).unwrap();
        let bad = |d: &[f64]| Ok(d[1..].to_vec());
        assert!(matches!(
            lms_optimize_ffe(&s, bad, FfeTaps::cursor_only(), 0.01, 10),
            Err(SignalError::ChannelLength { .. })
        ));
    }
}
