//! Ground-truth link oracle: single-mode carrier/photon rate equations
//! integrated with classical RK4, relative intensity noise, and a noisy,
//! bandwidth-limited photoreceiver.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::signal::{apply_ffe, quantize_dac, FfeTaps, SignalError, SymbolSequence};

/// Elementary charge (C).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Samples per symbol of the oracle waveform.
pub const SAMPLES_PER_SYMBOL: usize = 19;

/// DAC resolution in bits.
pub const DAC_BITS: u32 = 6;

/// Peak-to-peak modulation swing at the laser (V).
pub const DEFAULT_MODULATION_VPP: f64 = 1.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("invalid laser parameters: {0}")]
    InvalidParams(String),
    #[error("invalid receiver parameters: {0}")]
    InvalidReceiver(String),
    #[error("time step {dt:.3e} s exceeds half the photon lifetime ({limit:.3e} s)")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("drive current at sample {0} is negative or not finite")]
    BadCurrent(usize),
    #[error("rate-equation integration blew up at step {0}")]
    Blowup(usize),
    #[error("steady state did not converge for current {0:.4e} A")]
    SteadyState(f64),
    #[error("modulation amplitude must be positive, got {0}")]
    BadModulation(f64),
    #[error("bias voltage must be non-negative, got {0}")]
    BadBias(f64),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Rate-equation coefficients, electrical model and noise figures of one
/// laser. Carrier and photon quantities are numbers, not densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VcselParams<T = f64> {
    /// Carrier lifetime (s).
    pub tau_n: T,
    /// Photon lifetime (s).
    pub tau_p: T,
    /// Differential gain (1/s per carrier).
    pub g0: T,
    /// Transparency carrier number.
    pub n0: T,
    /// Gain compression per photon.
    pub eps: T,
    pub gamma: T,
    /// Spontaneous emission coupling.
    pub beta: T,
    pub eta_i: T,
    /// Optical output power per intracavity photon (W).
    pub power_per_photon: T,
    /// Diode turn-on voltage (V).
    pub v_on: T,
    /// Series resistance (ohm).
    pub r_series: T,
    /// Relative intensity noise (dB/Hz); `-inf` disables it.
    pub rin_db_hz: T,
}

impl Default for VcselParams<f64> {
    /// Desk-scale oracle device. Chosen so that the relaxation-oscillation
    /// frequency at 1.4 V sits inside 15..30 GHz and the threshold voltage
    /// is below 1.0 V.
    fn default() -> Self {
        Self {
            tau_n: 1.1e-9,
            tau_p: 2.0e-12,
            g0: 4.5e6,
            n0: 8.3e5,
            eps: 8.4e-5,
            gamma: 1.0,
            beta: 5.0e-5,
            eta_i: 1.0,
            power_per_photon: 5.3e-8,
            v_on: 0.35,
            r_series: 55.0,
            rin_db_hz: -138.0,
        }
    }
}

impl<T: Scalar> VcselParams<T> {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let all = [
            self.tau_n,
            self.tau_p,
            self.g0,
            self.n0,
            self.eps,
            self.gamma,
            self.beta,
            self.eta_i,
            self.power_per_photon,
            self.v_on,
            self.r_series,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(PhysicsError::InvalidParams("non-finite coefficient".into()));
        }
        let positive = [
            ("tau_n", self.tau_n),
            ("tau_p", self.tau_p),
            ("g0", self.g0),
            ("power_per_photon", self.power_per_photon),
            ("r_series", self.r_series),
            ("eta_i", self.eta_i),
        ];
        for (name, v) in positive {
            if v <= T::zero() {
                return Err(PhysicsError::InvalidParams(format!("{name} must be > 0")));
            }
        }
        if !(self.gamma > T::zero() && self.gamma <= T::one()) {
            return Err(PhysicsError::InvalidParams("gamma must lie in (0, 1]".into()));
        }
        if !(self.beta >= T::zero() && self.beta <= T::one()) {
            return Err(PhysicsError::InvalidParams("beta must lie in [0, 1]".into()));
        }
        if self.eps < T::zero() {
            return Err(PhysicsError::InvalidParams("eps must be >= 0".into()));
        }
        if self.rin_db_hz.is_nan() || self.rin_db_hz == T::infinity() {
            return Err(PhysicsError::InvalidParams("rin_db_hz must be finite or -inf".into()));
        }
        Ok(())
    }

    /// Threshold current (A), neglecting spontaneous emission.
    pub fn threshold_current(&self) -> T {
        let n_th = self.n0 + T::one() / (self.gamma * self.g0 * self.tau_p);
        T::of(ELEMENTARY_CHARGE) * n_th / (self.eta_i * self.tau_n)
    }

    /// Bias voltage at which the drive current reaches threshold.
    pub fn threshold_voltage(&self) -> T {
        self.v_on + self.r_series * self.threshold_current()
    }

    #[inline]
    fn derivatives(&self, current: T, s: LaserState<T>) -> LaserState<T> {
        let q = T::of(ELEMENTARY_CHARGE);
        let stim = self.g0 * (s.carriers - self.n0) * s.photons / (T::one() + self.eps * s.photons);
        let spont = s.carriers / self.tau_n;
        LaserState {
            carriers: self.eta_i * current / q - spont - stim,
            photons: self.gamma * stim - s.photons / self.tau_p + self.gamma * self.beta * spont,
        }
    }
}

/// Photoreceiver: responsivity, noise and bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverParams<T = f64> {
    /// A/W.
    pub responsivity: T,
    /// 3 dB cutoff of the receive chain (Hz).
    pub bandwidth_hz: T,
    /// Input-referred noise (W/sqrt(Hz)).
    pub noise_density: T,
    pub filter_order: usize,
    /// Capture sample rate; the oscilloscope is folded into the filter.
    pub adc_rate_hz: T,
}

impl Default for ReceiverParams<f64> {
    fn default() -> Self {
        Self {
            responsivity: 0.6,
            bandwidth_hz: 30e9,
            noise_density: 32e-12,
            filter_order: 4,
            adc_rate_hz: 100e9,
        }
    }
}

impl<T: Scalar> ReceiverParams<T> {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.bandwidth_hz > T::zero()) {
            return Err(PhysicsError::InvalidReceiver("bandwidth_hz must be > 0".into()));
        }
        if !(self.noise_density >= T::zero()) {
            return Err(PhysicsError::InvalidReceiver("noise_density must be >= 0".into()));
        }
        if !(1..=8).contains(&self.filter_order) {
            return Err(PhysicsError::InvalidReceiver(format!(
                "filter_order {} outside 1..=8",
                self.filter_order
            )));
        }
        if !self.responsivity.is_finite() {
            return Err(PhysicsError::InvalidReceiver("responsivity not finite".into()));
        }
        Ok(())
    }
}

/// Carrier and photon numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserState<T = f64> {
    pub carriers: T,
    pub photons: T,
}

impl<T: Scalar> LaserState<T> {
    #[inline]
    fn axpy(self, h: T, d: LaserState<T>) -> Self {
        Self {
            carriers: self.carriers + h * d.carriers,
            photons: self.photons + h * d.photons,
        }
    }

    fn is_finite(&self) -> bool {
        self.carriers.is_finite() && self.photons.is_finite()
    }
}

/// Aligned drive / received capture of one operating regime.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformPair {
    /// Electrical drive voltage at the laser (V).
    pub drive: Vec<f64>,
    /// Detected, filtered photocurrent (A).
    pub received: Vec<f64>,
    /// Sample interval (s).
    pub dt: f64,
    pub sps: usize,
    pub regime_voltage: f64,
}

/// Maps the DC bias voltage onto the diode current.
pub fn bias_to_current<T: Scalar>(voltage: T, params: &VcselParams<T>) -> T {
    ((voltage - params.v_on) / params.r_series).max(T::zero())
}

/// Residual of the two steady-state equations, relative to the largest
/// term in each.
pub fn steady_state_residual<T: Scalar>(current: T, state: LaserState<T>, params: &VcselParams<T>) -> T {
    let q = T::of(ELEMENTARY_CHARGE);
    let pump = params.eta_i * current / q;
    let spont = state.carriers / params.tau_n;
    let stim = params.g0 * (state.carriers - params.n0) * state.photons
        / (T::one() + params.eps * state.photons);
    let loss = state.photons / params.tau_p;
    let r1 = (pump - spont - stim).abs() / pump.abs().max(spont.abs()).max(stim.abs()).max(T::min_positive_value());
    let gain = params.gamma * stim + params.gamma * params.beta * spont;
    let r2 = (gain - loss).abs() / gain.abs().max(loss.abs()).max(T::min_positive_value());
    r1.max(r2)
}

/// Steady state for a constant current.
///
/// The photon equation gives the carrier number in closed form for a given
/// photon number; the carrier balance then reduces to a scalar equation in
/// the photon number, solved by a damped Newton fixed-point iteration inside
/// a bracket that shrinks on every step.
pub fn steady_state<T: Scalar>(current: T, params: &VcselParams<T>) -> Result<LaserState<T>, PhysicsError> {
    let q = T::of(ELEMENTARY_CHARGE);
    let pump = params.eta_i * current / q;
    let carriers_for = |s: T| -> T {
        let a = params.gamma * params.g0 * s / (T::one() + params.eps * s);
        (s / params.tau_p + a * params.n0) / (a + params.gamma * params.beta / params.tau_n)
    };
    let balance = |s: T| -> T {
        let n = carriers_for(s);
        pump - n / params.tau_n - params.g0 * (n - params.n0) * s / (T::one() + params.eps * s)
    };

    if pump <= T::zero() {
        return Ok(LaserState {
            carriers: T::zero(),
            photons: T::zero(),
        });
    }
    // balance(0) = pump > 0 and balance decreases without bound in s.
    let mut lo = T::zero();
    let mut hi = (params.gamma * params.tau_p * pump).max(T::one());
    let mut guard = 0;
    while balance(hi) > T::zero() {
        hi = hi * T::of(2.0);
        guard += 1;
        if guard > 200 {
            return Err(PhysicsError::SteadyState(current.as_f64()));
        }
    }
    let mut s = T::of(0.5) * (lo + hi);
    for _ in 0..500 {
        let f = balance(s);
        if f > T::zero() {
            lo = s;
        } else {
            hi = s;
        }
        let h = (s.abs() * T::of(1e-7)).max(T::of(1e-12));
        let df = (balance(s + h) - balance(s - h)) / (T::of(2.0) * h);
        let newton = if df < T::zero() { s - f / df } else { T::nan() };
        let next = if newton.is_finite() && newton > lo && newton < hi {
            // Damped step towards the Newton point.
            s + T::of(0.9) * (newton - s)
        } else {
            T::of(0.5) * (lo + hi)
        };
        if (next - s).abs() <= T::epsilon() * s.abs() * T::of(4.0) || hi - lo <= T::epsilon() * hi {
            s = next;
            break;
        }
        s = next;
    }
    let state = LaserState {
        carriers: carriers_for(s),
        photons: s,
    };
    if !state.is_finite() || state.photons < T::zero() {
        return Err(PhysicsError::SteadyState(current.as_f64()));
    }
    Ok(state)
}

/// Small-signal relaxation-oscillation frequency (Hz): the undamped natural
/// frequency `sqrt(det J) / 2 pi` of the linearised system at steady state.
pub fn relaxation_oscillation_hz<T: Scalar>(current: T, params: &VcselParams<T>) -> Result<T, PhysicsError> {
    let st = steady_state(current, params)?;
    let one = T::one();
    let comp = one + params.eps * st.photons;
    let dstim_dn = params.g0 * st.photons / comp;
    let dstim_ds = params.g0 * (st.carriers - params.n0) / (comp * comp);
    let j11 = -one / params.tau_n - dstim_dn;
    let j12 = -dstim_ds;
    let j21 = params.gamma * dstim_dn + params.gamma * params.beta / params.tau_n;
    let j22 = params.gamma * dstim_ds - one / params.tau_p;
    let det = j11 * j22 - j12 * j21;
    Ok(det.max(T::zero()).sqrt() / (T::of(2.0) * T::PI()))
}

/// One classical RK4 step with the drive evaluated at `t`, `t + dt/2`, `t + dt`.
#[inline]
fn rk4_step<T: Scalar>(
    params: &VcselParams<T>,
    s: LaserState<T>,
    dt: T,
    i0: T,
    imid: T,
    i1: T,
) -> LaserState<T> {
    let half = T::of(0.5) * dt;
    let k1 = params.derivatives(i0, s);
    let k2 = params.derivatives(imid, s.axpy(half, k1));
    let k3 = params.derivatives(imid, s.axpy(half, k2));
    let k4 = params.derivatives(i1, s.axpy(dt, k3));
    let sixth = dt / T::of(6.0);
    let two = T::of(2.0);
    LaserState {
        carriers: s.carriers + sixth * (k1.carriers + two * k2.carriers + two * k3.carriers + k4.carriers),
        photons: s.photons + sixth * (k1.photons + two * k2.photons + two * k3.photons + k4.photons),
    }
}

/// Integrates from an explicit initial state under a continuous drive
/// `current(t)`. Returns the `n_steps + 1` states including the initial one.
/// No parameter validation: test modes such as `g0 = 0` are allowed.
pub fn integrate_drive<T, F>(
    params: &VcselParams<T>,
    initial: LaserState<T>,
    current: F,
    dt: T,
    n_steps: usize,
) -> Result<Vec<LaserState<T>>, PhysicsError>
where
    T: Scalar,
    F: Fn(T) -> T,
{
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut s = initial;
    out.push(s);
    let half = T::of(0.5) * dt;
    for k in 0..n_steps {
        let t = T::of_usize(k) * dt;
        s = rk4_step(params, s, dt, current(t), current(t + half), current(t + dt));
        if !s.is_finite() {
            return Err(PhysicsError::Blowup(k + 1));
        }
        out.push(s);
    }
    Ok(out)
}

/// Integrates over a sampled current with piecewise-linear interpolation at
/// half steps, starting from an explicit state. Returns photon numbers, one
/// per input sample.
pub fn integrate_sampled<T: Scalar>(
    params: &VcselParams<T>,
    initial: LaserState<T>,
    current: &[T],
    dt: T,
) -> Result<Vec<LaserState<T>>, PhysicsError> {
    let mut out = Vec::with_capacity(current.len());
    if current.is_empty() {
        return Ok(out);
    }
    let mut s = initial;
    out.push(s);
    let half = T::of(0.5);
    for k in 0..current.len() - 1 {
        let (i0, i1) = (current[k], current[k + 1]);
        s = rk4_step(params, s, dt, i0, half * (i0 + i1), i1);
        if !s.is_finite() {
            return Err(PhysicsError::Blowup(k + 1));
        }
        out.push(s);
    }
    Ok(out)
}

/// Optical output power (W) for a sampled drive current, starting from the
/// steady state at the first sample's current.
pub fn integrate_rate_equations<T: Scalar>(
    current: &[T],
    params: &VcselParams<T>,
    dt: T,
) -> Result<Vec<T>, PhysicsError> {
    params.validate()?;
    let limit = params.tau_p * T::of(0.5);
    if !(dt > T::zero()) || dt > limit {
        return Err(PhysicsError::StepTooLarge {
            dt: dt.as_f64(),
            limit: limit.as_f64(),
        });
    }
    if let Some(i) = current.iter().position(|c| !(c.is_finite() && *c >= T::zero())) {
        return Err(PhysicsError::BadCurrent(i));
    }
    let Some(&first) = current.first() else {
        return Ok(Vec::new());
    };
    let initial = steady_state(first, params)?;
    let states = integrate_sampled(params, initial, current, dt)?;
    Ok(states
        .iter()
        .map(|s| params.power_per_photon * s.photons)
        .collect())
}

/// Independent noise stream for `(seed, stream)`; streams never overlap and
/// do not depend on scheduling.
pub fn noise_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z)
}

/// Multiplicative relative intensity noise. The per-sample variance is
/// `10^(rin/10) / (2 dt)`, i.e. the configured RIN spread over the
/// simulation Nyquist bandwidth.
pub fn apply_rin<T: Scalar, R: Rng + ?Sized>(power: &[T], rin_db_hz: T, dt: T, rng: &mut R) -> Vec<T> {
    if rin_db_hz == T::neg_infinity() {
        return power.to_vec();
    }
    let sigma = (T::of(10.0).powf(rin_db_hz / T::of(10.0)) / (T::of(2.0) * dt)).sqrt();
    power
        .iter()
        .map(|&p| p * (T::one() + sigma * gaussian::<T, R>(rng)))
        .collect()
}

/// Direct-form II transposed second-order section.
#[derive(Debug, Clone, Copy)]
struct Biquad<T> {
    b: [T; 3],
    a: [T; 2],
}

/// Low-pass built from the Bessel prototype, one biquad per conjugate pole
/// pair plus a first-order section for odd orders. Prewarped bilinear
/// transform, so the digital response is exactly -3 dB at the cutoff.
#[derive(Debug, Clone)]
pub struct BesselLowpass<T> {
    sections: Vec<Biquad<T>>,
}

/// Bessel poles normalised to -3 dB at 1 rad/s, upper half plane only.
const BESSEL_POLES: [&[(f64, f64)]; 8] = [
    &[(-1.0, 0.0)],
    &[(-1.101_601_330_592_160_8, 0.636_009_824_757_034_05)],
    &[(-1.322_675_799_910_444_1, 0.0), (-1.047_409_161_008_934_9, 0.999_264_436_280_636_88)],
    &[(-1.370_067_830_551_442_2, 0.410_249_717_493_751_55), (-0.995_208_764_350_271_95, 1.257_105_739_454_654_6)],
    &[(-1.502_316_271_447_478_5, 0.0), (-1.380_877_325_860_439_2, 0.717_909_587_626_768_01), (-0.957_676_548_562_681_47, 1.471_124_320_730_394_3)],
    &[(-1.571_490_403_616_031_8, 0.320_896_374_222_623_96), (-1.381_858_097_596_564_2, 0.971_471_890_711_571_58), (-0.930_656_522_946_859_08, 1.661_863_268_942_591_8)],
    &[(-1.684_368_179_273_181_7, 0.0), (-1.612_038_766_226_125_7, 0.589_244_506_931_472_01), (-1.378_903_216_795_474_9, 1.191_566_777_800_653_1), (-0.909_867_780_623_470_51, 1.836_451_353_036_394_4)],
    &[(-1.757_408_400_401_653, 0.272_867_575_102_232_7), (-1.636_939_418_126_888_8, 0.822_795_625_139_699_84), (-1.373_841_217_637_376_9, 1.388_356_575_877_562_9), (-0.892_869_718_847_137_51, 1.998_325_843_641_306_5)],
];

impl<T: Scalar> BesselLowpass<T> {
    /// Designs the filter; returns `None` when the cutoff is at or above the
    /// Nyquist frequency, in which case the chain is transparent.
    pub fn design(order: usize, cutoff_hz: T, dt: T) -> Option<Self> {
        assert!((1..=8).contains(&order), "filter order outside 1..=8");
        let nyquist = T::of(0.5) / dt;
        if cutoff_hz >= nyquist {
            return None;
        }
        let c = T::of(2.0) / dt;
        let wa = c * (T::PI() * cutoff_hz * dt).tan();
        let sections = BESSEL_POLES[order - 1]
            .iter()
            .map(|&(re, im)| {
                let re = T::of(re) * wa;
                if im == 0.0 {
                    let wp = -re;
                    let d0 = c + wp;
                    Biquad {
                        b: [wp / d0, wp / d0, T::zero()],
                        a: [(wp - c) / d0, T::zero()],
                    }
                } else {
                    let im = T::of(im) * wa;
                    let w2 = re * re + im * im;
                    let a1 = -T::of(2.0) * re;
                    let d0 = c * c + a1 * c + w2;
                    let g = w2 / d0;
                    Biquad {
                        b: [g, T::of(2.0) * g, g],
                        a: [(T::of(2.0) * (w2 - c * c)) / d0, (c * c - a1 * c + w2) / d0],
                    }
                }
            })
            .collect();
        Some(Self { sections })
    }

    /// Filters with every section initialised at the steady state for the
    /// first input sample, so a constant input passes through unchanged.
    pub fn filter(&self, x: &[T]) -> Vec<T> {
        let mut y = x.to_vec();
        let Some(&x0) = x.first() else {
            return y;
        };
        for sec in &self.sections {
            let [b0, b1, b2] = sec.b;
            let [a1, a2] = sec.a;
            let mut z2 = (b2 - a2) * x0;
            let mut z1 = (b1 - a1) * x0 + z2;
            for v in y.iter_mut() {
                let xin = *v;
                let out = b0 * xin + z1;
                z1 = b1 * xin - a1 * out + z2;
                z2 = b2 * xin - a2 * out;
                *v = out;
            }
        }
        y
    }
}

/// Photodetection: responsivity, additive receiver noise over the simulation
/// Nyquist bandwidth, then the Bessel receive filter.
pub fn detect<T: Scalar, R: Rng + ?Sized>(
    power: &[T],
    rx: &ReceiverParams<T>,
    dt: T,
    rng: &mut R,
) -> Result<Vec<T>, PhysicsError> {
    detect_with(power, rx, dt, Some(rng))
}

fn detect_with<T: Scalar, R: Rng + ?Sized>(
    power: &[T],
    rx: &ReceiverParams<T>,
    dt: T,
    rng: Option<&mut R>,
) -> Result<Vec<T>, PhysicsError> {
    rx.validate()?;
    let sigma = rx.noise_density * rx.responsivity * (T::one() / (T::of(2.0) * dt)).sqrt();
    let current: Vec<T> = match rng {
        Some(rng) if sigma > T::zero() => power
            .iter()
            .map(|&p| rx.responsivity * p + sigma * gaussian::<T, R>(rng))
            .collect(),
        _ => power.iter().map(|&p| rx.responsivity * p).collect(),
    };
    Ok(match BesselLowpass::design(rx.filter_order, rx.bandwidth_hz, dt) {
        Some(f) => f.filter(&current),
        None => current,
    })
}

/// Sample interval for the configured symbol rate.
pub fn sample_interval(symbol_rate_hz: f64) -> f64 {
    1.0 / (symbol_rate_hz * SAMPLES_PER_SYMBOL as f64)
}

/// Normalised symbol-rate DAC output for the given FFE: quantised FFE output
/// divided by the FFE full scale, so the result lies within [-1, 1].
pub fn dac_output(symbols: &[f64], taps: &FfeTaps<f64>) -> Result<Vec<f64>, PhysicsError> {
    let ffe = apply_ffe(symbols, taps)?;
    dac_from_ffe(&ffe, taps.full_scale())
}

fn dac_from_ffe(ffe: &[f64], full_scale: f64) -> Result<Vec<f64>, PhysicsError> {
    let q = quantize_dac(ffe, DAC_BITS)?;
    let fs = if full_scale > 0.0 { full_scale } else { 1.0 };
    Ok(q.into_iter().map(|v| v / fs).collect())
}

/// End-to-end oracle for one regime: FFE, 6-bit DAC, rectangular hold at
/// 19 samples/symbol, bias-tee, rate equations, RIN and detection.
/// Pass `None` for `rng` to disable both noise sources.
#[allow(clippy::too_many_arguments)]
pub fn simulate_link<R: Rng + ?Sized>(
    symbols: &SymbolSequence,
    taps: &FfeTaps<f64>,
    params: &VcselParams<f64>,
    rx: &ReceiverParams<f64>,
    regime_voltage: f64,
    modulation_vpp: f64,
    rng: Option<&mut R>,
) -> Result<WaveformPair, PhysicsError> {
    let dac = dac_output(&symbols.levels, taps)?;
    simulate_from_dac(&dac, symbols.symbol_rate_hz, params, rx, regime_voltage, modulation_vpp, rng)
}

/// Same chain as [`simulate_link`], starting from the normalised DAC output.
pub fn simulate_from_dac<R: Rng + ?Sized>(
    dac: &[f64],
    symbol_rate_hz: f64,
    params: &VcselParams<f64>,
    rx: &ReceiverParams<f64>,
    regime_voltage: f64,
    modulation_vpp: f64,
    rng: Option<&mut R>,
) -> Result<WaveformPair, PhysicsError> {
    if !(modulation_vpp > 0.0 && modulation_vpp.is_finite()) {
        return Err(PhysicsError::BadModulation(modulation_vpp));
    }
    if !(regime_voltage >= 0.0 && regime_voltage.is_finite()) {
        return Err(PhysicsError::BadBias(regime_voltage));
    }
    let sps = SAMPLES_PER_SYMBOL;
    let dt = sample_interval(symbol_rate_hz);
    let drive: Vec<f64> = dac
        .iter()
        .flat_map(|&u| std::iter::repeat_n(regime_voltage + 0.5 * modulation_vpp * u, sps))
        .collect();
    // Run past the end of the drive so the delay-compensated capture is
    // complete, then shift the received stream back onto the drive.
    let delay = chain_delay_samples(params, rx, regime_voltage, modulation_vpp, dt)?;
    let tail = *drive.last().unwrap_or(&regime_voltage);
    let current: Vec<f64> = drive
        .iter()
        .copied()
        .chain(std::iter::repeat_n(tail, delay))
        .map(|v| bias_to_current(v, params))
        .collect();
    let power = integrate_rate_equations(&current, params, dt)?;
    let mut received = match rng {
        Some(rng) => {
            let noisy = apply_rin(&power, params.rin_db_hz, dt, rng);
            detect(&noisy, rx, dt, rng)?
        }
        None => detect_with::<f64, ChaCha8Rng>(&power, rx, dt, None)?,
    };
    received.drain(..delay);
    Ok(WaveformPair {
        drive,
        received,
        dt,
        sps,
        regime_voltage,
    })
}

/// Latency of the laser and receiver in samples: the peak of the noise-free
/// small-signal response to one held symbol at the given bias.
pub fn chain_delay_samples(
    params: &VcselParams<f64>,
    rx: &ReceiverParams<f64>,
    regime_voltage: f64,
    modulation_vpp: f64,
    dt: f64,
) -> Result<usize, PhysicsError> {
    let sps = SAMPLES_PER_SYMBOL;
    let lead = 2 * sps;
    let span = 60 * sps;
    let i0 = bias_to_current(regime_voltage, params);
    let di = 0.01 * modulation_vpp / params.r_series;
    let current: Vec<f64> = (0..lead + span)
        .map(|k| if k < lead || k >= lead + sps { i0 } else { i0 + di })
        .collect();
    let power = integrate_rate_equations(&current, params, dt)?;
    let y = detect_with::<f64, ChaCha8Rng>(&power, rx, dt, None)?;
    let base = y[0];
    let peak = (lead..y.len())
        .max_by(|&a, &b| (y[a] - base).abs().total_cmp(&(y[b] - base).abs()))
        .unwrap_or(lead);
    // Peak of a held pulse sits half a symbol past the impulse peak.
    Ok((peak - lead).saturating_sub(sps / 2))
}

/// Noise-free symbol-rate channel for FFE adaptation.
///
/// Maps a symbol-rate FFE output onto received samples at `phase`, shifted
/// by `delay` symbols and affinely scaled onto the PAM-4 alphabet with a
/// gain and offset fixed at construction from the cursor-only response.
/// The drive is the raw FFE output, neither quantized nor normalised to the
/// tap full scale: a 6-bit step is far coarser than the tap perturbations
/// LMS needs to resolve, and a fixed scale keeps the map linear in the taps.
#[derive(Debug, Clone)]
pub struct SymbolChannel {
    pub params: VcselParams<f64>,
    pub rx: ReceiverParams<f64>,
    pub regime_voltage: f64,
    pub modulation_vpp: f64,
    pub symbol_rate_hz: f64,
    pub phase: usize,
    pub delay: usize,
    pub gain: f64,
    pub offset: f64,
}

impl SymbolChannel {
    /// Calibrates delay, gain and offset on `symbols` with cursor-only taps.
    pub fn calibrate(
        symbols: &SymbolSequence,
        params: VcselParams<f64>,
        rx: ReceiverParams<f64>,
        regime_voltage: f64,
        modulation_vpp: f64,
        phase: usize,
    ) -> Result<Self, PhysicsError> {
        let mut ch = Self {
            params,
            rx,
            regime_voltage,
            modulation_vpp,
            symbol_rate_hz: symbols.symbol_rate_hz,
            phase,
            delay: 0,
            gain: 1.0,
            offset: 0.0,
        };
        let raw = ch.raw(&symbols.levels)?;
        let s = &symbols.levels;
        // Delay with the strongest correlation, then a least-squares affine fit.
        let mut best = (0usize, f64::NEG_INFINITY);
        for d in 0..4usize {
            let c: f64 = (0..s.len() - d).map(|k| s[k] * raw[k + d]).sum::<f64>() / (s.len() - d) as f64;
            if c.abs() > best.1 {
                best = (d, c.abs());
            }
        }
        ch.delay = best.0;
        let r = ch.align(&raw);
        let n = s.len() as f64;
        let (mr, ms) = (r.iter().sum::<f64>() / n, s.iter().sum::<f64>() / n);
        let cov: f64 = r.iter().zip(s).map(|(a, b)| (a - mr) * (b - ms)).sum();
        let var: f64 = r.iter().map(|a| (a - mr) * (a - mr)).sum();
        if !(var > 0.0) {
            return Err(PhysicsError::InvalidParams("flat channel response".into()));
        }
        ch.gain = cov / var;
        ch.offset = ms - ch.gain * mr;
        Ok(ch)
    }

    fn raw(&self, ffe_out: &[f64]) -> Result<Vec<f64>, PhysicsError> {
        let pair = simulate_from_dac::<ChaCha8Rng>(
            ffe_out,
            self.symbol_rate_hz,
            &self.params,
            &self.rx,
            self.regime_voltage,
            self.modulation_vpp,
            None,
        )?;
        Ok(pair.received.iter().skip(self.phase).step_by(pair.sps).copied().collect())
    }

    fn align(&self, raw: &[f64]) -> Vec<f64> {
        let n = raw.len();
        (0..n)
            .map(|k| raw[(k + self.delay).min(n - 1)])
            .collect()
    }

    pub fn run(&self, ffe_out: &[f64]) -> Result<Vec<f64>, PhysicsError> {
        let raw = self.raw(ffe_out)?;
        Ok(self
            .align(&raw)
            .into_iter()
            .map(|r| self.gain * r + self.offset)
            .collect())
    }
}
