//! Symbol-rate training data: decimation, z-score normalisation, 80-symbol
//! words with contiguous train/validation/test splits, and the binary
//! dataset format.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::codec::{self, Container, FormatError, Writer};
use crate::physics::{self, PhysicsError, ReceiverParams, VcselParams, WaveformPair};
use crate::signal::{self, FfeTaps, SignalError};

pub const WORD_LENGTH: usize = 80;
pub const DEFAULT_PHASE: usize = 9;

/// Bias at which the transmit FFE is adapted before being frozen.
pub const FFE_ADAPT_VOLTAGE: f64 = 1.4;
pub const FFE_ADAPT_SYMBOLS: usize = 4000;
pub const FFE_ADAPT_STEP: f64 = 1e-3;
pub const FFE_ADAPT_ITERATIONS: usize = 16_000;

const MAGIC: &[u8; 4] = b"VEMU";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("decimation phase {phase} outside 0..{sps}")]
    Phase { phase: usize, sps: usize },
    #[error("zero-variance sequence cannot be normalised")]
    Degenerate,
    #[error("input and target lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} symbols, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("word length must be positive")]
    WordLength,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        Self::Format(FormatError::Io(e))
    }
}

/// Mean and population standard deviation of one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    pub fn of(seq: &[f64]) -> Result<Self, DatasetError> {
        if seq.is_empty() {
            return Err(DatasetError::Degenerate);
        }
        let n = seq.len() as f64;
        let mean = seq.iter().sum::<f64>() / n;
        let var = seq.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0 && std.is_finite()) {
            return Err(DatasetError::Degenerate);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, seq: &[f64]) -> Vec<f64> {
        seq.iter().map(|x| (x - self.mean) / self.std).collect()
    }

    pub fn invert(&self, seq: &[f64]) -> Vec<f64> {
        seq.iter().map(|z| z * self.std + self.mean).collect()
    }

    /// Linear interpolation between two stat sets, weight `w` on `other`.
    pub fn lerp(&self, other: &Self, w: f64) -> Self {
        Self {
            mean: self.mean + w * (other.mean - self.mean),
            std: self.std + w * (other.std - self.std),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub input: ZScore,
    pub target: ZScore,
}

impl NormStats {
    pub fn to_array(&self) -> [f64; 4] {
        [self.input.mean, self.input.std, self.target.mean, self.target.std]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            input: ZScore { mean: a[0], std: a[1] },
            target: ZScore { mean: a[2], std: a[3] },
        }
    }
}

/// Z-score normalisation. With `stats` the supplied constants are used;
/// otherwise they are computed from `seq`.
pub fn normalize(seq: &[f64], stats: Option<ZScore>) -> Result<(Vec<f64>, ZScore), DatasetError> {
    let s = match stats {
        Some(s) => s,
        None => ZScore::of(seq)?,
    };
    Ok((s.apply(seq), s))
}

pub fn denormalize(seq: &[f64], stats: ZScore) -> Vec<f64> {
    stats.invert(seq)
}

/// Picks sample `phase` of every symbol period from drive and received.
pub fn decimate_to_symbol_rate(pair: &WaveformPair, phase: usize) -> Result<(Vec<f64>, Vec<f64>), DatasetError> {
    let sps = pair.sps;
    if phase >= sps {
        return Err(DatasetError::Phase { phase, sps });
    }
    let pick = |v: &[f64]| v.chunks_exact(sps).map(|c| c[phase]).collect::<Vec<_>>();
    Ok((pick(&pair.drive), pick(&pair.received)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Position of the first sample in the source sequence.
    pub index: usize,
}

/// Non-overlapping consecutive windows; the trailing remainder is dropped.
pub fn make_words(inputs: &[f64], targets: &[f64], word_length: usize) -> Vec<Word> {
    let n = inputs.len().min(targets.len());
    if word_length == 0 {
        return Vec::new();
    }
    (0..n / word_length)
        .map(|w| {
            let r = w * word_length..(w + 1) * word_length;
            Word {
                x: inputs[r.clone()].to_vec(),
                y: targets[r.clone()].to_vec(),
                index: r.start,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Normalised symbol-rate sequences of one regime. The training capture's
/// words come first (train then validation), followed by the words of the
/// independent test capture.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolDataset {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub word_length: usize,
    pub norm_stats: NormStats,
    pub regime_voltage: f64,
    pub splits: SplitIndices,
}

impl SymbolDataset {
    /// Builds the dataset from raw symbol-rate captures. The training capture
    /// is split 4:1 into contiguous train and validation blocks; statistics
    /// come from the train block only.
    pub fn from_captures(
        train_capture: (&[f64], &[f64]),
        test_capture: (&[f64], &[f64]),
        regime_voltage: f64,
        word_length: usize,
    ) -> Result<Self, DatasetError> {
        if word_length == 0 {
            return Err(DatasetError::WordLength);
        }
        for (x, y) in [train_capture, test_capture] {
            if x.len() != y.len() {
                return Err(DatasetError::LengthMismatch(x.len(), y.len()));
            }
        }
        let pool = train_capture.0.len() / word_length;
        let n_val = pool / 5;
        let n_train = pool - n_val;
        let n_test = test_capture.0.len() / word_length;
        if n_train == 0 || n_val == 0 {
            return Err(DatasetError::TooShort {
                needed: 5 * word_length,
                got: train_capture.0.len(),
            });
        }
        let cut = n_train * word_length;
        let input = ZScore::of(&train_capture.0[..cut])?;
        let target = ZScore::of(&train_capture.1[..cut])?;
        let take = |s: &[f64], n: usize| s[..n * word_length].to_vec();
        let mut inputs = input.apply(&take(train_capture.0, pool));
        inputs.extend(input.apply(&take(test_capture.0, n_test)));
        let mut targets = target.apply(&take(train_capture.1, pool));
        targets.extend(target.apply(&take(test_capture.1, n_test)));
        Ok(Self {
            inputs,
            targets,
            word_length,
            norm_stats: NormStats { input, target },
            regime_voltage,
            splits: SplitIndices {
                train: (0..n_train).collect(),
                val: (n_train..pool).collect(),
                test: (pool..pool + n_test).collect(),
            },
        })
    }

    pub fn n_words(&self) -> usize {
        self.inputs.len() / self.word_length
    }

    pub fn word_x(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.word_length..(i + 1) * self.word_length]
    }

    pub fn word_y(&self, i: usize) -> &[f64] {
        &self.targets[i * self.word_length..(i + 1) * self.word_length]
    }

    pub fn word(&self, i: usize) -> Word {
        Word {
            x: self.word_x(i).to_vec(),
            y: self.word_y(i).to_vec(),
            index: i * self.word_length,
        }
    }

    pub fn words(&self, split: Split) -> Vec<Word> {
        self.splits.get(split).iter().map(|&i| self.word(i)).collect()
    }

    /// Concatenated normalised (inputs, targets) of one split.
    pub fn split_series(&self, split: Split) -> (Vec<f64>, Vec<f64>) {
        let idx = self.splits.get(split);
        let x = idx.iter().flat_map(|&i| self.word_x(i).iter().copied()).collect();
        let y = idx.iter().flat_map(|&i| self.word_y(i).iter().copied()).collect();
        (x, y)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        let mut meta = (self.word_length as u64).to_le_bytes().to_vec();
        meta.extend(codec::f64s_to_bytes(&[self.regime_voltage]));
        meta.extend(codec::f64s_to_bytes(&self.norm_stats.to_array()));
        w.section("meta", &meta);
        w.section("inputs", &codec::f64s_to_bytes(&self.inputs));
        w.section("targets", &codec::f64s_to_bytes(&self.targets));
        for (tag, idx) in [
            ("split.train", &self.splits.train),
            ("split.val", &self.splits.val),
            ("split.test", &self.splits.test),
        ] {
            let v: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            w.section(tag, &codec::u64s_to_bytes(&v));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let c = Container::parse(bytes, MAGIC, VERSION)?;
        let meta = c.get("meta")?;
        if meta.len() != 8 + 5 * 8 {
            return Err(codec::malformed("meta", "unexpected length").into());
        }
        let word_length = u64::from_le_bytes(meta[..8].try_into().unwrap()) as usize;
        let m = codec::bytes_to_f64s("meta", &meta[8..])?;
        let inputs = codec::bytes_to_f64s("inputs", c.get("inputs")?)?;
        let targets = codec::bytes_to_f64s("targets", c.get("targets")?)?;
        let idx = |tag: &str| -> Result<Vec<usize>, DatasetError> {
            Ok(codec::bytes_to_u64s(tag, c.get(tag)?)?
                .into_iter()
                .map(|i| i as usize)
                .collect())
        };
        let ds = Self {
            inputs,
            targets,
            word_length,
            norm_stats: NormStats::from_array([m[1], m[2], m[3], m[4]]),
            regime_voltage: m[0],
            splits: SplitIndices {
                train: idx("split.train")?,
                val: idx("split.val")?,
                test: idx("split.test")?,
            },
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<(), DatasetError> {
        let bad = |r: &str| DatasetError::Format(codec::malformed("dataset", r));
        if self.word_length == 0 {
            return Err(bad("zero word length"));
        }
        if self.inputs.len() != self.targets.len() || self.inputs.len() % self.word_length != 0 {
            return Err(bad("sequence lengths"));
        }
        let n = self.n_words();
        let all = [&self.splits.train, &self.splits.val, &self.splits.test];
        if all.iter().any(|s| s.iter().any(|&i| i >= n)) {
            return Err(bad("split index out of range"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        Ok(codec::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    /// One `input<TAB>target` line per symbol, normalised values.
    pub fn export_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            writeln!(out, "{x:e}\t{y:e}")?;
        }
        Ok(())
    }
}

pub fn save_dataset(ds: &SymbolDataset, path: &Path) -> Result<(), DatasetError> {
    ds.save(path)
}

pub fn load_dataset(path: &Path) -> Result<SymbolDataset, DatasetError> {
    SymbolDataset::load(path)
}

/// Everything needed to synthesise one regime's dataset from the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    pub params: VcselParams<f64>,
    pub rx: ReceiverParams<f64>,
    pub taps: FfeTaps<f64>,
    pub symbol_rate_hz: f64,
    pub modulation_vpp: f64,
    pub train_symbols: usize,
    pub test_symbols: usize,
    pub phase: usize,
    pub word_length: usize,
    pub seed: u64,
    pub noise: bool,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            params: VcselParams::default(),
            rx: ReceiverParams::default(),
            taps: FfeTaps::cursor_only(),
            symbol_rate_hz: signal::SYMBOL_RATE_HZ,
            modulation_vpp: physics::DEFAULT_MODULATION_VPP,
            train_symbols: 100_000,
            test_symbols: 20_000,
            phase: DEFAULT_PHASE,
            word_length: WORD_LENGTH,
            seed: 1,
            noise: true,
        }
    }
}

/// Capture kinds; each gets its own PRBS seed and noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capture {
    Train,
    Test,
}

impl LinkConfig {
    /// PRBS seed of a capture: the training and test sequences are
    /// independent draws, shared across regimes.
    pub fn prbs_seed(&self, capture: Capture) -> u32 {
        let base = (self.seed ^ (self.seed >> 32)) as u32;
        match capture {
            Capture::Train => base,
            Capture::Test => base.wrapping_add(0x9e37_79b9),
        }
    }

    /// Noise stream id keyed by regime voltage (in mV) and capture, so a
    /// regime's noise does not depend on which other regimes are run.
    pub fn noise_stream_id(regime_voltage: f64, capture: Capture) -> u64 {
        let mv = (regime_voltage * 1000.0).round() as i64 as u64;
        2 * mv + matches!(capture, Capture::Test) as u64
    }

    pub fn symbols(&self, capture: Capture) -> Result<signal::SymbolSequence, SignalError> {
        let n = match capture {
            Capture::Train => self.train_symbols,
            Capture::Test => self.test_symbols,
        };
        let bits = signal::generate_prbs(self.prbs_seed(capture), 2 * n)?;
        let mut s = signal::map_pam4(&bits, true)?;
        s.symbol_rate_hz = self.symbol_rate_hz;
        Ok(s)
    }

    pub fn capture(&self, regime_voltage: f64, capture: Capture) -> Result<WaveformPair, DatasetError> {
        let symbols = self.symbols(capture)?;
        let mut rng = physics::noise_stream(self.seed, Self::noise_stream_id(regime_voltage, capture));
        let pair = physics::simulate_link(
            &symbols,
            &self.taps,
            &self.params,
            &self.rx,
            regime_voltage,
            self.modulation_vpp,
            self.noise.then_some(&mut rng),
        )?;
        Ok(pair)
    }

    /// Back-to-back LMS adaptation of the transmit FFE at one bias, noise
    /// disabled, over the first `n_symbols` training symbols. The returned
    /// taps are meant to be frozen into `self.taps` for every regime.
    pub fn adapt_ffe(
        &self,
        regime_voltage: f64,
        n_symbols: usize,
        step: f64,
        iterations: usize,
    ) -> Result<signal::LmsResult, DatasetError> {
        let cfg = LinkConfig {
            train_symbols: n_symbols,
            ..self.clone()
        };
        let symbols = cfg.symbols(Capture::Train)?;
        let ch = physics::SymbolChannel::calibrate(
            &symbols,
            self.params,
            self.rx,
            regime_voltage,
            self.modulation_vpp,
            self.phase,
        )?;
        let r = signal::lms_optimize_ffe(
            &symbols,
            |d| ch.run(d).map_err(|e| SignalError::Channel(e.to_string())),
            FfeTaps::cursor_only(),
            step,
            iterations,
        )?;
        Ok(r)
    }

    /// Default adaptation (see the `FFE_ADAPT_*` constants) with the result
    /// frozen into the returned config.
    pub fn with_adapted_ffe(mut self) -> Result<Self, DatasetError> {
        let r = self.adapt_ffe(FFE_ADAPT_VOLTAGE, FFE_ADAPT_SYMBOLS, FFE_ADAPT_STEP, FFE_ADAPT_ITERATIONS)?;
        self.taps = r.taps;
        Ok(self)
    }

    /// Simulates both captures and assembles the normalised dataset.
    pub fn build_dataset(&self, regime_voltage: f64) -> Result<SymbolDataset, DatasetError> {
        let train = decimate_to_symbol_rate(&self.capture(regime_voltage, Capture::Train)?, self.phase)?;
        let test = decimate_to_symbol_rate(&self.capture(regime_voltage, Capture::Test)?, self.phase)?;
        SymbolDataset::from_captures(
            (&train.0, &train.1),
            (&test.0, &test.1),
            regime_voltage,
            self.word_length,
        )
    }
}
