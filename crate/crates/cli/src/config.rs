//! Run configuration: a TOML file with one table per stage. Every physical
//! quantity carries its unit in the key name and unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use vemu::dataset::{self, LinkConfig};
use vemu::network::{BlockMask, TrainConfig, HIDDEN_SIZE};
use vemu::physics::{self, ReceiverParams, VcselParams};
use vemu::signal::{self, FfeTaps};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub signal: SignalSection,
    pub physics: PhysicsSection,
    pub receiver: ReceiverSection,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSection {
    pub symbol_rate_hz: f64,
    /// Fixed FFE taps (cursor at index 1). When absent the taps are adapted
    /// by LMS at `ffe_adapt_bias_v` and frozen.
    pub ffe_taps: Option<[f64; 4]>,
    pub ffe_adapt_bias_v: f64,
    pub ffe_adapt_symbols: usize,
    pub ffe_adapt_step: f64,
    pub ffe_adapt_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsSection {
    pub tau_n_s: f64,
    pub tau_p_s: f64,
    pub g0_per_s: f64,
    pub n0: f64,
    pub eps: f64,
    pub gamma: f64,
    pub beta: f64,
    pub eta_i: f64,
    pub power_per_photon_w: f64,
    pub v_on_v: f64,
    pub r_series_ohm: f64,
    /// `-inf` switches RIN off.
    pub rin_db_hz: f64,
    pub modulation_vpp_v: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverSection {
    pub responsivity_a_per_w: f64,
    pub bandwidth_hz: f64,
    pub noise_density_w_per_sqrt_hz: f64,
    pub filter_order: usize,
    pub adc_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub regimes_v: Vec<f64>,
    pub train_symbols: usize,
    pub test_symbols: usize,
    pub word_length: usize,
    pub decimation_phase: usize,
    pub noise: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_words: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub hidden_size: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub linear_half_window: usize,
    pub perturbation_trials: usize,
    pub benchmark_symbols: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            signal: SignalSection::default(),
            physics: PhysicsSection::default(),
            receiver: ReceiverSection::default(),
            dataset: DatasetSection::default(),
            train: TrainSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl Default for SignalSection {
    fn default() -> Self {
        Self {
            symbol_rate_hz: signal::SYMBOL_RATE_HZ,
            ffe_taps: None,
            ffe_adapt_bias_v: dataset::FFE_ADAPT_VOLTAGE,
            ffe_adapt_symbols: dataset::FFE_ADAPT_SYMBOLS,
            ffe_adapt_step: dataset::FFE_ADAPT_STEP,
            ffe_adapt_iterations: dataset::FFE_ADAPT_ITERATIONS,
        }
    }
}

impl Default for PhysicsSection {
    fn default() -> Self {
        let p = VcselParams::default();
        Self {
            tau_n_s: p.tau_n,
            tau_p_s: p.tau_p,
            g0_per_s: p.g0,
            n0: p.n0,
            eps: p.eps,
            gamma: p.gamma,
            beta: p.beta,
            eta_i: p.eta_i,
            power_per_photon_w: p.power_per_photon,
            v_on_v: p.v_on,
            r_series_ohm: p.r_series,
            rin_db_hz: p.rin_db_hz,
            modulation_vpp_v: physics::DEFAULT_MODULATION_VPP,
        }
    }
}

impl Default for ReceiverSection {
    fn default() -> Self {
        let r = ReceiverParams::default();
        Self {
            responsivity_a_per_w: r.responsivity,
            bandwidth_hz: r.bandwidth_hz,
            noise_density_w_per_sqrt_hz: r.noise_density,
            filter_order: r.filter_order,
            adc_rate_hz: r.adc_rate_hz,
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        let l = LinkConfig::default();
        Self {
            regimes_v: vec![1.0, 1.2, 1.4, 1.6, 1.8, 2.0],
            train_symbols: l.train_symbols,
            test_symbols: l.test_symbols,
            word_length: l.word_length,
            decimation_phase: l.phase,
            noise: true,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_words: t.batch_words,
            max_epochs: t.max_epochs,
            learning_rate: t.learning_rate,
            patience: t.patience,
            hidden_size: HIDDEN_SIZE,
        }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            linear_half_window: vemu::analysis::DEFAULT_HALF_WINDOW,
            perturbation_trials: vemu::analysis::DEFAULT_TRIALS,
            benchmark_symbols: 100_000,
        }
    }
}

/// Parsed configuration together with the bytes it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: String,
}

impl LoadedConfig {
    pub fn defaults() -> Self {
        Self {
            config: RunConfig::default(),
            source: String::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config = parse(&source).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self { config, source })
    }

    /// SHA-256 of the config text, hex encoded. Defaults hash the empty file.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.source.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn parse(text: &str) -> Result<RunConfig, String> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.vcsel().validate().map_err(|e| e.to_string())?;
        self.receiver().validate().map_err(|e| e.to_string())?;
        if !(self.physics.modulation_vpp_v > 0.0) {
            return Err("physics.modulation_vpp_v must be > 0".into());
        }
        if !(self.signal.symbol_rate_hz > 0.0) {
            return Err("signal.symbol_rate_hz must be > 0".into());
        }
        if self.dataset.word_length == 0 {
            return Err("dataset.word_length must be > 0".into());
        }
        if self.dataset.decimation_phase >= physics::SAMPLES_PER_SYMBOL {
            return Err(format!(
                "dataset.decimation_phase must be below {}",
                physics::SAMPLES_PER_SYMBOL
            ));
        }
        if self.dataset.regimes_v.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("dataset.regimes_v must hold non-negative voltages".into());
        }
        if self.analysis.perturbation_trials < 2 {
            return Err("analysis.perturbation_trials must be at least 2".into());
        }
        self.train_config().validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn vcsel(&self) -> VcselParams<f64> {
        let p = &self.physics;
        VcselParams {
            tau_n: p.tau_n_s,
            tau_p: p.tau_p_s,
            g0: p.g0_per_s,
            n0: p.n0,
            eps: p.eps,
            gamma: p.gamma,
            beta: p.beta,
            eta_i: p.eta_i,
            power_per_photon: p.power_per_photon_w,
            v_on: p.v_on_v,
            r_series: p.r_series_ohm,
            rin_db_hz: p.rin_db_hz,
        }
    }

    pub fn receiver(&self) -> ReceiverParams<f64> {
        let r = &self.receiver;
        ReceiverParams {
            responsivity: r.responsivity_a_per_w,
            bandwidth_hz: r.bandwidth_hz,
            noise_density: r.noise_density_w_per_sqrt_hz,
            filter_order: r.filter_order,
            adc_rate_hz: r.adc_rate_hz,
        }
    }

    /// Link description with the FFE taps still at the configured value
    /// (cursor-only when adaptation is requested).
    pub fn link(&self) -> Result<LinkConfig, CliError> {
        let taps = match self.signal.ffe_taps {
            Some(t) => FfeTaps::new(t, 1).map_err(|e| CliError::Config(format!("signal.ffe_taps: {e}")))?,
            None => FfeTaps::cursor_only(),
        };
        Ok(LinkConfig {
            params: self.vcsel(),
            rx: self.receiver(),
            taps,
            symbol_rate_hz: self.signal.symbol_rate_hz,
            modulation_vpp: self.physics.modulation_vpp_v,
            train_symbols: self.dataset.train_symbols,
            test_symbols: self.dataset.test_symbols,
            phase: self.dataset.decimation_phase,
            word_length: self.dataset.word_length,
            seed: self.seed,
            noise: self.dataset.noise,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_words: t.batch_words,
            max_epochs: t.max_epochs,
            learning_rate: t.learning_rate,
            patience: t.patience,
            seed: self.seed,
            trainable_mask: BlockMask::all(),
            hidden_size: t.hidden_size,
        }
    }
}
