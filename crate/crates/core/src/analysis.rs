//! Evaluation: NMSE and effective SNR, the windowed linear baseline, the
//! weight-block perturbation study and the oracle-vs-emulator timing table.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::adaptation::Provenance;
use crate::dataset::{Capture, DatasetError, LinkConfig, Split, SymbolDataset};
use crate::network::{BiLstm, Block};
use crate::physics::SAMPLES_PER_SYMBOL;
use crate::scalar::Scalar;

pub const DEFAULT_HALF_WINDOW: usize = 7;
pub const DEFAULT_TRIALS: usize = 20;
/// Ridge added to the normal equations when they are not positive definite.
pub const RIDGE_LAMBDA: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("truth sequence has zero variance")]
    Degenerate,
    #[error("sequence lengths differ or are too short ({0} vs {1})")]
    Length(usize, usize),
    #[error("NMSE must be positive to map to SNR, got {0}")]
    NonPositive(f64),
    #[error("unknown weight block {0:?}")]
    UnknownBlock(String),
    #[error("need at least 2 trials, got {0}")]
    TooFewTrials(usize),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Σ(y−ŷ)² / Σ(y−ȳ)² with ȳ the mean of `truth`.
pub fn nmse(pred: &[f64], truth: &[f64]) -> Result<f64, AnalysisError> {
    if pred.len() != truth.len() || truth.len() < 2 {
        return Err(AnalysisError::Length(pred.len(), truth.len()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let var: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    if !(var > 0.0) {
        return Err(AnalysisError::Degenerate);
    }
    let err: f64 = pred.iter().zip(truth).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(err / var)
}

pub fn nmse_to_snr_db(nmse: f64) -> Result<f64, AnalysisError> {
    if !(nmse > 0.0) {
        return Err(AnalysisError::NonPositive(nmse));
    }
    Ok(-10.0 * nmse.log10())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmseReport {
    pub regime_voltage: f64,
    pub nmse: f64,
    pub snr_db: f64,
    pub provenance: Provenance,
    pub n_symbols: usize,
    pub wall_time_s: f64,
}

impl NmseReport {
    /// Tab-separated record without the wall time, so persisted reports are
    /// reproducible byte for byte.
    pub fn to_tsv(&self) -> String {
        format!(
            "regime_v\tprovenance\tn_symbols\tnmse\tsnr_db\n{}\t{}\t{}\t{:e}\t{:.4}\n",
            self.regime_voltage, self.provenance, self.n_symbols, self.nmse, self.snr_db
        )
    }

    pub fn summary_line(&self) -> String {
        format!(
            "regime {:.3} V  NMSE {:.5}  SNR {:.2} dB  wall {:.3} s",
            self.regime_voltage, self.nmse, self.snr_db, self.wall_time_s
        )
    }
}

/// Emulator predictions and ground truth for one split, both in the
/// dataset's physical units. The model sees inputs renormalised with its own
/// statistics, so models bound to neighbouring regimes can be evaluated too.
pub fn predict_split<T: Scalar>(model: &BiLstm<T>, ds: &SymbolDataset, split: Split) -> (Vec<f64>, Vec<f64>) {
    let idx = ds.splits.get(split);
    let (dsn, mn) = (ds.norm_stats, model.norm_stats);
    let preds: Vec<Vec<f64>> = idx
        .par_iter()
        .map(|&w| {
            let x: Vec<T> = ds
                .word_x(w)
                .iter()
                .map(|z| T::of((z * dsn.input.std + dsn.input.mean - mn.input.mean) / mn.input.std))
                .collect();
            model
                .forward(&x)
                .into_iter()
                .map(|p| p.as_f64() * mn.target.std + mn.target.mean)
                .collect()
        })
        .collect();
    let truth = idx
        .iter()
        .flat_map(|&w| dsn.target.invert(ds.word_y(w)))
        .collect();
    (preds.concat(), truth)
}

pub fn evaluate<T: Scalar>(
    model: &BiLstm<T>,
    ds: &SymbolDataset,
    split: Split,
    provenance: Provenance,
) -> Result<NmseReport, AnalysisError> {
    let start = Instant::now();
    let (pred, truth) = predict_split(model, ds, split);
    let e = nmse(&pred, &truth)?;
    Ok(NmseReport {
        regime_voltage: ds.regime_voltage,
        nmse: e,
        snr_db: nmse_to_snr_db(e).unwrap_or(f64::INFINITY),
        provenance,
        n_symbols: truth.len(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Symmetric FIR plus intercept fitted by least squares on normalised data.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    pub half_window: usize,
    /// Tap `k` multiplies the input at offset `k - half_window`.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Set when the normal equations needed the ridge fallback.
    pub ridge_used: bool,
}

fn window_features(x: &[f64], t: usize, hw: usize, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let j = t as isize + k as isize - hw as isize;
        *o = if j >= 0 && (j as usize) < x.len() { x[j as usize] } else { 0.0 };
    }
}

impl LinearBaseline {
    pub fn predict_word(&self, x: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.coefficients.len()];
        (0..x.len())
            .map(|t| {
                window_features(x, t, self.half_window, &mut f);
                self.intercept + f.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// NMSE on one split; the windows never cross word boundaries.
    pub fn nmse(&self, ds: &SymbolDataset, split: Split) -> Result<f64, AnalysisError> {
        let idx = ds.splits.get(split);
        let pred: Vec<f64> = idx.iter().flat_map(|&w| self.predict_word(ds.word_x(w))).collect();
        let truth: Vec<f64> = idx.iter().flat_map(|&w| ds.word_y(w).iter().copied()).collect();
        nmse(&pred, &truth)
    }
}

/// Ordinary least squares from the `2·half_window+1` input window to the
/// target, over the train split with zero padding at word edges.
pub fn fit_linear_baseline(ds: &SymbolDataset, half_window: usize) -> Result<LinearBaseline, AnalysisError> {
    let idx = ds.splits.get(Split::Train);
    if idx.is_empty() {
        return Err(AnalysisError::EmptySplit("train"));
    }
    let p = 2 * half_window + 1;
    let mut xtx = DMatrix::<f64>::zeros(p + 1, p + 1);
    let mut xty = DVector::<f64>::zeros(p + 1);
    let mut f = vec![0.0; p + 1];
    for &w in idx {
        let (x, y) = (ds.word_x(w), ds.word_y(w));
        for t in 0..x.len() {
            window_features(x, t, half_window, &mut f[..p]);
            f[p] = 1.0;
            for a in 0..=p {
                xty[a] += f[a] * y[t];
                for b in 0..=a {
                    xtx[(a, b)] += f[a] * f[b];
                }
            }
        }
    }
    for a in 0..=p {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    let (sol, ridge_used) = match xtx.clone().cholesky() {
        Some(c) => (c.solve(&xty), false),
        None => {
            let reg = xtx + DMatrix::identity(p + 1, p + 1) * RIDGE_LAMBDA;
            let c = reg.cholesky().ok_or(AnalysisError::Degenerate)?;
            (c.solve(&xty), true)
        }
    };
    Ok(LinearBaseline {
        half_window,
        coefficients: sol.rows(0, p).iter().copied().collect(),
        intercept: sol[p],
        ridge_used,
    })
}

/// Adds N(0, σ²) to every element of `block`, σ = `sigma_scale`·0.5·mean|block|.
pub fn perturb_block_scaled<T: Scalar, R: rand::Rng + ?Sized>(
    model: &BiLstm<T>,
    block: Block,
    sigma_scale: f64,
    rng: &mut R,
) -> BiLstm<T> {
    let mut out = model.clone();
    let vals = out.block_mut(block);
    let mu = vals.iter().map(|v| v.as_f64().abs()).sum::<f64>() / vals.len() as f64;
    let sigma = sigma_scale * 0.5 * mu;
    if sigma > 0.0 {
        for v in vals.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += T::of(sigma * n);
        }
    }
    out
}

/// Gaussian perturbation of one named weight block at σ = 0.5·mean|block|.
pub fn perturb_block<T: Scalar, R: rand::Rng + ?Sized>(
    model: &BiLstm<T>,
    block_name: &str,
    rng: &mut R,
) -> Result<BiLstm<T>, AnalysisError> {
    let block = Block::from_name(block_name)
        .filter(|b| Block::WEIGHTS.contains(b))
        .ok_or_else(|| AnalysisError::UnknownBlock(block_name.to_string()))?;
    Ok(perturb_block_scaled(model, block, 1.0, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationRow {
    pub block: Block,
    pub mean_nmse: f64,
    pub std_nmse: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    pub baseline_nmse: f64,
    pub rows: Vec<PerturbationRow>,
}

impl PerturbationReport {
    pub fn row(&self, b: Block) -> Option<&PerturbationRow> {
        self.rows.iter().find(|r| r.block == b)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10} {:>10} {:>7}", "block", "mean_nmse", "std_nmse", "trials");
        let _ = writeln!(s, "{:<12} {:>10.5} {:>10} {:>7}", "unperturbed", self.baseline_nmse, "-", "-");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>10.5} {:>10.5} {:>7}",
                r.block.name(),
                r.mean_nmse,
                r.std_nmse,
                r.n_trials
            );
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("block\tmean_nmse\tstd_nmse\tn_trials\n");
        let _ = writeln!(s, "unperturbed\t{:e}\t0\t1", self.baseline_nmse);
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:e}\t{:e}\t{}", r.block.name(), r.mean_nmse, r.std_nmse, r.n_trials);
        }
        s
    }
}

/// `n_trials` perturb-and-evaluate cycles per weight block on the test
/// split. Trial `k` of block `b` draws from its own seeded stream.
pub fn sensitivity_study<T: Scalar>(
    model: &BiLstm<T>,
    ds: &SymbolDataset,
    n_trials: usize,
    seed: u64,
) -> Result<PerturbationReport, AnalysisError> {
    sensitivity_study_scaled(model, ds, n_trials, seed, 1.0)
}

/// [`sensitivity_study`] with σ multiplied by `sigma_scale`.
pub fn sensitivity_study_scaled<T: Scalar>(
    model: &BiLstm<T>,
    ds: &SymbolDataset,
    n_trials: usize,
    seed: u64,
    sigma_scale: f64,
) -> Result<PerturbationReport, AnalysisError> {
    if n_trials < 2 {
        return Err(AnalysisError::TooFewTrials(n_trials));
    }
    let baseline = evaluate(model, ds, Split::Test, Provenance::Scratch)?.nmse;
    let mut rows = Vec::new();
    for (bi, block) in Block::WEIGHTS.into_iter().enumerate() {
        let scores: Vec<Result<f64, AnalysisError>> = (0..n_trials)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((bi * 1_000_000 + k) as u64);
                let p = perturb_block_scaled(model, block, sigma_scale, &mut rng);
                Ok(evaluate(&p, ds, Split::Test, Provenance::Scratch)?.nmse)
            })
            .collect();
        let scores = scores.into_iter().collect::<Result<Vec<_>, _>>()?;
        let n = scores.len() as f64;
        // Running mean: identical scores average to themselves bit for bit.
        let mean = scores
            .iter()
            .enumerate()
            .fold(0.0, |m, (k, s)| m + (s - m) / (k + 1) as f64);
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
        rows.push(PerturbationRow {
            block,
            mean_nmse: mean,
            std_nmse: var.sqrt(),
            n_trials,
        });
    }
    Ok(PerturbationReport {
        baseline_nmse: baseline,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub regime_voltage: f64,
    pub oracle_samples: usize,
    pub emulator_samples: usize,
    pub oracle_s: f64,
    pub emulator_s: f64,
}

impl BenchmarkRow {
    pub fn speedup(&self) -> f64 {
        self.oracle_s / self.emulator_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub n_symbols: usize,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    pub fn totals(&self) -> BenchmarkRow {
        BenchmarkRow {
            regime_voltage: f64::NAN,
            oracle_samples: self.rows.iter().map(|r| r.oracle_samples).sum(),
            emulator_samples: self.rows.iter().map(|r| r.emulator_samples).sum(),
            oracle_s: self.rows.iter().map(|r| r.oracle_s).sum(),
            emulator_s: self.rows.iter().map(|r| r.emulator_s).sum(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>14} {:>12} {:>12} {:>14} {:>14} {:>9}",
            "regime", "oracle_samp", "emu_samp", "oracle_s", "emulator_s", "emu_sym/s", "speedup"
        );
        let line = |s: &mut String, label: String, r: &BenchmarkRow| {
            let _ = writeln!(
                s,
                "{:<8} {:>14} {:>12} {:>12.4} {:>14.5} {:>14.0} {:>8.1}x",
                label,
                r.oracle_samples,
                r.emulator_samples,
                r.oracle_s,
                r.emulator_s,
                r.emulator_samples as f64 / r.emulator_s,
                r.speedup()
            );
        };
        for r in &self.rows {
            line(&mut s, format!("{:.2} V", r.regime_voltage), r);
        }
        line(&mut s, "total".to_string(), &self.totals());
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("regime_v\toracle_samples\temulator_samples\toracle_s\temulator_s\tspeedup\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:e}\t{:e}\t{:e}",
                r.regime_voltage,
                r.oracle_samples,
                r.emulator_samples,
                r.oracle_s,
                r.emulator_s,
                r.speedup()
            );
        }
        let t = self.totals();
        let _ = writeln!(
            s,
            "total\t{}\t{}\t{:e}\t{:e}\t{:e}",
            t.oracle_samples,
            t.emulator_samples,
            t.oracle_s,
            t.emulator_s,
            t.speedup()
        );
        s
    }
}

/// Median of three timed runs after one discarded warm-up.
fn timed<F: FnMut() -> Result<usize, AnalysisError>>(mut f: F) -> Result<(f64, usize), AnalysisError> {
    let mut count = f()?;
    let mut t = Vec::with_capacity(3);
    for _ in 0..3 {
        let start = Instant::now();
        count = f()?;
        t.push(start.elapsed().as_secs_f64());
    }
    t.sort_by(f64::total_cmp);
    Ok((t[1], count))
}

/// Times the rate-equation oracle against emulator inference for
/// `n_symbols` symbols per regime on the current thread pool.
pub fn rate_equation_benchmark<T: Scalar>(
    n_symbols: usize,
    regimes: &[f64],
    link: &LinkConfig,
    model: &BiLstm<T>,
) -> Result<BenchmarkReport, AnalysisError> {
    let cfg = LinkConfig {
        train_symbols: n_symbols,
        ..link.clone()
    };
    let word = crate::dataset::WORD_LENGTH;
    let mut rows = Vec::new();
    for &v in regimes {
        let (oracle_s, oracle_samples) = timed(|| Ok(cfg.capture(v, Capture::Train)?.received.len()))?;
        let symbols = cfg.symbols(Capture::Train).map_err(DatasetError::from)?;
        let inputs: Vec<T> = symbols.levels.iter().map(|s| T::of(*s)).collect();
        let (emulator_s, emulator_samples) = timed(|| {
            let outs: Vec<usize> = inputs
                .par_chunks(word)
                .map(|w| model.forward(w).len())
                .collect();
            Ok(outs.iter().sum())
        })?;
        rows.push(BenchmarkRow {
            regime_voltage: v,
            oracle_samples,
            emulator_samples,
            oracle_s,
            emulator_s,
        });
    }
    debug_assert!(rows.iter().all(|r| r.oracle_samples == SAMPLES_PER_SYMBOL * r.emulator_samples));
    Ok(BenchmarkReport { n_symbols, rows })
}
