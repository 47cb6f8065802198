//! Regime adaptation: warm-start fine-tuning, recurrent-frozen fine-tuning,
//! voltage-linear weight interpolation and weight-trajectory diagnostics.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::dataset::SymbolDataset;
use crate::network::{self, BiLstm, Block, BlockMask, NetworkError, TrainConfig, TrainReport};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("refusing to extrapolate: {v} V lies outside ({lo} V, {hi} V)")]
    Extrapolation { v: f64, lo: f64, hi: f64 },
    #[error("models differ in shape (hidden {0} vs {1})")]
    ShapeMismatch(usize, usize),
    #[error("need at least {needed} models, got {got}")]
    TooFewModels { needed: usize, got: usize },
    #[error("regime voltages must be strictly increasing ({0} V after {1} V)")]
    Unordered(f64, f64),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("checkpoint {file} does not match its manifest checksum")]
    Checksum { file: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Scratch,
    Transfer,
    Reservoir,
    Interpolated,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Scratch => "scratch",
            Provenance::Transfer => "transfer",
            Provenance::Reservoir => "reservoir",
            Provenance::Interpolated => "interpolated",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Provenance::Scratch,
            Provenance::Transfer,
            Provenance::Reservoir,
            Provenance::Interpolated,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Warm start from `base` with a fresh optimizer. The result is bound to
/// the dataset's regime and normalisation.
pub fn fine_tune<T: Scalar>(
    base: &BiLstm<T>,
    ds: &SymbolDataset,
    config: &TrainConfig,
) -> Result<(BiLstm<T>, TrainReport), NetworkError> {
    let (mut model, report) = network::train(ds, config, Some(base.clone()))?;
    model.regime_voltage = ds.regime_voltage;
    model.norm_stats = ds.norm_stats;
    Ok((model, report))
}

/// Trainable blocks of the recurrent-frozen variant: input mappings,
/// biases and readout.
pub fn reservoir_mask() -> BlockMask {
    BlockMask::except(&[Block::WRecFwd, Block::WRecBwd])
}

/// Fine-tune with both recurrent matrices frozen.
pub fn reservoir_fine_tune<T: Scalar>(
    base: &BiLstm<T>,
    ds: &SymbolDataset,
    config: &TrainConfig,
) -> Result<(BiLstm<T>, TrainReport), NetworkError> {
    let cfg = TrainConfig {
        trainable_mask: reservoir_mask(),
        ..config.clone()
    };
    fine_tune(base, ds, &cfg)
}

/// Elementwise blend of every block and the normalisation constants with
/// weights `(v_b - v, v - v_a) / (v_b - v_a)`. Accepts the closed interval;
/// at either endpoint the result equals that model exactly.
pub fn blend<T: Scalar>(a: &BiLstm<T>, b: &BiLstm<T>, v: f64) -> Result<BiLstm<T>, AdaptError> {
    if a.hidden() != b.hidden() {
        return Err(AdaptError::ShapeMismatch(a.hidden(), b.hidden()));
    }
    let (va, vb) = (a.regime_voltage, b.regime_voltage);
    if !(va < vb && v >= va && v <= vb) {
        return Err(AdaptError::Extrapolation { v, lo: va, hi: vb });
    }
    let span = vb - va;
    let (wa, wb) = ((vb - v) / span, (v - va) / span);
    let (ta, tb) = (T::of(wa), T::of(wb));
    let mut out = a.clone();
    for blk in Block::ALL {
        for ((o, x), y) in out.block_mut(blk).iter_mut().zip(a.block(blk)).zip(b.block(blk)) {
            *o = ta * *x + tb * *y;
        }
    }
    let (sa, sb) = (a.norm_stats.to_array(), b.norm_stats.to_array());
    out.norm_stats = crate::dataset::NormStats::from_array(std::array::from_fn(|k| wa * sa[k] + wb * sb[k]));
    out.regime_voltage = v;
    Ok(out)
}

/// Model for an intermediate bias from its two bracketing neighbours.
/// Targets outside the open interval are refused.
pub fn interpolate_weights<T: Scalar>(a: &BiLstm<T>, b: &BiLstm<T>, v_target: f64) -> Result<BiLstm<T>, AdaptError> {
    let (va, vb) = (a.regime_voltage, b.regime_voltage);
    if !(v_target > va && v_target < vb) {
        return Err(AdaptError::Extrapolation {
            v: v_target,
            lo: va,
            hi: vb,
        });
    }
    blend(a, b, v_target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeEntry<T = f64> {
    pub regime_voltage: f64,
    pub model: BiLstm<T>,
    pub provenance: Provenance,
}

/// Models ordered by strictly increasing bias.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegimeModelSet<T = f64> {
    entries: Vec<RegimeEntry<T>>,
}

impl<T: Scalar> RegimeModelSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[RegimeEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts in voltage order; an existing entry at the same voltage is
    /// replaced.
    pub fn insert(&mut self, model: BiLstm<T>, provenance: Provenance) -> Result<(), AdaptError> {
        if let Some(first) = self.entries.first() {
            if first.model.hidden() != model.hidden() {
                return Err(AdaptError::ShapeMismatch(first.model.hidden(), model.hidden()));
            }
        }
        let v = model.regime_voltage;
        let entry = RegimeEntry {
            regime_voltage: v,
            model,
            provenance,
        };
        match self.entries.binary_search_by(|e| e.regime_voltage.total_cmp(&v)) {
            Ok(i) => self.entries[i] = entry,
            Err(i) => self.entries.insert(i, entry),
        }
        Ok(())
    }

    pub fn get(&self, v: f64) -> Option<&RegimeEntry<T>> {
        self.entries.iter().find(|e| e.regime_voltage == v)
    }

    pub fn nearest(&self, v: f64) -> Option<&RegimeEntry<T>> {
        self.entries
            .iter()
            .min_by(|a, b| (a.regime_voltage - v).abs().total_cmp(&(b.regime_voltage - v).abs()))
    }

    /// Interpolated model at `v` from the closest entries on either side.
    pub fn interpolate(&self, v: f64) -> Result<BiLstm<T>, AdaptError> {
        let lo = self.entries.iter().rev().find(|e| e.regime_voltage < v);
        let hi = self.entries.iter().find(|e| e.regime_voltage > v);
        match (lo, hi) {
            (Some(a), Some(b)) => interpolate_weights(&a.model, &b.model, v),
            _ => Err(AdaptError::Extrapolation {
                v,
                lo: self.entries.first().map_or(f64::NAN, |e| e.regime_voltage),
                hi: self.entries.last().map_or(f64::NAN, |e| e.regime_voltage),
            }),
        }
    }
}

impl RegimeModelSet<f64> {
    /// Writes one checkpoint per entry plus `manifest.txt` with
    /// `voltage<TAB>provenance<TAB>file<TAB>crc32` lines.
    pub fn save(&self, dir: &Path) -> Result<(), AdaptError> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for e in &self.entries {
            let file = format!("model_{:04}mV.vemw", (e.regime_voltage * 1000.0).round() as i64);
            let bytes = e.model.to_bytes();
            std::fs::write(dir.join(&file), &bytes)?;
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{:08x}\n",
                e.regime_voltage,
                e.provenance,
                file,
                crc32fast::hash(&bytes)
            ));
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, AdaptError> {
        let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut set = Self::new();
        let mut last = f64::NEG_INFINITY;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |reason: &str| AdaptError::Manifest {
                line: n + 1,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            let v: f64 = f[0].parse().map_err(|_| bad("bad voltage"))?;
            let prov = Provenance::from_name(f[1]).ok_or_else(|| bad("unknown provenance"))?;
            let crc = u32::from_str_radix(f[3], 16).map_err(|_| bad("bad checksum"))?;
            let bytes = std::fs::read(dir.join(f[2]))?;
            if crc32fast::hash(&bytes) != crc {
                return Err(AdaptError::Checksum { file: f[2].to_string() });
            }
            if v <= last {
                return Err(AdaptError::Unordered(v, last));
            }
            last = v;
            let model = BiLstm::<f64>::from_bytes(&bytes)?;
            set.insert(model, prov)?;
        }
        Ok(set)
    }
}

/// Incremental adaptation: starting from `base`, each dataset's regime is
/// fine-tuned from the nearest regime already in the set, visiting regimes
/// in order of distance from the base.
pub fn adapt_chain<T: Scalar>(
    base: BiLstm<T>,
    base_provenance: Provenance,
    datasets: &[&SymbolDataset],
    config: &TrainConfig,
) -> Result<(RegimeModelSet<T>, Vec<(f64, TrainReport)>), AdaptError> {
    let v0 = base.regime_voltage;
    let mut set = RegimeModelSet::new();
    set.insert(base, base_provenance)?;
    let mut order: Vec<&SymbolDataset> = datasets.iter().copied().filter(|d| d.regime_voltage != v0).collect();
    order.sort_by(|a, b| {
        (a.regime_voltage - v0)
            .abs()
            .total_cmp(&(b.regime_voltage - v0).abs())
            .then(a.regime_voltage.total_cmp(&b.regime_voltage))
    });
    let mut reports = Vec::new();
    for ds in order {
        let start = set.nearest(ds.regime_voltage).expect("set is non-empty").model.clone();
        let (m, r) = fine_tune(&start, ds, config)?;
        set.insert(m, Provenance::Transfer)?;
        reports.push((ds.regime_voltage, r));
    }
    Ok((set, reports))
}

/// Distribution of per-element R² of a straight-line fit across voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearitySummary {
    pub n_elements: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Fits every element of `block` linearly against regime voltage.
/// Elements that do not vary count as perfectly linear (R² = 1).
pub fn weight_trajectory_linearity<T: Scalar>(
    set: &RegimeModelSet<T>,
    block: Block,
) -> Result<LinearitySummary, AdaptError> {
    let e = set.entries();
    if e.len() < 3 {
        return Err(AdaptError::TooFewModels {
            needed: 3,
            got: e.len(),
        });
    }
    let v: Vec<f64> = e.iter().map(|x| x.regime_voltage).collect();
    let n = v.len() as f64;
    let vm = v.iter().sum::<f64>() / n;
    let svv: f64 = v.iter().map(|x| (x - vm) * (x - vm)).sum();
    let len = e[0].model.block(block).len();
    let mut r2: Vec<f64> = (0..len)
        .map(|k| {
            let w: Vec<f64> = e.iter().map(|x| x.model.block(block)[k].as_f64()).collect();
            let wm = w.iter().sum::<f64>() / n;
            let sww: f64 = w.iter().map(|x| (x - wm) * (x - wm)).sum();
            if sww <= 1e-20 * (wm * wm * n).max(f64::MIN_POSITIVE) {
                return 1.0;
            }
            let svw: f64 = v.iter().zip(&w).map(|(a, b)| (a - vm) * (b - wm)).sum();
            let slope = svw / svv;
            let res: f64 = v
                .iter()
                .zip(&w)
                .map(|(a, b)| {
                    let r = b - (wm + slope * (a - vm));
                    r * r
                })
                .sum();
            1.0 - res / sww
        })
        .collect();
    r2.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (r2.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        r2[lo] + (pos - lo as f64) * (r2[hi] - r2[lo])
    };
    Ok(LinearitySummary {
        n_elements: len,
        mean: r2.iter().sum::<f64>() / len as f64,
        min: r2[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
    })
}
