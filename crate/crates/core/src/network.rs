//! Bidirectional LSTM emulator: cell and sequence forward pass, exact BPTT
//! gradients, masked Adam, early-stopped training and checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{self, Container, FormatError, Writer};
use crate::dataset::{NormStats, Split, SymbolDataset, ZScore};
use crate::scalar::{sigmoid, Scalar};

pub const HIDDEN_SIZE: usize = 28;
pub const GATES: usize = 4;
/// Layout of the gate axis of every 4H-wide block.
pub const GATE_ORDER: &str = "ifgo";

const MAGIC: &[u8; 4] = b"VEMW";
const VERSION: u16 = 1;
/// Words per gradient work unit; fixed so the reduction order never depends
/// on the thread count.
const CHUNK_WORDS: usize = 8;
/// Largest hidden width accepted from a checkpoint header.
const MAX_HIDDEN: usize = 4096;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("dataset has no {0} words")]
    EmptySplit(&'static str),
    #[error("block {block}: expected shape {expected:?}, found {found:?}")]
    Shape {
        block: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("sequence lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("unsupported gate order {0:?}")]
    GateOrder(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// The eight parameter blocks, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    WInFwd,
    WRecFwd,
    BFwd,
    WInBwd,
    WRecBwd,
    BBwd,
    WFc,
    BFc,
}

impl Block {
    pub const ALL: [Block; 8] = [
        Block::WInFwd,
        Block::WRecFwd,
        Block::BFwd,
        Block::WInBwd,
        Block::WRecBwd,
        Block::BBwd,
        Block::WFc,
        Block::BFc,
    ];

    /// The weight matrices probed by the perturbation study.
    pub const WEIGHTS: [Block; 5] = [
        Block::WInFwd,
        Block::WRecFwd,
        Block::WInBwd,
        Block::WRecBwd,
        Block::WFc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::WInFwd => "w_in_fwd",
            Block::WRecFwd => "w_rec_fwd",
            Block::BFwd => "b_fwd",
            Block::WInBwd => "w_in_bwd",
            Block::WRecBwd => "w_rec_bwd",
            Block::BBwd => "b_bwd",
            Block::WFc => "w_fc",
            Block::BFc => "b_fc",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn shape(self, hidden: usize) -> Vec<usize> {
        let g = GATES * hidden;
        match self {
            Block::WInFwd | Block::WInBwd => vec![1, g],
            Block::WRecFwd | Block::WRecBwd => vec![hidden, g],
            Block::BFwd | Block::BBwd => vec![g],
            Block::WFc => vec![2 * hidden, 1],
            Block::BFc => vec![1],
        }
    }

    pub fn len(self, hidden: usize) -> usize {
        self.shape(hidden).iter().product()
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-block trainable flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMask(pub [bool; 8]);

impl BlockMask {
    pub fn all() -> Self {
        Self([true; 8])
    }

    pub fn none() -> Self {
        Self([false; 8])
    }

    pub fn only(blocks: &[Block]) -> Self {
        let mut m = Self::none();
        for b in blocks {
            m.0[b.index()] = true;
        }
        m
    }

    pub fn except(blocks: &[Block]) -> Self {
        let mut m = Self::all();
        for b in blocks {
            m.0[b.index()] = false;
        }
        m
    }

    pub fn get(&self, b: Block) -> bool {
        self.0[b.index()]
    }

    pub fn trainable_count(&self, hidden: usize) -> usize {
        Block::ALL.iter().filter(|b| self.get(**b)).map(|b| b.len(hidden)).sum()
    }
}

impl Default for BlockMask {
    fn default() -> Self {
        Self::all()
    }
}

/// One value per parameter, grouped by block. Used for weights, gradients
/// and optimizer moments alike.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSet<T> {
    hidden: usize,
    data: [Vec<T>; 8],
}

impl<T: Scalar> BlockSet<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden,
            data: Block::ALL.map(|b| vec![T::zero(); b.len(hidden)]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn get(&self, b: Block) -> &[T] {
        &self.data[b.index()]
    }

    pub fn get_mut(&mut self, b: Block) -> &mut [T] {
        &mut self.data[b.index()]
    }

    pub fn n_params(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    fn scale(&mut self, s: T) {
        for v in self.data.iter_mut() {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Bi-LSTM with one hidden layer per direction and a single-neuron readout
/// over the concatenated hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm<T = f64> {
    pub params: BlockSet<T>,
    pub norm_stats: NormStats,
    pub regime_voltage: f64,
}

/// Identity normalisation, used until a model is bound to a dataset.
pub const UNIT_STATS: NormStats = NormStats {
    input: ZScore { mean: 0.0, std: 1.0 },
    target: ZScore { mean: 0.0, std: 1.0 },
};

/// Uniform initialisation bound of one block: `1/sqrt(fan_in)`, where the
/// input mapping sees one input, the recurrent blocks and biases follow the
/// hidden width, and the readout sees both directions.
pub fn init_bound(b: Block, hidden: usize) -> f64 {
    let fan_in = match b {
        Block::WInFwd | Block::WInBwd => 1,
        Block::WRecFwd | Block::WRecBwd | Block::BFwd | Block::BBwd => hidden,
        Block::WFc | Block::BFc => 2 * hidden,
    };
    1.0 / (fan_in as f64).sqrt()
}

impl<T: Scalar> BiLstm<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            params: BlockSet::zeros(hidden),
            norm_stats: UNIT_STATS,
            regime_voltage: 0.0,
        }
    }

    pub fn init_uniform<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(hidden);
        for b in Block::ALL {
            let k = init_bound(b, hidden);
            for w in m.params.get_mut(b) {
                *w = T::of(rng.random_range(-k..=k));
            }
        }
        m
    }

    pub fn hidden(&self) -> usize {
        self.params.hidden
    }

    pub fn block(&self, b: Block) -> &[T] {
        self.params.get(b)
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [T] {
        self.params.get_mut(b)
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    pub fn is_finite(&self) -> bool {
        self.params.is_finite()
    }

    /// Same model with every value converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> BiLstm<U> {
        let mut out = BiLstm::<U>::zeros(self.hidden());
        for b in Block::ALL {
            for (d, s) in out.params.get_mut(b).iter_mut().zip(self.block(b)) {
                *d = U::of(s.as_f64());
            }
        }
        out.norm_stats = self.norm_stats;
        out.regime_voltage = self.regime_voltage;
        out
    }

    fn direction(&self, backward: bool) -> Direction<'_, T> {
        let (wi, wr, b) = if backward {
            (Block::WInBwd, Block::WRecBwd, Block::BBwd)
        } else {
            (Block::WInFwd, Block::WRecFwd, Block::BFwd)
        };
        Direction {
            hidden: self.hidden(),
            w_in: self.block(wi),
            w_rec: self.block(wr),
            b: self.block(b),
        }
    }

    /// Many-to-many prediction for one word of normalised inputs.
    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let fwd = self.direction(false).run(x, false);
        let bwd = self.direction(true).run(x, true);
        self.readout(&fwd, &bwd, x.len())
    }

    fn readout(&self, fwd: &Trace<T>, bwd: &Trace<T>, len: usize) -> Vec<T> {
        let h = self.hidden();
        let w = self.block(Block::WFc);
        let b = self.block(Block::BFc)[0];
        (0..len)
            .map(|t| {
                let hf = fwd.h_at(t, h);
                let hb = bwd.h_at(len - 1 - t, h);
                b + dot(hf, &w[..h]) + dot(hb, &w[h..])
            })
            .collect()
    }

    /// Word MSE and its exact gradient with respect to every block.
    pub fn backward(&self, x: &[T], y: &[T]) -> Result<(T, BlockSet<T>), NetworkError> {
        let mut g = BlockSet::zeros(self.hidden());
        let loss = self.accumulate_gradient(x, y, &mut g)?;
        Ok((loss, g))
    }

    fn accumulate_gradient(&self, x: &[T], y: &[T], g: &mut BlockSet<T>) -> Result<T, NetworkError> {
        if x.len() != y.len() {
            return Err(NetworkError::LengthMismatch(x.len(), y.len()));
        }
        let len = x.len();
        let h = self.hidden();
        let fwd = self.direction(false).run(x, false);
        let bwd = self.direction(true).run(x, true);
        let pred = self.readout(&fwd, &bwd, len);
        let scale = T::of(2.0) / T::of_usize(len);
        let dy: Vec<T> = pred.iter().zip(y).map(|(p, t)| scale * (*p - *t)).collect();
        let loss = mse_loss(&pred, y)?;

        let w_fc = self.block(Block::WFc).to_vec();
        {
            let gw = g.get_mut(Block::WFc);
            for t in 0..len {
                axpy(dy[t], fwd.h_at(t, h), &mut gw[..h]);
                axpy(dy[t], bwd.h_at(len - 1 - t, h), &mut gw[h..]);
            }
        }
        g.get_mut(Block::BFc)[0] += dy.iter().copied().sum::<T>();

        // Upstream gradient on each direction's hidden state, in that
        // direction's processing order.
        let mut dh_f = vec![T::zero(); len * h];
        let mut dh_b = vec![T::zero(); len * h];
        for t in 0..len {
            let s = len - 1 - t;
            for j in 0..h {
                dh_f[t * h + j] = w_fc[j] * dy[t];
                dh_b[s * h + j] = w_fc[h + j] * dy[t];
            }
        }
        self.direction(false)
            .backprop(x, false, &fwd, &dh_f, g, [Block::WInFwd, Block::WRecFwd, Block::BFwd]);
        self.direction(true)
            .backprop(x, true, &bwd, &dh_b, g, [Block::WInBwd, Block::WRecBwd, Block::BBwd]);
        Ok(loss)
    }
}

struct Direction<'a, T> {
    hidden: usize,
    w_in: &'a [T],
    w_rec: &'a [T],
    b: &'a [T],
}

/// Per-step activations of one direction, in processing order.
struct Trace<T> {
    /// Post-activation gates (i, f, g, o), 4H per step.
    gates: Vec<T>,
    c: Vec<T>,
    tanh_c: Vec<T>,
    h: Vec<T>,
}

impl<T: Scalar> Trace<T> {
    fn h_at(&self, step: usize, hidden: usize) -> &[T] {
        &self.h[step * hidden..(step + 1) * hidden]
    }
}

impl<T: Scalar> Direction<'_, T> {
    fn run(&self, x: &[T], reverse: bool) -> Trace<T> {
        let (h, g4, len) = (self.hidden, GATES * self.hidden, x.len());
        let mut tr = Trace {
            gates: vec![T::zero(); len * g4],
            c: vec![T::zero(); len * h],
            tanh_c: vec![T::zero(); len * h],
            h: vec![T::zero(); len * h],
        };
        let zeros = vec![T::zero(); h];
        let mut a = vec![T::zero(); g4];
        for s in 0..len {
            let xt = x[if reverse { len - 1 - s } else { s }];
            let (h_prev, c_prev) = if s == 0 {
                (&zeros[..], &zeros[..])
            } else {
                (&tr.h[(s - 1) * h..s * h], &tr.c[(s - 1) * h..s * h])
            };
            preactivation(xt, h_prev, self.w_in, self.w_rec, self.b, &mut a);
            let (mut c_new, mut h_new) = (vec![T::zero(); h], vec![T::zero(); h]);
            let gates = &mut tr.gates[s * g4..(s + 1) * g4];
            let tc = &mut tr.tanh_c[s * h..(s + 1) * h];
            cell_update(&a, c_prev, gates, &mut c_new, tc, &mut h_new);
            tr.c[s * h..(s + 1) * h].copy_from_slice(&c_new);
            tr.h[s * h..(s + 1) * h].copy_from_slice(&h_new);
        }
        tr
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop(
        &self,
        x: &[T],
        reverse: bool,
        tr: &Trace<T>,
        dh_up: &[T],
        g: &mut BlockSet<T>,
        blocks: [Block; 3],
    ) {
        let (h, g4, len) = (self.hidden, GATES * self.hidden, x.len());
        let mut dh_next = vec![T::zero(); h];
        let mut dc_next = vec![T::zero(); h];
        let mut da = vec![T::zero(); g4];
        let one = T::one();
        for s in (0..len).rev() {
            let xt = x[if reverse { len - 1 - s } else { s }];
            let gates = &tr.gates[s * g4..(s + 1) * g4];
            let tc = &tr.tanh_c[s * h..(s + 1) * h];
            for j in 0..h {
                let (i, f, gg, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let c_prev = if s == 0 { T::zero() } else { tr.c[(s - 1) * h + j] };
                let dh = dh_up[s * h + j] + dh_next[j];
                let d_o = dh * tc[j];
                let dc = dc_next[j] + dh * o * (one - tc[j] * tc[j]);
                da[j] = dc * gg * i * (one - i);
                da[h + j] = dc * c_prev * f * (one - f);
                da[2 * h + j] = dc * i * (one - gg * gg);
                da[3 * h + j] = d_o * o * (one - o);
                dc_next[j] = dc * f;
            }
            axpy(xt, &da, g.get_mut(blocks[0]));
            axpy(one, &da, g.get_mut(blocks[2]));
            if s > 0 {
                let h_prev = &tr.h[(s - 1) * h..s * h];
                let gw = g.get_mut(blocks[1]);
                for k in 0..h {
                    axpy(h_prev[k], &da, &mut gw[k * g4..(k + 1) * g4]);
                    dh_next[k] = dot(&self.w_rec[k * g4..(k + 1) * g4], &da);
                }
            }
        }
    }
}

fn preactivation<T: Scalar>(x: T, h_prev: &[T], w_in: &[T], w_rec: &[T], b: &[T], a: &mut [T]) {
    let g4 = a.len();
    for n in 0..g4 {
        a[n] = b[n] + x * w_in[n];
    }
    for (k, hk) in h_prev.iter().enumerate() {
        if *hk != T::zero() {
            axpy(*hk, &w_rec[k * g4..(k + 1) * g4], a);
        }
    }
}

fn cell_update<T: Scalar>(a: &[T], c_prev: &[T], gates: &mut [T], c: &mut [T], tanh_c: &mut [T], h_out: &mut [T]) {
    let h = c_prev.len();
    for j in 0..h {
        let i = sigmoid(a[j]);
        let f = sigmoid(a[h + j]);
        let g = a[2 * h + j].tanh();
        let o = sigmoid(a[3 * h + j]);
        gates[j] = i;
        gates[h + j] = f;
        gates[2 * h + j] = g;
        gates[3 * h + j] = o;
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h_out[j] = o * tanh_c[j];
    }
}

/// One LSTM time step. `w_in` is 1x4H, `w_rec` Hx4H row-major, `b` 4H, all
/// with gate order (i, f, g, o). Returns `(h_t, c_t)`.
pub fn lstm_cell_step<T: Scalar>(x: T, h_prev: &[T], c_prev: &[T], w_in: &[T], w_rec: &[T], b: &[T]) -> (Vec<T>, Vec<T>) {
    let h = h_prev.len();
    let mut a = vec![T::zero(); GATES * h];
    preactivation(x, h_prev, w_in, w_rec, b, &mut a);
    let mut gates = vec![T::zero(); GATES * h];
    let (mut c, mut tc, mut ht) = (vec![T::zero(); h], vec![T::zero(); h], vec![T::zero(); h]);
    cell_update(&a, c_prev, &mut gates, &mut c, &mut tc, &mut ht);
    (ht, c)
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

pub fn mse_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<T, NetworkError> {
    if pred.len() != target.len() {
        return Err(NetworkError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Ok(T::zero());
    }
    let s: T = pred.iter().zip(target).map(|(p, t)| (*p - *t) * (*p - *t)).sum();
    Ok(s / T::of_usize(pred.len()))
}

/// Adam with bias correction; masked blocks keep both weights and moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub t: u64,
    m: BlockSet<T>,
    v: BlockSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(hidden: usize) -> Self {
        Self {
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            t: 0,
            m: BlockSet::zeros(hidden),
            v: BlockSet::zeros(hidden),
        }
    }

    pub fn step(&mut self, params: &mut BlockSet<T>, grads: &BlockSet<T>, lr: T, mask: BlockMask) {
        self.t += 1;
        let one = T::one();
        let t = self.t as i32;
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        for b in Block::ALL {
            if !mask.get(b) {
                continue;
            }
            let (m, v) = (self.m.get_mut(b), self.v.get_mut(b));
            let g = grads.get(b);
            let p = params.get_mut(b);
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (one - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (one - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self, b: Block) -> (&[T], &[T]) {
        (self.m.get(b), self.v.get(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_words: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
    pub trainable_mask: BlockMask,
    /// Hidden width used when no initial model is given.
    pub hidden_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_words: 1000,
            max_epochs: 1000,
            learning_rate: 1e-4,
            patience: 50,
            seed: 0,
            trainable_mask: BlockMask::all(),
            hidden_size: HIDDEN_SIZE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.batch_words == 0 {
            return Err(NetworkError::Config("batch_words must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(NetworkError::Config("patience must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NetworkError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.hidden_size == 0 {
            return Err(NetworkError::Config("hidden_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub wall_time_s: f64,
    /// Entry 0 is the initial model, then one entry per epoch.
    pub loss_curve: Vec<EpochLoss>,
}

impl TrainReport {
    /// First epoch whose validation MSE is at or below `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.loss_curve.iter().find(|e| e.val_mse <= threshold).map(|e| e.epoch)
    }
}

struct WordSet<T> {
    x: Vec<Vec<T>>,
    y: Vec<Vec<T>>,
}

impl<T: Scalar> WordSet<T> {
    fn new(ds: &SymbolDataset, split: Split) -> Self {
        let idx = ds.splits.get(split);
        let conv = |s: &[f64]| s.iter().map(|v| T::of(*v)).collect::<Vec<T>>();
        Self {
            x: idx.iter().map(|&i| conv(ds.word_x(i))).collect(),
            y: idx.iter().map(|&i| conv(ds.word_y(i))).collect(),
        }
    }

    fn len(&self) -> usize {
        self.x.len()
    }
}

/// Mean per-word MSE and summed gradient over `words`, reduced chunk by chunk
/// in index order.
fn batch_gradient<T: Scalar>(
    model: &BiLstm<T>,
    set: &WordSet<T>,
    words: &[usize],
) -> Result<(T, BlockSet<T>), NetworkError> {
    let parts: Vec<Result<(T, BlockSet<T>), NetworkError>> = words
        .par_chunks(CHUNK_WORDS)
        .map(|chunk| {
            let mut g = BlockSet::zeros(model.hidden());
            let mut loss = T::zero();
            for &w in chunk {
                loss += model.accumulate_gradient(&set.x[w], &set.y[w], &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = BlockSet::zeros(model.hidden());
    let mut loss = T::zero();
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = T::one() / T::of_usize(words.len());
    total.scale(inv);
    Ok((loss * inv, total))
}

fn mean_mse<T: Scalar>(model: &BiLstm<T>, set: &WordSet<T>) -> f64 {
    let parts: Vec<f64> = (0..set.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK_WORDS)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&w| mse_loss(&model.forward(&set.x[w]), &set.y[w]).map(|l| l.as_f64()).unwrap_or(f64::NAN))
                .sum::<f64>()
        })
        .collect();
    parts.iter().sum::<f64>() / set.len() as f64
}

/// Mean per-word MSE of `model` on one split of normalised data.
pub fn split_mse<T: Scalar>(model: &BiLstm<T>, ds: &SymbolDataset, split: Split) -> f64 {
    mean_mse(model, &WordSet::new(ds, split))
}

/// Trains on the dataset's train split with validation-based early
/// stopping; the returned model holds the best-validation weights and the
/// dataset's normalisation and regime.
pub fn train<T: Scalar>(
    ds: &SymbolDataset,
    config: &TrainConfig,
    init: Option<BiLstm<T>>,
) -> Result<(BiLstm<T>, TrainReport), NetworkError> {
    config.validate()?;
    let train_set = WordSet::<T>::new(ds, Split::Train);
    let val_set = WordSet::<T>::new(ds, Split::Val);
    if train_set.len() == 0 {
        return Err(NetworkError::EmptySplit("train"));
    }
    if val_set.len() == 0 {
        return Err(NetworkError::EmptySplit("validation"));
    }
    let start = Instant::now();
    let mut model = match init {
        Some(m) => m,
        None => BiLstm::init_uniform(config.hidden_size, &mut ChaCha8Rng::seed_from_u64(config.seed)),
    };
    if config.max_epochs == 0 {
        let val = mean_mse(&model, &val_set);
        let train = mean_mse(&model, &train_set);
        return Ok((
            model,
            TrainReport {
                epochs_run: 0,
                best_epoch: 0,
                best_val_mse: val,
                stopped_early: false,
                wall_time_s: start.elapsed().as_secs_f64(),
                loss_curve: vec![EpochLoss {
                    epoch: 0,
                    train_mse: train,
                    val_mse: val,
                }],
            },
        ));
    }
    model.norm_stats = ds.norm_stats;
    model.regime_voltage = ds.regime_voltage;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut adam = Adam::<T>::new(model.hidden());
    let lr = T::of(config.learning_rate);
    let initial_val = mean_mse(&model, &val_set);
    let mut curve = vec![EpochLoss {
        epoch: 0,
        train_mse: mean_mse(&model, &train_set),
        val_mse: initial_val,
    }];
    let mut best = (initial_val, 0usize, model.params.clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, batch) in order.chunks(config.batch_words).enumerate() {
            let (loss, grads) = batch_gradient(&model, &train_set, batch)?;
            let l = loss.as_f64();
            if !l.is_finite() || !grads.is_finite() {
                return Err(NetworkError::NonFinite {
                    epoch,
                    batch: bi,
                    loss: l,
                });
            }
            adam.step(&mut model.params, &grads, lr, config.trainable_mask);
            loss_sum += l * batch.len() as f64;
        }
        let val = mean_mse(&model, &val_set);
        if !val.is_finite() {
            return Err(NetworkError::NonFinite {
                epoch,
                batch: usize::MAX,
                loss: val,
            });
        }
        curve.push(EpochLoss {
            epoch,
            train_mse: loss_sum / train_set.len() as f64,
            val_mse: val,
        });
        epochs_run = epoch;
        if val < best.0 {
            best = (val, epoch, model.params.clone());
        } else if epoch - best.1 >= config.patience {
            stopped_early = true;
            break;
        }
    }
    model.params = best.2;
    Ok((
        model,
        TrainReport {
            epochs_run,
            best_epoch: best.1,
            best_val_mse: best.0,
            stopped_early,
            wall_time_s: start.elapsed().as_secs_f64(),
            loss_curve: curve,
        },
    ))
}

impl<T: Scalar> BiLstm<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        let mut meta = (self.hidden() as u64).to_le_bytes().to_vec();
        meta.extend(codec::f64s_to_bytes(&[self.regime_voltage]));
        meta.extend(codec::f64s_to_bytes(&self.norm_stats.to_array()));
        w.section("meta", &meta);
        w.section("gate_order", GATE_ORDER.as_bytes());
        for b in Block::ALL {
            let shape = b.shape(self.hidden());
            let mut payload = (shape.len() as u64).to_le_bytes().to_vec();
            payload.extend(codec::u64s_to_bytes(&shape.iter().map(|&d| d as u64).collect::<Vec<_>>()));
            let vals: Vec<f64> = self.block(b).iter().map(|v| v.as_f64()).collect();
            payload.extend(codec::f64s_to_bytes(&vals));
            w.section(b.name(), &payload);
        }
        w.finish()
    }

    /// Parses a checkpoint whose blocks must match `hidden`.
    pub fn from_bytes_with_hidden(bytes: &[u8], hidden: usize) -> Result<Self, NetworkError> {
        let c = Container::parse(bytes, MAGIC, VERSION)?;
        let gate_order = String::from_utf8_lossy(c.get("gate_order")?).into_owned();
        if gate_order != GATE_ORDER {
            return Err(NetworkError::GateOrder(gate_order));
        }
        let meta = c.get("meta")?;
        if meta.len() != 8 + 5 * 8 {
            return Err(FormatError::from(codec::malformed("meta", "unexpected length")).into());
        }
        let stored_hidden = u64::from_le_bytes(meta[..8].try_into().unwrap()) as usize;
        let m = codec::bytes_to_f64s("meta", &meta[8..])?;
        let mut model = Self::zeros(hidden);
        for b in Block::ALL {
            let p = c.get(b.name())?;
            if p.len() < 8 {
                return Err(FormatError::Truncated("block shape").into());
            }
            let nd = u64::from_le_bytes(p[..8].try_into().unwrap()) as usize;
            if p.len() < 8 + 8 * nd {
                return Err(FormatError::Truncated("block shape").into());
            }
            let found: Vec<usize> = codec::bytes_to_u64s(b.name(), &p[8..8 + 8 * nd])?
                .into_iter()
                .map(|d| d as usize)
                .collect();
            let expected = b.shape(hidden);
            if found != expected || stored_hidden != hidden {
                return Err(NetworkError::Shape {
                    block: b.name().to_string(),
                    expected,
                    found,
                });
            }
            let vals = codec::bytes_to_f64s(b.name(), &p[8 + 8 * nd..])?;
            if vals.len() != b.len(hidden) {
                return Err(FormatError::Truncated("block payload").into());
            }
            for (d, v) in model.block_mut(b).iter_mut().zip(vals) {
                *d = T::of(v);
            }
        }
        model.regime_voltage = m[0];
        model.norm_stats = NormStats::from_array([m[1], m[2], m[3], m[4]]);
        Ok(model)
    }

    /// Parses a checkpoint of any hidden width; the width is read from the
    /// header and every block is checked against it.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetworkError> {
        let c = Container::parse(bytes, MAGIC, VERSION)?;
        let meta = c.get("meta")?;
        if meta.len() < 8 {
            return Err(FormatError::Truncated("meta").into());
        }
        let hidden = u64::from_le_bytes(meta[..8].try_into().unwrap());
        if !(1..=MAX_HIDDEN as u64).contains(&hidden) {
            return Err(FormatError::from(codec::malformed("meta", "hidden width out of range")).into());
        }
        Self::from_bytes_with_hidden(bytes, hidden as usize)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        Ok(codec::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    pub fn load_with_hidden(path: &Path, hidden: usize) -> Result<Self, NetworkError> {
        Self::from_bytes_with_hidden(&codec::read_file(path)?, hidden)
    }
}

pub fn save_model<T: Scalar>(model: &BiLstm<T>, path: &Path) -> Result<(), NetworkError> {
    model.save(path)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<BiLstm<T>, NetworkError> {
    BiLstm::load(path)
}
