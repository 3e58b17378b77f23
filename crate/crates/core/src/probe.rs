//! Two-layer MLP probe trained with binary cross-entropy and Adam.
//!
//! Label 1 means the question is in scope for its document. All arithmetic
//! is `f64`. The hidden layer uses ReLU followed by inverted dropout; a
//! probability of exactly 0.5 classifies as label 0.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{ConfusionMatrix2x2, YesNo};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside the loss.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProbeError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("record {0} has no label")]
    MissingLabel(String),
    #[error("invalid label {label} on record {id}")]
    InvalidLabel { id: String, label: u8 },
    #[error("split ratios must be non-negative and sum to 1")]
    InvalidRatios,
    #[error("need at least {needed} records to split, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default)]
    pub split: Split,
}

impl FeatureRecord {
    fn target(&self) -> Result<f64, ProbeError> {
        match self.label {
            Some(0) => Ok(0.0),
            Some(1) => Ok(1.0),
            Some(label) => Err(ProbeError::InvalidLabel { id: self.id.clone(), label }),
            None => Err(ProbeError::MissingLabel(self.id.clone())),
        }
    }
}

/// `[e_d; e_q; |e_d - e_q|]`.
pub fn build_nli_features(e_d: &[f64], e_q: &[f64]) -> Result<Vec<f64>, ProbeError> {
    if e_d.len() != e_q.len() {
        return Err(ProbeError::DimMismatch { expected: e_d.len(), got: e_q.len() });
    }
    let mut out = Vec::with_capacity(3 * e_d.len());
    out.extend_from_slice(e_d);
    out.extend_from_slice(e_q);
    out.extend(e_d.iter().zip(e_q).map(|(a, b)| libm::fabs(a - b)));
    Ok(out)
}

/// Shuffles under `seed` and assigns floor-allocated val/test counts, the
/// remainder going to train.
pub fn split_dataset(records: &mut [FeatureRecord], ratios: (f64, f64, f64), seed: u64) -> Result<(), ProbeError> {
    let (train, val, test) = ratios;
    if train < 0.0 || val < 0.0 || test < 0.0 || libm::fabs(train + val + test - 1.0) > 1e-9 {
        return Err(ProbeError::InvalidRatios);
    }
    if records.len() < 10 {
        return Err(ProbeError::TooFewRecords { needed: 10, got: records.len() });
    }
    let n = records.len();
    let n_val = libm::floor(n as f64 * val + 1e-9) as usize;
    let n_test = libm::floor(n as f64 * test + 1e-9) as usize;
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, idx) in order.into_iter().enumerate() {
        records[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(())
}

/// Weights of `sigmoid(w2 . dropout(relu(W1^T x + b1)) + b2)`.
///
/// `w1` is row-major `dim x hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Cached intermediate values of one forward pass.
struct Trace {
    pre: Vec<f64>,
    /// Per-unit dropout scale: 0 or 1/(1-rate) in train mode, 1 in eval.
    scale: Vec<f64>,
    prob: f64,
}

impl MlpParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        MlpParams { dim, hidden, w1: vec![0.0; dim * hidden], b1: vec![0.0; hidden], w2: vec![0.0; hidden], b2: 0.0 }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(dim, hidden);
        let a1 = libm::sqrt(6.0 / (dim + hidden) as f64);
        let a2 = libm::sqrt(6.0 / (hidden + 1) as f64);
        for w in &mut p.w1 {
            *w = rng.random_range(-a1..a1);
        }
        for w in &mut p.w2 {
            *w = rng.random_range(-a2..a2);
        }
        p
    }

    pub fn check_shapes(&self) -> Result<(), ProbeError> {
        let expect = [
            (self.w1.len(), self.dim * self.hidden),
            (self.b1.len(), self.hidden),
            (self.w2.len(), self.hidden),
        ];
        for (got, expected) in expect {
            if got != expected {
                return Err(ProbeError::DimMismatch { expected, got });
            }
        }
        Ok(())
    }

    fn slices(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, core::slice::from_ref(&self.b2)]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, core::slice::from_mut(&mut self.b2)]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn trace<R: Rng>(&self, x: &[f64], dropout: Option<(f64, &mut R)>) -> Result<Trace, ProbeError> {
        if x.len() != self.dim {
            return Err(ProbeError::DimMismatch { expected: self.dim, got: x.len() });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(ProbeError::NonFinite("input"));
        }
        let h = self.hidden;
        let mut pre = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w1[i * h..(i + 1) * h];
            for (acc, &w) in pre.iter_mut().zip(row) {
                *acc += xi * w;
            }
        }
        let scale = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                (0..h).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
            }
            _ => vec![1.0; h],
        };
        let mut z = self.b2;
        for j in 0..h {
            z += self.w2[j] * pre[j].max(0.0) * scale[j];
        }
        Ok(Trace { pre, scale, prob: sigmoid(z) })
    }

    /// Deterministic eval-mode probability of label 1.
    pub fn predict(&self, x: &[f64]) -> Result<f64, ProbeError> {
        self.trace::<ChaCha8Rng>(x, None).map(|t| t.prob)
    }
}

/// Forward pass. Dropout is applied only in [`Mode::Train`].
pub fn mlp_forward<R: Rng>(
    params: &MlpParams,
    x: &[f64],
    dropout_rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<f64, ProbeError> {
    let dropout = match mode {
        Mode::Train => Some((dropout_rate, rng)),
        Mode::Eval => None,
    };
    params.trace(x, dropout).map(|t| t.prob)
}

/// Per-example binary cross-entropy with clamped probability.
pub fn bce(prob: f64, target: f64) -> f64 {
    let p = prob.clamp(P_CLAMP, 1.0 - P_CLAMP);
    -(target * libm::log(p) + (1.0 - target) * libm::log(1.0 - p))
}

/// Mean BCE over `batch` and its exact gradient. With `dropout` set, each
/// example draws its own mask from the given rng.
pub fn bce_grad<R: Rng>(
    params: &MlpParams,
    batch: &[(&[f64], f64)],
    mut dropout: Option<(f64, &mut R)>,
) -> Result<(f64, MlpParams), ProbeError> {
    if batch.is_empty() {
        return Err(ProbeError::Empty("batch"));
    }
    let (dim, h) = (params.dim, params.hidden);
    let mut grads = MlpParams::zeros(dim, h);
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &(x, y) in batch {
        let drop = dropout.as_mut().map(|(rate, rng)| (*rate, &mut **rng));
        let t = params.trace(x, drop)?;
        loss += bce(t.prob, y);
        let dz2 = (t.prob - y) * inv_b;
        grads.b2 += dz2;
        for j in 0..h {
            let act = t.pre[j].max(0.0) * t.scale[j];
            grads.w2[j] += dz2 * act;
            if t.pre[j] <= 0.0 || t.scale[j] == 0.0 {
                continue;
            }
            let dz1 = dz2 * params.w2[j] * t.scale[j];
            grads.b1[j] += dz1;
            for (i, &xi) in x.iter().enumerate() {
                grads.w1[i * h + j] += xi * dz1;
            }
        }
    }
    Ok((loss * inv_b, grads))
}

/// Bias-corrected Adam with fixed betas and epsilon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub m: MlpParams,
    pub v: MlpParams,
}

impl AdamState {
    pub fn new(like: &MlpParams, lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            m: MlpParams::zeros(like.dim, like.hidden),
            v: MlpParams::zeros(like.dim, like.hidden),
        }
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &MlpParams) -> Result<(), ProbeError> {
    grads.check_shapes()?;
    if grads.dim != params.dim || grads.hidden != params.hidden {
        return Err(ProbeError::DimMismatch { expected: params.dim * params.hidden, got: grads.dim * grads.hidden });
    }
    if !grads.is_finite() {
        return Err(ProbeError::NonFinite("gradient"));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, t);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, t);
    let lr = state.lr;
    let g_all = grads.slices();
    let m_all = state.m.slices_mut();
    let AdamState { v, .. } = state;
    let v_all = v.slices_mut();
    for (((p, g), m), v) in params.slices_mut().into_iter().zip(g_all).zip(m_all).zip(v_all) {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { hidden: 256, epochs: 10, batch: 8, lr: 1e-4, dropout: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub params: MlpParams,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ProbeModel,
    pub log: Vec<EpochLog>,
    pub best_val_acc: f64,
    pub test_acc: Option<f64>,
    pub train_acc: f64,
}

fn labelled<'a>(records: &[&'a FeatureRecord]) -> Result<Vec<(&'a [f64], f64)>, ProbeError> {
    records.iter().map(|r| Ok((r.vector.as_slice(), r.target()?))).collect()
}

fn accuracy_on(params: &MlpParams, data: &[(&[f64], f64)]) -> Result<f64, ProbeError> {
    let mut hits = 0usize;
    for &(x, y) in data {
        let pred = if params.predict(x)? > 0.5 { 1.0 } else { 0.0 };
        hits += usize::from(pred == y);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Mini-batch training with per-epoch validation; the weights of the
/// best-validation epoch are returned (earliest on ties).
pub fn train_probe(records: &[FeatureRecord], config: &TrainConfig) -> Result<TrainOutcome, ProbeError> {
    if config.hidden == 0 || config.batch == 0 || config.epochs == 0 {
        return Err(ProbeError::InvalidConfig("hidden, batch and epochs must be positive"));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(ProbeError::InvalidConfig("dropout must be in [0, 1)"));
    }
    let pick = |s: Split| records.iter().filter(|r| r.split == s).collect::<Vec<_>>();
    let train = labelled(&pick(Split::Train))?;
    let val = labelled(&pick(Split::Val))?;
    let test = labelled(&pick(Split::Test))?;
    if train.is_empty() {
        return Err(ProbeError::Empty("train split"));
    }
    if val.is_empty() {
        return Err(ProbeError::Empty("validation split"));
    }
    let dim = train[0].0.len();
    if let Some((x, _)) = train.iter().chain(&val).chain(&test).find(|(x, _)| x.len() != dim) {
        return Err(ProbeError::DimMismatch { expected: dim, got: x.len() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = MlpParams::init(dim, config.hidden, &mut rng);
    let mut adam = AdamState::new(&params, config.lr);
    let mut best: Option<(f64, usize, MlpParams)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            let batch: Vec<(&[f64], f64)> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grads) = bce_grad(&params, &batch, Some((config.dropout, &mut rng)))?;
            adam_step(&mut adam, &mut params, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let val_acc = accuracy_on(&params, &val)?;
        log.push(EpochLog { epoch, train_loss: loss_sum / batches as f64, val_acc });
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, params.clone()));
        }
    }
    let (best_val_acc, best_epoch, params) = best.expect("at least one epoch ran");
    let test_acc = if test.is_empty() { None } else { Some(accuracy_on(&params, &test)?) };
    let train_acc = accuracy_on(&params, &train)?;
    Ok(TrainOutcome { model: ProbeModel { params, best_epoch }, log, best_val_acc, test_acc, train_acc })
}

/// Accuracy and confusion matrix (label 1 as positive) at threshold 0.5.
pub fn evaluate_probe(model: &ProbeModel, records: &[FeatureRecord]) -> Result<(f64, ConfusionMatrix2x2), ProbeError> {
    if records.is_empty() {
        return Err(ProbeError::Empty("record list"));
    }
    let mut cm = ConfusionMatrix2x2::default();
    for r in records {
        let gold = r.target()? == 1.0;
        let pred = model.params.predict(&r.vector)? > 0.5;
        cm.record(YesNo::from_bool(pred), YesNo::from_bool(gold));
    }
    Ok((cm.accuracy(), cm))
}
