//! Logistic regression with local mini-batch SGD and FedAvg aggregation.
//!
//! Parameters have dimension `d + 1`, bias last. Every reduction runs in a
//! fixed order so results are bit-reproducible for a given input.

mod dataset;

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SessionConfig;
use crate::crypto;
use crate::scalar::Scalar;

pub use dataset::{gaussian_classes, Dataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical divergence in epoch {epoch}")]
    NumericalDivergence { epoch: usize },
    #[error("dataset: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<S>(Vec<S>);

impl<S: Scalar> ParameterVector<S> {
    pub fn new(weights: Vec<S>) -> Result<Self, FlError> {
        if weights.is_empty() {
            return Err(FlError::InvalidInput("parameter vector is empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(FlError::InvalidInput("parameter vector has a non-finite entry".into()));
        }
        Ok(Self(weights))
    }

    /// Zero weights for `features` inputs plus the bias.
    pub fn zeros(features: usize) -> Self {
        Self(vec![S::zero(); features + 1])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn bias(&self) -> S {
        self.0[self.0.len() - 1]
    }

    /// `u32 BE dimension | f64 BE entries`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u32).to_be_bytes());
        for w in &self.0 {
            out.extend_from_slice(&w.as_f64().to_be_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FlError> {
        if bytes.len() < 4 {
            return Err(FlError::InvalidInput("parameter encoding too short".into()));
        }
        let dim = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        if bytes.len() != 4 + 8 * dim {
            return Err(FlError::InvalidInput(format!(
                "parameter encoding of dimension {dim} needs {} bytes, got {}",
                4 + 8 * dim,
                bytes.len()
            )));
        }
        let w = bytes[4..]
            .chunks_exact(8)
            .map(|c| S::of(f64::from_be_bytes(c.try_into().unwrap())))
            .collect();
        Self::new(w)
    }

    pub fn hash(&self) -> [u8; 32] {
        crypto::sha256(&[&self.to_bytes()])
    }

    /// Copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: S) -> Self {
        Self(self.0.iter().map(|&w| w * factor).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate<S> {
    pub client_id: String,
    pub round: u64,
    pub params: ParameterVector<S>,
    pub num_examples: u64,
    pub params_hash: [u8; 32],
}

impl<S: Scalar> ModelUpdate<S> {
    pub fn new(client_id: impl Into<String>, round: u64, params: ParameterVector<S>, num_examples: u64) -> Result<Self, FlError> {
        if num_examples < 1 {
            return Err(FlError::InvalidInput("num_examples must be at least 1".into()));
        }
        let params_hash = params.hash();
        Ok(Self {
            client_id: client_id.into(),
            round,
            params,
            num_examples,
            params_hash,
        })
    }

    pub fn hash_is_consistent(&self) -> bool {
        self.params.hash() == self.params_hash
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel<S> {
    pub round: u64,
    pub params: ParameterVector<S>,
    pub history: Vec<RoundMetrics>,
}

impl<S: Scalar> GlobalModel<S> {
    pub fn new(params: ParameterVector<S>) -> Self {
        Self {
            round: 0,
            params,
            history: Vec::new(),
        }
    }

    pub fn commit(&mut self, params: ParameterVector<S>, metrics: RoundMetrics) -> Result<(), FlError> {
        if let Some(last) = self.history.last() {
            if metrics.round <= last.round {
                return Err(FlError::InvalidInput(format!(
                    "round {} does not follow round {}",
                    metrics.round, last.round
                )));
            }
        }
        self.round = metrics.round;
        self.params = params;
        self.history.push(metrics);
        Ok(())
    }
}

/// `σ(z)` without overflow for large `|z|`.
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^z)`, stable for large `|z|`.
pub fn softplus<S: Scalar>(z: S) -> S {
    if z > S::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `θᵀ(x, 1)`.
pub fn logit<S: Scalar>(theta: &[S], x: &[S]) -> S {
    let mut z = theta[x.len()];
    for (w, v) in theta.iter().zip(x) {
        z = z + *w * *v;
    }
    z
}

fn example_loss<S: Scalar>(z: S, y: u8) -> S {
    if y == 1 {
        softplus(-z)
    } else {
        softplus(z)
    }
}

fn check_dims<S: Scalar>(params: &ParameterVector<S>, data: &Dataset<S>) -> Result<(), FlError> {
    if params.dim() != data.dim() + 1 {
        return Err(FlError::InvalidInput(format!(
            "parameters have dimension {} but data has {} features",
            params.dim(),
            data.dim()
        )));
    }
    Ok(())
}

/// Mean logistic loss over `data`.
pub fn loss<S: Scalar>(params: &ParameterVector<S>, data: &Dataset<S>) -> Result<S, FlError> {
    check_dims(params, data)?;
    let mut sum = S::zero();
    for i in 0..data.len() {
        sum = sum + example_loss(logit(params.as_slice(), data.row(i)), data.label(i));
    }
    Ok(sum / S::of(data.len() as f64))
}

fn batch_gradient<S: Scalar>(theta: &[S], data: &Dataset<S>, idx: &[usize], grad: &mut [S]) {
    grad.iter_mut().for_each(|g| *g = S::zero());
    let d = data.dim();
    for &i in idx {
        let x = data.row(i);
        let r = sigmoid(logit(theta, x)) - S::of(data.label(i) as f64);
        for j in 0..d {
            grad[j] = grad[j] + r * x[j];
        }
        grad[d] = grad[d] + r;
    }
    let n = S::of(idx.len() as f64);
    grad.iter_mut().for_each(|g| *g = *g / n);
}

/// Gradient of [`loss`] with respect to the parameters.
pub fn gradient<S: Scalar>(params: &ParameterVector<S>, data: &Dataset<S>) -> Result<Vec<S>, FlError> {
    check_dims(params, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut g = vec![S::zero(); params.dim()];
    batch_gradient(params.as_slice(), data, &idx, &mut g);
    Ok(g)
}

/// Runs `cfg.local_epochs` epochs of mini-batch SGD from `start`. Each
/// epoch visits the rows in an order drawn from `seed`.
///
/// A zero learning rate returns `start` unchanged.
pub fn train<S: Scalar>(
    start: &ParameterVector<S>,
    data: &Dataset<S>,
    cfg: &SessionConfig,
    seed: u64,
) -> Result<ParameterVector<S>, FlError> {
    check_dims(start, data)?;
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(FlError::InvalidInput("learning rate must be non-negative".into()));
    }
    if cfg.batch_size == 0 {
        return Err(FlError::InvalidInput("batch size must be at least 1".into()));
    }
    let lr = S::of(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = start.as_slice().to_vec();
    let mut grad = vec![S::zero(); theta.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.local_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            batch_gradient(&theta, data, batch, &mut grad);
            for (w, g) in theta.iter_mut().zip(&grad) {
                *w = *w - lr * *g;
            }
        }
        if theta.iter().any(|w| !w.is_finite()) {
            return Err(FlError::NumericalDivergence { epoch });
        }
    }
    Ok(ParameterVector(theta))
}

/// [`train`] packaged as the update a client submits.
pub fn local_train<S: Scalar>(
    client_id: &str,
    round: u64,
    start: &ParameterVector<S>,
    data: &Dataset<S>,
    cfg: &SessionConfig,
    seed: u64,
) -> Result<ModelUpdate<S>, FlError> {
    let params = train(start, data, cfg, seed)?;
    if !loss(&params, data)?.is_finite() {
        return Err(FlError::NumericalDivergence { epoch: cfg.local_epochs.saturating_sub(1) });
    }
    ModelUpdate::new(client_id, round, params, data.len() as u64)
}

/// Error-free product: `a * b = p + e` exactly.
fn two_product<S: Scalar>(a: S, b: S) -> (S, S) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Compensated running sum (Neumaier).
#[derive(Clone, Copy)]
struct CompensatedSum<S> {
    sum: S,
    comp: S,
}

impl<S: Scalar> CompensatedSum<S> {
    fn new() -> Self {
        Self {
            sum: S::zero(),
            comp: S::zero(),
        }
    }

    fn add(&mut self, x: S) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp = self.comp + ((self.sum - t) + x);
        } else {
            self.comp = self.comp + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    fn value(&self) -> S {
        self.sum + self.comp
    }
}

/// FedAvg: the `num_examples`-weighted mean of the update parameters.
///
/// Updates are summed in client-id order with compensated arithmetic, so
/// the result does not depend on the order of `updates` and is accurate to
/// a few ulps even under cancellation.
pub fn aggregate<S: Scalar>(updates: &[ModelUpdate<S>]) -> Result<ParameterVector<S>, FlError> {
    let first = updates
        .first()
        .ok_or_else(|| FlError::InvalidInput("no updates to aggregate".into()))?;
    let dim = first.params.dim();
    for u in updates {
        if u.params.dim() != dim {
            return Err(FlError::InvalidInput(format!(
                "update from {} has dimension {}, expected {dim}",
                u.client_id,
                u.params.dim()
            )));
        }
        if u.round != first.round {
            return Err(FlError::InvalidInput(format!("update from {} is for round {}", u.client_id, u.round)));
        }
        if u.num_examples == 0 {
            return Err(FlError::InvalidInput(format!("update from {} has no examples", u.client_id)));
        }
    }
    let mut sorted: Vec<&ModelUpdate<S>> = updates.iter().collect();
    sorted.sort_by(|a, b| match a.client_id.cmp(&b.client_id) {
        Ordering::Equal => a.params_hash.cmp(&b.params_hash),
        o => o,
    });

    let total: u64 = sorted.iter().map(|u| u.num_examples).sum();
    let total = S::of(total as f64);
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut acc = CompensatedSum::new();
        for u in &sorted {
            let (p, e) = two_product(S::of(u.num_examples as f64), u.params.0[j]);
            acc.add(p);
            acc.add(e);
        }
        out.push(acc.value() / total);
    }
    ParameterVector::new(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation<S> {
    pub accuracy: f64,
    pub loss: S,
}

/// Accuracy of the `σ(θᵀx̃) ≥ 0.5` rule and mean logistic loss.
pub fn evaluate<S: Scalar>(params: &ParameterVector<S>, data: &Dataset<S>) -> Result<Evaluation<S>, FlError> {
    check_dims(params, data)?;
    if data.is_empty() {
        return Err(FlError::InvalidInput("evaluation dataset is empty".into()));
    }
    let half = S::of(0.5);
    let mut correct = 0usize;
    let mut sum = S::zero();
    for i in 0..data.len() {
        let z = logit(params.as_slice(), data.row(i));
        let pred = (sigmoid(z) >= half) as u8;
        if pred == data.label(i) {
            correct += 1;
        }
        sum = sum + example_loss(z, data.label(i));
    }
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss: sum / S::of(data.len() as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convergence {
    TargetReached,
    Plateau,
    MaxRounds,
}

impl Convergence {
    pub fn as_str(&self) -> &'static str {
        match self {
            Convergence::TargetReached => "target-reached",
            Convergence::Plateau => "plateau",
            Convergence::MaxRounds => "max-rounds",
        }
    }
}

/// Why training should stop after the latest entry of `history`, if it
/// should. Checked in the order target accuracy, loss plateau, round limit.
pub fn converged(history: &[RoundMetrics], cfg: &SessionConfig) -> Option<Convergence> {
    let last = history.last()?;
    if last.accuracy >= cfg.target_accuracy {
        return Some(Convergence::TargetReached);
    }
    let p = cfg.patience;
    if p > 0 && history.len() > p {
        let tail = &history[history.len() - p - 1..];
        if tail.windows(2).all(|w| (w[1].loss - w[0].loss).abs() < cfg.convergence_epsilon) {
            return Some(Convergence::Plateau);
        }
    }
    if last.round >= cfg.max_rounds {
        return Some(Convergence::MaxRounds);
    }
    None
}
