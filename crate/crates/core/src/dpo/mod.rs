//! SFT and DPO loss kernels over small categorical sequence policies.
//!
//! A [`ToyPolicy`] holds an L×V logit matrix; a response is one token per
//! position and its log-probability is the sum of position-wise
//! log-softmax values. The DPO kernel works on log-probability quadruples,
//! so the same code can score log-probs produced by any external model.
//! All numerics are `f64`.

pub mod check;

use std::fmt::Write;

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DpoError {
    #[error("token {token} at position {position} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        token: usize,
        vocab_size: usize,
    },
    #[error("expected shape {expected:?}, got {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("learning rate must be non-negative and finite, got {0}")]
    InvalidLearningRate(f64),
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab_size: usize,
    seq_len: usize,
    /// Row-major, `seq_len` rows of `vocab_size`.
    logits: Vec<f64>,
}

impl ToyPolicy {
    /// The uniform policy (all-zero logits).
    pub fn uniform(vocab_size: usize, seq_len: usize) -> Self {
        Self {
            vocab_size,
            seq_len,
            logits: vec![0.0; vocab_size * seq_len],
        }
    }

    pub fn from_logits(vocab_size: usize, seq_len: usize, logits: Vec<f64>) -> Result<Self, DpoError> {
        if vocab_size == 0 || logits.len() != vocab_size * seq_len {
            return Err(DpoError::ShapeMismatch {
                expected: (seq_len, vocab_size),
                found: (logits.len() / vocab_size.max(1), vocab_size),
            });
        }
        Ok(Self {
            vocab_size,
            seq_len,
            logits,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.seq_len, self.vocab_size)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn row(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    /// Log-softmax of one position's logits.
    pub fn log_softmax(&self, pos: usize) -> Vec<f64> {
        let row = self.row(pos);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.iter().map(|x| x - lse).collect()
    }

    pub fn probabilities(&self, pos: usize) -> Vec<f64> {
        self.log_softmax(pos).into_iter().map(f64::exp).collect()
    }

    fn check_response(&self, response: &[usize]) -> Result<(), DpoError> {
        if response.len() != self.seq_len {
            return Err(DpoError::ShapeMismatch {
                expected: (self.seq_len, self.vocab_size),
                found: (response.len(), self.vocab_size),
            });
        }
        match response.iter().position(|&tok| tok >= self.vocab_size) {
            Some(position) => Err(DpoError::TokenOutOfRange {
                position,
                token: response[position],
                vocab_size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Adds `scale * d logprob(response) / d logits` into `grad`.
    fn accumulate_logprob_grad(&self, response: &[usize], scale: f64, grad: &mut [f64]) {
        for (pos, &tok) in response.iter().enumerate() {
            let base = pos * self.vocab_size;
            for (v, p) in self.probabilities(pos).into_iter().enumerate() {
                let indicator = if v == tok { 1.0 } else { 0.0 };
                grad[base + v] += scale * (indicator - p);
            }
        }
    }
}

pub fn policy_logprob(policy: &ToyPolicy, response: &[usize]) -> Result<f64, DpoError> {
    policy.check_response(response)?;
    Ok(response
        .iter()
        .enumerate()
        .map(|(pos, &tok)| policy.log_softmax(pos)[tok])
        .sum())
}

/// Negative summed log-likelihood of `targets` and its gradient w.r.t. the logits.
pub fn sft_loss(policy: &ToyPolicy, targets: &[Vec<usize>]) -> Result<(f64, Vec<f64>), DpoError> {
    let mut grad = vec![0.0; policy.logits.len()];
    let mut loss = 0.0;
    for target in targets {
        loss -= policy_logprob(policy, target)?;
        policy.accumulate_logprob_grad(target, -1.0, &mut grad);
    }
    Ok((loss, grad))
}

/// Log-probabilities of one (chosen, rejected) pair under the trained and reference policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoItem {
    pub logp_chosen: f64,
    pub logp_rejected: f64,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl DpoItem {
    /// `(logp_chosen - ref_chosen) - (logp_rejected - ref_rejected)`; the margin is `beta` times this.
    pub fn log_ratio_gap(&self) -> f64 {
        (self.logp_chosen - self.ref_chosen) - (self.logp_rejected - self.ref_rejected)
    }

    fn values(&self) -> [f64; 4] {
        [self.logp_chosen, self.logp_rejected, self.ref_chosen, self.ref_rejected]
    }
}

/// Non-empty batch, every log-prob finite and ≤ 0, `beta` > 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoBatch {
    items: Vec<DpoItem>,
    beta: f64,
}

impl DpoBatch {
    pub fn new(items: Vec<DpoItem>, beta: f64) -> Result<Self, DpoError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(DpoError::InvalidBatch(format!("beta must be positive, got {beta}")));
        }
        if items.is_empty() {
            return Err(DpoError::InvalidBatch("batch is empty".into()));
        }
        if let Some(i) = items
            .iter()
            .position(|it| it.values().iter().any(|v| !v.is_finite() || *v > 0.0))
        {
            return Err(DpoError::InvalidBatch(format!("item {i} has a log-prob that is positive or not finite")));
        }
        Ok(Self { items, beta })
    }

    pub fn items(&self) -> &[DpoItem] {
        &self.items
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Partial derivatives of the batch loss with respect to one item's inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoGrad {
    pub logp_chosen: f64,
    pub logp_rejected: f64,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoLoss {
    /// Mean over items of `-log sigmoid(margin)`.
    pub loss: f64,
    pub margins: Vec<f64>,
    /// Gradients of the mean, so each carries the `1/N` factor.
    pub grads: Vec<DpoGrad>,
}

impl DpoLoss {
    pub fn mean_margin(&self) -> f64 {
        self.margins.iter().sum::<f64>() / self.margins.len() as f64
    }
}

pub fn dpo_loss(batch: &DpoBatch) -> DpoLoss {
    let n = batch.items.len() as f64;
    let beta = batch.beta;
    let mut loss = 0.0;
    let mut margins = Vec::with_capacity(batch.items.len());
    let mut grads = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let z = beta * item.log_ratio_gap();
        loss += softplus(-z);
        // d/dz [-log sigmoid(z)] = -(1 - sigmoid(z)) = -sigmoid(-z)
        let g = beta * sigmoid(-z) / n;
        margins.push(z);
        grads.push(DpoGrad {
            logp_chosen: -g,
            logp_rejected: g,
            ref_chosen: g,
            ref_rejected: -g,
        });
    }
    DpoLoss {
        loss: loss / n,
        margins,
        grads,
    }
}

/// A (chosen, rejected) token-sequence pair.
pub type TokenPair = (Vec<usize>, Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub mean_margin: f64,
}

fn batch_for(policy: &ToyPolicy, reference: &ToyPolicy, pairs: &[TokenPair], beta: f64) -> Result<DpoBatch, DpoError> {
    let items = pairs
        .iter()
        .map(|(w, l)| {
            Ok(DpoItem {
                logp_chosen: policy_logprob(policy, w)?,
                logp_rejected: policy_logprob(policy, l)?,
                ref_chosen: policy_logprob(reference, w)?,
                ref_rejected: policy_logprob(reference, l)?,
            })
        })
        .collect::<Result<Vec<_>, DpoError>>()?;
    DpoBatch::new(items, beta)
}

/// DPO loss of `policy` against `reference` and its gradient w.r.t. the policy logits.
pub fn dpo_policy_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TokenPair],
    beta: f64,
) -> Result<(DpoLoss, Vec<f64>), DpoError> {
    if policy.shape() != reference.shape() {
        return Err(DpoError::ShapeMismatch {
            expected: policy.shape(),
            found: reference.shape(),
        });
    }
    let out = dpo_loss(&batch_for(policy, reference, pairs, beta)?);
    let mut grad = vec![0.0; policy.logits.len()];
    for ((w, l), g) in pairs.iter().zip(&out.grads) {
        policy.accumulate_logprob_grad(w, g.logp_chosen, &mut grad);
        policy.accumulate_logprob_grad(l, g.logp_rejected, &mut grad);
    }
    Ok((out, grad))
}

/// Plain gradient descent on the DPO loss. The trace has `steps + 1`
/// points: the loss before each update and after the last one.
pub fn train_toy(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TokenPair],
    beta: f64,
    lr: f64,
    steps: usize,
) -> Result<(ToyPolicy, Vec<TracePoint>), DpoError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(DpoError::InvalidLearningRate(lr));
    }
    let mut current = policy.clone();
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (out, grad) = dpo_policy_loss(&current, reference, pairs, beta)?;
        trace.push(TracePoint {
            step,
            loss: out.loss,
            mean_margin: out.mean_margin(),
        });
        if step == steps {
            break;
        }
        for (x, g) in current.logits.iter_mut().zip(&grad) {
            *x -= lr * g;
        }
    }
    Ok((current, trace))
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("step,loss,mean_margin\n");
    for p in trace {
        let _ = writeln!(out, "{},{:.12},{:.12}", p.step, p.loss, p.mean_margin);
    }
    out
}
