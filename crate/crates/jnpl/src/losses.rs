//! The four loss functions (PL, NL, NL+, PL+) with exact logit gradients,
//! the PL+ candidate-selection rule, and the composite training objective.
//!
//! NL+ and PL+ scale the base NL/PL losses by detached weighting factors
//! `(1 - p_ybar)` and `prod_{n=0}^{N}(1 + p_yhat^{2^n})`. The factors are
//! treated as constants when differentiating, so each gradient is the base
//! gradient times the factor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{clamp_prob, sample_complementary, softmax, ClassLabel, ComplementaryLabelSet, Logits, ProbVector};

/// Scalar loss plus its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set when a complementary-label probability hit the clamp ceiling.
    pub saturated: bool,
}

/// Weights for the composite objective: NL+ plus `lambda` times PL+.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JnplConfig {
    pub lambda: f64,
    pub n_exponent: u32,
}

impl Default for JnplConfig {
    fn default() -> Self {
        Self { lambda: 0.01, n_exponent: 3 }
    }
}

impl JnplConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Cross-entropy on the given label: `-log p_y`.
pub fn pl_loss(logits: &Logits, y: ClassLabel) -> Result<LossEval> {
    let c = logits.num_classes();
    ClassLabel::checked(y.index(), c)?;
    let p = softmax(logits);
    let value = -clamp_prob(p.get(y)).ln();
    let mut grad: Vec<f64> = p.values().to_vec();
    grad[y.index()] -= 1.0;
    Ok(LossEval { value, grad, saturated: false })
}

/// Per-label NL gradient: `p_ybar` at the complementary class and
/// `-(p_ybar / (1 - p_ybar)) p_i` elsewhere. The off-label mass is divided
/// by the actual off-label sum so entries cancel exactly.
fn nl_grad_single(p: &ProbVector, ybar: ClassLabel) -> Vec<f64> {
    let c = p.num_classes();
    let pc = clamp_prob(p.get(ybar));
    let off_sum: f64 = p
        .values()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ybar.index())
        .map(|(_, v)| *v)
        .sum();
    let mut grad = vec![0.0; c];
    grad[ybar.index()] = pc;
    if off_sum > 0.0 {
        let ratio = pc / off_sum;
        for (i, g) in grad.iter_mut().enumerate() {
            if i != ybar.index() {
                *g = -ratio * p.values()[i];
            }
        }
    } else {
        // Fully saturated: spread the balancing mass uniformly.
        for (i, g) in grad.iter_mut().enumerate() {
            if i != ybar.index() {
                *g = -pc / (c - 1) as f64;
            }
        }
    }
    grad
}

fn nl_family(logits: &Logits, ybar: &ComplementaryLabelSet, weighted: bool) -> Result<LossEval> {
    let c = logits.num_classes();
    if ybar.labels().iter().any(|l| l.index() >= c) {
        return Err(Error::InvalidInput("complementary label out of range".into()));
    }
    let p = softmax(logits);
    let k = ybar.multiplicity() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; c];
    let mut saturated = false;
    for &label in ybar.labels() {
        let pc = clamp_prob(p.get(label));
        if p.get(label) >= 1.0 - crate::prob::PROB_FLOOR {
            saturated = true;
        }
        let weight = if weighted { 1.0 - pc } else { 1.0 };
        value += -weight * (1.0 - pc).ln();
        let g = nl_grad_single(&p, label);
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += weight * gi;
        }
    }
    value /= k;
    for g in &mut grad {
        *g /= k;
    }
    Ok(LossEval { value, grad, saturated })
}

/// Negative-learning loss: mean over the complementary set of
/// `-log(1 - p_ybar)`.
pub fn nl_loss(logits: &Logits, ybar: &ComplementaryLabelSet) -> Result<LossEval> {
    nl_family(logits, ybar, false)
}

/// NL+ loss: each term of the NL loss scaled by its own detached
/// `(1 - p_ybar)` factor, damping gradients where the complementary label is
/// likely the true class.
pub fn nlplus_loss(logits: &Logits, ybar: &ComplementaryLabelSet) -> Result<LossEval> {
    nl_family(logits, ybar, true)
}

/// The PL+ weighting factor `prod_{n=0}^{N} (1 + p^{2^n})`.
///
/// Satisfies the telescoping identity `weight * (1 - p) = 1 - p^{2^{N+1}}`.
pub fn plplus_weight(p_hat: f64, n_exponent: u32) -> f64 {
    let mut w = 1.0;
    let mut power = p_hat;
    for _ in 0..=n_exponent {
        w *= 1.0 + power;
        power *= power;
    }
    w
}

/// PL+ loss on the argmax class: cross-entropy scaled by the detached
/// `plplus_weight` factor.
pub fn plplus_loss(logits: &Logits, target: ClassLabel, cfg: &JnplConfig) -> Result<LossEval> {
    let c = logits.num_classes();
    ClassLabel::checked(target.index(), c)?;
    let p = softmax(logits);
    let pc = clamp_prob(p.get(target));
    let w = plplus_weight(pc, cfg.n_exponent);
    let value = -w * pc.ln();
    let mut grad: Vec<f64> = p.values().iter().map(|v| w * v).collect();
    grad[target.index()] -= w;
    Ok(LossEval { value, grad, saturated: false })
}

/// A sample admitted by the PL+ candidate rule.
#[derive(Debug, Clone, PartialEq)]
pub struct PlPlusCandidate {
    pub sample_id: u64,
    /// Relabel target: the argmax class, regardless of any given label.
    pub target: ClassLabel,
    /// Bernoulli acceptance probability, `p` at the argmax.
    pub acceptance_prob: f64,
}

/// Candidate rule plus Bernoulli acceptance.
///
/// A sample is a candidate when every probability outside the argmax is
/// strictly below `1/c`; candidates are kept with probability `p` at the
/// argmax. Returns the accepted subset.
pub fn select_plplus<R: Rng>(
    probs: &[(u64, ProbVector)],
    rng: &mut R,
) -> Vec<PlPlusCandidate> {
    let mut accepted = Vec::new();
    for (id, p) in probs {
        let c = p.num_classes();
        let uniform = 1.0 / c as f64;
        let target = p.argmax();
        let is_candidate = p
            .values()
            .iter()
            .enumerate()
            .all(|(i, v)| i == target.index() || *v < uniform);
        if !is_candidate {
            continue;
        }
        let p_hat = p.get(target);
        if rng.random_bool(p_hat.clamp(0.0, 1.0)) {
            accepted.push(PlPlusCandidate {
                sample_id: *id,
                target,
                acceptance_prob: p_hat,
            });
        }
    }
    accepted
}

/// Per-batch evaluation of the composite objective.
#[derive(Debug, Clone)]
pub struct JnplBatchEval {
    /// `mean(NL+) + lambda * mean-over-accepted(PL+)`; the PL+ term is 0 when
    /// nothing is accepted.
    pub total: f64,
    pub nl_term: f64,
    pub pl_term: f64,
    /// Gradient of `total` with respect to each sample's logits.
    pub per_sample_grads: Vec<Vec<f64>>,
    pub n_candidates_accepted: usize,
    pub accepted: Vec<PlPlusCandidate>,
}

/// Evaluate the composite objective on a mini-batch: complementary labels are
/// sampled fresh, NL+ is averaged over the whole batch, PL+ over the accepted
/// subset only.
pub fn jnpl_loss<R: Rng>(
    batch_logits: &[Logits],
    given_labels: &[ClassLabel],
    k_complementary: usize,
    cfg: &JnplConfig,
    rng: &mut R,
) -> Result<JnplBatchEval> {
    if batch_logits.is_empty() || batch_logits.len() != given_labels.len() {
        return Err(Error::InvalidInput("empty or mismatched batch".into()));
    }
    cfg.validate()?;
    let batch = batch_logits.len() as f64;
    let mut nl_sum = 0.0;
    let mut per_sample_grads = Vec::with_capacity(batch_logits.len());
    let mut probs = Vec::with_capacity(batch_logits.len());
    for (idx, (logits, &given)) in batch_logits.iter().zip(given_labels).enumerate() {
        let c = logits.num_classes();
        let ybar = sample_complementary(given, c, k_complementary, rng)?;
        let eval = nlplus_loss(logits, &ybar)?;
        nl_sum += eval.value;
        per_sample_grads.push(eval.grad.iter().map(|g| g / batch).collect::<Vec<f64>>());
        probs.push((idx as u64, softmax(logits)));
    }
    let accepted = select_plplus(&probs, rng);
    let mut pl_term = 0.0;
    if !accepted.is_empty() {
        let n_acc = accepted.len() as f64;
        for cand in &accepted {
            let idx = cand.sample_id as usize;
            let eval = plplus_loss(&batch_logits[idx], cand.target, cfg)?;
            pl_term += eval.value / n_acc;
            for (acc, g) in per_sample_grads[idx].iter_mut().zip(&eval.grad) {
                *acc += cfg.lambda * g / n_acc;
            }
        }
    }
    let nl_term = nl_sum / batch;
    Ok(JnplBatchEval {
        total: nl_term + cfg.lambda * pl_term,
        nl_term,
        pl_term,
        n_candidates_accepted: accepted.len(),
        per_sample_grads,
        accepted,
    })
}
