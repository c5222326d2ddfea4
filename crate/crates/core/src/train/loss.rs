//! Plain-value forms of the loss terms. The model computes the same
//! quantities on the tape; these are used for reporting and cross-checks.

use serde::{Deserialize, Serialize};

use crate::model::PROB_EPS;

/// Weights of the joint objective `L_NLG + alpha L_ST + beta L_DA + gamma L_R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 10.0, gamma: 10.0 }
    }
}

impl From<&crate::config::TrainConfig> for LossWeights {
    fn from(t: &crate::config::TrainConfig) -> Self {
        Self { alpha: t.loss_alpha, beta: t.loss_beta, gamma: t.loss_gamma }
    }
}

fn ln(p: f64) -> f64 {
    p.max(PROB_EPS).ln()
}

/// `-sum_{j in y} delta_j ln p_j - sum_{k not in y} ln(1 - p_k)`, probabilities
/// clamped at `1e-12`.
pub fn loss_strategy(probs: &[f64], target: &[bool], delta: &[f64]) -> f64 {
    assert_eq!(probs.len(), target.len());
    assert_eq!(probs.len(), delta.len());
    probs
        .iter()
        .zip(target)
        .zip(delta)
        .map(|((&p, &y), &d)| if y { -d * ln(p) } else { -ln(1.0 - p) })
        .sum()
}

/// `-rho_target * log_softmax(logits)[target]`.
pub fn loss_dialogue_act(logits: &[f64], target: usize, rho: &[f64]) -> f64 {
    -rho[target] * log_softmax(logits)[target]
}

/// Cross entropy of the outcome logits against class `target`.
pub fn loss_outcome(logits: &[f64], target: usize) -> f64 {
    -log_softmax(logits)[target]
}

/// Summed token negative log-likelihood given each target token's probability.
pub fn loss_generation(target_probs: &[f64]) -> f64 {
    target_probs.iter().map(|&p| -ln(p)).sum()
}

pub fn loss_joint(nlg: f64, st: f64, da: f64, r: f64, w: LossWeights) -> f64 {
    nlg + w.alpha * st + w.beta * da + w.gamma * r
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}
