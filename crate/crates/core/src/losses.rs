//! Per-sample losses with exact gradients with respect to the logits.
//!
//! Everything is computed from the logits through a max-shifted log-softmax.
//! Inside logarithms the target probability is floored at 1e-300; gradients
//! use the unfloored softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::log_softmax;
use crate::special::{digamma, ln_gamma, trigamma};

/// ln(1e-300).
const LOG_FLOOR: f64 = -690.775_527_898_213_7;

/// Evidence logits are clamped to this magnitude before exponentiation.
pub const EVIDENCE_CLAMP: f64 = 10.0;

/// Training objective. `Dreg` and `Rc` need a batch to rank losses and are
/// handled by the trainer; the rest are per-sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossSpec {
    Ce,
    /// Label smoothing with strength `epsilon` in [0, 1).
    Ls { epsilon: f64 },
    /// Focal loss with focusing parameter `gamma`.
    Fl { gamma: f64 },
    /// Evidential loss; `gamma` weights the Dirichlet KL regularizer.
    Edl { gamma: f64 },
    /// Cross-entropy minus `gamma` times the predictive entropy.
    Pc { gamma: f64 },
    /// Dynamic regularization: the top-`eta` fraction of each batch by CE
    /// gets `beta`·KL(p ‖ uniform) instead of CE.
    Dreg { eta: f64, beta: f64 },
    /// Ablation: the top-`eta` fraction of each batch is dropped.
    Rc { eta: f64 },
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be a finite nonnegative number, got {v}")))
            }
        };
        let fraction = |v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("eta must lie in [0, 1), got {v}")))
            }
        };
        match *self {
            LossSpec::Ce => Ok(()),
            LossSpec::Ls { epsilon } => {
                if (0.0..1.0).contains(&epsilon) {
                    Ok(())
                } else {
                    Err(Error::config(format!("epsilon must lie in [0, 1), got {epsilon}")))
                }
            }
            LossSpec::Fl { gamma } | LossSpec::Edl { gamma } | LossSpec::Pc { gamma } => nonneg("gamma", gamma),
            LossSpec::Dreg { eta, beta } => {
                fraction(eta)?;
                nonneg("beta", beta)
            }
            LossSpec::Rc { eta } => fraction(eta),
        }
    }

    /// Fraction of each batch routed away from the classification loss.
    pub fn selection_fraction(&self) -> Option<f64> {
        match *self {
            LossSpec::Dreg { eta, .. } | LossSpec::Rc { eta } => Some(eta),
            _ => None,
        }
    }

    /// Per-sample loss for the kinds that do not rank the batch.
    pub fn per_sample(&self, logits: &[f64], y: usize) -> Result<LossOut> {
        match *self {
            LossSpec::Ce | LossSpec::Dreg { .. } | LossSpec::Rc { .. } => cross_entropy(logits, y),
            LossSpec::Ls { epsilon } => label_smoothing(logits, y, epsilon),
            LossSpec::Fl { gamma } => focal_loss(logits, y, gamma),
            LossSpec::Edl { gamma } => evidential_loss(logits, y, gamma),
            LossSpec::Pc { gamma } => penalized_confidence(logits, y, gamma),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOut {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

impl LossOut {
    fn scaled(mut self, s: f64) -> Self {
        self.value *= s;
        for g in &mut self.grad_logits {
            *g *= s;
        }
        self
    }
}

fn check_label(y: usize, k: usize) -> Result<()> {
    if y < k {
        Ok(())
    } else {
        Err(Error::Domain(format!("label {y} out of range for K={k}")))
    }
}

pub fn cross_entropy(logits: &[f64], y: usize) -> Result<LossOut> {
    check_label(y, logits.len())?;
    let logp = log_softmax(logits)?;
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[y] -= 1.0;
    Ok(LossOut {
        value: -logp[y].max(LOG_FLOOR),
        grad_logits: grad,
    })
}

/// Cross-entropy against ỹ = (1 − ε)·onehot(y) + ε/K.
pub fn label_smoothing(logits: &[f64], y: usize, epsilon: f64) -> Result<LossOut> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Domain(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    check_label(y, logits.len())?;
    let k = logits.len() as f64;
    let logp = log_softmax(logits)?;
    let target = |j: usize| if j == y { 1.0 - epsilon + epsilon / k } else { epsilon / k };
    let value = logp
        .iter()
        .enumerate()
        .map(|(j, l)| target(j) * -l.max(LOG_FLOOR))
        .sum();
    let grad = logp.iter().enumerate().map(|(j, l)| l.exp() - target(j)).collect();
    Ok(LossOut {
        value,
        grad_logits: grad,
    })
}

/// (1 − p_y)^γ · (−log p_y).
pub fn focal_loss(logits: &[f64], y: usize, gamma: f64) -> Result<LossOut> {
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!("gamma must be nonnegative, got {gamma}")));
    }
    let ce = cross_entropy(logits, y)?;
    let p_y = (-ce.value).exp();
    let one_minus = 1.0 - p_y;
    let weight = one_minus.powf(gamma);
    // dL/dp_y = −γ(1 − p)^(γ−1)·(−log p) − (1 − p)^γ / p, and
    // dp_y/dz_j = p_y(1[j=y] − p_j), so ∂L/∂z_j = c·(p_j − 1[j=y]) with
    // c = (1 − p)^γ + γ(1 − p)^(γ−1)·p·(−log p).
    let reweight = if gamma == 0.0 || one_minus <= 0.0 {
        0.0
    } else {
        gamma * one_minus.powf(gamma - 1.0) * p_y * ce.value
    };
    let c = weight + reweight;
    Ok(LossOut {
        value: weight * ce.value,
        grad_logits: ce.grad_logits.iter().map(|g| c * g).collect(),
    })
}

/// H(p) = −Σ p log p.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// KL(p ‖ uniform) = Σ p log(K p) = log K − H(p).
pub fn kl_to_uniform(probs: &[f64]) -> f64 {
    let k = probs.len() as f64;
    probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * (k * p).ln())
        .sum::<f64>()
        .max(0.0)
}

/// KL(softmax(z) ‖ uniform) and its gradient p ⊙ (log p + H).
///
/// Evaluated as Σ p_j·log(K p_j) with log(K p_j) = (z_j − max z) − log(mean
/// e^(z − max z)), which is exactly zero for constant logits.
pub fn kl_to_uniform_loss(logits: &[f64]) -> Result<LossOut> {
    // Validates the logits.
    log_softmax(logits)?;
    let k = logits.len() as f64;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|z| z - max).collect();
    let log_mean = (shifted.iter().map(|s| s.exp()).sum::<f64>() / k).ln();
    let log_kp: Vec<f64> = shifted.iter().map(|s| s - log_mean).collect();
    let probs: Vec<f64> = log_kp.iter().map(|l| l.exp() / k).collect();
    let kl: f64 = probs.iter().zip(&log_kp).map(|(p, l)| p * l).sum();
    // log p_j + H = log(K p_j) − KL
    let grad = probs.iter().zip(&log_kp).map(|(p, l)| p * (l - kl)).collect();
    Ok(LossOut {
        value: kl.max(0.0),
        grad_logits: grad,
    })
}

/// Predictive entropy of softmax(z) and its gradient −p ⊙ (log p + H).
pub fn entropy_of_logits(logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    let logp = log_softmax(logits)?;
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let h = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
    let grad = probs.iter().zip(&logp).map(|(p, l)| -p * (l + h)).collect();
    Ok((h, grad))
}

/// CE(z, y) − γ·H(softmax(z)).
pub fn penalized_confidence(logits: &[f64], y: usize, gamma: f64) -> Result<LossOut> {
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!("gamma must be nonnegative, got {gamma}")));
    }
    let ce = cross_entropy(logits, y)?;
    let (h, dh) = entropy_of_logits(logits)?;
    Ok(LossOut {
        value: ce.value - gamma * h,
        grad_logits: ce.grad_logits.iter().zip(&dh).map(|(g, d)| g - gamma * d).collect(),
    })
}

/// Dirichlet parameters α = exp(clamp(z, −10, 10)) + 1.
pub fn evidence_alpha(logits: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .map(|z| z.clamp(-EVIDENCE_CLAMP, EVIDENCE_CLAMP).exp() + 1.0)
        .collect()
}

/// KL(Dir(α) ‖ Dir(1, …, 1)) in closed form.
pub fn dirichlet_kl_to_flat(alpha: &[f64]) -> f64 {
    let k = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    let psi_s = digamma(s);
    ln_gamma(s) - ln_gamma(k) - alpha.iter().map(|a| ln_gamma(*a)).sum::<f64>()
        + alpha.iter().map(|a| (a - 1.0) * (digamma(*a) - psi_s)).sum::<f64>()
}

/// Evidential loss as a function of the Dirichlet parameters, with its
/// gradient with respect to α:
/// ψ(S) − ψ(α_y) + anneal·KL(Dir(α̃) ‖ Dir(1)), α̃ = y + (1 − y) ⊙ α.
pub fn evidential_from_alpha(alpha: &[f64], y: usize, anneal: f64) -> Result<(f64, Vec<f64>)> {
    check_label(y, alpha.len())?;
    if !(anneal >= 0.0) {
        return Err(Error::Domain(format!("anneal weight must be nonnegative, got {anneal}")));
    }
    let k = alpha.len() as f64;
    let s: f64 = alpha.iter().sum();
    let fit = digamma(s) - digamma(alpha[y]);
    let tri_s = trigamma(s);
    let mut grad: Vec<f64> = vec![tri_s; alpha.len()];
    grad[y] -= trigamma(alpha[y]);
    if anneal == 0.0 {
        return Ok((fit, grad));
    }
    let mut tilde = alpha.to_vec();
    tilde[y] = 1.0;
    let kl = dirichlet_kl_to_flat(&tilde);
    let s_tilde: f64 = tilde.iter().sum();
    let tri_s_tilde = trigamma(s_tilde);
    // ∂KL/∂α̃_j = (α̃_j − 1)ψ′(α̃_j) − (S̃ − K)ψ′(S̃); α̃_y is constant.
    for (j, g) in grad.iter_mut().enumerate() {
        if j != y {
            *g += anneal * ((tilde[j] - 1.0) * trigamma(tilde[j]) - (s_tilde - k) * tri_s_tilde);
        }
    }
    Ok((fit + anneal * kl, grad))
}

pub fn evidential_loss(logits: &[f64], y: usize, anneal: f64) -> Result<LossOut> {
    log_softmax(logits)?;
    let alpha = evidence_alpha(logits);
    let (value, d_alpha) = evidential_from_alpha(&alpha, y, anneal)?;
    let grad = logits
        .iter()
        .zip(&alpha)
        .zip(&d_alpha)
        .map(|((z, a), g)| {
            if z.abs() <= EVIDENCE_CLAMP {
                g * (a - 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossOut {
        value,
        grad_logits: grad,
    })
}

/// δ·CE + (1 − δ)·β·KL(p ‖ uniform) for δ ∈ {0, 1}. The regularizer ignores
/// the label.
pub fn dreg_per_sample(logits: &[f64], y: usize, delta: u8, beta: f64) -> Result<LossOut> {
    match delta {
        1 => cross_entropy(logits, y),
        0 => {
            check_label(y, logits.len())?;
            Ok(kl_to_uniform_loss(logits)?.scaled(beta))
        }
        other => Err(Error::Domain(format!("delta must be 0 or 1, got {other}"))),
    }
}
