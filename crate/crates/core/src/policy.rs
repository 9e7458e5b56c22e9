//! Guidance-confidence decision logic: early exit, the confidence-to-drop
//! mapping `r = min(r_max, r_max·(c/τ)^γ)`, and the kept-token count
//! `K = max(1, ⌊(1−r)·T⌋)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decision parameters. τ is the exit threshold, γ the curvature of the
/// confidence-to-drop mapping, r_max the maximum drop ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyParams {
    pub tau: f64,
    pub gamma: f64,
    pub r_max: f64,
}

impl PolicyParams {
    pub fn new(tau: f64, gamma: f64, r_max: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Argument(format!("tau must be in (0,1), got {tau}")));
        }
        if !(gamma > 0.0) {
            return Err(Error::Argument(format!("gamma must be > 0, got {gamma}")));
        }
        if !(0.0..1.0).contains(&r_max) {
            return Err(Error::Argument(format!("r_max must be in [0,1), got {r_max}")));
        }
        Ok(Self { tau, gamma, r_max })
    }
}

/// Outcome of the guidance stage for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExitDecision {
    /// Confidence cleared the threshold; the guidance prediction is final.
    Exit { class_index: usize, confidence: f64 },
    /// Deferred to the target model with the computed token budget.
    Proceed {
        confidence: f64,
        drop_ratio: f64,
        kept_count: usize,
    },
}

impl ExitDecision {
    pub fn exited(&self) -> bool {
        matches!(self, ExitDecision::Exit { .. })
    }
}

/// Raw exit check before the drop budget is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EarlyExit {
    Exit { class_index: usize, confidence: f64 },
    Proceed { confidence: f64 },
}

/// Exit iff max(probs) strictly exceeds τ. `probs` must be a probability
/// vector; a sum off by more than 1e-6 is a contract violation.
pub fn early_exit(probs: &Tensor, tau: f64) -> Result<EarlyExit> {
    let sum: f64 = probs.data().iter().sum();
    if (sum - 1.0).abs() > 1e-6 || probs.data().iter().any(|&p| p < 0.0) {
        return Err(Error::Contract(format!(
            "probabilities must sum to 1 (got {sum:.9}) with non-negative entries"
        )));
    }
    let (class_index, confidence) = probs
        .data()
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("NaN probability"))
        .map(|(i, &p)| (i, p))
        .ok_or_else(|| Error::Contract("empty probability vector".into()))?;
    if confidence > tau {
        Ok(EarlyExit::Exit {
            class_index,
            confidence,
        })
    } else {
        Ok(EarlyExit::Proceed { confidence })
    }
}

/// Map confidence to a drop ratio in [0, r_max]. Confidence is clamped into
/// [0, τ] first, so stray floating-point inputs cannot push past the cap.
pub fn drop_ratio(confidence: f64, params: &PolicyParams) -> f64 {
    let c = confidence.clamp(0.0, params.tau);
    let r = params.r_max * (c / params.tau).powf(params.gamma);
    r.min(params.r_max)
}

/// Patch tokens retained at drop ratio `r`; always at least one.
pub fn kept_count(r: f64, total: usize) -> usize {
    let r = r.clamp(0.0, 1.0);
    let k = ((1.0 - r) * total as f64).floor() as usize;
    k.max(1)
}

/// Full guidance decision for one probability vector over `total` patch tokens.
pub fn decide(probs: &Tensor, params: &PolicyParams, total: usize) -> Result<ExitDecision> {
    match early_exit(probs, params.tau)? {
        EarlyExit::Exit {
            class_index,
            confidence,
        } => Ok(ExitDecision::Exit {
            class_index,
            confidence,
        }),
        EarlyExit::Proceed { confidence } => {
            let r = drop_ratio(confidence, params);
            Ok(ExitDecision::Proceed {
                confidence,
                drop_ratio: r,
                kept_count: kept_count(r, total),
            })
        }
    }
}
