//! Dual-branch action guidance.
//!
//! Discrete mixing happens in log-probability space: the mixed log-weights
//! are `log p_uncond + omega * (log p_cond - log p_uncond)`, equivalently the
//! geometric mixture `p_uncond^(1-omega) * p_cond^omega / Z`. Raw linear
//! extrapolation is preserved for continuous action vectors, where it is
//! well-defined for every omega. [`bayesian_oracle`] recomputes the same
//! distribution by brute force from an explicit joint table and serves as the
//! independent check on the log-space path.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{LikelihoodTable, PolicyParams};
use crate::seeding::rng_from;
use crate::sim::ActionId;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("branch vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("non-finite input to guidance mixing")]
    NonFiniteInput,
    #[error("guidance scale must be finite and non-negative, got {0}")]
    InvalidOmega(f64),
    #[error("instruction has zero probability under the table")]
    ZeroProbabilityInstruction,
    #[error("guidance configuration inconsistent: {0}")]
    ConfigInconsistency(String),
}

// ---------------------------------------------------------------------------
// Math helpers
// ---------------------------------------------------------------------------

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logsum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - logsum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the largest entry; ties break toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (ix, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = ix;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How the two branches are wired together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// Conditional policy alone; omega is ignored.
    Baseline,
    /// Training-free: one policy serves both branches, the unconditioned one
    /// fed the null instruction.
    Tf,
    /// Separate vision-action model as the unconditioned branch.
    Va,
    /// Dropout-trained policy serving both branches, wired like `Tf`.
    DropoutShared,
}

impl Wiring {
    pub const ALL: [Wiring; 4] = [Wiring::Baseline, Wiring::Tf, Wiring::Va, Wiring::DropoutShared];

    pub fn as_str(self) -> &'static str {
        match self {
            Wiring::Baseline => "baseline",
            Wiring::Tf => "tf",
            Wiring::Va => "va",
            Wiring::DropoutShared => "dropout_shared",
        }
    }
}

impl std::fmt::Display for Wiring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Space the two branches are mixed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingSpace {
    Logit,
    ActionVector,
}

impl MixingSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            MixingSpace::Logit => "logit",
            MixingSpace::ActionVector => "action_vector",
        }
    }
}

impl std::fmt::Display for MixingSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything inference needs: scale, space, wiring, and the branch weights.
#[derive(Clone)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub space: MixingSpace,
    pub wiring: Wiring,
    pub cond: Arc<PolicyParams>,
    pub uncond: Option<Arc<PolicyParams>>,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if !self.omega.is_finite() || self.omega < 0.0 {
            return Err(GuidanceError::InvalidOmega(self.omega));
        }
        match self.wiring {
            Wiring::Baseline => {
                if self.uncond.is_some() {
                    return Err(GuidanceError::ConfigInconsistency(
                        "baseline wiring takes no unconditioned branch".into(),
                    ));
                }
            }
            Wiring::Tf | Wiring::DropoutShared => {
                if let Some(uncond) = &self.uncond {
                    if !Arc::ptr_eq(&self.cond, uncond) {
                        return Err(GuidanceError::ConfigInconsistency(
                            "tf/dropout_shared wiring requires both branches to share parameters"
                                .into(),
                        ));
                    }
                }
            }
            Wiring::Va => {
                let Some(uncond) = &self.uncond else {
                    return Err(GuidanceError::ConfigInconsistency(
                        "va wiring requires an unconditioned branch".into(),
                    ));
                };
                if uncond.conditioned {
                    return Err(GuidanceError::ConfigInconsistency(
                        "va branch must be an unconditioned policy".into(),
                    ));
                }
                if uncond.obs_dim != self.cond.obs_dim {
                    return Err(GuidanceError::ConfigInconsistency(
                        "branch observation dimensions differ".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

/// Provenance of a mixed distribution, kept for result rows and debugging.
#[derive(Debug, Clone, PartialEq)]
pub struct MixProvenance {
    pub omega: f64,
    pub space: MixingSpace,
    pub logits_cond: Vec<f64>,
    pub logits_uncond: Option<Vec<f64>>,
}

/// A probability vector over the discrete actions plus how it was formed.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedDistribution {
    pub probs: Vec<f64>,
    /// Log-space mixture before normalization. At omega = 1 this is exactly
    /// the conditional branch's log-softmax; at omega = 0 the unconditional's.
    pub mixed_logits: Vec<f64>,
    pub provenance: MixProvenance,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), GuidanceError> {
    if a.len() != b.len() {
        return Err(GuidanceError::LengthMismatch(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(GuidanceError::NonFiniteInput);
    }
    Ok(())
}

/// Log-space guidance over two branch logit vectors.
pub fn cag_mix_logits(
    logits_cond: &[f64],
    logits_uncond: &[f64],
    omega: f64,
) -> Result<MixedDistribution, GuidanceError> {
    check_pair(logits_cond, logits_uncond)?;
    if !omega.is_finite() || omega < 0.0 {
        return Err(GuidanceError::InvalidOmega(omega));
    }
    let lc = log_softmax(logits_cond);
    let lu = log_softmax(logits_uncond);
    // Endpoints reproduce the branches bit-for-bit.
    let (mixed_logits, probs) = if omega == 1.0 {
        (lc.clone(), softmax(logits_cond))
    } else if omega == 0.0 {
        (lu.clone(), softmax(logits_uncond))
    } else {
        let mixed: Vec<f64> = lu
            .iter()
            .zip(&lc)
            .map(|(u, c)| u + omega * (c - u))
            .collect();
        let probs = softmax(&mixed);
        (mixed, probs)
    };
    Ok(MixedDistribution {
        probs,
        mixed_logits,
        provenance: MixProvenance {
            omega,
            space: MixingSpace::Logit,
            logits_cond: logits_cond.to_vec(),
            logits_uncond: Some(logits_uncond.to_vec()),
        },
    })
}

/// Wrap a single branch's logits as a distribution (baseline wiring).
pub fn baseline_distribution(logits_cond: &[f64], omega: f64) -> MixedDistribution {
    MixedDistribution {
        probs: softmax(logits_cond),
        mixed_logits: log_softmax(logits_cond),
        provenance: MixProvenance {
            omega,
            space: MixingSpace::Logit,
            logits_cond: logits_cond.to_vec(),
            logits_uncond: None,
        },
    }
}

/// Linear extrapolation of continuous action vectors; no renormalization.
pub fn cag_mix_action_vectors(
    a_cond: &[f64],
    a_uncond: &[f64],
    omega: f64,
) -> Result<Vec<f64>, GuidanceError> {
    check_pair(a_cond, a_uncond)?;
    Ok(a_uncond
        .iter()
        .zip(a_cond)
        .map(|(u, c)| u + omega * (c - u))
        .collect())
}

/// Brute-force reweighting `P(a|o) * P(l|a,o)^omega / Z` from the joint
/// table. Independent of the log-space mixing path; used as its oracle.
pub fn bayesian_oracle(
    table: &LikelihoodTable,
    instruction: usize,
    omega: f64,
) -> Result<Vec<f64>, GuidanceError> {
    if instruction >= table.n_instructions() {
        return Err(GuidanceError::ConfigInconsistency(format!(
            "instruction index {instruction} out of range"
        )));
    }
    if table.instruction_marginal(instruction) <= 0.0 {
        return Err(GuidanceError::ZeroProbabilityInstruction);
    }
    let prior = table.prior();
    let mut weights = vec![0.0; table.n_actions()];
    for (a, w) in weights.iter_mut().enumerate() {
        if prior[a] > 0.0 {
            let likelihood = table.joint[a][instruction] / prior[a];
            *w = prior[a] * likelihood.powf(omega);
        }
    }
    let z: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / z).collect())
}

// ---------------------------------------------------------------------------
// Action selection
// ---------------------------------------------------------------------------

/// Action selection rule; `Sample` owns its stream for reproducibility.
pub enum Selector {
    Argmax,
    Sample(ChaCha8Rng),
}

impl Selector {
    pub fn sample_with_seed(seed: u64) -> Selector {
        Selector::Sample(rng_from(seed))
    }
}

/// Pick an action from the mixed distribution. Argmax breaks ties toward the
/// lowest index; sampling inverts the CDF with the selector's own stream.
pub fn select_action(dist: &MixedDistribution, selector: &mut Selector) -> ActionId {
    let ix = match selector {
        Selector::Argmax => argmax(&dist.probs),
        Selector::Sample(rng) => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = dist.probs.len() - 1;
            for (ix, p) in dist.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = ix;
                    break;
                }
            }
            chosen
        }
    };
    ActionId::from_index(ix).expect("distribution over the action set")
}
