//! Settled cross-entropy, HDCE weights and the combined training objective.
//!
//! Logits are position-indexed: row `p` of a `rows × vocab` buffer is the
//! prediction for position `p`. Layouts already absorb the Shifted wiring's
//! one-slot offset, so no further shifting happens here.

use crate::denoiser::log_softmax;
use crate::error::{invalid, Error, Result};
use crate::hyperschedule::Partition;
use crate::process::Flag;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossVariant {
    /// Weighted cross-entropy stand-in for γ-hybrid training.
    GammaSurrogate { gamma: f64 },
    EpsilonHdce { epsilon: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub variant: LossVariant,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0 && self.beta2 >= 0.0) {
            return Err(invalid("beta", "beta1 and beta2 must be non-negative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid("lambda", "must be non-negative"));
        }
        Ok(())
    }
}

/// Everything needed to score one sequence.
#[derive(Clone, Copy, Debug)]
pub struct LossSpec<'a> {
    pub weights: LossWeights,
    pub partition: Partition,
    pub flags: &'a [Flag],
    /// Per-position probability that the token was masked.
    pub p_mask: &'a [f64],
    /// Per-position elapsed noise `Δ`; read only by the γ surrogate.
    pub delta: &'a [f64],
    pub targets: &'a [usize],
    /// Optional per-position multipliers on the settled cross-entropy.
    pub settled_weights: Option<&'a [f64]>,
    /// `|X|`, needed by the γ surrogate's substitution probability.
    pub vocab: usize,
}

/// Per-position HDCE weights for ε-hybrid training.
pub fn hdce_weights(flags: &[Flag], p_mask: &[f64], lambda: f64, epsilon: f64) -> Result<Vec<f64>> {
    if flags.len() != p_mask.len() {
        return Err(Error::Dimension {
            context: "flags vs p_mask",
            expected: flags.len(),
            got: p_mask.len(),
        });
    }
    flags
        .iter()
        .zip(p_mask)
        .enumerate()
        .map(|(i, (&f, &p))| match f {
            Flag::Masked if p > 0.0 => Ok(1.0 / p),
            Flag::Masked => Err(Error::ZeroProbability {
                position: i,
                reason: "masked token with zero mask probability",
            }),
            _ if p >= 1.0 => Err(Error::ZeroProbability {
                position: i,
                reason: "unmasked token with mask probability one",
            }),
            Flag::Shuffled => Ok(lambda * (1.0 - epsilon) / (1.0 - p)),
            Flag::Unchanged => Ok(lambda * epsilon / (1.0 - p)),
        })
        .collect()
}

/// γ-hybrid surrogate weights: `1/p_mask` on masked tokens and
/// `λ·P(substituted | unmasked)/(1 − p_mask)` on the rest, with
/// `P(substituted | unmasked) = (1 − e^{−γΔ})(n − 2)/(n − 1)`.
pub fn gamma_surrogate_weights(
    flags: &[Flag],
    delta: &[f64],
    gamma: f64,
    lambda: f64,
    vocab: usize,
) -> Result<Vec<f64>> {
    if flags.len() != delta.len() {
        return Err(Error::Dimension {
            context: "flags vs delta",
            expected: flags.len(),
            got: delta.len(),
        });
    }
    let frac = (vocab as f64 - 2.0) / (vocab as f64 - 1.0);
    flags
        .iter()
        .zip(delta)
        .enumerate()
        .map(|(i, (&f, &dl))| {
            let p = crate::process::gamma_mask_prob(gamma, dl);
            match f {
                Flag::Masked if p > 0.0 => Ok(1.0 / p),
                Flag::Masked => Err(Error::ZeroProbability {
                    position: i,
                    reason: "masked token with zero mask probability",
                }),
                _ if p >= 1.0 => Err(Error::ZeroProbability {
                    position: i,
                    reason: "unmasked token with mask probability one",
                }),
                _ => Ok(lambda * (1.0 - (-gamma * dl).exp()) * frac / (1.0 - p)),
            }
        })
        .collect()
}

fn nll(logits: &[f64], vocab: usize, row: usize, target: usize) -> f64 {
    -log_softmax(&logits[row * vocab..(row + 1) * vocab])[target]
}

/// `(1/n) Σ_i w_i · (−log p(target_i))` over `n = targets.len()` tokens.
pub fn hdce_loss(logits: &[f64], vocab: usize, targets: &[usize], weights: &[f64]) -> f64 {
    let n = targets.len();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = (0..n)
        .filter(|&i| weights[i] != 0.0)
        .map(|i| weights[i] * nll(logits, vocab, i, targets[i]))
        .sum();
    s / n as f64
}

/// Mean NLL over the settled positions; 0 when none are settled.
pub fn settled_ce(logits: &[f64], vocab: usize, targets: &[usize], part: &Partition) -> f64 {
    weighted_settled_ce(logits, vocab, targets, part, None)
}

fn weighted_settled_ce(
    logits: &[f64],
    vocab: usize,
    targets: &[usize],
    part: &Partition,
    weights: Option<&[f64]>,
) -> f64 {
    if part.s == 0 {
        return 0.0;
    }
    let s: f64 = part
        .settled()
        .map(|i| weights.map_or(1.0, |w| w[i]) * nll(logits, vocab, i, targets[i]))
        .sum();
    s / part.s as f64
}

/// `w(i) = ⌊i/ω⌋ / (⌈d/ω⌉ − 1)`, or all ones for a single block.
pub fn position_reweight(d: usize, omega: usize) -> Result<Vec<f64>> {
    if omega == 0 || omega > d {
        return Err(invalid("omega", format!("need 1 <= omega <= d, got {omega}")));
    }
    let blocks = d.div_ceil(omega);
    if blocks == 1 {
        return Ok(vec![1.0; d]);
    }
    Ok((0..d).map(|i| (i / omega) as f64 / (blocks - 1) as f64).collect())
}

/// Weights on the active positions (zero elsewhere) for `spec`.
pub fn active_weights(spec: &LossSpec<'_>) -> Result<Vec<f64>> {
    let d = spec.targets.len();
    let mut w = vec![0.0; d];
    let r = spec.partition.active();
    let aw = match spec.weights.variant {
        LossVariant::EpsilonHdce { epsilon } => hdce_weights(
            &spec.flags[r.clone()],
            &spec.p_mask[r.clone()],
            spec.weights.lambda,
            epsilon,
        ),
        LossVariant::GammaSurrogate { gamma } => gamma_surrogate_weights(
            &spec.flags[r.clone()],
            &spec.delta[r.clone()],
            gamma,
            spec.weights.lambda,
            spec.vocab,
        ),
    }
    .map_err(|e| match e {
        Error::ZeroProbability { position, reason } => Error::ZeroProbability {
            position: position + r.start,
            reason,
        },
        e => e,
    })?;
    w[r].copy_from_slice(&aw);
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub ce_settled: f64,
    pub active_term: f64,
    pub total: f64,
}

/// `β₁·CE(settled) + β₂·HDCE(active)` for one sequence.
pub fn combined_loss(logits: &[f64], spec: &LossSpec<'_>) -> Result<LossTerms> {
    spec.weights.validate()?;
    let d = spec.targets.len();
    if logits.len() != d * spec.vocab {
        return Err(Error::Dimension {
            context: "logits rows",
            expected: d * spec.vocab,
            got: logits.len(),
        });
    }
    let ce_settled = weighted_settled_ce(logits, spec.vocab, spec.targets, &spec.partition, spec.settled_weights);
    let w = active_weights(spec)?;
    let active_term = hdce_loss(logits, spec.vocab, spec.targets, &w);
    Ok(LossTerms {
        ce_settled,
        active_term,
        total: spec.weights.beta1 * ce_settled + spec.weights.beta2 * active_term,
    })
}
