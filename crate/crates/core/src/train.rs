//! The corrupt → forward → loss → update loop.
//!
//! Flat schedules (and any schedule when `efficient` is off) train on one
//! random step per sequence using the inference layout. Block, Slide and
//! Quench schedules otherwise use the efficient layout: every clean slot is
//! trained causally and several non-overlapping active intervals, each
//! corrupted at its own random step, are denoised in the same pass.

use crate::denoiser::{DenoiserParams, EmbedWeighting, Optimizer, OptimizerKind, SlotInput, WeightedTarget};
use crate::error::{invalid, Error, Result};
use crate::hyperschedule::{partition_at, Hyperschedule, Kind, Partition};
use crate::loss::{active_weights, position_reweight, LossSpec, LossVariant, LossWeights};
use crate::masks::{inference_layout, training_layout, Layout, TrainKind};
use crate::process::{
    corrupt_epsilon, corrupt_gamma, gamma_mask_prob, CumulativeNoiseSchedule, EpsilonProcess, Flag,
};
use crate::rng::RngStream;
use crate::vocab::{Sequence, Vocab};

/// The forward process used to corrupt training data.
#[derive(Clone, Debug, PartialEq)]
pub enum Process {
    Gamma {
        gamma: f64,
        sigma: CumulativeNoiseSchedule,
    },
    Epsilon(EpsilonProcess),
}

impl Process {
    pub fn levels(&self) -> u32 {
        match self {
            Process::Gamma { sigma, .. } => sigma.levels(),
            Process::Epsilon(p) => p.alpha.levels(),
        }
    }

    pub fn variant(&self) -> LossVariant {
        match self {
            Process::Gamma { gamma, .. } => LossVariant::GammaSurrogate { gamma: *gamma },
            Process::Epsilon(p) => LossVariant::EpsilonHdce { epsilon: p.epsilon },
        }
    }

    /// Embedding weighting for γ processes; `None` for ε.
    pub fn weighting(&self) -> Option<EmbedWeighting<'_>> {
        match self {
            Process::Gamma { gamma, sigma } => Some(EmbedWeighting {
                sigma,
                gamma: *gamma,
            }),
            Process::Epsilon(_) => None,
        }
    }

    /// Corrupts `seq` to row `t`; returns tokens, flags, mask probabilities
    /// and elapsed noise per position.
    #[allow(clippy::type_complexity)]
    pub fn corrupt(
        &self,
        seq: &Sequence,
        vocab: &Vocab,
        hs: &Hyperschedule,
        t: usize,
        rng: &RngStream,
    ) -> Result<(Vec<usize>, Vec<Flag>, Vec<f64>, Vec<f64>)> {
        let d = seq.len();
        match self {
            Process::Gamma { gamma, sigma } => {
                let noisy = corrupt_gamma(seq, vocab, hs, t, sigma, *gamma, rng)?;
                let delta: Vec<f64> = (0..d).map(|i| sigma.at(hs.tau(t, i)) - sigma.at(0)).collect();
                let p_mask = delta.iter().map(|&dl| gamma_mask_prob(*gamma, dl)).collect();
                let flags = (0..d)
                    .map(|i| {
                        let y = noisy.tokens()[i];
                        if vocab.is_mask(y) {
                            Flag::Masked
                        } else if y != seq.tokens()[i] {
                            Flag::Shuffled
                        } else {
                            Flag::Unchanged
                        }
                    })
                    .collect();
                Ok((noisy.0, flags, p_mask, delta))
            }
            Process::Epsilon(p) => {
                let (noisy, flags) = corrupt_epsilon(seq, vocab, hs, t, p, rng)?;
                let p_mask = (0..d).map(|i| p.mask_prob(hs.tau(t, i))).collect();
                Ok((noisy.0, flags, p_mask, vec![0.0; d]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Ignored by Adam.
    pub momentum: f64,
    pub clip: Option<f64>,
    pub loss: LossWeights,
    /// Use the efficient interval layout for windowed schedules.
    pub efficient: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        self.loss.validate()?;
        Optimizer::new(self.optimizer, self.lr, self.momentum, self.clip).map(|_| ())
    }
}

/// Loss components averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub ce_settled: f64,
    pub active_term: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// A ready-to-run training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub layout: Layout,
    pub input: SlotInput,
    pub targets: Vec<WeightedTarget>,
    /// Which slots belong to the settled (causal) term.
    pub settled_slot: Vec<bool>,
}

fn interval_steps(hs: &Hyperschedule, rng: &mut RngStream) -> Result<Vec<(usize, Partition)>> {
    let mut cands = Vec::new();
    for t in 0..hs.steps() {
        let p = partition_at(hs, t)?;
        if p.a > 0 {
            cands.push((t, p));
        }
    }
    let omega = hs.omega();
    let mut out = Vec::new();
    let mut cutoff = 0;
    loop {
        let ahead: Vec<&(usize, Partition)> = cands.iter().filter(|(_, p)| p.s >= cutoff).collect();
        let Some(first) = ahead.iter().map(|(_, p)| p.s).min() else {
            break;
        };
        let near: Vec<&&(usize, Partition)> = ahead.iter().filter(|(_, p)| p.s < first.max(cutoff) + omega).collect();
        let &&(t, p) = near[rng.below(near.len())];
        out.push((t, p));
        cutoff = p.s + p.a;
    }
    Ok(out)
}

/// Builds the training example for clean sequence `seq`.
pub fn make_example(
    seq: &Sequence,
    vocab: &Vocab,
    hs: &Hyperschedule,
    process: &Process,
    weights: &LossWeights,
    efficient: bool,
    wiring: crate::masks::Wiring,
    rng: &RngStream,
) -> Result<Example> {
    let d = hs.d();
    let clean = seq.tokens();
    let bos = vocab.bos_id();
    let mut pick = rng.derive(&[u64::MAX]);
    let kind = match hs.kind() {
        Kind::Block { .. } => Some(TrainKind::Block),
        Kind::Slide { .. } | Kind::Quench => Some(TrainKind::Slide),
        Kind::Flat | Kind::Custom => None,
    };
    match kind {
        Some(tk) if efficient => {
            let steps = interval_steps(hs, &mut pick)?;
            let starts: Vec<usize> = steps.iter().map(|(_, p)| p.s).collect();
            let layout = training_layout(wiring, tk, d, hs.omega(), &starts)?;
            let mut noisy = vec![vocab.mask_id(); d];
            let mut levels = vec![0u32; d];
            let mut targets = vec![WeightedTarget::IGNORE; layout.len()];
            let mut settled_slot = vec![false; layout.len()];
            for (k, slot) in layout.slots.iter().enumerate().take(d) {
                targets[k] = WeightedTarget {
                    token: clean[slot.target],
                    weight: weights.beta1 / d as f64,
                };
                settled_slot[k] = true;
            }
            // noisy slots come in the order of `steps`; each interval reads
            // its own corruption, so build inputs group by group
            let mut tokens = layout.inputs(clean, &noisy, bos);
            let mut in_levels = layout.input_levels(&levels);
            let mut slot = d;
            for (g, &(t, part)) in steps.iter().enumerate() {
                let (ny, flags, p_mask, delta) = process.corrupt(seq, vocab, hs, t, &rng.derive(&[g as u64]))?;
                noisy.copy_from_slice(&ny);
                levels.copy_from_slice(hs.row(t));
                let spec = LossSpec {
                    weights: *weights,
                    partition: part,
                    flags: &flags,
                    p_mask: &p_mask,
                    delta: &delta,
                    targets: clean,
                    settled_weights: None,
                    vocab: vocab.size(),
                };
                let aw = active_weights(&spec)?;
                let group_tokens = layout.inputs(clean, &noisy, bos);
                let group_levels = layout.input_levels(&levels);
                for _ in part.active() {
                    let target = layout.slots[slot].target;
                    tokens[slot] = group_tokens[slot];
                    in_levels[slot] = group_levels[slot];
                    targets[slot] = WeightedTarget {
                        token: clean[target],
                        weight: weights.beta2 * aw[target] / d as f64,
                    };
                    slot += 1;
                }
            }
            Ok(Example {
                input: SlotInput {
                    tokens,
                    positions: layout.positions(),
                    levels: in_levels,
                },
                layout,
                targets,
                settled_slot,
            })
        }
        _ => {
            let t = pick.below(hs.steps());
            let part = partition_at(hs, t)?;
            let (noisy, flags, p_mask, delta) = process.corrupt(seq, vocab, hs, t, &rng.derive(&[0]))?;
            let reweight = match hs.kind() {
                Kind::Flat | Kind::Custom => None,
                _ => Some(position_reweight(d, hs.omega())?),
            };
            let spec = LossSpec {
                weights: *weights,
                partition: part,
                flags: &flags,
                p_mask: &p_mask,
                delta: &delta,
                targets: clean,
                settled_weights: reweight.as_deref(),
                vocab: vocab.size(),
            };
            let aw = active_weights(&spec)?;
            let layout = inference_layout(wiring, &part);
            let input = SlotInput::from_layout(&layout, clean, &noisy, hs.row(t), bos);
            let mut targets = Vec::with_capacity(layout.len());
            let mut settled_slot = Vec::with_capacity(layout.len());
            for slot in &layout.slots {
                let p = slot.target;
                let w = if p < part.s {
                    weights.beta1 * reweight.as_ref().map_or(1.0, |r| r[p]) / part.s as f64
                } else {
                    weights.beta2 * aw[p] / d as f64
                };
                targets.push(WeightedTarget {
                    token: clean[p],
                    weight: w,
                });
                settled_slot.push(p < part.s);
            }
            Ok(Example {
                layout,
                input,
                targets,
                settled_slot,
            })
        }
    }
}

/// Runs `cfg.steps` updates on `params`. Batches are drawn uniformly with
/// replacement from `corpus`. `on_step` sees every step's log and the
/// updated parameters.
pub fn train(
    params: &mut DenoiserParams,
    corpus: &[Sequence],
    hs: &Hyperschedule,
    process: &Process,
    cfg: &TrainConfig,
    rng: &RngStream,
    mut on_step: impl FnMut(&StepLog, &DenoiserParams),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(invalid("corpus", "empty corpus"));
    }
    if process.levels() != hs.levels() || params.config.levels != hs.levels() {
        return Err(invalid("levels", "process, schedule and model must share noise levels"));
    }
    if hs.d() > params.config.d_max {
        return Err(invalid("d", "sequence length exceeds the model's d_max"));
    }
    let vocab = Vocab::new(params.config.vocab)?;
    let wiring = params.config.wiring;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.momentum, cfg.clip)?;
    let mut logs = Vec::with_capacity(cfg.steps);
    let mut grads = params.zeros_like();
    for step in 0..cfg.steps {
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut log = StepLog {
            step,
            ..Default::default()
        };
        let mut batch_rng = rng.derive(&[step as u64]);
        for b in 0..cfg.batch_size {
            let seq = &corpus[batch_rng.below(corpus.len())];
            let ex_rng = rng.derive(&[step as u64, b as u64]);
            let ex = make_example(seq, &vocab, hs, process, &cfg.loss, cfg.efficient, wiring, &ex_rng)?;
            let (loss, nll) = params
                .loss_grads_nll(&ex.input, &ex.layout.mask, process.weighting(), &ex.targets, &mut grads)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFinite { batch: b },
                    e => e,
                })?;
            for (k, t) in ex.targets.iter().enumerate() {
                let term = t.weight * nll[k];
                if ex.settled_slot[k] {
                    log.ce_settled += term;
                } else {
                    log.active_term += term;
                }
            }
            log.total += loss;
        }
        let scale = 1.0 / cfg.batch_size as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        log.total *= scale;
        // report the unscaled components, matching the loss module
        log.ce_settled *= scale / cfg.loss.beta1.max(f64::MIN_POSITIVE);
        log.active_term *= scale / cfg.loss.beta2.max(f64::MIN_POSITIVE);
        if cfg.loss.beta1 == 0.0 {
            log.ce_settled = 0.0;
        }
        if cfg.loss.beta2 == 0.0 {
            log.active_term = 0.0;
        }
        if !log.total.is_finite() {
            return Err(Error::NonFinite { batch: 0 });
        }
        log.grad_norm = opt.step(&mut params.data, &grads);
        on_step(&log, params);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_markov_source, sample_corpus};
    use crate::denoiser::DenoiserConfig;
    use crate::hyperschedule::build;
    use crate::masks::Wiring;
    use crate::process::linear_alpha;

    fn weights() -> LossWeights {
        LossWeights {
            beta1: 1.0,
            beta2: 1.0,
            lambda: 1.0,
            variant: LossVariant::EpsilonHdce { epsilon: 0.05 },
        }
    }

    #[test]
    fn efficient_intervals_do_not_overlap() {
        let hs = build(Kind::Slide { omega: 4 }, 16, 4, 1, 1).unwrap();
        for seed in 0..20 {
            let steps = interval_steps(&hs, &mut RngStream::new(seed, 0)).unwrap();
            for w in steps.windows(2) {
                assert!(w[1].1.s >= w[0].1.s + w[0].1.a);
            }
        }
    }

    #[test]
    fn overfit_small_batch() {
        let mut rng = RngStream::new(1, 0);
        let src = make_markov_source(4, 0.5, &mut rng).unwrap();
        let data = sample_corpus(&src, 4, 8, &mut rng).unwrap();
        let hs = build(Kind::Block { omega: 4 }, 8, 4, 1, 1).unwrap();
        let process = Process::Epsilon(EpsilonProcess::new(0.05, linear_alpha(4).unwrap()).unwrap());
        let mut cfg = DenoiserConfig::desk(5, Wiring::Shifted, 4);
        cfg.dim = 16;
        cfg.heads = 2;
        cfg.d_max = 8;
        let mut params = DenoiserParams::init(cfg, &mut rng).unwrap();
        let tc = TrainConfig {
            steps: 60,
            optimizer: OptimizerKind::Sgd,
            batch_size: 4,
            lr: 0.05,
            momentum: 0.9,
            clip: Some(1.0),
            loss: weights(),
            efficient: true,
        };
        let logs = train(&mut params, &data, &hs, &process, &tc, &RngStream::new(2, 0), |_, _| {}).unwrap();
        let first: f64 = logs[..5].iter().map(|l| l.total).sum();
        let last: f64 = logs[logs.len() - 5..].iter().map(|l| l.total).sum();
        assert!(last < first, "{first} -> {last}");
    }
}
