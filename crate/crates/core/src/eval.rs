//! Monte-Carlo perplexity bound, judge perplexity and token entropy.

use std::collections::HashMap;

use crate::denoiser::{log_softmax, DenoiserParams, EmbedWeighting, SlotInput};
use crate::error::{invalid, Result};
use crate::hyperschedule::{Hyperschedule, Kind, Partition};
use crate::masks::inference_layout;
use crate::ngram::NgramJudge;
use crate::rng::RngStream;
use crate::vocab::{Sequence, Vocab};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PplEstimate {
    /// Nats per token.
    pub per_token_nll: f64,
    pub ppl: f64,
    pub mc_samples: usize,
    pub token_count: usize,
    /// Standard error of `per_token_nll` across Monte-Carlo draws.
    pub std_err: f64,
}

impl PplEstimate {
    fn new(per_token_nll: f64, mc_samples: usize, token_count: usize, std_err: f64) -> Self {
        Self {
            per_token_nll,
            ppl: per_token_nll.exp(),
            mc_samples,
            token_count,
            std_err,
        }
    }
}

/// Windows the sequence is split into for evaluation: the whole sequence for
/// Flat, width-1 windows for Quench, consecutive width-ω windows otherwise.
pub fn eval_windows(hs: &Hyperschedule) -> Vec<std::ops::Range<usize>> {
    let d = hs.d();
    let w = match hs.kind() {
        Kind::Flat => d,
        Kind::Quench => 1,
        _ => hs.omega().max(1),
    };
    (0..d).step_by(w).map(|s| s..(s + w).min(d)).collect()
}

/// Any-order autoregressive bound on the per-token NLL.
///
/// For each sequence and each of the `m` draws, every window `W` (prefix
/// clean, suffix dropped) gets `k ~ U{1..|W|}` uniformly chosen positions
/// masked; the draw scores `Σ_W (|W|/k) Σ_masked −log p / d`. Its
/// expectation upper-bounds the model's NLL per token.
pub fn mc_ppl(
    params: &DenoiserParams,
    dataset: &[Sequence],
    hs: &Hyperschedule,
    m: usize,
    weighting: Option<EmbedWeighting<'_>>,
    rng: &RngStream,
) -> Result<PplEstimate> {
    if dataset.is_empty() {
        return Err(invalid("dataset", "empty dataset"));
    }
    if m == 0 {
        return Err(invalid("mc_samples", "need at least one draw"));
    }
    let cfg = &params.config;
    let vocab = Vocab::new(cfg.vocab)?;
    let d = hs.d();
    let levels = cfg.levels;
    let windows = eval_windows(hs);
    let mut draws = Vec::with_capacity(dataset.len() * m);
    for (n, seq) in dataset.iter().enumerate() {
        seq.validate(&vocab, false)?;
        if seq.len() != d {
            return Err(crate::Error::Dimension {
                context: "evaluation sequence",
                expected: d,
                got: seq.len(),
            });
        }
        let clean = seq.tokens();
        for j in 0..m {
            let mut r = rng.derive(&[n as u64, j as u64]);
            let mut total = 0.0;
            for win in &windows {
                let a = win.len();
                let k = 1 + r.below(a);
                let masked: Vec<usize> = r.choose_distinct(a, k).into_iter().map(|o| win.start + o).collect();
                let level = ((2 * levels as usize * k + a) / (2 * a)).clamp(1, levels as usize) as u32;
                let mut noisy = clean.to_vec();
                let mut lv = vec![0u32; d];
                for &i in &masked {
                    noisy[i] = vocab.mask_id();
                    lv[i] = level;
                }
                let part = Partition { s: win.start, a, d };
                let layout = inference_layout(cfg.wiring, &part);
                let input = SlotInput::from_layout(&layout, clean, &noisy, &lv, vocab.bos_id());
                let logits = params.forward(&input, &layout.mask, weighting)?;
                let v = cfg.vocab;
                let ce: f64 = masked
                    .iter()
                    .map(|&i| -log_softmax(&logits[i * v..(i + 1) * v])[clean[i]])
                    .sum();
                total += ce * a as f64 / k as f64;
            }
            draws.push(total / d as f64);
        }
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = if draws.len() > 1 {
        draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(PplEstimate::new(mean, m, dataset.len() * d, (var / n).sqrt()))
}

/// `exp` of the judge's mean NLL per token over all samples.
pub fn gen_ppl(samples: &[Sequence], judge: &NgramJudge) -> Result<PplEstimate> {
    let tokens: usize = samples.iter().map(|s| s.len()).sum();
    if tokens == 0 {
        return Err(invalid("samples", "no tokens to score"));
    }
    let per_seq: Vec<f64> = samples.iter().map(|s| judge.nll(s)).collect();
    let nll = per_seq.iter().sum::<f64>() / tokens as f64;
    Ok(PplEstimate::new(nll, 1, tokens, 0.0))
}

/// Empirical unigram entropy of all sample tokens, in nats.
pub fn token_entropy(samples: &[Sequence]) -> Result<f64> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut total = 0usize;
    for s in samples {
        for &t in s.tokens() {
            *counts.entry(t).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(invalid("samples", "no tokens"));
    }
    let mut keys: Vec<_> = counts.into_iter().collect();
    keys.sort_unstable();
    Ok(keys
        .iter()
        .map(|&(_, c)| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum())
}
