//! Add-k smoothed n-gram judge used for generative perplexity.
//!
//! `order` is the context length: order 1 is a bigram model. Tokens near the
//! start of a sequence, which have a shorter history, are scored with the
//! model of matching (shorter) context length.

use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::rng::RngStream;
use crate::vocab::{Sequence, Vocab};

#[derive(Clone, Debug, Default)]
struct Counts {
    total: u64,
    next: HashMap<usize, u64>,
}

#[derive(Clone, Debug)]
pub struct NgramJudge {
    order: usize,
    smoothing: f64,
    num_real: usize,
    /// `tables[k]` maps a length-k context to its successor counts.
    tables: Vec<HashMap<Vec<usize>, Counts>>,
}

/// Fits an add-`smoothing` model with context length `order` on `corpus`.
pub fn ngram_fit(
    corpus: &[Sequence],
    vocab: &Vocab,
    order: usize,
    smoothing: f64,
) -> Result<NgramJudge> {
    if !(1..=2).contains(&order) {
        return Err(invalid("order", "must be 1 or 2"));
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(invalid("smoothing", "must be positive"));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(invalid("corpus", "empty corpus"));
    }
    let mut tables = vec![HashMap::<Vec<usize>, Counts>::new(); order + 1];
    for seq in corpus {
        seq.validate(vocab, false)?;
        let t = seq.tokens();
        for i in 0..t.len() {
            // an n-gram of each admissible context length ending at i
            for k in 0..=order.min(i) {
                let c = tables[k].entry(t[i - k..i].to_vec()).or_default();
                c.total += 1;
                *c.next.entry(t[i]).or_default() += 1;
            }
        }
    }
    Ok(NgramJudge {
        order,
        smoothing,
        num_real: vocab.num_real(),
        tables,
    })
}

impl NgramJudge {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_real(&self) -> usize {
        self.num_real
    }

    /// `(count(ctx, y) + k) / (count(ctx) + k·V)`; the context is truncated
    /// to the model order.
    pub fn prob(&self, context: &[usize], y: usize) -> f64 {
        let k = self.order.min(context.len());
        let ctx = &context[context.len() - k..];
        let (c, total) = match self.tables[k].get(ctx) {
            Some(cnt) => (cnt.next.get(&y).copied().unwrap_or(0), cnt.total),
            None => (0, 0),
        };
        (c as f64 + self.smoothing) / (total as f64 + self.smoothing * self.num_real as f64)
    }

    /// Full conditional distribution over the real tokens.
    pub fn distribution(&self, context: &[usize]) -> Vec<f64> {
        (0..self.num_real).map(|y| self.prob(context, y)).collect()
    }

    /// Total negative log-likelihood of `seq` in nats.
    pub fn nll(&self, seq: &Sequence) -> f64 {
        let t = seq.tokens();
        (0..t.len()).map(|i| -self.prob(&t[..i], t[i]).ln()).sum()
    }

    /// Draws a sequence of length `d` from the judge itself.
    pub fn sample(&self, d: usize, rng: &mut RngStream) -> Sequence {
        let mut t = Vec::with_capacity(d);
        for _ in 0..d {
            let y = rng.categorical(&self.distribution(&t));
            t.push(y);
        }
        Sequence(t)
    }
}
