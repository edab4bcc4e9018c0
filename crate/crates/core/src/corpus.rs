//! Order-1 Markov sources with known entropy rate, corpus sampling and the
//! on-disk corpus format.

use std::io::{Read, Write};

use rand_distr::{Distribution, Gamma};

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;
use crate::vocab::{Sequence, Vocab};

const MAGIC: &[u8; 7] = b"HDCORP1";
const MAX_RESAMPLES: usize = 1000;

/// A stationary order-1 Markov chain over the real tokens `0..n`.
#[derive(Clone, Debug)]
pub struct MarkovSource {
    num_real: usize,
    /// Row-major `n × n`; row `x` is `P(· | x)`.
    transition: Vec<f64>,
    stationary: Vec<f64>,
    entropy_rate: f64,
}

impl MarkovSource {
    /// Builds a source from an explicit row-stochastic matrix.
    pub fn from_transition(num_real: usize, transition: Vec<f64>) -> Result<Self> {
        if num_real < 2 {
            return Err(invalid("num_real_tokens", "need at least 2 tokens"));
        }
        if transition.len() != num_real * num_real {
            return Err(Error::Dimension {
                context: "transition matrix",
                expected: num_real * num_real,
                got: transition.len(),
            });
        }
        for (x, row) in transition.chunks(num_real).enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(invalid("transition", format!("row {x} has entries outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(invalid("transition", format!("row {x} sums to {s}")));
            }
        }
        if !is_irreducible(num_real, &transition) {
            return Err(invalid("transition", "chain is reducible"));
        }
        let stationary = stationary(num_real, &transition)?;
        let entropy_rate = entropy_rate(num_real, &transition, &stationary);
        Ok(Self {
            num_real,
            transition,
            stationary,
            entropy_rate,
        })
    }

    /// Every row uniform: entropy rate `ln n`.
    pub fn uniform(num_real: usize) -> Result<Self> {
        let p = 1.0 / num_real as f64;
        Self::from_transition(num_real, vec![p; num_real * num_real])
    }

    pub fn num_real(&self) -> usize {
        self.num_real
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::with_real_tokens(self.num_real).expect("at least two real tokens")
    }

    pub fn order(&self) -> usize {
        1
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.transition[x * self.num_real..(x + 1) * self.num_real]
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Nats per token.
    pub fn entropy_rate(&self) -> f64 {
        self.entropy_rate
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.num_real as u32;
        write_header(&mut w, n + 1, n, n)?;
        for &p in &self.transition {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let (vocab, rows, cols) = read_header(&mut r)?;
        if rows != cols || vocab != rows + 1 {
            return Err(Error::Format(format!(
                "markov header vocab={vocab} rows={rows} cols={cols}"
            )));
        }
        let n = rows as usize;
        let mut buf = vec![0u8; n * n * 8];
        r.read_exact(&mut buf)?;
        let transition = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_transition(n, transition)
    }
}

/// Draws every row from a symmetric Dirichlet(`concentration`), resampling
/// chains that are not irreducible.
pub fn make_markov_source(
    num_real_tokens: usize,
    concentration: f64,
    rng: &mut RngStream,
) -> Result<MarkovSource> {
    if num_real_tokens < 2 {
        return Err(invalid("num_real_tokens", "need at least 2 tokens"));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(invalid("concentration", "must be positive and finite"));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| invalid("concentration", e.to_string()))?;
    let n = num_real_tokens;
    for _ in 0..MAX_RESAMPLES {
        let mut transition = Vec::with_capacity(n * n);
        for _ in 0..n {
            let mut row: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
            let mut s: f64 = row.iter().sum();
            while s <= 0.0 {
                row = (0..n).map(|_| gamma.sample(rng)).collect();
                s = row.iter().sum();
            }
            row.iter_mut().for_each(|p| *p /= s);
            transition.extend(row);
        }
        if !is_irreducible(n, &transition) {
            continue;
        }
        return MarkovSource::from_transition(n, transition);
    }
    Err(Error::NoConvergence("irreducible Dirichlet draw"))
}

fn is_irreducible(n: usize, p: &[f64]) -> bool {
    // strongly connected iff every node reaches every other from node 0 both
    // along edges and along reversed edges
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for y in 0..n {
                let w = if forward { p[x * n + y] } else { p[y * n + x] };
                if w > 0.0 && !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    reach(true) && reach(false)
}

/// Power iteration on the lazy chain `(P + I)/2`, which has the same fixed
/// point as `P` but is aperiodic.
fn stationary(n: usize, p: &[f64]) -> Result<Vec<f64>> {
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..100_000 {
        next.iter_mut().for_each(|v| *v = 0.0);
        for x in 0..n {
            let w = pi[x];
            for y in 0..n {
                next[y] += w * p[x * n + y];
            }
        }
        let mut diff = 0.0f64;
        for y in 0..n {
            let v = 0.5 * (next[y] + pi[y]);
            diff = diff.max((v - pi[y]).abs());
            next[y] = v;
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        std::mem::swap(&mut pi, &mut next);
        if diff < 1e-12 {
            return Ok(pi);
        }
    }
    Err(Error::NoConvergence("stationary power iteration"))
}

fn entropy_rate(n: usize, p: &[f64], pi: &[f64]) -> f64 {
    let mut h = 0.0;
    for x in 0..n {
        let row = &p[x * n..(x + 1) * n];
        let hx: f64 = row.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
        h += pi[x] * hx;
    }
    h
}

/// `num_seqs` independent stationary trajectories of length `d`.
pub fn sample_corpus(
    src: &MarkovSource,
    num_seqs: usize,
    d: usize,
    rng: &mut RngStream,
) -> Result<Vec<Sequence>> {
    if d == 0 {
        return Err(invalid("d", "sequence length must be at least 1"));
    }
    let mut out = Vec::with_capacity(num_seqs);
    for _ in 0..num_seqs {
        let mut toks = Vec::with_capacity(d);
        let mut x = rng.categorical(&src.stationary);
        toks.push(x);
        for _ in 1..d {
            x = rng.categorical(src.row(x));
            toks.push(x);
        }
        out.push(Sequence(toks));
    }
    Ok(out)
}

/// Fixed-length token sequences together with their vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub seq_len: usize,
    pub sequences: Vec<Sequence>,
}

impl Corpus {
    pub fn new(vocab: Vocab, sequences: Vec<Sequence>) -> Result<Self> {
        let seq_len = sequences.first().map_or(0, |s| s.len());
        for s in &sequences {
            if s.len() != seq_len {
                return Err(Error::Dimension {
                    context: "corpus sequence length",
                    expected: seq_len,
                    got: s.len(),
                });
            }
            s.validate(&vocab, false)?;
        }
        Ok(Self {
            vocab,
            seq_len,
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.vocab.size() > u16::MAX as usize + 1 {
            return Err(invalid("vocab", "too large for 16-bit token ids"));
        }
        write_header(
            &mut w,
            self.vocab.size() as u32,
            self.seq_len as u32,
            self.sequences.len() as u32,
        )?;
        let mut buf = Vec::with_capacity(self.seq_len * self.sequences.len() * 2);
        for s in &self.sequences {
            for &t in s.tokens() {
                buf.extend_from_slice(&(t as u16).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let (vocab, len, count) = read_header(&mut r)?;
        let (len, count) = (len as usize, count as usize);
        let vocab = Vocab::new(vocab as usize)?;
        let mut buf = vec![0u8; len * count * 2];
        r.read_exact(&mut buf)?;
        let toks: Vec<usize> = buf
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        let sequences = if len == 0 {
            vec![Sequence(Vec::new()); count]
        } else {
            toks.chunks(len).map(|c| Sequence(c.to_vec())).collect()
        };
        Self::new(vocab, sequences)
    }
}

fn write_header<W: Write>(w: &mut W, a: u32, b: u32, c: u32) -> Result<()> {
    w.write_all(MAGIC)?;
    for v in [a, b, c] {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(u32, u32, u32)> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing HDCORP1 magic".into()));
    }
    let mut v = [0u32; 3];
    for slot in v.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *slot = u32::from_le_bytes(b);
    }
    Ok((v[0], v[1], v[2]))
}
