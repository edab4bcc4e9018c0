//! Noise schedules, token generators, closed-form evolution operators and
//! forward corruption.
//!
//! Matrices are indexed `[destination, source]`: column `x` of a generator or
//! operator describes where token `x` goes. MASK is the last index.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::hyperschedule::Hyperschedule;
use crate::rng::RngStream;
use crate::vocab::{Sequence, Vocab};

/// `σ̄_0 ..= σ̄_levels`, non-decreasing, `σ̄_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeNoiseSchedule {
    pub values: Vec<f64>,
}

impl CumulativeNoiseSchedule {
    pub fn levels(&self) -> u32 {
        (self.values.len() - 1) as u32
    }

    pub fn at(&self, tau: u32) -> f64 {
        self.values[tau as usize]
    }
}

/// Geometric interpolation between `sigma_min` and `sigma_max`, with the
/// clean level pinned to 0.
pub fn loglinear_sigma(levels: u32, sigma_min: f64, sigma_max: f64) -> Result<CumulativeNoiseSchedule> {
    if levels == 0 {
        return Err(invalid("levels", "need at least one noise level"));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(invalid("sigma", "need 0 < sigma_min < sigma_max"));
    }
    let l = levels as f64;
    let mut values = vec![0.0];
    values.extend((1..=levels).map(|tau| {
        let f = tau as f64 / l;
        sigma_min.powf(1.0 - f) * sigma_max.powf(f)
    }));
    Ok(CumulativeNoiseSchedule { values })
}

/// `α_0 ..= α_levels`: probability of still holding the original token.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSchedule {
    pub values: Vec<f64>,
}

impl AlphaSchedule {
    pub fn levels(&self) -> u32 {
        (self.values.len() - 1) as u32
    }

    pub fn at(&self, tau: u32) -> f64 {
        self.values[tau as usize]
    }
}

pub fn linear_alpha(levels: u32) -> Result<AlphaSchedule> {
    if levels == 0 {
        return Err(invalid("levels", "need at least one noise level"));
    }
    let l = levels as f64;
    Ok(AlphaSchedule {
        values: (0..=levels).map(|tau| 1.0 - tau as f64 / l).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GeneratorKind {
    Uniform,
    Absorb,
    HybridGamma(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub kind: GeneratorKind,
    pub n: usize,
    pub matrix: DMatrix<f64>,
}

fn absorb_matrix(n: usize) -> DMatrix<f64> {
    let mask = n - 1;
    DMatrix::from_fn(n, n, |dst, src| {
        if src == mask {
            0.0
        } else if dst == src {
            -1.0
        } else if dst == mask {
            1.0
        } else {
            0.0
        }
    })
}

fn uniform_matrix(n: usize) -> DMatrix<f64> {
    let mask = n - 1;
    let m = (n - 1) as f64;
    DMatrix::from_fn(n, n, |dst, src| {
        if src == mask || dst == mask {
            0.0
        } else if dst == src {
            (2.0 - n as f64) / m
        } else {
            1.0 / m
        }
    })
}

pub fn generator(kind: GeneratorKind, n: usize) -> Result<Generator> {
    if n < 2 {
        return Err(invalid("n", "need at least two states"));
    }
    let matrix = match kind {
        GeneratorKind::Absorb => absorb_matrix(n),
        GeneratorKind::Uniform => uniform_matrix(n),
        GeneratorKind::HybridGamma(g) => {
            check_gamma(g)?;
            absorb_matrix(n) * (1.0 - g) + uniform_matrix(n) * g
        }
    };
    Ok(Generator { kind, n, matrix })
}

fn check_gamma(g: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&g) {
        return Err(invalid("gamma", "must lie in [0, 1]"));
    }
    Ok(())
}

/// Coefficients `(a, u)` of `e^{ΔQ_γ} = 𝟙 + a·Q_Absorb + u·Q_Uniform`.
pub fn evolution_coefficients(gamma: f64, delta: f64) -> (f64, f64) {
    let keep = (-(1.0 - gamma) * delta).exp();
    (1.0 - keep, keep - (-delta).exp())
}

/// `e^{ΔQ_γ}` in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionOperator {
    pub matrix: DMatrix<f64>,
    pub delta: f64,
    pub gamma: f64,
}

pub fn evolve_analytic(gamma: f64, n: usize, delta: f64) -> Result<EvolutionOperator> {
    check_gamma(gamma)?;
    if !(delta >= 0.0) {
        return Err(invalid("delta", "elapsed noise must be non-negative"));
    }
    if n < 2 {
        return Err(invalid("n", "need at least two states"));
    }
    let (a, u) = evolution_coefficients(gamma, delta);
    let matrix = DMatrix::identity(n, n) + absorb_matrix(n) * a + uniform_matrix(n) * u;
    Ok(EvolutionOperator { matrix, delta, gamma })
}

/// Probability that a real token has become MASK after noise `delta`.
pub fn gamma_mask_prob(gamma: f64, delta: f64) -> f64 {
    evolution_coefficients(gamma, delta).0
}

/// Draws from column `x` of `𝟙 + a·Q_Absorb + u·Q_Uniform` without building
/// the matrix.
fn draw_column(x: usize, vocab: &Vocab, a: f64, u: f64, rng: &mut RngStream) -> usize {
    if vocab.is_mask(x) {
        return x;
    }
    let m = vocab.num_real();
    let r = rng.uniform();
    if r < a {
        return vocab.mask_id();
    }
    // each of the other m - 1 real tokens carries u / m
    let move_prob = u * (m - 1) as f64 / m as f64;
    if r < a + move_prob && m > 1 {
        let j = rng.below(m - 1);
        return if j >= x { j + 1 } else { j };
    }
    x
}

/// Per-position γ-hybrid corruption of clean `seq` to row `t` of `hs`:
/// position `i` is drawn from column `seq[i]` of `e^{Δ_i Q_γ}` with
/// `Δ_i = σ̄(τ[t][i]) − σ̄_0`. Randomness for position `i` comes from
/// `rng.derive([i, t])`.
pub fn corrupt_gamma(
    seq: &Sequence,
    vocab: &Vocab,
    hs: &Hyperschedule,
    t: usize,
    sigma: &CumulativeNoiseSchedule,
    gamma: f64,
    rng: &RngStream,
) -> Result<Sequence> {
    check_gamma(gamma)?;
    check_corrupt_args(seq, vocab, hs, t, sigma.levels())?;
    let out = (0..seq.len())
        .map(|i| {
            let x = seq.tokens()[i];
            let tau = hs.tau(t, i);
            if tau == 0 {
                return x;
            }
            let (a, u) = evolution_coefficients(gamma, sigma.at(tau) - sigma.at(0));
            let mut r = rng.derive(&[i as u64, t as u64]);
            draw_column(x, vocab, a, u, &mut r)
        })
        .collect();
    Ok(Sequence(out))
}

fn check_corrupt_args(
    seq: &Sequence,
    vocab: &Vocab,
    hs: &Hyperschedule,
    t: usize,
    levels: u32,
) -> Result<()> {
    seq.validate(vocab, false)?;
    if seq.len() != hs.d() {
        return Err(crate::Error::Dimension {
            context: "sequence vs hyperschedule",
            expected: hs.d(),
            got: seq.len(),
        });
    }
    if t > hs.steps() {
        return Err(invalid("t", format!("step {t} beyond T={}", hs.steps())));
    }
    if levels != hs.levels() {
        return Err(invalid("levels", "schedule and hyperschedule disagree on levels"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flag {
    Unchanged,
    Shuffled,
    Masked,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonProcess {
    pub epsilon: f64,
    pub alpha: AlphaSchedule,
}

impl EpsilonProcess {
    pub fn new(epsilon: f64, alpha: AlphaSchedule) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(invalid("epsilon", "must lie in [0, 1)"));
        }
        Ok(Self { epsilon, alpha })
    }

    /// `(𝟙 + εQ_Uniform)(𝟙 + (1 − α_τ)Q_Absorb)` for an `n`-state vocabulary.
    pub fn one_step_kernel(&self, n: usize, tau: u32) -> DMatrix<f64> {
        let id = DMatrix::<f64>::identity(n, n);
        (&id + uniform_matrix(n) * self.epsilon)
            * (&id + absorb_matrix(n) * (1.0 - self.alpha.at(tau)))
    }

    pub fn mask_prob(&self, tau: u32) -> f64 {
        1.0 - self.alpha.at(tau)
    }
}

/// ε-hybrid corruption: with probability ε a position is redrawn uniformly
/// over the real tokens (flagged shuffled only if it changed), then masked
/// with probability `1 − α(τ[t][i])`. Positions at level 0 pass through.
pub fn corrupt_epsilon(
    seq: &Sequence,
    vocab: &Vocab,
    hs: &Hyperschedule,
    t: usize,
    proc: &EpsilonProcess,
    rng: &RngStream,
) -> Result<(Sequence, Vec<Flag>)> {
    check_corrupt_args(seq, vocab, hs, t, proc.alpha.levels())?;
    let m = vocab.num_real();
    let mut toks = Vec::with_capacity(seq.len());
    let mut flags = Vec::with_capacity(seq.len());
    for (i, &x) in seq.tokens().iter().enumerate() {
        let tau = hs.tau(t, i);
        if tau == 0 {
            toks.push(x);
            flags.push(Flag::Unchanged);
            continue;
        }
        let mut r = rng.derive(&[i as u64, t as u64]);
        let mut y = x;
        if r.uniform() < proc.epsilon {
            y = r.below(m);
        }
        if r.uniform() < proc.mask_prob(tau) {
            toks.push(vocab.mask_id());
            flags.push(Flag::Masked);
        } else {
            toks.push(y);
            flags.push(if y != x { Flag::Shuffled } else { Flag::Unchanged });
        }
    }
    Ok((Sequence(toks), flags))
}
