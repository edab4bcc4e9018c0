//! Generation: the original masked sampler, the adaptive correction sampler
//! (ACS), and KV-cached windowed decoding with call accounting.
//!
//! A generation is driven by a [`Plan`]: a list of denoiser calls, each with
//! a settled/active/worthless partition and a per-position transfer
//! probability. Hyperschedules give one plan ([`HsPlan`]); fixed-width
//! sliding windows give another ([`WindowPlan`]).
//!
//! All randomness is keyed by `(position, call, purpose)` so that caching,
//! the ACS branch and batch order never shift anyone else's draws.

use crate::denoiser::{DenoiserParams, EmbedWeighting, KvCache, SlotInput};
use crate::error::{invalid, Error, Result};
use crate::hyperschedule::{partition_at, Hyperschedule, Partition};
use crate::masks::{inference_layout, kv_cost, KvCost};
use crate::rng::RngStream;
use crate::vocab::{Sequence, Vocab};

const PURPOSE_UNMASK: u64 = 0;
const PURPOSE_ACS_COIN: u64 = 1;
const PURPOSE_ACS_DRAW: u64 = 2;

/// Stream used for `purpose` at `position` during call `call`.
pub fn position_stream(rng: &RngStream, position: usize, call: usize, purpose: u64) -> RngStream {
    rng.derive(&[position as u64, call as u64, purpose])
}

/// `1 − s/t`.
pub fn transfer_prob(t: f64, s: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid("t", "need 0 < t <= 1"));
    }
    if !(0.0..=t).contains(&s) {
        return Err(invalid("s", "need 0 <= s <= t"));
    }
    Ok((1.0 - s / t).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GumbelPrecision {
    F64,
    /// 24-bit uniforms and `f32` arithmetic throughout.
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SamplerKind {
    Original,
    Acs { eta: f64 },
}

/// Where an ACS replacement token comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Correction {
    Model,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerOptions {
    pub kind: SamplerKind,
    pub correction: Correction,
    pub temperature: f64,
    pub precision: GumbelPrecision,
    pub cache: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Original,
            correction: Correction::Model,
            temperature: 1.0,
            precision: GumbelPrecision::F64,
            cache: true,
        }
    }
}

impl SamplerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be finite and non-negative"));
        }
        if let SamplerKind::Acs { eta } = self.kind {
            if !(0.0..=1.0).contains(&eta) {
                return Err(invalid("eta", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Denoiser usage of one generation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CallLedger {
    pub calls: usize,
    /// Window tokens charged: new positions entering the (padded) window
    /// with caching, the full window width per call without.
    pub tokens: usize,
    /// Slots served from the KV cache.
    pub cache_hits: usize,
    /// Slots actually pushed through the network.
    pub rows_computed: usize,
}

/// One denoiser call of a plan.
#[derive(Clone, Debug, PartialEq)]
pub struct CallSpec {
    pub partition: Partition,
    /// Transfer probability of each active position, in order.
    pub p_transfer: Vec<f64>,
    /// Noise level of every position's current token (conditioning input).
    pub levels: Vec<u32>,
    /// End of the padded window, for token accounting.
    pub span_end: usize,
    /// Width charged per call without caching.
    pub window: usize,
}

pub trait Plan {
    fn d(&self) -> usize;
    fn num_calls(&self) -> usize;
    fn call(&self, c: usize) -> Result<CallSpec>;

    /// Whether the plan can actually resolve every position.
    fn check(&self) -> Result<()> {
        Ok(())
    }
}

/// Calls along a hyperschedule; steps with no active position are skipped.
#[derive(Clone, Debug)]
pub struct HsPlan<'a> {
    hs: &'a Hyperschedule,
    steps: Vec<usize>,
}

impl<'a> HsPlan<'a> {
    pub fn new(hs: &'a Hyperschedule) -> Result<Self> {
        let mut steps = Vec::new();
        for t in 0..hs.steps() {
            if partition_at(hs, t)?.a > 0 {
                steps.push(t);
            }
        }
        Ok(Self { hs, steps })
    }

    /// Hyperschedule step of call `c`.
    pub fn step_of(&self, c: usize) -> usize {
        self.steps[c]
    }
}

impl Plan for HsPlan<'_> {
    fn d(&self) -> usize {
        self.hs.d()
    }

    fn num_calls(&self) -> usize {
        self.steps.len()
    }

    fn call(&self, c: usize) -> Result<CallSpec> {
        let hs = self.hs;
        let t = self.steps[c];
        let part = partition_at(hs, t)?;
        let p_transfer = part
            .active()
            .map(|i| {
                let now = hs.time(t, i);
                if now == 0.0 {
                    0.0
                } else {
                    (1.0 - hs.time(t + 1, i) / now).clamp(0.0, 1.0)
                }
            })
            .collect();
        Ok(CallSpec {
            partition: part,
            p_transfer,
            levels: hs.row(t).to_vec(),
            span_end: part.visible(),
            window: hs.omega(),
        })
    }
}

/// Fixed-width sliding windows `[cρ, cρ + ω)` for `c < N`, with
/// `N = ⌈(L − ω)/ρ⌉ + 1`. Each position is resolved by its last window;
/// within its windows a masked position is unmasked uniformly over the
/// remaining calls.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub l: usize,
    pub omega: usize,
    pub rho: usize,
    pub levels: u32,
    calls: usize,
}

impl WindowPlan {
    /// Any `1 <= ω <= L`, `ρ >= 1` is accepted for accounting; generation
    /// additionally needs `ρ <= ω` (see [`Plan::check`]).
    pub fn new(l: usize, omega: usize, rho: usize, levels: u32) -> Result<Self> {
        let cost = kv_cost(l, omega, rho)?;
        if levels == 0 {
            return Err(invalid("levels", "need at least one noise level"));
        }
        Ok(Self {
            l,
            omega,
            rho,
            levels,
            calls: cost.calls,
        })
    }

    pub fn cost(&self) -> KvCost {
        kv_cost(self.l, self.omega, self.rho).expect("validated in new")
    }

    fn first_call(&self, i: usize) -> usize {
        (i + 1).saturating_sub(self.omega).div_ceil(self.rho)
    }

    fn last_call(&self, i: usize) -> usize {
        (i / self.rho).min(self.calls - 1)
    }

    /// Level of position `i` before call `c`.
    fn level(&self, i: usize, c: usize) -> u32 {
        let (f, last) = (self.first_call(i), self.last_call(i));
        if c <= f {
            self.levels
        } else if c > last {
            0
        } else {
            let num = (last + 1 - c) as u64;
            let den = (last + 1 - f) as u64;
            let lv = self.levels as u64;
            ((2 * lv * num + den) / (2 * den)) as u32
        }
    }

    /// Ledger the plan produces without running a model.
    pub fn simulate_ledger(&self, cache: bool) -> CallLedger {
        ledger_only(self, cache)
    }
}

impl Plan for WindowPlan {
    fn d(&self) -> usize {
        self.l
    }

    fn check(&self) -> Result<()> {
        if self.rho > self.omega {
            return Err(invalid(
                "rho",
                format!(
                    "stride {} exceeds window {}: positions between windows are never visited",
                    self.rho, self.omega
                ),
            ));
        }
        Ok(())
    }

    fn num_calls(&self) -> usize {
        self.calls
    }

    fn call(&self, c: usize) -> Result<CallSpec> {
        // with ρ > ω the last window may start past the end
        let s = (c * self.rho).min(self.l);
        let end = (c * self.rho + self.omega).min(self.l);
        let p_transfer = (s..end)
            .map(|i| 1.0 / (self.last_call(i) + 1 - c) as f64)
            .collect();
        Ok(CallSpec {
            partition: Partition {
                s,
                a: end - s,
                d: self.l,
            },
            p_transfer,
            levels: (0..self.l).map(|i| self.level(i, c)).collect(),
            span_end: c * self.rho + self.omega,
            window: self.omega,
        })
    }
}

fn charge(ledger: &mut CallLedger, spec: &CallSpec, prev_span: &mut usize, cache: bool) {
    ledger.calls += 1;
    if cache {
        ledger.tokens += spec.span_end.saturating_sub(*prev_span);
    } else {
        ledger.tokens += spec.window;
    }
    *prev_span = (*prev_span).max(spec.span_end);
}

fn ledger_only(plan: &dyn Plan, cache: bool) -> CallLedger {
    let mut ledger = CallLedger::default();
    let mut span = 0;
    for c in 0..plan.num_calls() {
        let spec = plan.call(c).expect("plan calls are valid");
        charge(&mut ledger, &spec, &mut span, cache);
    }
    ledger
}

fn log_softmax_real(logits: &[f64], temperature: f64, num_real: usize) -> Vec<f64> {
    let scaled: Vec<f64> = logits[..num_real].iter().map(|&x| x / temperature).collect();
    crate::denoiser::log_softmax(&scaled)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Decision for one masked position: `None` keeps it masked, `Some(v)`
/// unmasks it to real token `v`.
///
/// Staying and every token race in one Gumbel-max: stay scores
/// `ln(1 − p) + g₀`, token `v` scores `ln p + log softmax(logits/T)_v + g_v`.
/// This is the same law as a `p`-coin followed by a categorical draw.
/// Temperature 0 flips the coin and takes the arg-max token.
pub fn sample_masked(
    logits: &[f64],
    num_real: usize,
    p: f64,
    temperature: f64,
    precision: GumbelPrecision,
    stream: &mut RngStream,
) -> Option<usize> {
    if temperature == 0.0 {
        let go = stream.uniform() < p;
        return go.then(|| argmax(&logits[..num_real]));
    }
    match precision {
        GumbelPrecision::F64 => {
            let lsm = log_softmax_real(logits, temperature, num_real);
            let stay = (1.0 - p).ln() + stream.gumbel();
            let lp = p.ln();
            let mut best = None;
            let mut best_score = stay;
            for (v, &l) in lsm.iter().enumerate() {
                let score = lp + l + stream.gumbel();
                if score > best_score {
                    best_score = score;
                    best = Some(v);
                }
            }
            best
        }
        GumbelPrecision::F32 => {
            let t = temperature as f32;
            let scaled: Vec<f32> = logits[..num_real].iter().map(|&x| x as f32 / t).collect();
            let mx = scaled.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lz = mx + scaled.iter().map(|&x| (x - mx).exp()).sum::<f32>().ln();
            let pf = p as f32;
            let stay = (1.0 - pf).ln() + stream.gumbel_f32();
            let lp = pf.ln();
            let mut best = None;
            let mut best_score = stay;
            for (v, &x) in scaled.iter().enumerate() {
                let score = lp + (x - lz) + stream.gumbel_f32();
                if score > best_score {
                    best_score = score;
                    best = Some(v);
                }
            }
            best
        }
    }
}

/// A categorical draw over the real tokens at `temperature`.
pub fn sample_token(
    logits: &[f64],
    num_real: usize,
    temperature: f64,
    precision: GumbelPrecision,
    stream: &mut RngStream,
) -> usize {
    sample_masked(logits, num_real, 1.0, temperature, precision, stream).expect("p = 1 always moves")
}

/// Trajectory state of one generation.
#[derive(Clone, Debug)]
pub struct SamplerRun {
    pub vocab: Vocab,
    pub tokens: Vec<usize>,
    /// Calls completed so far.
    pub step: usize,
    pub options: SamplerOptions,
    pub rng: RngStream,
    pub ledger: CallLedger,
}

impl SamplerRun {
    /// All-MASK start.
    pub fn new(vocab: Vocab, d: usize, options: SamplerOptions, rng: RngStream) -> Result<Self> {
        options.validate()?;
        Ok(Self {
            vocab,
            tokens: vec![vocab.mask_id(); d],
            step: 0,
            options,
            rng,
            ledger: CallLedger::default(),
        })
    }

    /// Masked positions of the active set: unmask with their transfer
    /// probability. `logits` holds one row per active position.
    pub fn step_original(&mut self, spec: &CallSpec, logits: &[f64]) {
        self.unmask(spec, logits);
        self.step += 1;
    }

    /// As [`SamplerRun::step_original`], then every already-unmasked active
    /// position is resampled with probability `η(1 − p)`.
    pub fn step_acs(&mut self, spec: &CallSpec, logits: &[f64], eta: f64) {
        let before = self.tokens.clone();
        self.unmask(spec, logits);
        let v = self.vocab.size();
        let m = self.vocab.num_real();
        for (k, i) in spec.partition.active().enumerate() {
            if self.vocab.is_mask(before[i]) {
                continue;
            }
            let p = spec.p_transfer[k];
            let mut coin = position_stream(&self.rng, i, self.step, PURPOSE_ACS_COIN);
            if coin.uniform() >= eta * (1.0 - p) {
                continue;
            }
            let mut draw = position_stream(&self.rng, i, self.step, PURPOSE_ACS_DRAW);
            self.tokens[i] = match self.options.correction {
                Correction::Model => sample_token(
                    &logits[k * v..(k + 1) * v],
                    m,
                    self.options.temperature,
                    self.options.precision,
                    &mut draw,
                ),
                Correction::Uniform => draw.below(m),
            };
        }
        self.step += 1;
    }

    fn unmask(&mut self, spec: &CallSpec, logits: &[f64]) {
        let v = self.vocab.size();
        let m = self.vocab.num_real();
        for (k, i) in spec.partition.active().enumerate() {
            if !self.vocab.is_mask(self.tokens[i]) {
                continue;
            }
            let mut s = position_stream(&self.rng, i, self.step, PURPOSE_UNMASK);
            if let Some(tok) = sample_masked(
                &logits[k * v..(k + 1) * v],
                m,
                spec.p_transfer[k],
                self.options.temperature,
                self.options.precision,
                &mut s,
            ) {
                self.tokens[i] = tok;
            }
        }
    }

    fn apply(&mut self, spec: &CallSpec, logits: &[f64]) {
        match self.options.kind {
            SamplerKind::Original => self.step_original(spec, logits),
            SamplerKind::Acs { eta } => self.step_acs(spec, logits, eta),
        }
    }
}

/// Runs `plan` from the all-MASK state.
pub fn generate(
    params: &DenoiserParams,
    plan: &dyn Plan,
    options: &SamplerOptions,
    weighting: Option<EmbedWeighting<'_>>,
    rng: &RngStream,
) -> Result<(Sequence, CallLedger)> {
    plan.check()?;
    let cfg = &params.config;
    let vocab = Vocab::new(cfg.vocab)?;
    let d = plan.d();
    if d > cfg.d_max {
        return Err(invalid("d", format!("sequence length {d} exceeds d_max {}", cfg.d_max)));
    }
    let mut run = SamplerRun::new(vocab, d, *options, rng.clone())?;
    let mut cache = KvCache::new(cfg.layers);
    let mut span = 0;
    let v = cfg.vocab;
    for c in 0..plan.num_calls() {
        let spec = plan.call(c)?;
        let part = spec.partition;
        let layout = inference_layout(cfg.wiring, &part);
        let n = layout.len();
        let input = SlotInput::from_layout(&layout, &run.tokens, &run.tokens, &spec.levels, vocab.bos_id());
        let start = if options.cache { cache.len() } else { 0 };
        if start > part.s {
            return Err(invalid("plan", "settled prefix shrank between calls"));
        }
        let empty = KvCache::new(cfg.layers);
        let prefix = if options.cache { &cache } else { &empty };
        let out = params.forward_rows(
            prefix,
            &input.slice(start..n),
            &layout.mask.block(start..n, 0..n),
            weighting,
        )?;
        charge(&mut run.ledger, &spec, &mut span, options.cache);
        run.ledger.cache_hits += start;
        run.ledger.rows_computed += n - start;
        if options.cache {
            cache.extend_from(&out, 0..part.s - start, cfg.dim);
        }
        let active_rows = &out.logits[(part.s - start) * v..(n - start) * v];
        run.apply(&spec, active_rows);
    }
    let left = run.tokens.iter().filter(|&&t| vocab.is_mask(t)).count();
    if left > 0 {
        return Err(Error::Unfinished(left));
    }
    Ok((Sequence(run.tokens), run.ledger))
}

/// Convenience wrapper: generation along a hyperschedule.
pub fn generate_hs(
    params: &DenoiserParams,
    hs: &Hyperschedule,
    options: &SamplerOptions,
    weighting: Option<EmbedWeighting<'_>>,
    rng: &RngStream,
) -> Result<(Sequence, CallLedger)> {
    generate(params, &HsPlan::new(hs)?, options, weighting, rng)
}

/// Per-call times `τ[t][0]/levels` of a Flat schedule: `1 = t_0 > … > t_S = 0`.
pub fn flat_timesteps(hs: &Hyperschedule) -> Vec<f64> {
    (0..=hs.steps()).map(|t| hs.time(t, 0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::hyperschedule::{build, Kind};
    use crate::masks::Wiring;

    fn model(wiring: Wiring) -> DenoiserParams {
        let cfg = DenoiserConfig {
            vocab: 6,
            dim: 8,
            heads: 2,
            layers: 1,
            d_max: 16,
            wiring,
            time_conditioning: true,
            levels: 4,
            weighted_embedding: false,
        };
        let mut p = DenoiserParams::init(cfg, &mut RngStream::new(4, 0)).unwrap();
        let mut r = RngStream::new(5, 0);
        p.data.iter_mut().for_each(|v| *v += r.uniform() - 0.5);
        p
    }

    #[test]
    fn transfer_values() {
        assert!((transfer_prob(0.8, 0.6).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(transfer_prob(0.5, 0.0).unwrap(), 1.0);
        assert_eq!(transfer_prob(0.5, 0.5).unwrap(), 0.0);
        assert!(transfer_prob(0.0, 0.0).is_err());
    }

    #[test]
    fn zero_temperature_is_argmax() {
        let logits = [0.1, 2.0, -1.0, 0.5, 9.0];
        let mut s = RngStream::new(1, 1);
        assert_eq!(sample_masked(&logits, 4, 1.0, 0.0, GumbelPrecision::F64, &mut s), Some(1));
    }

    #[test]
    fn cache_does_not_change_output() {
        let p = model(Wiring::Aligned);
        for kind in [Kind::Block { omega: 4 }, Kind::Slide { omega: 3 }] {
            let hs = build(kind, 12, 4, 1, 1).unwrap();
            let rng = RngStream::new(10, 3);
            let on = SamplerOptions::default();
            let off = SamplerOptions { cache: false, ..on };
            let (a, la) = generate_hs(&p, &hs, &on, None, &rng).unwrap();
            let (b, lb) = generate_hs(&p, &hs, &off, None, &rng).unwrap();
            assert_eq!(a, b);
            assert_eq!(la.calls, lb.calls);
            assert!(la.rows_computed < lb.rows_computed);
        }
    }

    #[test]
    fn window_plan_ledger() {
        let p = model(Wiring::Shifted);
        let plan = WindowPlan::new(12, 4, 2, 4).unwrap();
        let (seq, ledger) = generate(&p, &plan, &SamplerOptions::default(), None, &RngStream::new(1, 0)).unwrap();
        assert_eq!(seq.len(), 12);
        assert_eq!((ledger.calls, ledger.tokens), (5, 12));
        let off = SamplerOptions { cache: false, ..Default::default() };
        let (seq2, l2) = generate(&p, &plan, &off, None, &RngStream::new(1, 0)).unwrap();
        assert_eq!(seq, seq2);
        assert_eq!((l2.calls, l2.tokens), (5, 20));
        let sparse = WindowPlan::new(12, 2, 3, 4).unwrap();
        assert_eq!(sparse.simulate_ledger(true).calls, 5);
        assert!(generate(&p, &sparse, &SamplerOptions::default(), None, &RngStream::new(1, 0)).is_err());
    }

    #[test]
    fn acs_with_zero_eta_matches_original() {
        let p = model(Wiring::Aligned);
        let hs = build(Kind::Flat, 10, 4, 1, 1).unwrap();
        let rng = RngStream::new(3, 3);
        let orig = generate_hs(&p, &hs, &SamplerOptions::default(), None, &rng).unwrap();
        let acs = SamplerOptions { kind: SamplerKind::Acs { eta: 0.0 }, ..Default::default() };
        assert_eq!(orig, generate_hs(&p, &hs, &acs, None, &rng).unwrap());
        let acs = SamplerOptions { kind: SamplerKind::Acs { eta: 1.0 }, ..Default::default() };
        let (seq, _) = generate_hs(&p, &hs, &acs, None, &rng).unwrap();
        assert_eq!(seq.count_masks(&Vocab::new(6).unwrap()), 0);
    }

    #[test]
    fn flat_timesteps_decrease() {
        let hs = build(Kind::Flat, 5, 5, 1, 1).unwrap();
        let ts = flat_timesteps(&hs);
        assert_eq!(ts[0], 1.0);
        assert_eq!(*ts.last().unwrap(), 0.0);
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
    }
}
