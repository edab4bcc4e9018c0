//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p hdlm --test acceptance`; pass criterion numbers
//! as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::DMatrix;

use hdlm::corpus::{make_markov_source, sample_corpus};
use hdlm::denoiser::{
    log_softmax, DenoiserConfig, DenoiserParams, EmbedWeighting, OptimizerKind, SlotInput,
};
use hdlm::eval::{gen_ppl, mc_ppl, token_entropy};
use hdlm::hyperschedule::{build, partition_at, window_width, Hyperschedule, Kind};
use hdlm::loss::{settled_ce, LossWeights};
use hdlm::masks::{
    inference_layout, kv_cost, training_layout, training_mask, AttentionMask, Input, TrainKind,
    Wiring,
};
use hdlm::ngram::ngram_fit;
use hdlm::process::{
    corrupt_epsilon, corrupt_gamma, evolve_analytic, generator, linear_alpha, loglinear_sigma,
    CumulativeNoiseSchedule, EpsilonProcess, Flag, GeneratorKind,
};
use hdlm::rng::RngStream;
use hdlm::sampler::{
    generate, generate_hs, GumbelPrecision, HsPlan, Plan, SamplerKind, SamplerOptions, SamplerRun,
    WindowPlan,
};
use hdlm::train::{make_example, train, Process, TrainConfig};
use hdlm::vocab::{Sequence, Vocab};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "evolution operator vs Taylor", c1_evolution_taylor),
        (2, "generator algebra", c2_generator_algebra),
        (3, "stochasticity", c3_stochasticity),
        (4, "reduction limits", c4_reduction_limits),
        (5, "AR degeneration", c5_ar_degeneration),
        (6, "hyperschedule invariants", c6_hyperschedule_invariants),
        (7, "KV accounting", c7_kv_accounting),
        (8, "mask golden files", c8_mask_goldens),
        (9, "gradient integrity", c9_gradients),
        (10, "end-to-end learning", c10_end_to_end),
        (11, "metric sanity", c11_metric_sanity),
    ];
    let picked: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("criterion {n:>2} {name:<28} PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n:>2} {name:<28} FAIL ({secs:.1}s) {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- oracles

fn q_absorb(n: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n);
    for x in 0..n - 1 {
        q[(x, x)] = -1.0;
        q[(n - 1, x)] = 1.0;
    }
    q
}

fn q_uniform(n: usize) -> DMatrix<f64> {
    let m = (n - 1) as f64;
    let mut q = DMatrix::zeros(n, n);
    for x in 0..n - 1 {
        for y in 0..n - 1 {
            q[(y, x)] = if x == y { -(m - 1.0) / m } else { 1.0 / m };
        }
    }
    q
}

/// 50-term Taylor series, with scaling and squaring so the series argument
/// has norm at most 1/2.
fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = a.abs().column_sum().max();
    let mut s = 0;
    while norm / f64::powi(2.0, s) > 0.5 {
        s += 1;
    }
    let b = a / f64::powi(2.0, s);
    let n = a.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..50 {
        term = &term * &b / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

fn column_stochastic(m: &DMatrix<f64>, tol: f64) -> Result<(), String> {
    for c in 0..m.ncols() {
        let s: f64 = m.column(c).sum();
        ensure!((s - 1.0).abs() < tol, "column {c} sums to {s}");
        ensure!(m.column(c).min() > -tol, "column {c} has a negative entry");
    }
    Ok(())
}

fn within_3_sigma(count: usize, n: usize, p: f64) -> Result<(), String> {
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    let dev = (count as f64 - n as f64 * p).abs();
    ensure!(
        dev <= 3.0 * sd.max(1e-12),
        "count {count}/{n} vs expected {:.1} (3σ = {:.1})",
        n as f64 * p,
        3.0 * sd
    );
    Ok(())
}

fn random_model(cfg: DenoiserConfig, seed: u64, jitter: f64) -> DenoiserParams {
    let mut p = DenoiserParams::init(cfg, &mut RngStream::new(seed, 0)).unwrap();
    let mut r = RngStream::new(seed, 1);
    for v in p.data.iter_mut() {
        *v += jitter * (r.uniform() - 0.5);
    }
    p
}

fn small_cfg(vocab: usize, wiring: Wiring, levels: u32) -> DenoiserConfig {
    DenoiserConfig {
        vocab,
        dim: 16,
        heads: 2,
        layers: 2,
        d_max: 32,
        wiring,
        time_conditioning: true,
        levels,
        weighted_embedding: false,
    }
}

// ------------------------------------------------------------- criteria

fn c1_evolution_taylor() -> Outcome {
    let t0 = Instant::now();
    let mut rng = RngStream::new(101, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = [3, 5, 10][rng.below(3)];
        let gamma = rng.uniform();
        let delta = 10.0 * rng.uniform();
        let analytic = evolve_analytic(gamma, n, delta).map_err(|e| e.to_string())?.matrix;
        let q = q_absorb(n) * (1.0 - gamma) + q_uniform(n) * gamma;
        let oracle = taylor_expm(&(q * delta));
        worst = worst.max(max_abs(&analytic, &oracle));
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(worst < 1e-10, "max abs error {worst:.3e} >= 1e-10");
    ensure!(secs < 5.0, "took {secs:.2}s >= 5s");
    Ok(format!("max abs error {worst:.2e} over 100 draws"))
}

fn c2_generator_algebra() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in 3..=12 {
        let qa = generator(GeneratorKind::Absorb, n).map_err(|e| e.to_string())?.matrix;
        let qu = generator(GeneratorKind::Uniform, n).map_err(|e| e.to_string())?.matrix;
        ensure!(max_abs(&qa, &q_absorb(n)) == 0.0, "Q_Absorb mismatch at n={n}");
        ensure!(max_abs(&qu, &q_uniform(n)) < 1e-15, "Q_Uniform mismatch at n={n}");
        let checks = [
            max_abs(&(&qa * &qa), &(-&qa)),
            max_abs(&(&qu * &qu), &(-&qu)),
            max_abs(&(&qa * &qu), &(-&qu)),
            max_abs(&(&qu * &qa), &(-&qu)),
            max_abs(&(&qa * &qu), &(&qu * &qa)),
        ];
        for (k, e) in checks.iter().enumerate() {
            ensure!(*e < 1e-12, "identity {k} off by {e:.3e} at n={n}");
            worst = worst.max(*e);
        }
    }
    Ok(format!("worst residual {worst:.2e} for n=3..12"))
}

fn c3_stochasticity() -> Outcome {
    let mut rng = RngStream::new(103, 0);
    for _ in 0..50 {
        let n = 3 + rng.below(10);
        let op = evolve_analytic(rng.uniform(), n, 20.0 * rng.uniform()).unwrap();
        column_stochastic(&op.matrix, 1e-10)?;
    }
    for eps in [0.0, 0.1, 0.5, 0.9] {
        let p = EpsilonProcess::new(eps, linear_alpha(8).unwrap()).unwrap();
        for tau in 0..=8 {
            column_stochastic(&p.one_step_kernel(6, tau), 1e-10)?;
        }
    }

    // γ = 0.5, Δ = ln 4 on a 2-real-token vocabulary
    let vocab = Vocab::new(3).unwrap();
    let hs = Hyperschedule::from_rows(1, vec![vec![1], vec![0]]).unwrap();
    let sigma = CumulativeNoiseSchedule {
        values: vec![0.0, 4f64.ln()],
    };
    let col = evolve_analytic(0.5, 3, 4f64.ln()).unwrap().matrix;
    let expected = [col[(0, 0)], col[(1, 0)], col[(2, 0)]];
    for (e, want) in expected.iter().zip([0.375, 0.125, 0.5]) {
        ensure!((e - want).abs() < 1e-12, "analytic column {expected:?}");
    }
    let n = 100_000;
    let mut counts = [0usize; 3];
    let seq = Sequence(vec![0]);
    for k in 0..n {
        let out = corrupt_gamma(&seq, &vocab, &hs, 0, &sigma, 0.5, &RngStream::new(7, k as u64)).unwrap();
        counts[out.tokens()[0]] += 1;
    }
    for (c, p) in counts.iter().zip(expected) {
        within_3_sigma(*c, n, p)?;
    }

    // ε-hybrid: empirical column against the one-step kernel
    let proc = EpsilonProcess::new(0.3, linear_alpha(2).unwrap()).unwrap();
    let hs2 = Hyperschedule::from_rows(2, vec![vec![2], vec![1], vec![0]]).unwrap();
    let kernel = proc.one_step_kernel(4, 1);
    let mut ecounts = [0usize; 4];
    for k in 0..n {
        let (out, _) = corrupt_epsilon(&seq, &Vocab::new(4).unwrap(), &hs2, 1, &proc, &RngStream::new(8, k as u64)).unwrap();
        ecounts[out.tokens()[0]] += 1;
    }
    for (y, c) in ecounts.iter().enumerate() {
        within_3_sigma(*c, n, kernel[(y, 0)])?;
    }
    Ok(format!(
        "γ column {:?}/{n}, ε column {:?}/{n}",
        counts, ecounts
    ))
}

fn c4_reduction_limits() -> Outcome {
    let mut rng = RngStream::new(104, 0);
    for _ in 0..50 {
        let n = 3 + rng.below(10);
        let delta = 10.0 * rng.uniform();
        let id = DMatrix::<f64>::identity(n, n);
        let absorb = &id + q_absorb(n) * (1.0 - (-delta).exp());
        let uniform = &id + q_uniform(n) * (1.0 - (-delta).exp());
        let e0 = max_abs(&evolve_analytic(0.0, n, delta).unwrap().matrix, &absorb);
        let e1 = max_abs(&evolve_analytic(1.0, n, delta).unwrap().matrix, &uniform);
        ensure!(e0 == 0.0 && e1 == 0.0, "γ limits differ by {e0:.3e} / {e1:.3e}");
    }

    // ε = 0: per-position masking with probability 1 − α(τ), nothing shuffled
    let levels = 8;
    let d = 16;
    let hs = build(Kind::Flat, d, levels, 1, 1).unwrap();
    let proc = EpsilonProcess::new(0.0, linear_alpha(levels).unwrap()).unwrap();
    let vocab = Vocab::with_real_tokens(5).unwrap();
    let mut src = RngStream::new(9, 0);
    for t in 0..hs.steps() {
        let mut masked = 0;
        let trials = 5000;
        for k in 0..trials {
            let seq = Sequence((0..d).map(|_| src.below(5)).collect());
            let (out, flags) = corrupt_epsilon(&seq, &vocab, &hs, t, &proc, &RngStream::new(10, (t * trials + k) as u64)).unwrap();
            for i in 0..d {
                let y = out.tokens()[i];
                if vocab.is_mask(y) {
                    masked += 1;
                } else {
                    ensure!(y == seq.tokens()[i], "ε=0 changed a token");
                    ensure!(flags[i] == Flag::Unchanged, "ε=0 flagged a shuffle");
                }
            }
        }
        within_3_sigma(masked, trials * d, proc.mask_prob(hs.tau(t, 0)))?;
    }

    // ACS with η = 0 against the original sampler
    let model = random_model(small_cfg(7, Wiring::Aligned, 4), 11, 0.5);
    let flat = build(Kind::Flat, 12, 4, 1, 1).unwrap();
    let block = build(Kind::Block { omega: 4 }, 12, 4, 1, 1).unwrap();
    let slide = build(Kind::Slide { omega: 4 }, 12, 4, 1, 1).unwrap();
    let window = WindowPlan::new(12, 4, 2, 4).unwrap();
    let plans: Vec<Box<dyn Plan + '_>> = vec![
        Box::new(HsPlan::new(&flat).unwrap()),
        Box::new(HsPlan::new(&block).unwrap()),
        Box::new(HsPlan::new(&slide).unwrap()),
        Box::new(window),
    ];
    let mut runs = 0;
    for plan in &plans {
        for seed in 0..10 {
            let rng = RngStream::new(seed, 0);
            let orig = SamplerOptions::default();
            let acs = SamplerOptions {
                kind: SamplerKind::Acs { eta: 0.0 },
                ..orig
            };
            let a = generate(&model, plan.as_ref(), &orig, None, &rng).unwrap();
            let b = generate(&model, plan.as_ref(), &acs, None, &rng).unwrap();
            ensure!(a == b, "ACS(η=0) diverged from Original (seed {seed})");
            runs += 1;
        }
    }
    Ok(format!("γ limits exact, ε=0 masking within 3σ, {runs} ACS/Original pairs identical"))
}

/// Teacher-forced AR mean NLL over the first `k` positions using a plain
/// causal mask on `[BOS, x_0, …, x_{d−2}]`.
fn ar_teacher_forcing(params: &DenoiserParams, seq: &[usize], k: usize) -> f64 {
    let d = seq.len();
    let bos = params.config.vocab;
    let mut tokens = vec![bos];
    tokens.extend_from_slice(&seq[..d - 1]);
    let input = SlotInput {
        tokens,
        positions: (0..d).collect(),
        levels: vec![0; d],
    };
    let logits = params.forward(&input, &AttentionMask::causal(d), None).unwrap();
    let v = params.config.vocab;
    let mut total = 0.0;
    for p in 0..k {
        let row = &logits[p * v..(p + 1) * v];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        total += lse - row[seq[p]];
    }
    total / k as f64
}

/// AR ancestral sampling with the sampler's stream keys: position `p` is
/// drawn at call `p` from stream `(p, p, 0)` by Gumbel-max, after the stay
/// draw that a transfer probability of 1 always loses.
fn ar_ancestral(params: &DenoiserParams, d: usize, rng: &RngStream) -> Vec<usize> {
    let v = params.config.vocab;
    let num_real = v - 1;
    let bos = v;
    let mut out: Vec<usize> = Vec::new();
    for p in 0..d {
        let mut tokens = vec![bos];
        tokens.extend_from_slice(&out);
        let input = SlotInput {
            tokens,
            positions: (0..=p).collect(),
            levels: vec![0; p + 1],
        };
        let logits = params.forward(&input, &AttentionMask::causal(p + 1), None).unwrap();
        let row = &logits[p * v..p * v + num_real];
        let lsm = log_softmax(row);
        let mut stream = rng.derive(&[p as u64, p as u64, 0]);
        let _stay = stream.gumbel();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (y, &l) in lsm.iter().enumerate() {
            let s = l + stream.gumbel();
            if s > best_score {
                best_score = s;
                best = y;
            }
        }
        out.push(best);
    }
    out
}

fn c5_ar_degeneration() -> Outcome {
    let d = 8;
    let mut cfg = small_cfg(6, Wiring::Shifted, 1);
    cfg.time_conditioning = false;
    let model = random_model(cfg, 12, 0.6);
    let vocab = Vocab::new(6).unwrap();
    let hs = build(Kind::Quench, d, 1, 1, 1).unwrap();
    let proc = Process::Epsilon(EpsilonProcess::new(0.0, linear_alpha(1).unwrap()).unwrap());
    let mut rng = RngStream::new(13, 0);
    let mut worst: f64 = 0.0;
    for n in 0..10 {
        let seq = Sequence((0..d).map(|_| rng.below(5)).collect());
        let oracle_full = ar_teacher_forcing(&model, seq.tokens(), d);

        // inference layout at each step: the settled prefix is teacher forcing
        for k in 1..d {
            let part = partition_at(&hs, k).unwrap();
            let layout = inference_layout(Wiring::Shifted, &part);
            // generation state: settled prefix clean, the rest masked
            let state: Vec<usize> = (0..d).map(|i| if i < k { seq.tokens()[i] } else { vocab.mask_id() }).collect();
            let input = SlotInput::from_layout(&layout, seq.tokens(), &state, hs.row(k), vocab.bos_id());
            let logits = model.forward(&input, &layout.mask, None).unwrap();
            let ce = settled_ce(&logits, 6, seq.tokens(), &part);
            worst = worst.max((ce - ar_teacher_forcing(&model, seq.tokens(), k)).abs());
        }

        // efficient training layout: clean and noisy terms both reduce to AR
        for (b1, b2) in [(1.0, 0.0), (0.0, 1.0)] {
            let w = LossWeights {
                beta1: b1,
                beta2: b2,
                lambda: 1.0,
                variant: proc.variant(),
            };
            let ex = make_example(&seq, &vocab, &hs, &proc, &w, true, Wiring::Shifted, &RngStream::new(n, 0)).unwrap();
            let mut g = model.zeros_like();
            let loss = model.loss_and_grads(&ex.input, &ex.layout.mask, None, &ex.targets, &mut g).unwrap();
            worst = worst.max((loss - oracle_full).abs());
        }
    }
    ensure!(worst < 1e-10, "training loss differs from AR teacher forcing by {worst:.3e}");

    let mut matched = 0;
    for seed in 0..20 {
        let rng = RngStream::new(seed, 5);
        let (got, _) = generate_hs(&model, &hs, &SamplerOptions::default(), None, &rng).unwrap();
        let want = ar_ancestral(&model, d, &rng);
        ensure!(got.tokens() == want.as_slice(), "seed {seed}: {:?} vs AR {:?}", got.tokens(), want);
        matched += 1;
    }
    Ok(format!("loss gap {worst:.2e}; {matched}/20 generations token-identical"))
}

fn expected_steps(kind: Kind, d: usize, p: u64, q: u64) -> usize {
    let (d, p, q) = (d as u64, p, q);
    let ceil = |a: u64, b: u64| a.div_ceil(b);
    (match kind {
        Kind::Quench => d,
        Kind::Flat => ceil(d * q, p),
        Kind::Block { omega } => ceil(omega as u64 * q, p) * ceil(d, omega as u64),
        Kind::Slide { omega } => ceil((d + omega as u64 - 1) * q, p),
        Kind::Custom => unreachable!(),
    }) as usize
}

fn c6_hyperschedule_invariants() -> Outcome {
    let t0 = Instant::now();
    let mut checked = 0;
    for d in 1..=64usize {
        for omega in 1..=16usize.min(d) {
            for kind in [Kind::Quench, Kind::Flat, Kind::Block { omega }, Kind::Slide { omega }] {
                if matches!(kind, Kind::Quench | Kind::Flat) && omega > 1 {
                    continue;
                }
                let rates: &[(u64, u64)] = if kind == Kind::Quench { &[(1, 1)] } else { &[(1, 1), (2, 1), (1, 2)] };
                for &(p, q) in rates {
                    let levels = if kind == Kind::Quench { 1 } else { 16 };
                    let hs = build(kind, d, levels, p, q).map_err(|e| format!("{kind:?} d={d}: {e}"))?;
                    let t_max = hs.steps();
                    ensure!(t_max == expected_steps(kind, d, p, q), "{kind:?} d={d} ρ={p}/{q}: T={t_max}");
                    ensure!(hs.row(0).iter().all(|&v| v == levels), "{kind:?} d={d}: first row not all L");
                    ensure!(hs.row(t_max).iter().all(|&v| v == 0), "{kind:?} d={d}: last row not all 0");
                    for t in 0..t_max {
                        for i in 0..d {
                            ensure!(hs.tau(t + 1, i) <= hs.tau(t, i), "{kind:?} d={d}: τ increases at t={t}, i={i}");
                        }
                        let part = partition_at(&hs, t).map_err(|e| format!("{kind:?} d={d} t={t}: {e}"))?;
                        ensure!(part.s + part.a <= d, "partition overruns d");
                        if kind != Kind::Flat {
                            for i in part.settled() {
                                ensure!(hs.tau(t, i) == 0 && hs.tau(t + 1, i) == 0, "settled position moves");
                            }
                            for i in part.worthless() {
                                ensure!(hs.tau(t, i) == levels && hs.tau(t + 1, i) == levels, "worthless position moves");
                            }
                            for i in part.active() {
                                let both0 = hs.tau(t, i) == 0 && hs.tau(t + 1, i) == 0;
                                let both_l = hs.tau(t, i) == levels && hs.tau(t + 1, i) == levels;
                                ensure!(!both0 && !both_l, "{kind:?} d={d} t={t}: idle position {i} inside the window");
                            }
                        }
                    }
                    if (p, q) == (1, 1) {
                        let want = match kind {
                            Kind::Quench => 1,
                            Kind::Flat => d,
                            _ => omega,
                        };
                        ensure!(window_width(&hs) == want, "{kind:?} d={d}: window width {} != {want}", window_width(&hs));
                    }
                    checked += 1;
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2}s >= 10s");
    Ok(format!("{checked} schedules"))
}

fn c7_kv_accounting() -> Outcome {
    let mut cells = 0;
    for l in 8..=64usize {
        for omega in 1..=8usize {
            for rho in 1..=4usize {
                // formulas: N = ⌈(L−ω)/ρ⌉ + 1, ω tokens per call uncached,
                // ω + (N−1)ρ tokens cached
                let n = (l - omega).div_ceil(rho) + 1;
                let plan = WindowPlan::new(l, omega, rho, 4).map_err(|e| e.to_string())?;
                let off = plan.simulate_ledger(false);
                let on = plan.simulate_ledger(true);
                ensure!(off.calls == n && on.calls == n, "L={l} ω={omega} ρ={rho}: {} calls vs {n}", on.calls);
                ensure!(off.tokens == n * omega, "L={l} ω={omega} ρ={rho}: uncached {} vs {}", off.tokens, n * omega);
                ensure!(on.tokens == omega + (n - 1) * rho, "L={l} ω={omega} ρ={rho}: cached {} vs {}", on.tokens, omega + (n - 1) * rho);
                let kv = kv_cost(l, omega, rho).unwrap();
                ensure!((kv.calls, kv.cost_nocache, kv.cost_cache) == (n, off.tokens, on.tokens), "kv_cost disagrees");
                cells += 1;
            }
        }
    }
    let kv = kv_cost(12, 4, 2).unwrap();
    ensure!((kv.calls, kv.cost_nocache, kv.cost_cache) == (5, 20, 12), "row (12,4,2) = {kv:?}");

    // caching must not change a single token
    let model = random_model(small_cfg(7, Wiring::Shifted, 4), 14, 0.5);
    let mut runs = 0;
    let schedules = [
        build(Kind::Block { omega: 4 }, 16, 4, 1, 1).unwrap(),
        build(Kind::Slide { omega: 4 }, 16, 4, 1, 1).unwrap(),
        build(Kind::Slide { omega: 3 }, 16, 4, 2, 1).unwrap(),
    ];
    let mut plans: Vec<Box<dyn Plan + '_>> = schedules.iter().map(|hs| Box::new(HsPlan::new(hs).unwrap()) as Box<dyn Plan>).collect();
    for (omega, rho) in [(4, 1), (4, 2), (3, 3), (5, 2)] {
        plans.push(Box::new(WindowPlan::new(16, omega, rho, 4).unwrap()));
    }
    for plan in &plans {
        for seed in 0..5 {
            let rng = RngStream::new(seed, 3);
            for kind in [SamplerKind::Original, SamplerKind::Acs { eta: 0.7 }] {
                let on = SamplerOptions { kind, cache: true, ..Default::default() };
                let off = SamplerOptions { cache: false, ..on };
                let (a, la) = generate(&model, plan.as_ref(), &on, None, &rng).unwrap();
                let (b, lb) = generate(&model, plan.as_ref(), &off, None, &rng).unwrap();
                ensure!(a == b, "cache changed the output (seed {seed})");
                ensure!(la.calls == lb.calls, "call counts differ");
                runs += 1;
            }
        }
    }
    Ok(format!("{cells} grid cells match; {runs} cache on/off pairs identical"))
}

const FIXTURES: [(&str, &str, &str, &str); 4] = [
    (
        "block_aligned",
        include_str!("fixtures/train_block_aligned_d12_w4.pbm"),
        include_str!("fixtures/train_block_aligned_d12_w4.csv"),
        include_str!("fixtures/train_block_aligned_d12_w4_slots.csv"),
    ),
    (
        "block_shifted",
        include_str!("fixtures/train_block_shifted_d12_w4.pbm"),
        include_str!("fixtures/train_block_shifted_d12_w4.csv"),
        include_str!("fixtures/train_block_shifted_d12_w4_slots.csv"),
    ),
    (
        "slide_aligned",
        include_str!("fixtures/train_slide_aligned_d12_w4.pbm"),
        include_str!("fixtures/train_slide_aligned_d12_w4.csv"),
        include_str!("fixtures/train_slide_aligned_d12_w4_slots.csv"),
    ),
    (
        "slide_shifted",
        include_str!("fixtures/train_slide_shifted_d12_w4.pbm"),
        include_str!("fixtures/train_slide_shifted_d12_w4.csv"),
        include_str!("fixtures/train_slide_shifted_d12_w4_slots.csv"),
    ),
];

fn slot_table(wiring: Wiring, kind: TrainKind, starts: &[usize]) -> String {
    let l = training_layout(wiring, kind, 12, 4, starts).unwrap();
    let mut s = String::from("slot,target,input,noisy\n");
    for (i, sl) in l.slots.iter().enumerate() {
        let inp = match sl.input {
            Input::Bos => "bos".to_string(),
            Input::Clean(p) => format!("clean{p}"),
            Input::Noisy(p) => format!("noisy{p}"),
        };
        s.push_str(&format!("{i},{},{inp},{}\n", sl.target, u8::from(sl.noisy)));
    }
    s
}

fn c8_mask_goldens() -> Outcome {
    let d = 12;
    for (name, pbm, csv, slots) in FIXTURES {
        let wiring = if name.ends_with("aligned") { Wiring::Aligned } else { Wiring::Shifted };
        let (kind, starts) = if name.starts_with("block") {
            (TrainKind::Block, vec![0, 4, 8])
        } else {
            (TrainKind::Slide, vec![2, 5, 11])
        };
        let mask = training_mask(wiring, kind, d, 4, &starts).unwrap();
        ensure!(mask.to_pbm() == pbm, "{name}: PBM differs from fixture");
        ensure!(mask.to_csv() == csv, "{name}: CSV differs from fixture");
        ensure!(slot_table(wiring, kind, &starts) == slots, "{name}: slot inputs differ from fixture");
        let causal = AttentionMask::causal(d);
        ensure!(mask.block(0..d, 0..d) == causal.allowed, "{name}: clean block is not causal");
        ensure!(
            mask.block(0..d, d..mask.k_len).iter().all(|&b| !b),
            "{name}: a clean row attends to a noisy slot"
        );
    }
    Ok("4 layouts bit-exact; clean block causal; no clean→noisy edge".into())
}

fn c9_gradients() -> Outcome {
    let sigma = loglinear_sigma(4, 1e-3, 20.0).unwrap();
    let hs = build(Kind::Slide { omega: 3 }, 6, 4, 1, 1).unwrap();
    let vocab = Vocab::new(5).unwrap();
    let seq = Sequence(vec![0, 1, 2, 3, 1, 0]);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for wiring in [Wiring::Aligned, Wiring::Shifted] {
        for time in [false, true] {
            for weighted in [false, true] {
                for gamma_variant in [false, true] {
                    let cfg = DenoiserConfig {
                        vocab: 5,
                        dim: 8,
                        heads: 2,
                        layers: 2,
                        d_max: 8,
                        wiring,
                        time_conditioning: time,
                        levels: 4,
                        weighted_embedding: weighted,
                    };
                    let model = random_model(cfg, 15, 0.3);
                    let proc = if gamma_variant {
                        Process::Gamma { gamma: 0.4, sigma: sigma.clone() }
                    } else {
                        Process::Epsilon(EpsilonProcess::new(0.2, linear_alpha(4).unwrap()).unwrap())
                    };
                    let w = LossWeights { beta1: 0.7, beta2: 1.3, lambda: 0.5, variant: proc.variant() };
                    let wt = weighted.then_some(EmbedWeighting { sigma: &sigma, gamma: 0.4 });
                    for efficient in [true, false] {
                        let ex = make_example(&seq, &vocab, &hs, &proc, &w, efficient, wiring, &RngStream::new(16, checked as u64)).unwrap();
                        let loss = |m: &DenoiserParams| {
                            m.loss_and_grads(&ex.input, &ex.layout.mask, wt, &ex.targets, &mut m.zeros_like()).unwrap()
                        };
                        let mut g = model.zeros_like();
                        model.loss_and_grads(&ex.input, &ex.layout.mask, wt, &ex.targets, &mut g).unwrap();
                        let mut pick = RngStream::new(17, checked as u64);
                        for spec in model.specs() {
                            for _ in 0..3 {
                                let i = spec.offset + pick.below(spec.len());
                                let h = 1e-5;
                                let mut m = model.clone();
                                m.data[i] += h;
                                let lp = loss(&m);
                                m.data[i] -= 2.0 * h;
                                let lm = loss(&m);
                                let fd = (lp - lm) / (2.0 * h);
                                let scale = fd.abs().max(g[i].abs());
                                if scale < 1e-8 {
                                    ensure!((fd - g[i]).abs() < 1e-10, "{}: fd {fd:e} vs {:e}", spec.name, g[i]);
                                    continue;
                                }
                                let rel = (fd - g[i]).abs() / scale;
                                ensure!(
                                    rel < 1e-4,
                                    "{wiring:?} time={time} weighted={weighted} γ={gamma_variant} {}: rel err {rel:.2e}",
                                    spec.name
                                );
                                worst = worst.max(rel);
                            }
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{checked} configurations, worst relative error {worst:.2e}"))
}

fn c10_end_to_end() -> Outcome {
    let t0 = Instant::now();
    let levels = 32;
    let d = 32;
    let mut rng = RngStream::new(7, 0);
    let src = make_markov_source(16, 0.5, &mut rng).unwrap();
    let data = sample_corpus(&src, 2000, d, &mut rng).unwrap();
    let held = sample_corpus(&src, 200, d, &mut rng).unwrap();
    let judge_corpus = sample_corpus(&src, 2000, d, &mut rng).unwrap();
    let bound = 1.5 * src.entropy_rate().exp();

    let hs = build(Kind::Flat, d, levels, 1, 1).unwrap();
    let proc = Process::Epsilon(EpsilonProcess::new(0.05, linear_alpha(levels).unwrap()).unwrap());
    let mut cfg = DenoiserConfig::desk(17, Wiring::Aligned, levels);
    cfg.dim = 32;
    cfg.time_conditioning = true;
    let mut params = DenoiserParams::init(cfg, &mut rng).unwrap();
    let eval_rng = RngStream::new(9, 0);
    let before = mc_ppl(&params, &held, &hs, 4, None, &eval_rng).unwrap();

    let tc = TrainConfig {
        steps: 5000,
        batch_size: 32,
        optimizer: OptimizerKind::Adam,
        lr: 0.003,
        momentum: 0.0,
        clip: Some(1.0),
        loss: LossWeights { beta1: 1.0, beta2: 1.0, lambda: 1.0, variant: proc.variant() },
        efficient: true,
    };
    train(&mut params, &data, &hs, &proc, &tc, &RngStream::new(3, 0), |_, _| {}).map_err(|e| e.to_string())?;
    let after = mc_ppl(&params, &held, &hs, 4, None, &eval_rng).unwrap();

    let judge = ngram_fit(&judge_corpus, &src.vocab(), 1, 0.1).unwrap();
    let mut gen = Vec::new();
    for kind in [SamplerKind::Original, SamplerKind::Acs { eta: 0.5 }] {
        let opts = SamplerOptions { kind, ..Default::default() };
        let samples: Vec<Sequence> = (0..100)
            .map(|k| generate_hs(&params, &hs, &opts, None, &RngStream::new(100 + k, 0)).unwrap().0)
            .collect();
        gen.push(gen_ppl(&samples, &judge).unwrap().ppl);
    }
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "mc_ppl {:.3} (untrained {:.3}, bound {:.3}); gen_ppl ACS {:.3} vs Original {:.3}",
        after.ppl, before.ppl, bound, gen[1], gen[0]
    );
    ensure!(after.ppl <= bound, "{detail}: above bound");
    ensure!(after.ppl < before.ppl && after.ppl < 17.0, "{detail}: not below untrained");
    ensure!(gen[1] <= gen[0], "{detail}: ACS worse than Original");
    ensure!(secs <= 1800.0, "{detail}: took {secs:.0}s");
    Ok(detail)
}

fn c11_metric_sanity() -> Outcome {
    // uniform logits: zero output projection
    let mut cfg = small_cfg(16, Wiring::Aligned, 8);
    cfg.time_conditioning = false;
    let mut model = random_model(cfg, 18, 0.3);
    for name in ["wout", "bout"] {
        let spec = model.specs().iter().find(|s| s.name == name).unwrap().clone();
        model.data[spec.offset..spec.offset + spec.len()].iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = RngStream::new(19, 0);
    let src = make_markov_source(15, 0.5, &mut rng).unwrap();
    let data = sample_corpus(&src, 20, 16, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    let schedules = [
        build(Kind::Flat, 16, 8, 1, 1).unwrap(),
        build(Kind::Block { omega: 4 }, 16, 8, 1, 1).unwrap(),
        build(Kind::Slide { omega: 4 }, 16, 8, 1, 1).unwrap(),
    ];
    for hs in &schedules {
        for m in [1, 10, 100] {
            let est = mc_ppl(&model, &data, hs, m, None, &RngStream::new(20, m as u64)).unwrap();
            worst = worst.max((est.ppl - 16.0).abs());
        }
    }
    ensure!(worst < 1e-6, "uniform-logit mc_ppl off by {worst:.3e}");

    // judge self-consistency: analytic entropy of the judge's own chain
    let corpus = sample_corpus(&make_markov_source(16, 0.5, &mut RngStream::new(21, 0)).unwrap(), 500, 32, &mut rng).unwrap();
    let vocab = Vocab::with_real_tokens(16).unwrap();
    let judge = ngram_fit(&corpus, &vocab, 1, 0.1).unwrap();
    let d = 32;
    let mut marginal = judge.distribution(&[]);
    let mut h_total = marginal.iter().map(|p| -p * p.ln()).sum::<f64>();
    for _ in 1..d {
        let mut next = vec![0.0; 16];
        let mut h = 0.0;
        for (x, &px) in marginal.iter().enumerate() {
            let row = judge.distribution(&[x]);
            h += px * row.iter().map(|p| -p * p.ln()).sum::<f64>();
            for (y, &pxy) in row.iter().enumerate() {
                next[y] += px * pxy;
            }
        }
        h_total += h;
        marginal = next;
    }
    let judge_ppl = (h_total / d as f64).exp();
    let mut srng = RngStream::new(22, 0);
    let samples: Vec<Sequence> = (0..3200).map(|_| judge.sample(d, &mut srng)).collect();
    let self_ppl = gen_ppl(&samples, &judge).unwrap().ppl;
    let rel = (self_ppl / judge_ppl - 1.0).abs();
    ensure!(rel < 0.05, "judge self-consistency {self_ppl:.3} vs {judge_ppl:.3}");

    // 64-bit vs 32-bit Gumbel: a fixed heavy-tailed denoiser over many steps
    let (num_real, positions, runs) = (256, 4, 1000);
    let hs = build(Kind::Flat, positions, 1024, 1, 256).unwrap();
    let plan = HsPlan::new(&hs).unwrap();
    let v = Vocab::with_real_tokens(num_real).unwrap();
    let row: Vec<f64> = (0..=num_real).map(|k| -2.0 * ((k + 1) as f64).ln()).collect();
    let logits: Vec<f64> = (0..positions).flat_map(|_| row.clone()).collect();
    let mut mean = [0.0; 2];
    let mut differ = 0;
    for r in 0..runs {
        let mut h = [0.0; 2];
        for (k, precision) in [GumbelPrecision::F64, GumbelPrecision::F32].into_iter().enumerate() {
            let opts = SamplerOptions { precision, ..Default::default() };
            let mut run = SamplerRun::new(v, positions, opts, RngStream::new(r, 23)).unwrap();
            for c in 0..plan.num_calls() {
                let spec = plan.call(c).unwrap();
                run.step_original(&spec, &logits[..spec.partition.a * (num_real + 1)]);
            }
            h[k] = token_entropy(&[Sequence(run.tokens)]).unwrap();
        }
        if h[0] != h[1] {
            differ += 1;
        }
        mean[0] += h[0] / runs as f64;
        mean[1] += h[1] / runs as f64;
    }
    ensure!(
        mean[0] > mean[1],
        "64-bit entropy {:.5} not above 32-bit {:.5} ({differ} runs differ)",
        mean[0],
        mean[1]
    );
    Ok(format!(
        "uniform mc_ppl within {worst:.1e}; judge {self_ppl:.3} vs {judge_ppl:.3}; entropy 64-bit {:.4} > 32-bit {:.4} ({differ}/{runs} runs differ)",
        mean[0], mean[1]
    ))
}
