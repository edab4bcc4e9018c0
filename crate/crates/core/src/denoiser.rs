//! A small pre-LayerNorm transformer with arbitrary attention masks and a
//! hand-written backward pass.
//!
//! Parameters live in one flat `f64` buffer described by named tensor specs,
//! which keeps the optimizer, gradient checks and checkpoints trivial. All
//! per-slot arithmetic is independent of the other slots in a call, and
//! attention reduces over keys in index order, so a row computed against a
//! KV cache is bit-identical to the same row computed from scratch.

use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::masks::{AttentionMask, Layout, Wiring};
use crate::process::CumulativeNoiseSchedule;
use crate::rng::RngStream;

const LN_EPS: f64 = 1e-5;
const CKPT_MAGIC: &[u8; 7] = b"HDCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// `|X|`, including MASK.
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_max: usize,
    pub wiring: Wiring,
    pub time_conditioning: bool,
    /// Number of noise levels; sizes the time-embedding table.
    pub levels: u32,
    /// Interpolate input embeddings towards MASK by `e^{-γσ̄}` (γ processes).
    pub weighted_embedding: bool,
}

impl DenoiserConfig {
    pub fn desk(vocab: usize, wiring: Wiring, levels: u32) -> Self {
        Self {
            vocab,
            dim: 64,
            heads: 4,
            layers: 2,
            d_max: 64,
            wiring,
            time_conditioning: false,
            levels,
            weighted_embedding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(invalid("vocab", "need at least two states"));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid("dim", "must be a positive multiple of heads"));
        }
        if self.layers == 0 {
            return Err(invalid("layers", "need at least one layer"));
        }
        if self.d_max == 0 {
            return Err(invalid("d_max", "must be positive"));
        }
        if self.levels == 0 {
            return Err(invalid("levels", "need at least one noise level"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Name, shape and offset of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Index {
    tok: usize,
    pos: usize,
    time: Option<usize>,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    wout: usize,
    bout: usize,
}

fn layout_specs(cfg: &DenoiserConfig) -> (Vec<TensorSpec>, Index) {
    let mut specs = Vec::new();
    let mut off = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let o = off;
        off += shape.iter().product::<usize>();
        specs.push(TensorSpec {
            name,
            shape,
            offset: o,
        });
        o
    };
    let (dd, v) = (cfg.dim, cfg.vocab);
    let tok = push("tok_emb".into(), vec![v + 1, dd]);
    let pos = push("pos_emb".into(), vec![cfg.d_max, dd]);
    let time = cfg
        .time_conditioning
        .then(|| push("time_emb".into(), vec![cfg.levels as usize + 1, dd]));
    let mut layers = Vec::new();
    for l in 0..cfg.layers {
        let mut p = |n: &str, shape: Vec<usize>| push(format!("layer{l}.{n}"), shape);
        layers.push(LayerIdx {
            ln1_g: p("ln1.g", vec![dd]),
            ln1_b: p("ln1.b", vec![dd]),
            wq: p("wq", vec![dd, dd]),
            bq: p("bq", vec![dd]),
            wk: p("wk", vec![dd, dd]),
            bk: p("bk", vec![dd]),
            wv: p("wv", vec![dd, dd]),
            bv: p("bv", vec![dd]),
            wo: p("wo", vec![dd, dd]),
            bo: p("bo", vec![dd]),
            ln2_g: p("ln2.g", vec![dd]),
            ln2_b: p("ln2.b", vec![dd]),
            w1: p("w1", vec![dd, 4 * dd]),
            b1: p("b1", vec![4 * dd]),
            w2: p("w2", vec![4 * dd, dd]),
            b2: p("b2", vec![dd]),
        });
    }
    let lnf_g = push("lnf.g".into(), vec![dd]);
    let lnf_b = push("lnf.b".into(), vec![dd]);
    let wout = push("wout".into(), vec![dd, v]);
    let bout = push("bout".into(), vec![v]);
    (
        specs,
        Index {
            tok,
            pos,
            time,
            layers,
            lnf_g,
            lnf_b,
            wout,
            bout,
        },
    )
}

#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub data: Vec<f64>,
    specs: Vec<TensorSpec>,
    idx: Index,
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl DenoiserParams {
    /// Gaussian(0, 0.02) weights, unit LayerNorm gains, zero biases.
    pub fn init(config: DenoiserConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (specs, idx) = layout_specs(&config);
        let total = specs.last().map_or(0, |s| s.offset + s.len());
        let mut data = vec![0.0; total];
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        for s in &specs {
            let slice = &mut data[s.offset..s.offset + s.len()];
            let last = s.name.rsplit('.').next().unwrap_or("");
            if last == "g" {
                slice.iter_mut().for_each(|v| *v = 1.0);
            } else if s.shape.len() == 2 {
                slice.iter_mut().for_each(|v| *v = normal.sample(rng));
            }
        }
        Ok(Self {
            config,
            data,
            specs,
            idx,
        })
    }

    pub fn from_data(config: DenoiserConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (specs, idx) = layout_specs(&config);
        let total = specs.last().map_or(0, |s| s.offset + s.len());
        if data.len() != total {
            return Err(Error::Dimension {
                context: "parameter buffer",
                expected: total,
                got: data.len(),
            });
        }
        Ok(Self {
            config,
            data,
            specs,
            idx,
        })
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    /// Writes `HDCKPT1`, the config block and every tensor as `f32`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(CKPT_MAGIC)?;
        let fields = [
            c.vocab as u32,
            c.dim as u32,
            c.heads as u32,
            c.layers as u32,
            c.d_max as u32,
            matches!(c.wiring, Wiring::Shifted) as u32,
            c.time_conditioning as u32,
            c.levels,
            c.weighted_embedding as u32,
            self.specs.len() as u32,
        ];
        for f in fields {
            w.write_all(&f.to_le_bytes())?;
        }
        for s in &self.specs {
            let name = s.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(s.shape.len() as u32).to_le_bytes())?;
            for &dim in &s.shape {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(s.len() * 4);
            for &v in &self.data[s.offset..s.offset + s.len()] {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("missing HDCKPT1 magic".into()));
        }
        let u32s = |n: usize, r: &mut R| -> Result<Vec<u32>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                out.push(u32::from_le_bytes(b));
            }
            Ok(out)
        };
        let f = u32s(10, &mut r)?;
        let config = DenoiserConfig {
            vocab: f[0] as usize,
            dim: f[1] as usize,
            heads: f[2] as usize,
            layers: f[3] as usize,
            d_max: f[4] as usize,
            wiring: if f[5] == 1 {
                Wiring::Shifted
            } else {
                Wiring::Aligned
            },
            time_conditioning: f[6] == 1,
            levels: f[7],
            weighted_embedding: f[8] == 1,
        };
        config.validate()?;
        let (specs, _) = layout_specs(&config);
        if specs.len() != f[9] as usize {
            return Err(Error::Format("tensor count does not match config".into()));
        }
        let mut data = vec![0.0; specs.last().map_or(0, |s| s.offset + s.len())];
        for s in &specs {
            let name_len = u32s(1, &mut r)?[0] as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            if name != s.name.as_bytes() {
                return Err(Error::Format(format!("expected tensor {}", s.name)));
            }
            let rank = u32s(1, &mut r)?[0] as usize;
            let shape: Vec<usize> = u32s(rank, &mut r)?.into_iter().map(|v| v as usize).collect();
            if shape != s.shape {
                return Err(Error::Format(format!("bad shape for {}", s.name)));
            }
            let mut buf = vec![0u8; s.len() * 4];
            r.read_exact(&mut buf)?;
            for (dst, c) in data[s.offset..s.offset + s.len()]
                .iter_mut()
                .zip(buf.chunks_exact(4))
            {
                *dst = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
        }
        Self::from_data(config, data)
    }

    /// Rounds every parameter to `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Mixing weight `e^{-γσ̄}` for weighted embeddings.
#[derive(Clone, Copy, Debug)]
pub struct EmbedWeighting<'a> {
    pub sigma: &'a CumulativeNoiseSchedule,
    pub gamma: f64,
}

impl EmbedWeighting<'_> {
    pub fn weight(&self, level: u32) -> f64 {
        (-self.gamma * self.sigma.at(level)).exp()
    }
}

/// One row of denoiser input.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotInput {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub levels: Vec<u32>,
}

impl SlotInput {
    /// Inputs for a layout given the clean and noisy sequences and the
    /// per-position levels of the noisy one.
    pub fn from_layout(
        layout: &Layout,
        clean: &[usize],
        noisy: &[usize],
        noisy_levels: &[u32],
        bos: usize,
    ) -> Self {
        Self {
            tokens: layout.inputs(clean, noisy, bos),
            positions: layout.positions(),
            levels: layout.input_levels(noisy_levels),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn slice(&self, r: std::ops::Range<usize>) -> SlotInput {
        SlotInput {
            tokens: self.tokens[r.clone()].to_vec(),
            positions: self.positions[r.clone()].to_vec(),
            levels: self.levels[r].to_vec(),
        }
    }
}

/// Keys and values of already-processed slots, per layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self {
            len: 0,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends rows `r` of a [`RowsOutput`] to the cache.
    pub fn extend_from(&mut self, out: &RowsOutput, r: std::ops::Range<usize>, dim: usize) {
        for l in 0..self.keys.len() {
            self.keys[l].extend_from_slice(&out.keys[l][r.start * dim..r.end * dim]);
            self.values[l].extend_from_slice(&out.values[l][r.start * dim..r.end * dim]);
        }
        self.len += r.len();
    }
}

/// Logits and freshly computed keys/values of the rows of one call.
#[derive(Clone, Debug)]
pub struct RowsOutput {
    /// `rows × vocab`.
    pub logits: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
struct LnTape {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
struct LayerTape {
    ln1: LnTape,
    a1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    ln2: LnTape,
    a2: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
struct Tape {
    emb_w: Vec<f64>,
    layers: Vec<LayerTape>,
    lnf: LnTape,
    af: Vec<f64>,
}

// y[n×o] = x[n×i] · w[i×o] + b
fn matmul(x: &[f64], w: &[f64], b: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        let yr = &mut y[r * o..(r + 1) * o];
        yr.copy_from_slice(b);
        let xr = &x[r * i..(r + 1) * i];
        for (a, &xv) in xr.iter().enumerate() {
            let wr = &w[a * o..(a + 1) * o];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

// dx[n×i] += dy[n×o] · w^T ; dw[i×o] += x^T · dy ; db += Σ dy
#[allow(clippy::too_many_arguments)]
fn matmul_back(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    i: usize,
    o: usize,
    dx: &mut [f64],
    grads: &mut [f64],
    w_off: usize,
    b_off: usize,
) {
    for r in 0..n {
        let dyr = &dy[r * o..(r + 1) * o];
        let xr = &x[r * i..(r + 1) * i];
        let dxr = &mut dx[r * i..(r + 1) * i];
        for a in 0..i {
            let wr = &w[a * o..(a + 1) * o];
            let mut s = 0.0;
            for (&wv, &g) in wr.iter().zip(dyr) {
                s += wv * g;
            }
            dxr[a] += s;
            let xv = xr[a];
            if xv != 0.0 {
                let gw = &mut grads[w_off + a * o..w_off + (a + 1) * o];
                for (gv, &g) in gw.iter_mut().zip(dyr) {
                    *gv += xv * g;
                }
            }
        }
        let gb = &mut grads[b_off..b_off + o];
        for (gv, &g) in gb.iter_mut().zip(dyr) {
            *gv += g;
        }
    }
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], n: usize, dd: usize, tape: Option<&mut LnTape>) -> Vec<f64> {
    let mut y = vec![0.0; n * dd];
    let mut xhat_all = Vec::new();
    let mut rstd_all = Vec::new();
    for r in 0..n {
        let xr = &x[r * dd..(r + 1) * dd];
        let mean = xr.iter().sum::<f64>() / dd as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dd as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..dd {
            let xh = (xr[c] - mean) * rstd;
            y[r * dd + c] = xh * g[c] + b[c];
            if tape.is_some() {
                xhat_all.push(xh);
            }
        }
        rstd_all.push(rstd);
    }
    if let Some(t) = tape {
        t.xhat = xhat_all;
        t.rstd = rstd_all;
    }
    y
}

fn layer_norm_back(
    t: &LnTape,
    g: &[f64],
    dy: &[f64],
    n: usize,
    dd: usize,
    dx: &mut [f64],
    grads: &mut [f64],
    g_off: usize,
    b_off: usize,
) {
    let mut dxhat = vec![0.0; dd];
    for r in 0..n {
        let xh = &t.xhat[r * dd..(r + 1) * dd];
        let dyr = &dy[r * dd..(r + 1) * dd];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..dd {
            grads[g_off + c] += dyr[c] * xh[c];
            grads[b_off + c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
        }
        m1 /= dd as f64;
        m2 /= dd as f64;
        let rstd = t.rstd[r];
        for c in 0..dd {
            dx[r * dd + c] += rstd * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl DenoiserParams {
    fn check_input(&self, input: &SlotInput, prefix: usize, mask_rows: &[bool]) -> Result<()> {
        let n = input.len();
        let cfg = &self.config;
        if input.positions.len() != n || input.levels.len() != n {
            return Err(Error::Dimension {
                context: "slot input fields",
                expected: n,
                got: input.positions.len().min(input.levels.len()),
            });
        }
        if mask_rows.len() != n * (prefix + n) {
            return Err(Error::Dimension {
                context: "attention mask",
                expected: n * (prefix + n),
                got: mask_rows.len(),
            });
        }
        for r in 0..n {
            if input.tokens[r] > cfg.vocab {
                return Err(invalid("tokens", format!("id {} out of range", input.tokens[r])));
            }
            if input.positions[r] >= cfg.d_max {
                return Err(invalid("positions", format!("position {} >= d_max", input.positions[r])));
            }
            if input.levels[r] > cfg.levels {
                return Err(invalid("levels", format!("level {} > {}", input.levels[r], cfg.levels)));
            }
            if !mask_rows[r * (prefix + n)..(r + 1) * (prefix + n)].iter().any(|&b| b) {
                return Err(invalid("mask", format!("row {r} attends to nothing")));
            }
        }
        Ok(())
    }

    /// Runs `input` rows against an existing cache prefix. `mask_rows` is
    /// `rows × (prefix + rows)`.
    pub fn forward_rows(
        &self,
        cache: &KvCache,
        input: &SlotInput,
        mask_rows: &[bool],
        weighting: Option<EmbedWeighting<'_>>,
    ) -> Result<RowsOutput> {
        self.check_input(input, cache.len(), mask_rows)?;
        Ok(self.run(cache, input, mask_rows, weighting, None))
    }

    /// Logits (`slots × vocab`) for a whole layout.
    pub fn forward(
        &self,
        input: &SlotInput,
        mask: &AttentionMask,
        weighting: Option<EmbedWeighting<'_>>,
    ) -> Result<Vec<f64>> {
        if mask.q_len != input.len() || mask.k_len != input.len() {
            return Err(Error::Dimension {
                context: "mask vs slots",
                expected: input.len(),
                got: mask.q_len,
            });
        }
        let cache = KvCache::new(self.config.layers);
        Ok(self.forward_rows(&cache, input, &mask.allowed, weighting)?.logits)
    }

    fn run(
        &self,
        cache: &KvCache,
        input: &SlotInput,
        mask_rows: &[bool],
        weighting: Option<EmbedWeighting<'_>>,
        mut tape: Option<&mut Tape>,
    ) -> RowsOutput {
        let cfg = &self.config;
        let p = &self.data;
        let (n, dd, v) = (input.len(), cfg.dim, cfg.vocab);
        let (nh, hd) = (cfg.heads, cfg.head_dim());
        let prefix = cache.len();
        let kl = prefix + n;
        let scale = 1.0 / (hd as f64).sqrt();
        let mask_id = v - 1;

        let mut x = vec![0.0; n * dd];
        let mut emb_w = vec![1.0; n];
        for r in 0..n {
            let tok = input.tokens[r];
            let w = match weighting {
                Some(wt) if cfg.weighted_embedding => wt.weight(input.levels[r]),
                _ => 1.0,
            };
            emb_w[r] = w;
            let xr = &mut x[r * dd..(r + 1) * dd];
            let te = &p[self.idx.tok + tok * dd..self.idx.tok + (tok + 1) * dd];
            if w == 1.0 {
                xr.copy_from_slice(te);
            } else {
                let me = &p[self.idx.tok + mask_id * dd..self.idx.tok + (mask_id + 1) * dd];
                for c in 0..dd {
                    xr[c] = w * te[c] + (1.0 - w) * me[c];
                }
            }
            let pe = &p[self.idx.pos + input.positions[r] * dd..][..dd];
            for c in 0..dd {
                xr[c] += pe[c];
            }
            if let Some(t0) = self.idx.time {
                let tv = &p[t0 + input.levels[r] as usize * dd..][..dd];
                for c in 0..dd {
                    xr[c] += tv[c];
                }
            }
        }
        if let Some(t) = tape.as_deref_mut() {
            t.emb_w = emb_w;
            t.layers.clear();
        }

        let mut out_keys = Vec::with_capacity(cfg.layers);
        let mut out_values = Vec::with_capacity(cfg.layers);
        for (l, li) in self.idx.layers.iter().enumerate() {
            let mut lt = LayerTape::default();
            let rec = tape.is_some();
            let a1 = layer_norm(
                &x,
                &p[li.ln1_g..li.ln1_g + dd],
                &p[li.ln1_b..li.ln1_b + dd],
                n,
                dd,
                rec.then_some(&mut lt.ln1),
            );
            let q = matmul(&a1, &p[li.wq..li.wq + dd * dd], &p[li.bq..li.bq + dd], n, dd, dd);
            let k = matmul(&a1, &p[li.wk..li.wk + dd * dd], &p[li.bk..li.bk + dd], n, dd, dd);
            let vv = matmul(&a1, &p[li.wv..li.wv + dd * dd], &p[li.bv..li.bv + dd], n, dd, dd);
            let key_at = |j: usize| -> &[f64] {
                if j < prefix {
                    &cache.keys[l][j * dd..(j + 1) * dd]
                } else {
                    &k[(j - prefix) * dd..(j - prefix + 1) * dd]
                }
            };
            let val_at = |j: usize| -> &[f64] {
                if j < prefix {
                    &cache.values[l][j * dd..(j + 1) * dd]
                } else {
                    &vv[(j - prefix) * dd..(j - prefix + 1) * dd]
                }
            };
            let mut att = vec![0.0; n * dd];
            let mut probs = if rec { vec![0.0; n * nh * kl] } else { Vec::new() };
            let mut sc = vec![0.0; kl];
            for r in 0..n {
                let mrow = &mask_rows[r * kl..(r + 1) * kl];
                for h in 0..nh {
                    let qh = &q[r * dd + h * hd..r * dd + (h + 1) * hd];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..kl {
                        if mrow[j] {
                            let kh = &key_at(j)[h * hd..(h + 1) * hd];
                            let mut s = 0.0;
                            for c in 0..hd {
                                s += qh[c] * kh[c];
                            }
                            sc[j] = s * scale;
                            mx = mx.max(sc[j]);
                        }
                    }
                    let mut z = 0.0;
                    for j in 0..kl {
                        if mrow[j] {
                            sc[j] = (sc[j] - mx).exp();
                            z += sc[j];
                        }
                    }
                    let out = &mut att[r * dd + h * hd..r * dd + (h + 1) * hd];
                    for j in 0..kl {
                        if mrow[j] {
                            let pj = sc[j] / z;
                            if rec {
                                probs[(r * nh + h) * kl + j] = pj;
                            }
                            let vh = &val_at(j)[h * hd..(h + 1) * hd];
                            for c in 0..hd {
                                out[c] += pj * vh[c];
                            }
                        }
                    }
                }
            }
            let proj = matmul(&att, &p[li.wo..li.wo + dd * dd], &p[li.bo..li.bo + dd], n, dd, dd);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            let a2 = layer_norm(
                &x,
                &p[li.ln2_g..li.ln2_g + dd],
                &p[li.ln2_b..li.ln2_b + dd],
                n,
                dd,
                rec.then_some(&mut lt.ln2),
            );
            let h_pre = matmul(&a2, &p[li.w1..li.w1 + dd * 4 * dd], &p[li.b1..li.b1 + 4 * dd], n, dd, 4 * dd);
            let h_act: Vec<f64> = h_pre.iter().map(|&u| gelu(u)).collect();
            let mlp = matmul(&h_act, &p[li.w2..li.w2 + 4 * dd * dd], &p[li.b2..li.b2 + dd], n, 4 * dd, dd);
            for (xv, mv) in x.iter_mut().zip(&mlp) {
                *xv += mv;
            }
            if let Some(t) = tape.as_deref_mut() {
                lt.a1 = a1;
                lt.q = q;
                lt.k = k.clone();
                lt.v = vv.clone();
                lt.probs = probs;
                lt.att = att;
                lt.a2 = a2;
                lt.h_pre = h_pre;
                lt.h_act = h_act;
                t.layers.push(lt);
            }
            out_keys.push(k);
            out_values.push(vv);
        }
        let idx = &self.idx;
        let mut lnf = LnTape::default();
        let af = layer_norm(
            &x,
            &p[idx.lnf_g..idx.lnf_g + dd],
            &p[idx.lnf_b..idx.lnf_b + dd],
            n,
            dd,
            tape.is_some().then_some(&mut lnf),
        );
        let logits = matmul(&af, &p[idx.wout..idx.wout + dd * v], &p[idx.bout..idx.bout + v], n, dd, v);
        if let Some(t) = tape {
            t.lnf = lnf;
            t.af = af;
        }
        RowsOutput {
            logits,
            keys: out_keys,
            values: out_values,
        }
    }

    fn backward(
        &self,
        input: &SlotInput,
        mask: &[bool],
        tape: &Tape,
        dlogits: &[f64],
        grads: &mut [f64],
    ) {
        let cfg = &self.config;
        let p = &self.data;
        let idx = &self.idx;
        let (n, dd, v) = (input.len(), cfg.dim, cfg.vocab);
        let (nh, hd) = (cfg.heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();

        let mut daf = vec![0.0; n * dd];
        matmul_back(&tape.af, &p[idx.wout..idx.wout + dd * v], dlogits, n, dd, v, &mut daf, grads, idx.wout, idx.bout);
        let mut dx = vec![0.0; n * dd];
        layer_norm_back(&tape.lnf, &p[idx.lnf_g..idx.lnf_g + dd], &daf, n, dd, &mut dx, grads, idx.lnf_g, idx.lnf_b);

        for (li, lt) in idx.layers.iter().zip(&tape.layers).rev() {
            // feed-forward block
            let mut dh = vec![0.0; n * 4 * dd];
            matmul_back(&lt.h_act, &p[li.w2..li.w2 + 4 * dd * dd], &dx, n, 4 * dd, dd, &mut dh, grads, li.w2, li.b2);
            for (g, &u) in dh.iter_mut().zip(&lt.h_pre) {
                *g *= gelu_grad(u);
            }
            let mut da2 = vec![0.0; n * dd];
            matmul_back(&lt.a2, &p[li.w1..li.w1 + dd * 4 * dd], &dh, n, dd, 4 * dd, &mut da2, grads, li.w1, li.b1);
            layer_norm_back(&lt.ln2, &p[li.ln2_g..li.ln2_g + dd], &da2, n, dd, &mut dx, grads, li.ln2_g, li.ln2_b);

            // attention block
            let mut datt = vec![0.0; n * dd];
            matmul_back(&lt.att, &p[li.wo..li.wo + dd * dd], &dx, n, dd, dd, &mut datt, grads, li.wo, li.bo);
            let mut dq = vec![0.0; n * dd];
            let mut dk = vec![0.0; n * dd];
            let mut dv = vec![0.0; n * dd];
            let mut dp = vec![0.0; n];
            for r in 0..n {
                let mrow = &mask[r * n..(r + 1) * n];
                for h in 0..nh {
                    let pr = &lt.probs[(r * nh + h) * n..(r * nh + h + 1) * n];
                    let dah = &datt[r * dd + h * hd..r * dd + (h + 1) * hd];
                    let mut dot = 0.0;
                    for j in 0..n {
                        if mrow[j] {
                            let vh = &lt.v[j * dd + h * hd..j * dd + (h + 1) * hd];
                            let mut s = 0.0;
                            for c in 0..hd {
                                s += dah[c] * vh[c];
                                dv[j * dd + h * hd + c] += pr[j] * dah[c];
                            }
                            dp[j] = s;
                            dot += pr[j] * s;
                        }
                    }
                    for j in 0..n {
                        if mrow[j] {
                            let ds = pr[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..hd {
                                dq[r * dd + h * hd + c] += ds * lt.k[j * dd + h * hd + c];
                                dk[j * dd + h * hd + c] += ds * lt.q[r * dd + h * hd + c];
                            }
                        }
                    }
                }
            }
            let mut da1 = vec![0.0; n * dd];
            matmul_back(&lt.a1, &p[li.wq..li.wq + dd * dd], &dq, n, dd, dd, &mut da1, grads, li.wq, li.bq);
            matmul_back(&lt.a1, &p[li.wk..li.wk + dd * dd], &dk, n, dd, dd, &mut da1, grads, li.wk, li.bk);
            matmul_back(&lt.a1, &p[li.wv..li.wv + dd * dd], &dv, n, dd, dd, &mut da1, grads, li.wv, li.bv);
            layer_norm_back(&lt.ln1, &p[li.ln1_g..li.ln1_g + dd], &da1, n, dd, &mut dx, grads, li.ln1_g, li.ln1_b);
        }

        let mask_id = v - 1;
        for r in 0..n {
            let g = &dx[r * dd..(r + 1) * dd];
            let w = tape.emb_w[r];
            let tok = input.tokens[r];
            for c in 0..dd {
                grads[idx.tok + tok * dd + c] += w * g[c];
            }
            if w != 1.0 {
                for c in 0..dd {
                    grads[idx.tok + mask_id * dd + c] += (1.0 - w) * g[c];
                }
            }
            let pos = input.positions[r];
            for c in 0..dd {
                grads[idx.pos + pos * dd + c] += g[c];
            }
            if let Some(t0) = idx.time {
                let lv = input.levels[r] as usize;
                for c in 0..dd {
                    grads[t0 + lv * dd + c] += g[c];
                }
            }
        }
    }

    /// Weighted cross-entropy `Σ_slot weight · (−log softmax(logits)[target])`
    /// and its gradient, accumulated into `grads`. Slots with zero weight
    /// contribute nothing.
    pub fn loss_and_grads(
        &self,
        input: &SlotInput,
        mask: &AttentionMask,
        weighting: Option<EmbedWeighting<'_>>,
        targets: &[WeightedTarget],
        grads: &mut [f64],
    ) -> Result<f64> {
        Ok(self.loss_grads_nll(input, mask, weighting, targets, grads)?.0)
    }

    /// As [`DenoiserParams::loss_and_grads`], also returning the unweighted
    /// NLL of every slot with non-zero weight (0 elsewhere).
    pub fn loss_grads_nll(
        &self,
        input: &SlotInput,
        mask: &AttentionMask,
        weighting: Option<EmbedWeighting<'_>>,
        targets: &[WeightedTarget],
        grads: &mut [f64],
    ) -> Result<(f64, Vec<f64>)> {
        if targets.len() != input.len() || mask.q_len != input.len() || mask.k_len != input.len() {
            return Err(Error::Dimension {
                context: "loss targets vs slots",
                expected: input.len(),
                got: targets.len(),
            });
        }
        if grads.len() != self.data.len() {
            return Err(Error::Dimension {
                context: "gradient buffer",
                expected: self.data.len(),
                got: grads.len(),
            });
        }
        let empty = KvCache::new(self.config.layers);
        self.check_input(input, 0, &mask.allowed)?;
        let mut tape = Tape::default();
        let out = self.run(&empty, input, &mask.allowed, weighting, Some(&mut tape));
        let v = self.config.vocab;
        let mut dlogits = vec![0.0; input.len() * v];
        let mut loss = 0.0;
        let mut nll = vec![0.0; input.len()];
        for (r, t) in targets.iter().enumerate() {
            if t.weight == 0.0 {
                continue;
            }
            let row = &out.logits[r * v..(r + 1) * v];
            let lsm = log_softmax(row);
            nll[r] = -lsm[t.token];
            loss += t.weight * nll[r];
            let d = &mut dlogits[r * v..(r + 1) * v];
            for c in 0..v {
                d[c] = t.weight * lsm[c].exp();
            }
            d[t.token] -= t.weight;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite { batch: 0 });
        }
        self.backward(input, &mask.allowed, &tape, &dlogits, grads);
        Ok((loss, nll))
    }
}

/// Target token and loss weight for one slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedTarget {
    pub token: usize,
    pub weight: f64,
}

impl WeightedTarget {
    pub const IGNORE: WeightedTarget = WeightedTarget { token: 0, weight: 0.0 };
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
    let lz = mx + z.ln();
    row.iter().map(|&x| x - lz).collect()
}

/// SGD with optional momentum and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Clip the global gradient norm to this value; `None` disables.
    pub clip: Option<f64>,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip: Option<f64>) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(invalid("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid("momentum", "must lie in [0, 1)"));
        }
        if let Some(c) = clip {
            if !(c > 0.0) {
                return Err(invalid("clip", "must be positive"));
            }
        }
        Ok(Self {
            lr,
            momentum,
            clip,
            velocity: Vec::new(),
        })
    }

    /// Updates `params` in place and returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> f64 {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.momentum == 0.0 {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= self.lr * scale * g;
            }
        } else {
            if self.velocity.len() != params.len() {
                self.velocity = vec![0.0; params.len()];
            }
            for ((p, g), vel) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
                *vel = self.momentum * *vel + scale * g;
                *p -= self.lr * *vel;
            }
        }
        norm
    }
}

/// Adam with bias correction and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, clip: Option<f64>) -> Result<Self> {
        Sgd::new(lr, 0.0, clip)?;
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    /// Updates `params` in place and returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> f64 {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = scale * grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Either optimizer behind one `step`.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, clip: Option<f64>) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(lr, momentum, clip)?),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, clip)?),
        })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> f64 {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }
}

/// Plain SGD update with clipping; see [`Sgd`] for momentum.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, clip: Option<f64>) -> Result<f64> {
    Ok(Sgd::new(lr, 0.0, clip)?.step(params, grads))
}
