//! Slot layouts and attention masks for inference and efficient training,
//! plus KV-cache cost accounting.
//!
//! A layout is a list of slots. Each slot feeds one input token to the
//! denoiser and produces the prediction for one target position. Position
//! embeddings use the target position, so the Aligned and Shifted wirings
//! differ only in which token a slot reads:
//!
//! * Aligned: slot for target `p` reads `x[p]`.
//! * Shifted: slot for target `p` reads `x[p-1]` (the BOS token for `p = 0`).

use std::fmt;

use crate::error::{invalid, Result};
use crate::hyperschedule::Partition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Wiring {
    Aligned,
    Shifted,
}

impl fmt::Display for Wiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Wiring::Aligned => write!(f, "aligned"),
            Wiring::Shifted => write!(f, "shifted"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Settled,
    Active,
    /// The Shifted wiring's BOS slot.
    Conditioning,
}

/// Where a slot's input token comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Input {
    Bos,
    Clean(usize),
    Noisy(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    /// Position whose token this slot's output predicts; also its position id.
    pub target: usize,
    pub input: Input,
    pub role: Role,
    /// Denoising slot (output trained or sampled) rather than a causal one.
    pub noisy: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub q_len: usize,
    pub k_len: usize,
    /// Row-major `q_len × k_len`.
    pub allowed: Vec<bool>,
    pub roles: Vec<Role>,
}

impl AttentionMask {
    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.k_len + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.k_len..(q + 1) * self.k_len]
    }

    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allowed[q * n + k] = true;
            }
        }
        Self {
            q_len: n,
            k_len: n,
            allowed,
            roles: vec![Role::Settled; n],
        }
    }

    /// Plain PBM (P1): `1` (black) marks an allowed edge.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.k_len, self.q_len);
        for q in 0..self.q_len {
            let row: Vec<&str> = self.row(q).iter().map(|&b| if b { "1" } else { "0" }).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for q in 0..self.q_len {
            let row: Vec<&str> = self.row(q).iter().map(|&b| if b { "1" } else { "0" }).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// The sub-matrix over the given query and key ranges.
    pub fn block(&self, qs: std::ops::Range<usize>, ks: std::ops::Range<usize>) -> Vec<bool> {
        let mut out = Vec::with_capacity(qs.len() * ks.len());
        for q in qs {
            for k in ks.clone() {
                out.push(self.get(q, k));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub wiring: Wiring,
    pub slots: Vec<Slot>,
    pub mask: AttentionMask,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Input token ids for each slot. `bos` is the id of the conditioning
    /// embedding.
    pub fn inputs(&self, clean: &[usize], noisy: &[usize], bos: usize) -> Vec<usize> {
        self.slots
            .iter()
            .map(|s| match s.input {
                Input::Bos => bos,
                Input::Clean(p) => clean[p],
                Input::Noisy(p) => noisy[p],
            })
            .collect()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.target).collect()
    }

    /// Noise level of each slot's input token: zero for BOS and clean inputs.
    pub fn input_levels(&self, noisy_levels: &[u32]) -> Vec<u32> {
        self.slots
            .iter()
            .map(|s| match s.input {
                Input::Bos | Input::Clean(_) => 0,
                Input::Noisy(p) => noisy_levels[p],
            })
            .collect()
    }
}

fn input_for(wiring: Wiring, target: usize, src: fn(usize) -> Input) -> Input {
    match wiring {
        Wiring::Aligned => src(target),
        Wiring::Shifted if target == 0 => Input::Bos,
        Wiring::Shifted => src(target - 1),
    }
}

fn role_for(input: Input, settled: bool) -> Role {
    match (input, settled) {
        (Input::Bos, _) => Role::Conditioning,
        (_, true) => Role::Settled,
        (_, false) => Role::Active,
    }
}

/// Inference layout for one generation step: one slot per settled or active
/// target position, worthless positions dropped. Rows of settled targets are
/// causal, rows of active targets see every slot.
pub fn inference_layout(wiring: Wiring, part: &Partition) -> Layout {
    let n = part.visible();
    let mut slots = Vec::with_capacity(n);
    let mut allowed = vec![false; n * n];
    for p in 0..n {
        let settled = p < part.s;
        let input = input_for(wiring, p, Input::Noisy);
        slots.push(Slot {
            target: p,
            input,
            role: role_for(input, settled),
            noisy: !settled,
        });
        let keys = if settled { p + 1 } else { n };
        allowed[p * n..p * n + keys].iter_mut().for_each(|b| *b = true);
    }
    let roles = slots.iter().map(|s| s.role).collect();
    Layout {
        wiring,
        slots,
        mask: AttentionMask {
            q_len: n,
            k_len: n,
            allowed,
            roles,
        },
    }
}

pub fn inference_mask(wiring: Wiring, part: &Partition) -> AttentionMask {
    inference_layout(wiring, part).mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainKind {
    Slide,
    Block,
}

/// Efficient training layout: `d` clean causal slots followed by one group of
/// noisy slots per interval `[j, min(j + ω, d))`. A noisy slot sees the clean
/// slots whose target precedes its interval, and its whole interval. Clean
/// slots never see noisy ones.
pub fn training_layout(
    wiring: Wiring,
    kind: TrainKind,
    d: usize,
    omega: usize,
    starts: &[usize],
) -> Result<Layout> {
    if d == 0 {
        return Err(invalid("d", "sequence length must be at least 1"));
    }
    if omega == 0 || omega > d {
        return Err(invalid("omega", format!("need 1 <= omega <= d, got {omega}")));
    }
    for w in starts.windows(2) {
        if w[1] <= w[0] {
            return Err(invalid("starts", "interval starts must be strictly increasing"));
        }
    }
    for &j in starts {
        if j >= d {
            return Err(invalid("starts", format!("start {j} outside [0, {d})")));
        }
        if kind == TrainKind::Block && j % omega != 0 {
            return Err(invalid("starts", format!("block start {j} is not a multiple of {omega}")));
        }
    }

    let mut slots = Vec::new();
    for p in 0..d {
        let input = input_for(wiring, p, Input::Clean);
        slots.push(Slot {
            target: p,
            input,
            role: role_for(input, true),
            noisy: false,
        });
    }
    let mut groups = Vec::with_capacity(starts.len());
    for &j in starts {
        let end = (j + omega).min(d);
        let first = slots.len();
        for p in j..end {
            let input = match wiring {
                Wiring::Aligned => Input::Noisy(p),
                Wiring::Shifted if p == j => {
                    if j == 0 {
                        Input::Bos
                    } else {
                        Input::Clean(j - 1)
                    }
                }
                Wiring::Shifted => Input::Noisy(p - 1),
            };
            slots.push(Slot {
                target: p,
                input,
                role: role_for(input, false),
                noisy: true,
            });
        }
        groups.push((j, first, slots.len()));
    }

    let n = slots.len();
    let mut allowed = vec![false; n * n];
    for q in 0..d {
        allowed[q * n..q * n + q + 1].iter_mut().for_each(|b| *b = true);
    }
    for &(j, first, last) in &groups {
        for q in first..last {
            let row = &mut allowed[q * n..(q + 1) * n];
            row[..j].iter_mut().for_each(|b| *b = true);
            row[first..last].iter_mut().for_each(|b| *b = true);
        }
    }
    let roles = slots.iter().map(|s| s.role).collect();
    Ok(Layout {
        wiring,
        slots,
        mask: AttentionMask {
            q_len: n,
            k_len: n,
            allowed,
            roles,
        },
    })
}

pub fn training_mask(
    wiring: Wiring,
    kind: TrainKind,
    d: usize,
    omega: usize,
    starts: &[usize],
) -> Result<AttentionMask> {
    Ok(training_layout(wiring, kind, d, omega, starts)?.mask)
}

/// Call and token counts of fixed-width windowed decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KvCost {
    pub l: usize,
    pub omega: usize,
    pub rho: usize,
    pub calls: usize,
    pub cost_nocache: usize,
    pub cost_cache: usize,
}

pub fn kv_cost(l: usize, omega: usize, rho: usize) -> Result<KvCost> {
    if omega == 0 || omega > l {
        return Err(invalid("omega", format!("need 1 <= omega <= L, got {omega} with L={l}")));
    }
    if rho == 0 {
        return Err(invalid("rho", "must be at least 1"));
    }
    let calls = (l - omega).div_ceil(rho) + 1;
    Ok(KvCost {
        l,
        omega,
        rho,
        calls,
        cost_nocache: calls * omega,
        cost_cache: omega + (calls - 1) * rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_aligned_is_dense() {
        let m = inference_mask(Wiring::Aligned, &Partition { s: 0, a: 6, d: 6 });
        assert!(m.allowed.iter().all(|&b| b));
        assert!(m.roles.iter().all(|&r| r == Role::Active));
    }

    #[test]
    fn settled_prefix_is_causal() {
        let m = inference_mask(Wiring::Aligned, &Partition { s: 8, a: 4, d: 12 });
        assert_eq!((m.q_len, m.k_len), (12, 12));
        assert_eq!(m.block(0..8, 0..8), AttentionMask::causal(8).allowed);
        assert!(m.block(0..8, 8..12).iter().all(|&b| !b));
        assert!(m.block(8..12, 0..12).iter().all(|&b| b));
    }

    #[test]
    fn shifted_flat_has_conditioning_slot() {
        let l = inference_layout(Wiring::Shifted, &Partition { s: 0, a: 5, d: 5 });
        assert_eq!((l.mask.q_len, l.mask.k_len), (5, 5));
        assert_eq!(l.mask.roles[0], Role::Conditioning);
        assert_eq!(l.slots[0].input, Input::Bos);
        assert_eq!(l.slots[4].input, Input::Noisy(3));
    }

    #[test]
    fn worthless_positions_are_dropped() {
        let l = inference_layout(Wiring::Aligned, &Partition { s: 3, a: 2, d: 9 });
        assert_eq!(l.len(), 5);
    }

    #[test]
    fn empty_starts_is_causal() {
        for w in [Wiring::Aligned, Wiring::Shifted] {
            let m = training_mask(w, TrainKind::Slide, 7, 3, &[]).unwrap();
            assert_eq!(m.allowed, AttentionMask::causal(7).allowed);
        }
    }

    #[test]
    fn block_training_dimensions() {
        let m = training_mask(Wiring::Aligned, TrainKind::Block, 12, 4, &[0, 4, 8]).unwrap();
        assert_eq!((m.q_len, m.k_len), (24, 24));
        for b in 0..3 {
            let q = 12 + 4 * b;
            let clean = m.row(q)[..12].iter().filter(|&&x| x).count();
            let noisy = m.row(q)[12..].iter().filter(|&&x| x).count();
            assert_eq!((clean, noisy), (4 * b, 4));
        }
        assert!(training_mask(Wiring::Aligned, TrainKind::Block, 12, 4, &[2]).is_err());
        assert!(training_mask(Wiring::Aligned, TrainKind::Slide, 12, 4, &[5, 2]).is_err());
        assert!(training_mask(Wiring::Aligned, TrainKind::Slide, 12, 4, &[12]).is_err());
    }

    #[test]
    fn slide_interval_truncates_at_d() {
        let l = training_layout(Wiring::Aligned, TrainKind::Slide, 12, 4, &[2, 5, 11]).unwrap();
        assert_eq!(l.len(), 12 + 4 + 4 + 1);
        assert_eq!(l.slots[20].target, 11);
    }

    #[test]
    fn shifted_training_repeats_preceding_clean_token() {
        let l = training_layout(Wiring::Shifted, TrainKind::Block, 12, 4, &[0, 4, 8]).unwrap();
        assert_eq!(l.slots[12].input, Input::Bos);
        assert_eq!(l.slots[13].input, Input::Noisy(0));
        assert_eq!(l.slots[16].input, Input::Clean(3));
        assert_eq!(l.slots[19].input, Input::Noisy(6));
        let a = training_mask(Wiring::Aligned, TrainKind::Block, 12, 4, &[0, 4, 8]).unwrap();
        assert_eq!(a.allowed, l.mask.allowed);
    }

    #[test]
    fn kv_cost_table() {
        let c = kv_cost(12, 4, 2).unwrap();
        assert_eq!((c.calls, c.cost_nocache, c.cost_cache), (5, 20, 12));
        let c = kv_cost(8, 8, 3).unwrap();
        assert_eq!((c.calls, c.cost_nocache, c.cost_cache), (1, 8, 8));
        let c = kv_cost(1024, 256, 4).unwrap();
        assert_eq!((c.calls, c.cost_cache), (193, 1024));
        assert!(kv_cost(4, 5, 1).is_err());
    }
}
