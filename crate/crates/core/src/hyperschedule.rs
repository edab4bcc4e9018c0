//! Hyperschedules: a noise level `τ[t][i] ∈ {0..=levels}` for every step `t`
//! and position `i`.
//!
//! Row 0 is pure noise (`levels` everywhere) and row `T` is clean. Step `t`
//! of a generation moves the sequence from row `t` to row `t + 1`.

use std::fmt;
use std::ops::Range;

use num_rational::Ratio;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Quench,
    Flat,
    Block { omega: usize },
    Slide { omega: usize },
    /// Built from explicit rows with [`Hyperschedule::from_rows`].
    Custom,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Quench => write!(f, "quench"),
            Kind::Flat => write!(f, "flat"),
            Kind::Block { omega } => write!(f, "block(omega={omega})"),
            Kind::Slide { omega } => write!(f, "slide(omega={omega})"),
            Kind::Custom => write!(f, "custom"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hyperschedule {
    kind: Kind,
    d: usize,
    steps: usize,
    levels: u32,
    rho: Ratio<u64>,
    /// Row-major `(steps + 1) × d`.
    tau: Vec<u32>,
}

/// `[0, s)` settled, `[s, s + a)` active, `[s + a, d)` worthless.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Partition {
    pub s: usize,
    pub a: usize,
    pub d: usize,
}

impl Partition {
    pub fn settled(&self) -> Range<usize> {
        0..self.s
    }

    pub fn active(&self) -> Range<usize> {
        self.s..self.s + self.a
    }

    pub fn worthless(&self) -> Range<usize> {
        self.s + self.a..self.d
    }

    /// Settled plus active: the positions a denoiser call has to see.
    pub fn visible(&self) -> usize {
        self.s + self.a
    }
}

/// `round(levels · num / den)` with halves rounded up, in exact integers.
fn round_level(levels: u32, num: u64, den: u64) -> u32 {
    let l = levels as u64;
    ((2 * l * num + den) / (2 * den)) as u32
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Builds a hyperschedule of the given kind. `rho_num / rho_den` is the
/// generation-rate parameter; it sets the number of steps per block (Block),
/// the slide speed (Slide) or the step count `⌈d/ρ⌉` (Flat).
pub fn build(
    kind: Kind,
    d: usize,
    levels: u32,
    rho_num: u64,
    rho_den: u64,
) -> Result<Hyperschedule> {
    if d == 0 {
        return Err(invalid("d", "sequence length must be at least 1"));
    }
    if levels == 0 {
        return Err(invalid("levels", "need at least one noise level"));
    }
    if rho_num == 0 || rho_den == 0 {
        return Err(invalid("rho", "must be a positive rational"));
    }
    let rho = Ratio::new(rho_num, rho_den);
    let (p, q) = (*rho.numer(), *rho.denom());
    let du = d as u64;
    let lv = levels;
    let (steps, f): (usize, Box<dyn Fn(usize, usize) -> u32>) = match kind {
        Kind::Quench => {
            if levels != 1 {
                return Err(invalid("levels", "quench uses exactly one noise level"));
            }
            if rho != Ratio::from_integer(1) {
                return Err(invalid("rho", "quench generates one token per step"));
            }
            (d, Box::new(|r, i| u32::from(i >= r)))
        }
        Kind::Flat => {
            let t = ceil_div(du * q, p).max(1);
            (
                t as usize,
                Box::new(move |r, _| round_level(lv, t - r as u64, t)),
            )
        }
        Kind::Block { omega } => {
            check_omega(omega, d)?;
            let w = omega as u64;
            let k = ceil_div(w * q, p).max(1);
            let t = k * ceil_div(du, w);
            (
                t as usize,
                Box::new(move |r, i| {
                    let r = r as u64;
                    let start = (i as u64 / w) * k;
                    if r <= start {
                        lv
                    } else if r >= start + k {
                        0
                    } else {
                        round_level(lv, k - (r - start), k)
                    }
                }),
            )
        }
        Kind::Slide { omega } => {
            check_omega(omega, d)?;
            let w = omega as u64;
            let t = ceil_div((du + w - 1) * q, p);
            (
                t as usize,
                Box::new(move |r, i| {
                    // clip((i − ρr + ω)/ω, 0, 1) with everything scaled by ωq
                    let num = ((i as u64 + w) * q) as i128 - (p as i128) * (r as i128);
                    let den = w * q;
                    let num = num.clamp(0, den as i128) as u64;
                    round_level(lv, num, den)
                }),
            )
        }
        Kind::Custom => {
            return Err(invalid("kind", "custom schedules are built with from_rows"))
        }
    };
    let mut tau = Vec::with_capacity((steps + 1) * d);
    for r in 0..=steps {
        for i in 0..d {
            tau.push(f(r, i));
        }
    }
    let hs = Hyperschedule {
        kind,
        d,
        steps,
        levels,
        rho,
        tau,
    };
    debug_assert!(hs.check_invariants().is_ok());
    Ok(hs)
}

fn check_omega(omega: usize, d: usize) -> Result<()> {
    if omega == 0 {
        return Err(invalid("omega", "window width must be at least 1"));
    }
    if omega > d {
        return Err(invalid("omega", format!("window width {omega} exceeds d={d}")));
    }
    Ok(())
}

impl Hyperschedule {
    /// Wraps explicit rows `tau[0..=T]`, each of length `d`.
    pub fn from_rows(levels: u32, rows: Vec<Vec<u32>>) -> Result<Self> {
        if levels == 0 {
            return Err(invalid("levels", "need at least one noise level"));
        }
        if rows.len() < 2 {
            return Err(invalid("tau", "need at least two rows"));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(invalid("d", "sequence length must be at least 1"));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Dimension {
                context: "hyperschedule row",
                expected: d,
                got: bad.len(),
            });
        }
        let steps = rows.len() - 1;
        let hs = Hyperschedule {
            kind: Kind::Custom,
            d,
            steps,
            levels,
            rho: Ratio::new(d as u64, steps as u64),
            tau: rows.concat(),
        };
        hs.check_invariants()?;
        Ok(hs)
    }

    /// Boundary rows, range and per-position monotonicity.
    pub fn check_invariants(&self) -> Result<()> {
        for i in 0..self.d {
            if self.tau(0, i) != self.levels || self.tau(self.steps, i) != 0 {
                return Err(invalid("tau", format!("boundary rows violated at position {i}")));
            }
            for t in 0..=self.steps {
                let v = self.tau(t, i);
                if v > self.levels {
                    return Err(invalid("tau", format!("level {v} out of range at ({t},{i})")));
                }
                if t > 0 && v > self.tau(t - 1, i) {
                    return Err(invalid("tau", format!("level increases at ({t},{i})")));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of generation steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Maximum noise level.
    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// The rate parameter the schedule was built with.
    pub fn rho_param(&self) -> Ratio<u64> {
        self.rho
    }

    #[inline]
    pub fn tau(&self, t: usize, i: usize) -> u32 {
        self.tau[t * self.d + i]
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.tau[t * self.d..(t + 1) * self.d]
    }

    /// Per-position time `τ[t][i] / levels ∈ [0, 1]`.
    pub fn time(&self, t: usize, i: usize) -> f64 {
        self.tau(t, i) as f64 / self.levels as f64
    }

    /// Nominal window width: the construction parameter for Block and Slide.
    pub fn omega(&self) -> usize {
        match self.kind {
            Kind::Quench => 1,
            Kind::Flat => self.d,
            Kind::Block { omega } | Kind::Slide { omega } => omega,
            Kind::Custom => window_width(self),
        }
    }

    fn is_settled(&self, t: usize, i: usize) -> bool {
        self.tau(t, i) == 0 && self.tau(t + 1, i) == 0
    }

    fn is_worthless(&self, t: usize, i: usize) -> bool {
        self.tau(t, i) == self.levels && self.tau(t + 1, i) == self.levels
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..=self.steps {
            let row: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Plain (ASCII) PGM, one pixel row per step; white is pure noise.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n{}\n", self.d, self.steps + 1, self.levels);
        for t in 0..=self.steps {
            let row: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Largest number of positions, over all steps, whose level pair
/// `(τ[t][i], τ[t+1][i])` is neither `(0, 0)` nor `(levels, levels)`.
pub fn window_width(hs: &Hyperschedule) -> usize {
    (0..hs.steps)
        .map(|t| {
            (0..hs.d)
                .filter(|&i| !hs.is_settled(t, i) && !hs.is_worthless(t, i))
                .count()
        })
        .max()
        .unwrap_or(0)
}

/// `d / T` as an exact fraction.
pub fn generation_rate(hs: &Hyperschedule) -> Ratio<u64> {
    Ratio::new(hs.d as u64, hs.steps as u64)
}

/// Splits the positions at step `t` into settled, active and worthless runs.
/// Flat schedules are all-active by definition.
pub fn partition_at(hs: &Hyperschedule, t: usize) -> Result<Partition> {
    if t >= hs.steps {
        return Err(invalid("t", format!("step {t} outside [0, {})", hs.steps)));
    }
    let d = hs.d;
    if hs.kind == Kind::Flat {
        return Ok(Partition { s: 0, a: d, d });
    }
    let s = (0..d).take_while(|&i| hs.is_settled(t, i)).count();
    let w = (s..d).rev().take_while(|&i| hs.is_worthless(t, i)).count();
    let a = d - s - w;
    if let Some(i) = (s..s + a).find(|&i| hs.is_settled(t, i) || hs.is_worthless(t, i)) {
        return Err(invalid(
            "tau",
            format!("step {t}: position {i} breaks the settled/active/worthless order"),
        ));
    }
    Ok(Partition { s, a, d })
}
