//! `key=value` run configuration.
//!
//! Every key has a default except the noise variant: exactly one of `gamma`
//! or `epsilon` must be given. Unknown keys and out-of-domain values are
//! rejected with the offending key in the message.

use std::collections::BTreeMap;
use std::path::Path;

use hdlm::denoiser::{DenoiserConfig, OptimizerKind};
use hdlm::hyperschedule::{build, Hyperschedule, Kind};
use hdlm::loss::LossWeights;
use hdlm::masks::Wiring;
use hdlm::process::{linear_alpha, loglinear_sigma, EpsilonProcess};
use hdlm::sampler::{Correction, GumbelPrecision, SamplerKind, SamplerOptions};
use hdlm::train::{Process, TrainConfig};

use crate::CliError;

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("num_real", "16"),
    ("concentration", "0.5"),
    ("seq_len", "32"),
    ("train_sequences", "2000"),
    ("heldout_sequences", "200"),
    ("judge_sequences", "2000"),
    ("levels", "32"),
    ("sigma_min", "0.001"),
    ("sigma_max", "20"),
    ("kind", "flat"),
    ("omega", "4"),
    ("rho", "1"),
    ("wiring", "aligned"),
    ("dim", "32"),
    ("heads", "4"),
    ("layers", "2"),
    ("d_max", "64"),
    ("time_conditioning", "true"),
    ("weighted_embedding", "false"),
    ("beta1", "1"),
    ("beta2", "1"),
    ("lambda", "1"),
    ("optimizer", "adam"),
    ("lr", "0.003"),
    ("momentum", "0.9"),
    ("clip", "1"),
    ("steps", "5000"),
    ("batch_size", "32"),
    ("efficient", "true"),
    ("checkpoint_every", "0"),
    ("sampler", "orig"),
    ("eta", "0.5"),
    ("correction", "model"),
    ("temperature", "1"),
    ("precision", "f64"),
    ("cache", "true"),
    ("num_samples", "100"),
    ("mc_samples", "4"),
    ("judge_order", "1"),
    ("judge_smoothing", "0.1"),
];

const VARIANT_KEYS: [&str; 2] = ["gamma", "epsilon"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Gamma(f64),
    Epsilon(f64),
}

/// A fully parsed and cross-checked configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Normalized `key → value` snapshot, as recorded in manifests.
    pub entries: BTreeMap<String, String>,
    pub seed: u64,
    pub num_real: usize,
    pub concentration: f64,
    pub seq_len: usize,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub judge_sequences: usize,
    pub variant: Variant,
    pub levels: u32,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub kind: Kind,
    pub rho: (u64, u64),
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub sampler: SamplerOptions,
    pub num_samples: usize,
    pub mc_samples: usize,
    pub judge_order: usize,
    pub judge_smoothing: f64,
}

fn bad(key: &str, reason: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {reason}"))
}

fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    let v = &map[key];
    v.parse().map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn flag(map: &BTreeMap<String, String>, key: &str) -> Result<bool, CliError> {
    match map[key].as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(bad(key, format!("expected true/false, got {v:?}"))),
    }
}

fn positive(key: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, "must be positive and finite"))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<usize, CliError> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(bad(key, "must be at least 1"))
    }
}

/// Parses `p` or `p/q`.
pub fn parse_rate(key: &str, s: &str) -> Result<(u64, u64), CliError> {
    let (p, q) = match s.split_once('/') {
        Some((p, q)) => (p.trim(), q.trim()),
        None => (s.trim(), "1"),
    };
    let p: u64 = p.parse().map_err(|_| bad(key, format!("cannot parse {s:?}")))?;
    let q: u64 = q.parse().map_err(|_| bad(key, format!("cannot parse {s:?}")))?;
    if p == 0 || q == 0 {
        return Err(bad(key, "numerator and denominator must be positive"));
    }
    Ok((p, q))
}

pub fn parse_kind(s: &str, omega: usize) -> Result<Kind, CliError> {
    match s {
        "quench" => Ok(Kind::Quench),
        "flat" => Ok(Kind::Flat),
        "block" => Ok(Kind::Block { omega }),
        "slide" => Ok(Kind::Slide { omega }),
        _ => Err(bad("kind", format!("expected quench/flat/block/slide, got {s:?}"))),
    }
}

pub fn parse_wiring(s: &str) -> Result<Wiring, CliError> {
    match s {
        "aligned" => Ok(Wiring::Aligned),
        "shifted" => Ok(Wiring::Shifted),
        _ => Err(bad("wiring", format!("expected aligned/shifted, got {s:?}"))),
    }
}

/// Reads `key=value` lines; `#` starts a comment.
pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            pairs.extend(parse_lines(&text, &path.display().to_string())?);
        }
        for o in overrides {
            pairs.extend(parse_lines(o, "--set")?);
        }
        Self::from_pairs(pairs)
    }

    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self, CliError> {
        let mut map: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in pairs {
            if !map.contains_key(&k) && !VARIANT_KEYS.contains(&k.as_str()) {
                return Err(bad(&k, "unknown key"));
            }
            map.insert(k, v);
        }
        let variant = match (map.get("gamma"), map.get("epsilon")) {
            (Some(_), Some(_)) => return Err(bad("gamma", "give exactly one of gamma and epsilon, not both")),
            (None, None) => return Err(bad("epsilon", "give exactly one of gamma and epsilon")),
            (Some(_), None) => Variant::Gamma(num(&map, "gamma")?),
            (None, Some(_)) => Variant::Epsilon(num(&map, "epsilon")?),
        };
        let omega = at_least_one("omega", num(&map, "omega")?)?;
        let kind = parse_kind(&map["kind"], omega)?;
        let rho = parse_rate("rho", &map["rho"])?;
        let levels: u32 = num(&map, "levels")?;
        let clip: f64 = num(&map, "clip")?;
        let optimizer = match map["optimizer"].as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            v => return Err(bad("optimizer", format!("expected adam/sgd, got {v:?}"))),
        };
        let eta: f64 = num(&map, "eta")?;
        if !(0.0..=1.0).contains(&eta) {
            return Err(bad("eta", "must lie in [0, 1]"));
        }
        let sampler_kind = match map["sampler"].as_str() {
            "orig" => SamplerKind::Original,
            "acs" => SamplerKind::Acs { eta },
            v => return Err(bad("sampler", format!("expected orig/acs, got {v:?}"))),
        };
        let correction = match map["correction"].as_str() {
            "model" => Correction::Model,
            "uniform" => Correction::Uniform,
            v => return Err(bad("correction", format!("expected model/uniform, got {v:?}"))),
        };
        let precision = match map["precision"].as_str() {
            "f64" => GumbelPrecision::F64,
            "f32" => GumbelPrecision::F32,
            v => return Err(bad("precision", format!("expected f64/f32, got {v:?}"))),
        };
        let num_real: usize = num(&map, "num_real")?;
        if num_real < 2 {
            return Err(bad("num_real", "need at least 2 real tokens"));
        }
        let variant_weights = match variant {
            Variant::Gamma(g) => hdlm::loss::LossVariant::GammaSurrogate { gamma: g },
            Variant::Epsilon(e) => hdlm::loss::LossVariant::EpsilonHdce { epsilon: e },
        };
        let cfg = RunConfig {
            seed: num(&map, "seed")?,
            num_real,
            concentration: positive("concentration", num(&map, "concentration")?)?,
            seq_len: at_least_one("seq_len", num(&map, "seq_len")?)?,
            train_sequences: at_least_one("train_sequences", num(&map, "train_sequences")?)?,
            heldout_sequences: at_least_one("heldout_sequences", num(&map, "heldout_sequences")?)?,
            judge_sequences: at_least_one("judge_sequences", num(&map, "judge_sequences")?)?,
            variant,
            levels,
            sigma_min: num(&map, "sigma_min")?,
            sigma_max: num(&map, "sigma_max")?,
            kind,
            rho,
            model: DenoiserConfig {
                vocab: num_real + 1,
                dim: num(&map, "dim")?,
                heads: num(&map, "heads")?,
                layers: at_least_one("layers", num(&map, "layers")?)?,
                d_max: num(&map, "d_max")?,
                wiring: parse_wiring(&map["wiring"])?,
                time_conditioning: flag(&map, "time_conditioning")?,
                levels,
                weighted_embedding: flag(&map, "weighted_embedding")?,
            },
            train: TrainConfig {
                steps: num(&map, "steps")?,
                batch_size: num(&map, "batch_size")?,
                optimizer,
                lr: num(&map, "lr")?,
                momentum: num(&map, "momentum")?,
                clip: (clip > 0.0).then_some(clip),
                loss: LossWeights {
                    beta1: num(&map, "beta1")?,
                    beta2: num(&map, "beta2")?,
                    lambda: num(&map, "lambda")?,
                    variant: variant_weights,
                },
                efficient: flag(&map, "efficient")?,
            },
            checkpoint_every: num(&map, "checkpoint_every")?,
            sampler: SamplerOptions {
                kind: sampler_kind,
                correction,
                temperature: num(&map, "temperature")?,
                precision,
                cache: flag(&map, "cache")?,
            },
            num_samples: at_least_one("num_samples", num(&map, "num_samples")?)?,
            mc_samples: at_least_one("mc_samples", num(&map, "mc_samples")?)?,
            judge_order: num(&map, "judge_order")?,
            judge_smoothing: num(&map, "judge_smoothing")?,
            entries: map,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks, delegated to the owning modules.
    fn validate(&self) -> Result<(), CliError> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(bad("sigma_min", "need 0 < sigma_min < sigma_max"));
        }
        if clip_invalid(&self.entries["clip"]) {
            return Err(bad("clip", "must be finite and non-negative (0 disables)"));
        }
        if self.seq_len > self.model.d_max {
            return Err(bad("seq_len", format!("exceeds d_max = {}", self.model.d_max)));
        }
        if !(1..=2).contains(&self.judge_order) {
            return Err(bad("judge_order", "must be 1 or 2"));
        }
        if !(self.judge_smoothing > 0.0) {
            return Err(bad("judge_smoothing", "must be positive"));
        }
        self.hyperschedule()?;
        self.process()?;
        self.model.validate().map_err(CliError::from_config)?;
        self.train.validate().map_err(CliError::from_config)?;
        self.sampler.validate().map_err(CliError::from_config)?;
        Ok(())
    }

    pub fn hyperschedule(&self) -> Result<Hyperschedule, CliError> {
        build(self.kind, self.seq_len, self.levels, self.rho.0, self.rho.1).map_err(CliError::from_config)
    }

    pub fn process(&self) -> Result<Process, CliError> {
        Ok(match self.variant {
            Variant::Gamma(gamma) => {
                if !(0.0..=1.0).contains(&gamma) {
                    return Err(bad("gamma", "must lie in [0, 1]"));
                }
                Process::Gamma {
                    gamma,
                    sigma: loglinear_sigma(self.levels, self.sigma_min, self.sigma_max)
                        .map_err(CliError::from_config)?,
                }
            }
            Variant::Epsilon(eps) => Process::Epsilon(
                EpsilonProcess::new(eps, linear_alpha(self.levels).map_err(CliError::from_config)?)
                    .map_err(CliError::from_config)?,
            ),
        })
    }
}

fn clip_invalid(s: &str) -> bool {
    s.parse::<f64>().map_or(true, |c| !(c >= 0.0 && c.is_finite()))
}
