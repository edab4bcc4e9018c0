//! `hdlm`: corpus generation, training, sampling and evaluation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments. Exit code 2.
    Config(String),
    /// Training or sampling broke down numerically. Exit code 3.
    Numerical(String),
    /// Everything else (I/O, malformed files). Exit code 1.
    Other(String),
}

impl CliError {
    pub fn from_config(e: hdlm::Error) -> Self {
        e.into()
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<hdlm::Error> for CliError {
    fn from(e: hdlm::Error) -> Self {
        use hdlm::Error as E;
        match e {
            E::InvalidArgument { name, reason } => CliError::Config(format!("{name}: {reason}")),
            e @ E::Dimension { .. } => CliError::Config(e.to_string()),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "hdlm", version, about = "Hyperschedule-driven discrete diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<config::RunConfig, CliError> {
        config::RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum OnOff {
    On,
    Off,
}

/// Shorthands for the sampling-related config keys.
#[derive(Args, Clone, Debug)]
struct SampleFlags {
    /// Same as `--set kind=...`.
    #[arg(long, value_parser = ["quench", "flat", "block", "slide"])]
    hyperschedule: Option<String>,
    #[arg(long)]
    omega: Option<usize>,
    /// Number of generation steps; Flat schedules only (sets rho = seq_len/steps).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = ["orig", "acs"])]
    sampler: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    cache: Option<OnOff>,
}

impl SampleFlags {
    fn load(&self, cfg: &ConfigArgs) -> Result<config::RunConfig, CliError> {
        let mut sets = cfg.set.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{k}={v}"));
            }
        };
        push("kind", self.hyperschedule.clone());
        push("omega", self.omega.map(|v| v.to_string()));
        push("sampler", self.sampler.clone());
        push("eta", self.eta.map(|v| v.to_string()));
        push("temperature", self.temperature.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("cache", self.cache.map(|c| matches!(c, OnOff::On).to_string()));
        let run = config::RunConfig::load(cfg.config.as_deref(), &sets)?;
        let Some(steps) = self.steps else {
            return Ok(run);
        };
        if run.kind != hdlm::hyperschedule::Kind::Flat {
            return Err(CliError::Config("steps: only flat schedules take an explicit step count".into()));
        }
        if steps == 0 {
            return Err(CliError::Config("steps: must be at least 1".into()));
        }
        sets.push(format!("rho={}/{steps}", run.seq_len));
        config::RunConfig::load(cfg.config.as_deref(), &sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a Markov source and its train, held-out and judge corpora.
    GenCorpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a denoiser on a corpus.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Generate sequences from a trained model; prints a ledger line.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        flags: SampleFlags,
        #[arg(long, alias = "checkpoint")]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model and/or a sample file; prints one JSON record.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, alias = "checkpoint")]
        model: Option<PathBuf>,
        #[arg(long, alias = "corpus")]
        heldout: Option<PathBuf>,
        /// Corpus the n-gram judge is fitted on.
        #[arg(long)]
        judge_corpus: Option<PathBuf>,
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Metrics to compute; all that the inputs allow by default.
        #[arg(long, value_enum, value_delimiter = ',')]
        mode: Vec<commands::EvalMode>,
        /// Shorthand for `--set mc_samples=M`.
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Append a manifest line to this file.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write the configured hyperschedule as CSV or PGM.
    ExportHyperschedule {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: commands::GridFormat,
    },
    /// Write an attention mask as PBM, CSV or a slot table.
    ExportMask {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: commands::MaskFormat,
        /// Inference step; ignored with `--starts`.
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Efficient-training interval starts, e.g. `0,4,8`.
        #[arg(long, value_delimiter = ',')]
        starts: Option<Vec<usize>>,
    },
    /// Tabulate KV-cache costs of windowed decoding.
    KvTable {
        #[arg(long, value_delimiter = ',', required = true)]
        l: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        omega: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        rho: Vec<usize>,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// gen-corpus, train, sample and eval into one directory.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenCorpus { cfg, out } => commands::gen_corpus(&cfg.load()?, &out).map(|_| ()),
        Command::Train { cfg, corpus, out, init } => {
            commands::train(&cfg.load()?, &corpus, &out, init.as_deref()).map(|_| ())
        }
        Command::Sample { cfg, flags, model, out } => {
            let ledger = commands::sample(&flags.load(&cfg)?, &model, &out)?;
            println!("{}", ledger.to_json());
            Ok(())
        }
        Command::Eval {
            mut cfg,
            model,
            heldout,
            judge_corpus,
            samples,
            mode,
            mc_samples,
            manifest,
        } => {
            if let Some(m) = mc_samples {
                cfg.set.push(format!("mc_samples={m}"));
            }
            let inputs = commands::EvalInputs {
                model: model.as_deref(),
                heldout: heldout.as_deref(),
                judge_corpus: judge_corpus.as_deref(),
                samples: samples.as_deref(),
            };
            let metrics = commands::eval(&cfg.load()?, &inputs, &mode, manifest.as_deref())?;
            println!("{}", serde_json::Value::Object(metrics));
            Ok(())
        }
        Command::ExportHyperschedule { cfg, out, format } => {
            commands::export_hyperschedule(&cfg.load()?, &out, format)
        }
        Command::ExportMask {
            cfg,
            out,
            format,
            step,
            starts,
        } => commands::export_mask(&cfg.load()?, &out, format, step, starts.as_deref()),
        Command::KvTable { l, omega, rho, out } => commands::kv_table(&l, &omega, &rho, out.as_deref()),
        Command::Pipeline { cfg, out } => commands::pipeline(&cfg.load()?, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hdlm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
