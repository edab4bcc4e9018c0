//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use serde_json::{Map, Value};

use hdlm::corpus::{make_markov_source, sample_corpus, Corpus};
use hdlm::denoiser::DenoiserParams;
use hdlm::eval::{gen_ppl, mc_ppl, token_entropy};
use hdlm::hyperschedule::{partition_at, Kind};
use hdlm::masks::{inference_layout, kv_cost, training_layout, Input, Layout, TrainKind};
use hdlm::ngram::ngram_fit;
use hdlm::rng::RngStream;
use hdlm::sampler::generate_hs;
use hdlm::vocab::{Sequence, Vocab};

use crate::config::RunConfig;
use crate::manifest::Record;
use crate::CliError;

const STREAM_SOURCE: u64 = 1;
const STREAM_TRAIN_DATA: u64 = 2;
const STREAM_HELDOUT: u64 = 3;
const STREAM_JUDGE: u64 = 4;
const STREAM_INIT: u64 = 5;
const STREAM_TRAIN: u64 = 6;
const STREAM_SAMPLE: u64 = 7;
const STREAM_EVAL: u64 = 8;

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GridFormat {
    Csv,
    Pgm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskFormat {
    Csv,
    Pbm,
    /// One row per slot: target position, input source, noisy flag.
    Slots,
}

fn stream(cfg: &RunConfig, id: u64) -> RngStream {
    RngStream::new(cfg.seed, 0).derive(&[id])
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn manifest_beside(path: &Path) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(MANIFEST)
}

pub fn read_corpus(path: &Path, cfg: &RunConfig) -> Result<Corpus, CliError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let c = Corpus::read_from(BufReader::new(f)).map_err(|e| match e {
        hdlm::Error::Io(e) => io_err(path, e),
        e => CliError::from(e),
    })?;
    if c.vocab.num_real() != cfg.num_real {
        return Err(CliError::Config(format!(
            "num_real: corpus {} has {} real tokens, config says {}",
            path.display(),
            c.vocab.num_real(),
            cfg.num_real
        )));
    }
    if c.seq_len != cfg.seq_len {
        return Err(CliError::Config(format!(
            "seq_len: corpus {} has length {}, config says {}",
            path.display(),
            c.seq_len,
            cfg.seq_len
        )));
    }
    Ok(c)
}

fn write_params(path: &Path, params: &DenoiserParams) -> Result<(), CliError> {
    let mut w = create(path)?;
    params.write_to(&mut w)?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_model(path: &Path, cfg: &RunConfig) -> Result<DenoiserParams, CliError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let params = DenoiserParams::read_from(BufReader::new(f))?;
    if params.config != cfg.model {
        return Err(CliError::Config(format!(
            "model: checkpoint {} was built with {:?}, config asks for {:?}",
            path.display(),
            params.config,
            cfg.model
        )));
    }
    Ok(params)
}

pub fn write_samples(path: &Path, samples: &[Sequence]) -> Result<(), CliError> {
    let mut text = String::new();
    for s in samples {
        let toks: Vec<String> = s.tokens().iter().map(|t| t.to_string()).collect();
        text.push_str(&toks.join(" "));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_samples(path: &Path, vocab: &Vocab) -> Result<Vec<Sequence>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let toks = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| io_err(path, format!("line {}: {e}", n + 1)))?;
        let seq = Sequence(toks);
        seq.validate(vocab, false)?;
        out.push(seq);
    }
    Ok(out)
}

pub struct CorpusFiles {
    pub source: PathBuf,
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub judge: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            source: dir.join("source.bin"),
            train: dir.join("train.bin"),
            heldout: dir.join("heldout.bin"),
            judge: dir.join("judge.bin"),
        }
    }
}

pub fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<CorpusFiles, CliError> {
    let files = CorpusFiles::in_dir(out);
    let src = make_markov_source(cfg.num_real, cfg.concentration, &mut stream(cfg, STREAM_SOURCE))?;
    let vocab = src.vocab();
    let mut w = create(&files.source)?;
    src.write_to(&mut w)?;
    w.flush()?;
    let mut rec = Record::new("gen-corpus", Some(cfg));
    rec.output(&files.source);
    for (path, count, id) in [
        (&files.train, cfg.train_sequences, STREAM_TRAIN_DATA),
        (&files.heldout, cfg.heldout_sequences, STREAM_HELDOUT),
        (&files.judge, cfg.judge_sequences, STREAM_JUDGE),
    ] {
        let seqs = sample_corpus(&src, count, cfg.seq_len, &mut stream(cfg, id))?;
        let mut w = create(path)?;
        Corpus::new(vocab, seqs)?.write_to(&mut w)?;
        w.flush()?;
        rec.output(path);
    }
    rec.metric("entropy_rate", src.entropy_rate());
    rec.metric("entropy_rate_ppl", src.entropy_rate().exp());
    rec.write(&out.join(MANIFEST), None)?;
    Ok(files)
}

pub fn train(cfg: &RunConfig, corpus: &Path, out: &Path, init: Option<&Path>) -> Result<PathBuf, CliError> {
    let data = read_corpus(corpus, cfg)?;
    let hs = cfg.hyperschedule()?;
    let process = cfg.process()?;
    let mut params = match init {
        Some(p) => read_model(p, cfg)?,
        None => DenoiserParams::init(cfg.model.clone(), &mut stream(cfg, STREAM_INIT))?,
    };
    let mut rec = Record::new("train", Some(cfg));
    rec.input(corpus);
    if let Some(p) = init {
        rec.input(p);
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let loss_path = out.join("loss.csv");
    let mut loss_csv = create(&loss_path)?;
    writeln!(loss_csv, "step,ce_settled,active_term,total,grad_norm")?;
    let ckpt_dir = out.join("checkpoints");
    let mut side_err: Option<CliError> = None;
    let mut last = f64::NAN;
    let mut done = 0usize;
    let result = hdlm::train::train(
        &mut params,
        &data.sequences,
        &hs,
        &process,
        &cfg.train,
        &stream(cfg, STREAM_TRAIN),
        |log, p| {
            if side_err.is_some() {
                return;
            }
            last = log.total;
            done = log.step + 1;
            let row = writeln!(
                loss_csv,
                "{},{},{},{},{}",
                log.step, log.ce_settled, log.active_term, log.total, log.grad_norm
            );
            if let Err(e) = row {
                side_err = Some(e.into());
                return;
            }
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                if let Err(e) = write_params(&ckpt_dir.join(format!("step_{done:06}.ckpt")), p) {
                    side_err = Some(e);
                }
            }
        },
    );
    loss_csv.flush()?;
    drop(loss_csv);
    rec.metric("steps_completed", done);
    rec.metric("final_loss", last);
    let manifest = out.join(MANIFEST);
    if let Err(e) = result.map_err(CliError::from).and_then(|_| side_err.map_or(Ok(()), Err)) {
        rec.write(&manifest, Some(&e))?;
        return Err(e);
    }
    let model = out.join("model.ckpt");
    write_params(&model, &params)?;
    rec.output(&model);
    rec.output(&loss_path);
    rec.write(&manifest, None)?;
    Ok(model)
}

/// Usage totals of one `sample` run.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleLedger {
    pub calls: usize,
    pub tokens: usize,
    pub cache_hits: usize,
    pub rows_computed: usize,
    pub wall_time_s: f64,
}

impl SampleLedger {
    pub fn to_json(self) -> Value {
        serde_json::json!({
            "calls": self.calls,
            "tokens": self.tokens,
            "cache_hits": self.cache_hits,
            "rows_computed": self.rows_computed,
            "wall_time_s": self.wall_time_s,
        })
    }
}

/// Wall time goes to the returned ledger only, never into the manifest.
pub fn sample(cfg: &RunConfig, model: &Path, out: &Path) -> Result<SampleLedger, CliError> {
    let t0 = Instant::now();
    let params = read_model(model, cfg)?;
    let hs = cfg.hyperschedule()?;
    let process = cfg.process()?;
    let root = stream(cfg, STREAM_SAMPLE);
    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut total = SampleLedger::default();
    for k in 0..cfg.num_samples {
        let (seq, ledger) = generate_hs(&params, &hs, &cfg.sampler, process.weighting(), &root.derive(&[k as u64]))?;
        total.calls += ledger.calls;
        total.tokens += ledger.tokens;
        total.rows_computed += ledger.rows_computed;
        total.cache_hits += ledger.cache_hits;
        samples.push(seq);
    }
    write_samples(out, &samples)?;
    let mut rec = Record::new("sample", Some(cfg));
    rec.input(model);
    rec.output(out);
    rec.metric("num_samples", samples.len());
    rec.metric("denoiser_calls", total.calls);
    rec.metric("tokens", total.tokens);
    rec.metric("rows_computed", total.rows_computed);
    rec.metric("cache_hits", total.cache_hits);
    rec.write(&manifest_beside(out), None)?;
    total.wall_time_s = t0.elapsed().as_secs_f64();
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    McPpl,
    GenPpl,
    Entropy,
}

#[derive(Clone, Debug, Default)]
pub struct EvalInputs<'a> {
    pub model: Option<&'a Path>,
    pub heldout: Option<&'a Path>,
    pub judge_corpus: Option<&'a Path>,
    pub samples: Option<&'a Path>,
}

fn need<'a>(p: Option<&'a Path>, mode: &str, flag: &str) -> Result<&'a Path, CliError> {
    p.ok_or_else(|| CliError::Config(format!("{flag}: required by mode {mode}")))
}

/// Runs the requested metrics, or every metric the inputs allow when
/// `modes` is empty.
pub fn eval(
    cfg: &RunConfig,
    inputs: &EvalInputs<'_>,
    modes: &[EvalMode],
    manifest: Option<&Path>,
) -> Result<Map<String, Value>, CliError> {
    let mut modes = modes.to_vec();
    if modes.is_empty() {
        if inputs.model.is_some() && inputs.heldout.is_some() {
            modes.push(EvalMode::McPpl);
        }
        if inputs.samples.is_some() && inputs.judge_corpus.is_some() {
            modes.push(EvalMode::GenPpl);
        }
        if inputs.samples.is_some() {
            modes.push(EvalMode::Entropy);
        }
        if modes.is_empty() {
            return Err(CliError::Config("mode: nothing to evaluate with the given inputs".into()));
        }
    }
    let vocab = Vocab::with_real_tokens(cfg.num_real)?;
    let mut rec = Record::new("eval", Some(cfg));
    let mut samples = None;
    if modes.contains(&EvalMode::GenPpl) || modes.contains(&EvalMode::Entropy) {
        let path = need(inputs.samples, "gen-ppl/entropy", "samples")?;
        rec.input(path);
        let seqs = read_samples(path, &vocab)?;
        rec.metric("num_samples", seqs.len());
        samples = Some(seqs);
    }
    if modes.contains(&EvalMode::McPpl) {
        let model = need(inputs.model, "mc-ppl", "model")?;
        let heldout = need(inputs.heldout, "mc-ppl", "heldout")?;
        let params = read_model(model, cfg)?;
        let held = read_corpus(heldout, cfg)?;
        rec.input(model);
        rec.input(heldout);
        let hs = cfg.hyperschedule()?;
        let process = cfg.process()?;
        let est = mc_ppl(&params, &held.sequences, &hs, cfg.mc_samples, process.weighting(), &stream(cfg, STREAM_EVAL))?;
        rec.metric("mc_ppl", est.ppl);
        rec.metric("mc_nll", est.per_token_nll);
        rec.metric("mc_std_err", est.std_err);
    }
    if modes.contains(&EvalMode::GenPpl) {
        let path = need(inputs.judge_corpus, "gen-ppl", "judge-corpus")?;
        rec.input(path);
        let judge_data = read_corpus(path, cfg)?;
        let judge = ngram_fit(&judge_data.sequences, &vocab, cfg.judge_order, cfg.judge_smoothing)?;
        rec.metric("gen_ppl", gen_ppl(samples.as_deref().unwrap_or_default(), &judge)?.ppl);
    }
    if modes.contains(&EvalMode::Entropy) {
        rec.metric("entropy", token_entropy(samples.as_deref().unwrap_or_default())?);
    }
    if let Some(m) = manifest {
        rec.write(m, None)?;
    }
    Ok(rec.metrics)
}

pub fn export_hyperschedule(cfg: &RunConfig, out: &Path, format: GridFormat) -> Result<(), CliError> {
    let hs = cfg.hyperschedule()?;
    let text = match format {
        GridFormat::Csv => hs.to_csv(),
        GridFormat::Pgm => hs.to_pgm(),
    };
    write_text(out, &text)
}

fn slot_table(layout: &Layout) -> String {
    let mut s = String::from("slot,target,input,noisy\n");
    for (i, sl) in layout.slots.iter().enumerate() {
        let inp = match sl.input {
            Input::Bos => "bos".to_string(),
            Input::Clean(p) => format!("clean{p}"),
            Input::Noisy(p) => format!("noisy{p}"),
        };
        s.push_str(&format!("{i},{},{inp},{}\n", sl.target, u8::from(sl.noisy)));
    }
    s
}

pub fn export_mask(
    cfg: &RunConfig,
    out: &Path,
    format: MaskFormat,
    step: usize,
    starts: Option<&[usize]>,
) -> Result<(), CliError> {
    let wiring = cfg.model.wiring;
    let layout = match starts {
        Some(starts) => {
            let (kind, omega) = match cfg.kind {
                Kind::Block { omega } => (TrainKind::Block, omega),
                Kind::Slide { omega } => (TrainKind::Slide, omega),
                k => {
                    return Err(CliError::Config(format!(
                        "kind: efficient-training masks need block or slide, got {k}"
                    )))
                }
            };
            training_layout(wiring, kind, cfg.seq_len, omega, starts)?
        }
        None => {
            let hs = cfg.hyperschedule()?;
            if step >= hs.steps() {
                return Err(CliError::Config(format!("step: must be below {}", hs.steps())));
            }
            inference_layout(wiring, &partition_at(&hs, step)?)
        }
    };
    let text = match format {
        MaskFormat::Csv => layout.mask.to_csv(),
        MaskFormat::Pbm => layout.mask.to_pbm(),
        MaskFormat::Slots => slot_table(&layout),
    };
    write_text(out, &text)
}

pub fn kv_table(ls: &[usize], omegas: &[usize], rhos: &[usize], out: Option<&Path>) -> Result<(), CliError> {
    let mut text = String::from("L,omega,rho,calls,cost_nocache,cost_cache\n");
    for &l in ls {
        for &omega in omegas {
            for &rho in rhos {
                let c = kv_cost(l, omega, rho)?;
                text.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    c.l, c.omega, c.rho, c.calls, c.cost_nocache, c.cost_cache
                ));
            }
        }
    }
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn pipeline(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let files = gen_corpus(cfg, out)?;
    let model = train(cfg, &files.train, out, None)?;
    let samples_path = out.join("samples.txt");
    sample(cfg, &model, &samples_path)?;
    let inputs = EvalInputs {
        model: Some(&model),
        heldout: Some(&files.heldout),
        judge_corpus: Some(&files.judge),
        samples: Some(&samples_path),
    };
    let metrics = eval(cfg, &inputs, &[], Some(&out.join(MANIFEST)))?;
    let text = serde_json::to_string_pretty(&Value::Object(metrics)).map_err(|e| CliError::Other(e.to_string()))?;
    write_text(&out.join("metrics.json"), &(text + "\n"))
}
