mod manifest;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gevst::analysis::{dump_attention, run_ablation, AblationAxis};
use gevst::config::TrainConfig;
use gevst::data::{generate_dataset, read_jsonl, write_jsonl, Sample};
use gevst::metrics::evaluate;
use gevst::model::{Gevst, PreparedSample};
use gevst::params::ParamStore;
use gevst::train::{
    corpus_vocabulary, load_checkpoint, save_checkpoint, split_train_val, train_scst, train_xe,
    Checkpoint,
};
use gevst::vocab::{words, Vocabulary, EOS};

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "gevst",
    version,
    about = "Geometry-aware captioning on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Phase {
    Xe,
    Scst,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    M,
    Base,
    Layers,
    Gesa,
    Branches,
}

impl From<Axis> for AblationAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::M => AblationAxis::M,
            Axis::Base => AblationAxis::Base,
            Axis::Layers => AblationAxis::Layers,
            Axis::Gesa => AblationAxis::Gesa,
            Axis::Branches => AblationAxis::Branches,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSONL.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with cross-entropy or self-critical sequence training.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        phase: Phase,
        /// JSON training configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to start from (required for scst).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption every sample of a dataset.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        beam: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted captions against a dataset's references.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write attention maps and gates of one sample as CSV.
    DumpAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample_id: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score every configuration along one ablation axis.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flag combinations clap cannot express; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptionRecord {
    id: u64,
    caption: String,
    logprob: f64,
}

fn threads() -> Result<usize> {
    match std::env::var("GEVST_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!(
                "GEVST_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_json_str(&text).with_context(|| format!("in {}", p.display()))?)
        }
    }
}

fn load_data(path: &Path) -> Result<Vec<Sample>> {
    let samples = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    if samples.is_empty() {
        bail!("{} holds no samples", path.display());
    }
    Ok(samples)
}

fn prepare(samples: &[Sample], vocab: &Vocabulary) -> Result<Vec<PreparedSample>> {
    Ok(samples
        .iter()
        .map(|s| PreparedSample::new(s, vocab))
        .collect::<gevst::Result<Vec<_>>>()?)
}

fn write_curve(path: &Path, rows: impl IntoIterator<Item = (usize, f64)>) -> Result<()> {
    let mut w = BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(w, "epoch,value")?;
    for (e, v) in rows {
        writeln!(w, "{e},{v}")?;
    }
    w.flush()?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

fn gen_data(seed: u64, n: u64, out: &Path) -> Result<()> {
    let mut m = RunManifest::new("gen-data");
    m.seed = Some(seed);
    m.config = serde_json::json!({ "seed": seed, "n": n });
    let samples = m.time("generate", || Ok(generate_dataset(seed, n as usize)?))?;
    write_jsonl(out, &samples).with_context(|| format!("writing {}", out.display()))?;
    m.output(out);
    m.write(&manifest_beside(out))
}

fn train(
    data: &Path,
    phase: Phase,
    config: Option<&Path>,
    init: Option<&Path>,
    out: &Path,
) -> Result<()> {
    if matches!(phase, Phase::Scst) && init.is_none() {
        return Err(usage("--phase scst requires --init <checkpoint>"));
    }
    let mut cfg = load_config(config)?;
    let samples = load_data(data)?;
    create_dir(out)?;
    let mut m = RunManifest::new(match phase {
        Phase::Xe => "train xe",
        Phase::Scst => "train scst",
    });
    m.input(data)?;

    let (train_raw, val_raw) = split_train_val(&samples, cfg.val_fraction);
    let (model, mut store, vocab) = match init {
        Some(p) => {
            m.input(p)?;
            let Checkpoint {
                model,
                store,
                vocab,
            } = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if model.config != cfg.model {
                log::warn!(
                    "model settings come from the checkpoint; the configuration's are ignored"
                );
                cfg.model = model.config.clone();
            }
            (model, store, vocab)
        }
        None => {
            let vocab = corpus_vocabulary(&train_raw, cfg.min_count);
            let (model, store) = Gevst::new(&cfg.model, vocab.len(), cfg.seed)?;
            (model, store, vocab)
        }
    };
    m.seed = Some(cfg.seed);
    m.config = serde_json::to_value(&cfg)?;
    let train_set = prepare(&train_raw, &vocab)?;
    let val_set = prepare(&val_raw, &vocab)?;
    log::info!(
        "{} training and {} validation samples, vocabulary of {}",
        train_set.len(),
        val_set.len(),
        vocab.len()
    );

    let ckpt = out.join("model.ckpt");
    match phase {
        Phase::Xe => {
            let outcome = m.time("xe", || {
                Ok(train_xe(
                    &model,
                    &mut store,
                    &train_set,
                    &val_set,
                    &cfg,
                    &mut |_| {},
                )?)
            })?;
            let loss = out.join("xe_loss.csv");
            write_curve(&loss, outcome.epochs.iter().map(|e| (e.epoch, e.loss)))?;
            m.output(&loss);
            if !val_set.is_empty() {
                let val = out.join("val_cider.csv");
                write_curve(
                    &val,
                    outcome
                        .epochs
                        .iter()
                        .filter_map(|e| e.val_cider.map(|c| (e.epoch, c))),
                )?;
                m.output(&val);
            }
            log::info!("keeping epoch {}", outcome.best_epoch);
            save_checkpoint(&ckpt, &model.config, &vocab, &outcome.best)?;
        }
        Phase::Scst => {
            let epochs = m.time("scst", || {
                Ok(train_scst(
                    &model,
                    &mut store,
                    &train_set,
                    &cfg,
                    &mut |_| {},
                )?)
            })?;
            let reward = out.join("scst_reward.csv");
            write_curve(&reward, epochs.iter().map(|e| (e.epoch, e.sample_reward)))?;
            let baseline = out.join("scst_baseline.csv");
            write_curve(&baseline, epochs.iter().map(|e| (e.epoch, e.greedy_reward)))?;
            m.output(&reward);
            m.output(&baseline);
            save_checkpoint(&ckpt, &model.config, &vocab, &store)?;
        }
    }
    m.output(&ckpt);
    m.write(&out.join("manifest.json"))
}

fn load_ckpt(path: &Path, m: &mut RunManifest) -> Result<Checkpoint> {
    m.input(path)?;
    let c = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    m.config = serde_json::to_value(&c.model.config)?;
    Ok(c)
}

fn caption(ckpt: &Path, data: &Path, beam: usize, out: &Path) -> Result<()> {
    let mut m = RunManifest::new("caption");
    let c = load_ckpt(ckpt, &mut m)?;
    m.input(data)?;
    let samples = prepare(&load_data(data)?, &c.vocab)?;
    let records = m.time("decode", || {
        caption_all(&c.model, &c.store, &c.vocab, &samples, beam)
    })?;
    let mut w = BufWriter::new(
        fs::File::create(out).with_context(|| format!("creating {}", out.display()))?,
    );
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    m.output(out);
    m.write(&manifest_beside(out))
}

fn caption_all(
    model: &Gevst,
    store: &ParamStore,
    vocab: &Vocabulary,
    samples: &[PreparedSample],
    beam: usize,
) -> Result<Vec<CaptionRecord>> {
    samples
        .iter()
        .map(|s| {
            let state = model.caption(store, s, beam)?;
            Ok(CaptionRecord {
                id: s.id,
                caption: vocab.detokenize(state.words(EOS))?,
                logprob: state.log_prob,
            })
        })
        .collect()
}

fn read_predictions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn eval(pred: &Path, refs: &Path, out: &Path) -> Result<()> {
    let mut m = RunManifest::new("eval");
    m.input(pred)?;
    m.input(refs)?;
    let preds: HashMap<u64, String> = read_predictions(pred)?
        .into_iter()
        .map(|r| (r.id, r.caption))
        .collect();
    let samples = load_data(refs)?;
    let mut cands = Vec::with_capacity(samples.len());
    let mut references = Vec::with_capacity(samples.len());
    for s in &samples {
        let Some(c) = preds.get(&s.id) else {
            bail!("no prediction for sample {}", s.id);
        };
        cands.push(words(c));
        references.push(s.gt_captions.iter().map(|r| words(r)).collect::<Vec<_>>());
    }
    let report = evaluate(&cands, &references);
    fs::write(out, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", out.display()))?;
    m.output(out);
    m.write(&manifest_beside(out))
}

fn dump(ckpt: &Path, data: &Path, sample_id: u64, out: &Path) -> Result<()> {
    let mut m = RunManifest::new("dump-attention");
    let c = load_ckpt(ckpt, &mut m)?;
    m.input(data)?;
    let samples = load_data(data)?;
    let Some(sample) = samples.iter().find(|s| s.id == sample_id) else {
        bail!("sample {sample_id} is not in {}", data.display());
    };
    let prepared = PreparedSample::new(sample, &c.vocab)?;
    let d = dump_attention(&c.model, &c.store, &prepared, &c.vocab)?;
    log::info!("greedy caption: {}", d.caption);
    create_dir(out)?;
    for (name, text) in [
        ("fusion_attention", &d.fusion),
        ("gesa_gates", &d.gesa_gates),
        ("decoder_gates", &d.decoder_gates),
    ] {
        let path = out.join(format!("sample{sample_id}_{name}.csv"));
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        m.output(path);
    }
    m.write(&out.join("manifest.json"))
}

fn ablate(data: &Path, axis: Axis, config: Option<&Path>, out: &Path) -> Result<()> {
    let threads = threads()?;
    let cfg = load_config(config)?;
    let samples = load_data(data)?;
    let mut m = RunManifest::new("ablate");
    m.input(data)?;
    m.seed = Some(cfg.seed);
    m.config = serde_json::to_value(&cfg)?;
    let (train_raw, val_raw) = split_train_val(&samples, cfg.val_fraction);
    if val_raw.is_empty() {
        bail!("val_fraction leaves no validation samples");
    }
    let vocab = corpus_vocabulary(&train_raw, cfg.min_count);
    let train_set = prepare(&train_raw, &vocab)?;
    let val_set = prepare(&val_raw, &vocab)?;
    let axis = AblationAxis::from(axis);
    let table = m.time("ablate", || {
        Ok(run_ablation(
            axis, &cfg, &vocab, &train_set, &val_set, threads,
        )?)
    })?;
    create_dir(out)?;
    let csv = out.join(format!("ablation_{}.csv", axis.name()));
    let md = out.join(format!("ablation_{}.md", axis.name()));
    fs::write(&csv, table.to_csv())?;
    fs::write(&md, table.to_markdown(axis))?;
    if let Some(c) = &table.check {
        log::info!("{c}");
    }
    m.output(csv);
    m.output(md);
    m.write(&out.join("manifest.json"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, n, out } => gen_data(seed, n, &out),
        Command::Train {
            data,
            phase,
            config,
            init,
            out,
        } => train(&data, phase, config.as_deref(), init.as_deref(), &out),
        Command::Caption {
            ckpt,
            data,
            beam,
            out,
        } => caption(&ckpt, &data, beam as usize, &out),
        Command::Eval { pred, refs, out } => eval(&pred, &refs, &out),
        Command::DumpAttention {
            ckpt,
            data,
            sample_id,
            out,
        } => dump(&ckpt, &data, sample_id, &out),
        Command::Ablate {
            data,
            axis,
            config,
            out,
        } => ablate(&data, axis, config.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
