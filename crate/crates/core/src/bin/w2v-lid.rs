use std::cell::RefCell;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use w2v_lid::config::RunConfig;
use w2v_lid::data::{extract_manifest, generate_synthetic_corpus, FeatureSet, Manifest, SyntheticCorpusSpec};
use w2v_lid::experiments::{ablate_pooling, finetune_and_evaluate, load_labeled_splits, load_pretrain_set, probe_layers};
use w2v_lid::features::LogMelExtractor;
use w2v_lid::lid::evaluate;
use w2v_lid::train::{pretrain, Checkpoint, PretrainInputs};
use w2v_lid::{Error, Result};

#[derive(Parser)]
#[command(name = "w2v-lid", version, about = "Log-mel wav2vec 2.0 pre-training and spoken language identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a multilingual tone corpus (WAV files plus manifest.tsv).
    GenData(GenDataArgs),
    /// Self-supervised pre-training on the unlabeled manifest.
    Pretrain(PretrainArgs),
    /// Language-ID fine-tuning from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Accuracy and confusion matrix of a fine-tuned checkpoint.
    Evaluate(EvaluateArgs),
    /// Held-out accuracy of classifiers fed by individual transformer blocks.
    ProbeLayers(ProbeArgs),
    /// Held-out accuracy for every pooling strategy.
    AblatePooling(RunArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// TOML corpus spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_languages: Option<usize>,
    #[arg(long)]
    utterances_per_language: Option<usize>,
    #[arg(long)]
    duration_seconds: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dry_run: bool,
    /// Continue from an intermediate checkpoint of the same run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Pre-trained checkpoint path, or `scratch`.
    #[arg(long, default_value = "scratch")]
    init: String,
    /// Labeled audio per language (seeded subsample); all of it by default.
    #[arg(long)]
    labeled_minutes_per_lang: Option<f64>,
    /// Fine-tuning updates, overriding the config (warmup becomes a tenth of it).
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated 1-based block indices (default: every block).
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled manifest to score.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the confusion matrix CSV.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = check_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::ConfigConflict(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Kernels are single-threaded, so results never depend on THREADS; the
/// variable is still validated so typos surface.
fn check_threads() -> Result<()> {
    match std::env::var("THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(()),
            _ => Err(Error::Config(format!("THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(()),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_finetune(a.run),
        Command::Evaluate(a) => run_evaluate(a),
        Command::ProbeLayers(a) => run_probe(a),
        Command::AblatePooling(a) => run_ablation(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SyntheticCorpusSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticCorpusSpec::default(),
    };
    if let Some(n) = a.num_languages {
        spec.num_languages = n;
    }
    if let Some(n) = a.utterances_per_language {
        spec.utterances_per_language = n;
    }
    if let Some(d) = a.duration_seconds {
        spec.duration_seconds = d;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let manifest = generate_synthetic_corpus(&spec, &a.out)?;
    write_text(&a.out.join("corpus_spec.toml"), &toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?)?;
    println!("wrote {} utterances in {} languages to {}", manifest.len(), manifest.languages().len(), a.out.display());
    Ok(())
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let effective = cfg.to_toml()?;
    if a.dry_run {
        print!("{effective}");
        return Ok(());
    }
    let out = a.out.ok_or_else(|| Error::Config("--out is required unless --dry-run is given".into()))?;
    cfg.require("data.manifest")?;
    create_dir(&out)?;
    write_text(&out.join("effective_config.toml"), &effective)?;
    let resume = a.resume.as_deref().map(|p| Checkpoint::load_expecting(p, &cfg.model)).transpose()?;
    if let Some(ck) = &resume {
        check_features(ck, &cfg)?;
    }

    let started = Instant::now();
    let (data, computed) = load_pretrain_set(&cfg)?;
    // a resumed run keeps the statistics it started with
    let stats = resume.as_ref().and_then(|ck| ck.feature_stats.clone()).unwrap_or(computed);
    eprintln!("loaded {} utterances in {:.1?}", data.len(), started.elapsed());

    let metrics = RefCell::new(JsonLines::append(&out.join("metrics.jsonl"))?);
    let total = cfg.pretrain.schedule.total_updates;
    let ck = pretrain(
        PretrainInputs { model: &cfg.model, features: &cfg.features, stats: &stats, config: &cfg.pretrain, data: &data, seed: cfg.seed },
        resume,
        |m| {
            metrics.borrow_mut().write(m)?;
            if m.step % 100 == 0 || m.step + 1 == total {
                eprintln!(
                    "step {:>6}  loss {:.4}  contrastive {:.4}  diversity {:.4}  lr {:.2e}  [{:.0?}]",
                    m.step, m.loss_total, m.loss_contrastive, m.loss_diversity, m.lr, started.elapsed()
                );
            }
            Ok(())
        },
        |ck| {
            metrics.borrow_mut().flush()?;
            ck.save(&out.join(format!("checkpoint_{:06}.ckpt", ck.step)))
        },
    )?;
    metrics.borrow_mut().flush()?;
    let path = out.join("checkpoint.ckpt");
    ck.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

/// Shared set-up for the commands that fine-tune.
struct Prepared {
    cfg: RunConfig,
    init: Option<Checkpoint>,
    splits: w2v_lid::experiments::LabeledSplits,
}

fn prepare(a: &RunArgs) -> Result<Prepared> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(n) = a.updates {
        if n == 0 {
            return Err(Error::Config("--updates must be positive".into()));
        }
        cfg.finetune.schedule.total_updates = n;
        cfg.finetune.schedule.warmup_updates = n / 10;
    }
    cfg.require("data.labeled_manifest")?;
    cfg.require("data.heldout_manifest")?;
    let init = match a.init.as_str() {
        "scratch" => None,
        path => {
            let ck = Checkpoint::load_expecting(Path::new(path), &cfg.model)?;
            check_features(&ck, &cfg)?;
            Some(ck)
        }
    };
    create_dir(&a.out)?;
    write_text(&a.out.join("effective_config.toml"), &cfg.to_toml()?)?;
    let stats = init.as_ref().and_then(|ck| ck.feature_stats.as_ref());
    let splits = load_labeled_splits(&cfg, stats, a.labeled_minutes_per_lang)?;
    if !splits.short_languages.is_empty() {
        eprintln!(
            "warning: fewer than {} labeled minutes available for {}; using all of it",
            a.labeled_minutes_per_lang.unwrap_or_default(),
            splits.short_languages.join(", ")
        );
    }
    eprintln!("fine-tuning on {} utterances, evaluating on {}", splits.train.len(), splits.heldout.len());
    Ok(Prepared { cfg, init, splits })
}

fn init_mode(a: &RunArgs) -> &'static str {
    if a.init == "scratch" {
        "scratch"
    } else {
        "pretrained"
    }
}

fn minutes_label(a: &RunArgs) -> String {
    a.labeled_minutes_per_lang.map_or_else(|| "all".to_string(), |m| m.to_string())
}

fn run_finetune(a: RunArgs) -> Result<()> {
    let Prepared { cfg, init, splits } = prepare(&a)?;
    let mut metrics = JsonLines::append(&a.out.join("metrics.jsonl"))?;
    let started = Instant::now();
    let total = cfg.finetune.schedule.total_updates;
    let outcome = finetune_and_evaluate(&cfg, &cfg.finetune, &splits, init.as_ref(), |m| {
        metrics.write(m)?;
        if m.step % 50 == 0 || m.step + 1 == total || m.heldout_accuracy.is_some() {
            let held = m.heldout_accuracy.map_or_else(String::new, |h| format!("  heldout {h:.3}"));
            eprintln!("step {:>5}  ce {:.4}  batch acc {:.3}{held}  [{:.0?}]", m.step, m.loss_ce, m.accuracy, started.elapsed());
        }
        Ok(())
    })?;
    metrics.flush()?;
    outcome.checkpoint.save(&a.out.join("checkpoint.ckpt"))?;
    write_text(&a.out.join("confusion.csv"), &outcome.heldout.to_csv())?;
    let row = format!("{},{},{}", init_mode(&a), minutes_label(&a), outcome.heldout.accuracy());
    write_text(&a.out.join("result.csv"), &format!("init_mode,minutes,accuracy\n{row}\n"))?;
    println!("init_mode,minutes,accuracy\n{row}");
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let lid = ck.lid.as_ref().ok_or_else(|| Error::Config(format!("{} has no classifier head", a.checkpoint.display())))?;
    let stats = ck.feature_stats.as_ref().ok_or_else(|| Error::Config("checkpoint has no feature statistics".into()))?;
    let manifest = Manifest::load(&a.manifest)?;
    manifest.validate()?;
    let extractor = LogMelExtractor::new(ck.features.clone())?;
    let frames = extract_manifest(&manifest, &extractor)?.iter().map(|f| stats.normalize(f)).collect::<Result<Vec<_>>>()?;
    let set = FeatureSet::new(&manifest, frames, None)?;
    let confusion = evaluate(&ck.params, &ck.model, &lid.head, &lid.languages, &set)?;
    if let Some(p) = &a.confusion {
        write_text(p, &confusion.to_csv())?;
    }
    println!("accuracy,{}", confusion.accuracy());
    Ok(())
}

fn run_probe(a: ProbeArgs) -> Result<()> {
    let Prepared { cfg, init, splits } = prepare(&a.run)?;
    let layers = if a.layers.is_empty() { (1..=cfg.model.num_layers).collect() } else { a.layers.clone() };
    let mut csv = String::from("layer,accuracy\n");
    for (k, acc) in probe_layers(&cfg, &splits, init.as_ref(), &layers)? {
        eprintln!("layer {k}: {acc:.4}");
        csv.push_str(&format!("{k},{acc}\n"));
    }
    write_text(&a.run.out.join("probe_layers.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_ablation(a: RunArgs) -> Result<()> {
    let Prepared { cfg, init, splits } = prepare(&a)?;
    let mut csv = String::from("pooling,accuracy\n");
    for (mode, acc) in ablate_pooling(&cfg, &splits, init.as_ref())? {
        eprintln!("{mode}: {acc:.4}");
        csv.push_str(&format!("{mode},{acc}\n"));
    }
    write_text(&a.out.join("pooling.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn check_features(ck: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    if ck.features != cfg.features {
        return Err(Error::ConfigConflict("checkpoint feature settings differ from [features] in the config".into()));
    }
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Append-only JSON-lines log.
struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    fn write(&mut self, row: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.out, row)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
