//! `got`: train, evaluate and run the captioning and retrieval networks.
//!
//! Exit codes: 0 success, 2 validation error, 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use got_core::checkpoint::{load_checkpoint, load_for_task};
use got_core::datasets::{generate_synthetic_corpus, load_dataset, tokenize, write_dataset, Dataset, Image, SceneLayout, Splits, TemplateSet};
use got_core::infer_eval::{detect_and_caption, evaluate_captioning, evaluate_retrieval, retrieve};
use got_core::model::Task;
use got_core::par::ExecMode;
use got_core::trainer::{train, TrainConfig, TrainOptions};
use got_core::Error;
use got_serve::{serve, ServeConfig};

const SPLITS_FILE: &str = "splits.json";
const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Parser)]
#[command(name = "got", version, about = "Object captioning and natural-language object retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory or annotation file.
    #[arg(long)]
    dataset: PathBuf,
    /// Split name from the dataset's splits.json.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a caption or retrieval network.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// key = value run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides a configuration key, e.g. `--set iterations=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Start from the desk-scale defaults for the task instead of full widths.
        #[arg(long, conflicts_with = "config")]
        toy: bool,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on an annotated split.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Detect and caption the objects of one image.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find the object a query describes.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic shapes corpus with a train/test split.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Layout::Mixed)]
        layout: Layout,
        /// Caption template, repeatable; `{size}`, `{color}` and `{shape}` are filled in.
        #[arg(long = "template")]
        templates: Vec<String>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Run the HTTP inference service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        checkpoint_caption: Option<PathBuf>,
        #[arg(long)]
        checkpoint_retrieval: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Single,
    Mixed,
    Pairs,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_max_level(std::env::var("RUST_LOG").ok().and_then(|v| v.parse().ok()).unwrap_or(tracing::Level::INFO))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn annotation_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(ANNOTATIONS_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_data(args: &DataArgs) -> got_core::Result<Dataset> {
    let path = annotation_path(&args.dataset);
    let ds = load_dataset(&path)?;
    let Some(name) = &args.split else { return Ok(ds) };
    let splits = Splits::load(&path.parent().unwrap_or(Path::new(".")).join(SPLITS_FILE))?;
    let ids = splits.get(name).ok_or_else(|| Error::Config(format!("no split named `{name}`")))?;
    let sub = ds.subset(ids);
    if sub.images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(sub)
}

/// Writes a line to stdout; a reader that went away early is not an error.
fn say(text: impl std::fmt::Display) -> got_core::Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> got_core::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => say(text)?,
    }
    Ok(())
}

fn run(cmd: Command) -> got_core::Result<()> {
    match cmd {
        Command::Train { data, config, overrides, seed, toy, out } => {
            let pairs = overrides
                .iter()
                .map(|kv| {
                    kv.split_once('=')
                        .map(|(k, v)| (k.trim(), v.trim()))
                        .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None if toy => {
                    let task = pairs.iter().rev().find(|(k, _)| *k == "task").map_or(Ok(Task::Caption), |(_, v)| v.parse())?;
                    TrainConfig::toy(task)
                }
                None => TrainConfig::default(),
            };
            for (k, v) in &pairs {
                cfg.set(k, v)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let ds = load_data(&data)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("train.cfg"), cfg.to_kv_string())?;
            let every = (cfg.iterations / 20).max(1);
            let outcome = train(
                &ds,
                &cfg,
                TrainOptions {
                    checkpoint_dir: Some(out.clone()),
                    progress: Some(Box::new(move |i, l| {
                        if i % every == 0 {
                            tracing::info!(iteration = i, total = l.total, branch = l.branch, superclass = l.superclass, "train");
                        }
                    })),
                    ..Default::default()
                },
            )?;
            if let Some(last) = outcome.checkpoints.last() {
                say(last.display())?;
            }
            Ok(())
        }
        Command::Evaluate { data, checkpoint, out, sequential } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load_data(&data)?;
            let mode = if sequential { ExecMode::Sequential } else { ExecMode::Parallel };
            let report = match ckpt.manifest.task {
                Task::Caption => evaluate_captioning(&ckpt.model, &ds, mode)?,
                Task::Retrieval => evaluate_retrieval(&ckpt.model, &ds, mode)?,
            };
            say(&report)?;
            if let Some(p) = out {
                std::fs::write(p, report.to_json() + "\n")?;
            }
            Ok(())
        }
        Command::Detect { checkpoint, image, out } => {
            let ckpt = load_for_task(&checkpoint, Task::Caption)?;
            let r = detect_and_caption(&ckpt.model, &Image::open(&image)?)?;
            emit(&serde_json::to_value(&r)?, out.as_deref())
        }
        Command::Retrieve { checkpoint, image, query, out } => {
            let ckpt = load_for_task(&checkpoint, Task::Retrieval)?;
            let r = retrieve(&ckpt.model, &Image::open(&image)?, &tokenize(&query))?;
            emit(&serde_json::to_value(&r)?, out.as_deref())
        }
        Command::SynthData { out, seed, count, layout, templates, size, train_fraction } => {
            let layout = match layout {
                Layout::Single => SceneLayout::Single,
                Layout::Mixed => SceneLayout::Mixed,
                Layout::Pairs => SceneLayout::SameShapePairs,
            };
            let ts = if templates.is_empty() {
                TemplateSet { layout, ..TemplateSet::default() }
            } else {
                TemplateSet::new(&templates.iter().map(String::as_str).collect::<Vec<_>>(), layout)
            };
            if !(0.0..=1.0).contains(&train_fraction) {
                return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
            }
            let ds = generate_synthetic_corpus(count, seed, (size, size), &ts)?;
            let ann = write_dataset(&out, &ds)?;
            Splits::random(&ds, train_fraction, seed).save(&out.join(SPLITS_FILE))?;
            say(ann.display())?;
            Ok(())
        }
        Command::Serve { bind, port, checkpoint_caption, checkpoint_retrieval } => {
            let cfg = ServeConfig { bind, port, caption_checkpoint: checkpoint_caption, retrieval_checkpoint: checkpoint_retrieval }
                .from_process_env()?;
            let state = cfg.load_state()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(&cfg, state))?;
            Ok(())
        }
    }
}
