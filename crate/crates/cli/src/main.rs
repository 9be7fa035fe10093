//! `autocl`: prepare datasets, pretrain, evaluate and export visualizations.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use autocl_core::augment::AugmentationPair;
use autocl_core::checkpoint::Checkpoint;
use autocl_core::data::{
    generate_synthetic, import_ucihar, load_container, save_container, split_few_shot,
    SyntheticSpec, WindowedDataset,
};
use autocl_core::eval::{
    export_augmentation_views, export_embeddings, finetune, write_confusion_csv, EvalReport,
};
use autocl_core::training::{pretrain, Method};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use config::{resolve, RunConfig};

#[derive(Parser)]
#[command(name = "autocl", version, about = "Auto-augmentation contrastive learning for wearable HAR")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file: a JSON object or `dotted.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Import a source into the canonical container and print its manifest.
    Prepare {
        /// `ucihar:<dir>` or `synthetic:<spec.json>`.
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Self-supervised pretraining.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = ["autocl", "simclr"])]
        method: Option<String>,
        /// Disable the stop-gradient on the first view.
        #[arg(long)]
        no_sg: bool,
        /// Disable the correlation-reduction term.
        #[arg(long)]
        no_cr: bool,
        #[arg(long, value_parser = ["E", "D"])]
        variant: Option<String>,
        /// SimCLR augmentation pair, e.g. `SP` (O, J, S, P).
        #[arg(long, value_parser = parse_pair)]
        aug: Option<AugmentationPair>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Few-shot fine-tuning of a prediction head on the frozen encoder.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Labeled share of each class used for fine-tuning.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Export embeddings and/or original-vs-generated windows.
    Visualize {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        embeddings: bool,
        #[arg(long)]
        aug_views: bool,
        /// Windows in the augmentation-view export.
        #[arg(short = 'k', long = "num-views")]
        k: Option<usize>,
        /// Export projector outputs instead of encoder features.
        #[arg(long)]
        projection: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_pair(s: &str) -> std::result::Result<AugmentationPair, String> {
    s.parse().map_err(|e: autocl_core::Error| e.to_string())
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ArgumentConflict, msg).exit()
}

fn push<T: Serialize>(flags: &mut Vec<(String, Value)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        flags.push((key.to_string(), serde_json::to_value(v).expect("serializable flag")));
    }
}

fn push_if(flags: &mut Vec<(String, Value)>, key: &str, on: bool, value: Value) {
    if on {
        flags.push((key.to_string(), value));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut flags = Vec::new();
    match &cli.command {
        Command::Prepare { source, out } => {
            push(&mut flags, "source", source.clone());
            push(&mut flags, "out", out.clone());
        }
        Command::Pretrain {
            data,
            out,
            method,
            no_sg,
            no_cr,
            variant,
            aug,
            seed,
            max_epochs,
            batch_size,
        } => {
            push(&mut flags, "data", data.clone());
            push(&mut flags, "out", out.clone());
            push(&mut flags, "train.method", method.clone());
            push_if(&mut flags, "train.loss.sg_enabled", *no_sg, Value::Bool(false));
            push_if(&mut flags, "train.loss.cr_enabled", *no_cr, Value::Bool(false));
            push(&mut flags, "model.variant", variant.clone());
            push(&mut flags, "train.aug_pair", *aug);
            push(&mut flags, "train.seed", *seed);
            push(&mut flags, "train.max_epochs", *max_epochs);
            push(&mut flags, "train.batch_size", *batch_size);
        }
        Command::Evaluate {
            data,
            checkpoint,
            out,
            fraction,
            seed,
            epochs,
        } => {
            push(&mut flags, "data", data.clone());
            push(&mut flags, "checkpoint", checkpoint.clone());
            push(&mut flags, "out", out.clone());
            push(&mut flags, "fraction", *fraction);
            push(&mut flags, "finetune.seed", *seed);
            push(&mut flags, "finetune.epochs", *epochs);
        }
        Command::Visualize {
            data,
            checkpoint,
            out,
            embeddings,
            aug_views,
            k,
            projection,
            seed,
        } => {
            push(&mut flags, "data", data.clone());
            push(&mut flags, "checkpoint", checkpoint.clone());
            push(&mut flags, "out", out.clone());
            push_if(&mut flags, "visualize.embeddings", *embeddings, Value::Bool(true));
            push_if(&mut flags, "visualize.aug_views", *aug_views, Value::Bool(true));
            push(&mut flags, "visualize.k", *k);
            push_if(&mut flags, "visualize.projection", *projection, Value::Bool(true));
            push(&mut flags, "visualize.seed", *seed);
        }
    }
    let cfg = resolve(cli.common.config.as_deref(), &cli.common.sets, flags)?;

    match cli.command {
        Command::Prepare { .. } => cmd_prepare(&cfg),
        Command::Pretrain {
            no_sg,
            no_cr,
            variant,
            aug,
            ..
        } => {
            match cfg.train.method {
                Method::Autocl if aug.is_some() => {
                    usage_error("--aug only applies to --method simclr")
                }
                Method::Simclr if no_sg || no_cr || variant.is_some() => {
                    usage_error("--no-sg, --no-cr and --variant only apply to --method autocl")
                }
                _ => {}
            }
            cmd_pretrain(&cfg)
        }
        Command::Evaluate { .. } => cmd_evaluate(&cfg),
        Command::Visualize { .. } => {
            if !cfg.visualize.embeddings && !cfg.visualize.aug_views {
                usage_error("nothing to export: pass --embeddings and/or --aug-views");
            }
            cmd_visualize(&cfg)
        }
    }
}

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| anyhow!("missing {flag}"))
}

/// Creates the output directory and records the resolved configuration.
fn open_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = required(&cfg.out, "--out")?.clone();
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let path = out.join("config.resolved.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(out)
}

fn load_data(cfg: &RunConfig) -> Result<WindowedDataset> {
    let dir = required(&cfg.data, "--data")?;
    load_container(dir).with_context(|| format!("cannot load dataset {}", dir.display()))
}

fn load_checkpoint(cfg: &RunConfig, data: &WindowedDataset) -> Result<Checkpoint> {
    let path = required(&cfg.checkpoint, "--checkpoint")?;
    let ck = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    if ck.spec.window_size != data.window_size() || ck.spec.num_channels != data.num_channels() {
        bail!(
            "checkpoint expects windows of {}x{}, dataset has {}x{}",
            ck.spec.window_size,
            ck.spec.num_channels,
            data.window_size(),
            data.num_channels()
        );
    }
    Ok(ck)
}

fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    let source = required(&cfg.source, "--source")?;
    let dataset = match source.split_once(':') {
        Some(("ucihar", path)) => import_ucihar(path)?,
        Some(("synthetic", path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {path}"))?;
            let spec: SyntheticSpec =
                serde_json::from_str(&text).with_context(|| format!("invalid synthetic spec {path}"))?;
            generate_synthetic(&spec)?
        }
        _ => bail!("source must be ucihar:<dir> or synthetic:<spec.json>, got {source:?}"),
    };
    let out = open_run_dir(cfg)?;
    save_container(&dataset, &out)?;
    println!("{}", serde_json::to_string_pretty(&dataset.manifest)?);
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let spec = cfg.model.to_spec(data.window_size(), data.num_channels());
    let out = open_run_dir(cfg)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("cannot create {}", log_path.display()))?,
    );
    let mut log_error = None;
    let result = pretrain(&data, spec, &cfg.train, &mut |record| {
        let written = serde_json::to_string(record)
            .map_err(anyhow::Error::from)
            .and_then(|line| Ok(writeln!(log, "{line}").and_then(|_| log.flush())?));
        if let Err(e) = written {
            log_error.get_or_insert(e);
        }
    });
    if let Some(e) = log_error {
        return Err(e.context(format!("cannot write {}", log_path.display())));
    }
    let checkpoint = result?;
    checkpoint.save(out.join("checkpoint.bin"))?;
    tracing::info!(
        epochs = checkpoint.history.len(),
        best_epoch = checkpoint.best_epoch,
        "wrote {}",
        out.join("checkpoint.bin").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    fraction: f64,
    split_seed: u64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    if !data.is_labeled() {
        bail!("evaluation needs a labeled dataset");
    }
    let ck = load_checkpoint(cfg, &data)?;
    let out = open_run_dir(cfg)?;
    let split_seed = cfg.split_seed.unwrap_or(cfg.finetune.seed);
    let (tune, test) = split_few_shot(&data, cfg.fraction, split_seed)?;
    let (_, report) = finetune(&ck, &tune, &test, &cfg.finetune)?;
    tracing::info!(
        top10 = report.top10_mean_accuracy,
        final_accuracy = report.final_accuracy,
        "fine-tuned on {} windows, tested on {}",
        report.num_tune,
        report.num_test
    );

    let file = ReportFile {
        checkpoint: required(&cfg.checkpoint, "--checkpoint")?,
        data: required(&cfg.data, "--data")?,
        fraction: cfg.fraction,
        split_seed,
        report: &report,
    };
    fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    let names = if data.manifest.class_names.is_empty() {
        (0..data.num_classes()).map(|k| format!("class_{k}")).collect()
    } else {
        data.manifest.class_names.clone()
    };
    write_confusion_csv(&report.confusion, &names, &out.join("confusion.csv"))?;
    Ok(())
}

fn cmd_visualize(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let ck = load_checkpoint(cfg, &data)?;
    let out = open_run_dir(cfg)?;
    let vis = &cfg.visualize;
    if vis.embeddings {
        export_embeddings(&ck, &data, &out.join("embeddings.csv"), vis.projection)?;
    }
    if vis.aug_views {
        export_augmentation_views(&ck, &data, vis.k, vis.seed, &out.join("aug_views.csv"))?;
    }
    Ok(())
}
