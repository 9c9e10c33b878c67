mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use plug_core::checkpoint::{load_checkpoint, save_checkpoint};
use plug_core::gradcheck::loss_suite;
use plug_core::losses::LossTerms;
use plug_core::pipeline::{
    evaluate_file, export_heatmaps, generate_labels, load_dataset, prepare_images, write_dataset,
    FeatureSource,
};
use plug_core::sempred::PlugModel;
use plug_core::study::{density_study, lambda_sweep, write_csv, LAMBDA_GRID};
use plug_core::train::{train, write_jsonl};
use plug_core::{DatasetFile, Error, SeedStreams};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "plug", version, about = "Upgrade point labels to pseudo boxes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_images: Option<usize>,
    },
    /// Train the semantic predictor; writes model.plug and train_log.jsonl.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Train the plain predictor without sparse feature guidance.
        #[arg(long)]
        no_sfg: bool,
        /// Comma-separated loss terms out of pos, neg, col.
        #[arg(long)]
        terms: Option<String>,
    },
    /// Generate pseudo boxes and masks for a dataset.
    Genlabels {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for PGM likelihood maps, semantic layers and assignments.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        #[command(flatten)]
        ilg: IlgFlags,
    },
    /// Score pseudo labels against ground truth, or sweep λ.
    Eval {
        /// Pseudo-label JSON written by genlabels.
        #[arg(long, required_unless_present = "lambda_sweep")]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Emit a CSV row per λ in {0, 0.5, 1, 1.5, 2} instead.
        #[arg(long, requires_all = ["data", "checkpoint"])]
        lambda_sweep: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        no_sfg: bool,
    },
    /// Copy-and-paste density study; the control arm goes to <out>.control.csv.
    Density {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ilg: IlgFlags,
    },
    /// Finite-difference check of the loss and model gradients.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct IlgFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Predict without sparse feature guidance.
    #[arg(long)]
    no_sfg: bool,
}

impl IlgFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(l) = self.lambda {
            cfg.ilg.lambda = l;
            cfg.density.ilg.lambda = l;
        }
        if let Some(t) = self.tau {
            cfg.ilg.tau = t;
            cfg.density.ilg.tau = t;
        }
        if self.no_sfg {
            cfg.density.sfg = false;
        }
    }
}

/// Failures that map to exit code 1; everything else is a usage or input
/// problem (exit code 2).
fn is_runtime(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence { .. } | Error::Infeasible(_) | Error::Contract(_) | Error::Shape(_)
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_runtime(&e) { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> plug_core::Result<ExitCode> {
    if let Some(n) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    let seed = cli.common.seed.or(cfg.seed).unwrap_or(0);
    cfg.train.seed = seed;
    cfg.density.seed = seed;
    match cli.command {
        Command::Synth { out, n_images } => {
            if let Some(n) = n_images {
                cfg.dataset.n_images = n;
            }
            cfg.validate()?;
            let scenes = cfg.dataset.generate(seed)?;
            let categories = cfg.dataset.scene.categories.len() as u32;
            write_dataset(&scenes, categories, &out)?;
            log::info!("wrote {} images to {}", scenes.len(), out.display());
        }
        Command::Train {
            data,
            out,
            epochs,
            lr,
            no_sfg,
            terms,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            if no_sfg {
                cfg.train.sfg = false;
            }
            if let Some(t) = terms {
                cfg.train.loss.terms = parse_terms(&t)?;
            }
            cfg.validate()?;
            cmd_train(&cfg, seed, &data, &out)?;
        }
        Command::Genlabels {
            data,
            checkpoint,
            out,
            heatmaps,
            ilg,
        } => {
            ilg.apply(&mut cfg);
            cfg.validate()?;
            let model = load_checkpoint::<f64>(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let images = prepare_images::<f64>(&ds, &feature_source(&cfg), &cfg.affinity)?;
            let guided = !ilg.no_sfg && model.bank.any_available();
            let (file, outputs) = generate_labels(&model, &ds, &images, guided, &cfg.ilg)?;
            write_json(&out, &file)?;
            if let Some(dir) = heatmaps {
                let labelled = outputs.iter().flatten();
                for (img, o) in images.iter().zip(labelled) {
                    export_heatmaps(&model, img, o, guided, &cfg.ilg, &dir)?;
                }
            }
            let n: usize = file
                .images
                .iter()
                .map(|r| r.pseudo_boxes.as_ref().map_or(0, Vec::len))
                .sum();
            log::info!("{n} pseudo boxes written to {}", out.display());
        }
        Command::Eval {
            labels,
            out,
            lambda_sweep: sweep,
            data,
            checkpoint,
            no_sfg,
        } => {
            cfg.validate()?;
            if sweep {
                let (data, checkpoint) = (data.unwrap(), checkpoint.unwrap());
                let model = load_checkpoint::<f64>(&checkpoint)?;
                let ds = load_dataset(&data)?;
                let images = prepare_images::<f64>(&ds, &feature_source(&cfg), &cfg.affinity)?;
                let guided = !no_sfg && model.bank.any_available();
                let rows = lambda_sweep(&model, &images, guided, &cfg.ilg, &LAMBDA_GRID, seed)?;
                write_csv(&rows, create(&out)?)?;
            } else {
                let labels = labels.expect("clap enforces --labels");
                let file = DatasetFile::read(&labels)?;
                let report = evaluate_file(&file, &cfg.density_buckets)?;
                let json = report.to_json()?;
                fs::write(&out, format!("{json}\n")).map_err(|e| Error::io(&out, e))?;
                print_stdout(&json);
            }
        }
        Command::Density {
            checkpoint,
            out,
            ilg,
        } => {
            ilg.apply(&mut cfg);
            cfg.validate()?;
            let model = load_checkpoint::<f64>(&checkpoint)?;
            if model.dim() != cfg.density.features.channel_count() {
                return Err(Error::Config(format!(
                    "checkpoint expects {} feature channels, the density filter bank gives {}",
                    model.dim(),
                    cfg.density.features.channel_count()
                )));
            }
            let study = density_study(&model, &cfg.density)?;
            write_csv(&study.dense, create(&out)?)?;
            write_csv(&study.control, create(&out.with_extension("control.csv"))?)?;
        }
        Command::Gradcheck {
            instances,
            tolerance,
            out,
        } => {
            let checks = loss_suite(seed, instances)?;
            let json = serde_json::to_string_pretty(&checks)?;
            print_stdout(&json);
            if let Some(path) = out {
                fs::write(&path, format!("{json}\n")).map_err(|e| Error::io(&path, e))?;
            }
            if !checks.iter().all(|c| c.max_rel_error < tolerance) {
                eprintln!("gradient check failed (tolerance {tolerance})");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cfg: &RunConfig, seed: u64, data: &Path, out: &Path) -> plug_core::Result<()> {
    let ds = load_dataset(data)?;
    if ds.annotations.categories == 0 {
        return Err(Error::Validation(format!(
            "{} has no annotated categories",
            data.display()
        )));
    }
    let source = feature_source(cfg);
    let dim = source.dim(&ds)?;
    let images = prepare_images::<f64>(&ds, &source, &cfg.affinity)?;
    let mut rng = SeedStreams::new(seed).rng("init");
    let init = PlugModel::init(dim, ds.categories(), cfg.train.meta_update, &mut rng)?;
    let outcome = train(&images, init, &cfg.train)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_checkpoint(&outcome.model, out.join("model.plug"))?;
    write_jsonl(&outcome.log, create(&out.join("train_log.jsonl"))?)?;
    write_json(
        &out.join("run_config.json"),
        &RunConfig {
            seed: Some(seed),
            ..cfg.clone()
        },
    )?;
    log::info!("checkpoint written to {}", out.join("model.plug").display());
    Ok(())
}

fn feature_source(cfg: &RunConfig) -> FeatureSource {
    match &cfg.features_dir {
        Some(dir) => FeatureSource::Files(dir.clone()),
        None => FeatureSource::FilterBank(cfg.features.clone()),
    }
}

fn parse_terms(s: &str) -> plug_core::Result<LossTerms> {
    let mut t = LossTerms {
        positive: false,
        negative: false,
        color: false,
    };
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "pos" => t.positive = true,
            "neg" => t.negative = true,
            "col" => t.color = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown loss term {other:?} (expected pos, neg, col)"
                )))
            }
        }
    }
    Ok(t)
}

/// Prints to stdout, ignoring a closed pipe.
fn print_stdout(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn create(path: &Path) -> plug_core::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> plug_core::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
