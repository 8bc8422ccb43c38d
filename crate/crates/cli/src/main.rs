//! `fixres`: dataset synthesis, training, FixRes fine-tuning, resolution
//! sweeps and the full evaluation protocol.
//!
//! Logs go to stderr, one-line summaries to stdout. Exit codes: 0 success,
//! 2 validation or I/O error, 3 numeric failure, 4 protocol violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use fixres_core::eval_harness::{resolution_sweep, SplitName};
use fixres_core::experiment::{build_protocol, run_experiment, write_artifacts, ExperimentConfig};
use fixres_core::fixres::{finetune_fixres, train, TrainConfig};
use fixres_core::image_pipeline::{read_dataset, synth_dataset, write_dataset, DatasetSpec, LabeledDataset, TestPreproc};
use fixres_core::model::{build_model, MicroNet};
use fixres_core::tensor_core::checkpoint::{load_checkpoint, save_checkpoint};
use fixres_core::{Error, ErrorKind, Result, Scalar};

#[derive(Parser)]
#[command(name = "fixres", version, about = "Train/test resolution discrepancy experiments")]
struct Cli {
    /// Arithmetic precision for training and evaluation.
    #[arg(long, value_enum, global = true, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset (FXDS).
    SynthData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the config's training split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment seed; defaults to the first protocol seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// FixRes fine-tuning of a trained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `finetune.target_res` from the config.
        #[arg(long)]
        target_res: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy across test resolutions.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated, strictly increasing resolutions.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<usize>,
        /// An FXDS file, or a split name (train, val, test_a, test_b) with --config.
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = TestPreproc::default().crop_ratio)]
        crop_ratio: f64,
    },
    /// Train, fine-tune, select on val and report on test_A / test_B.
    Protocol {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Replaces the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation | ErrorKind::Io => 2,
        ErrorKind::Numeric => 3,
        ErrorKind::Protocol => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.precision {
        Precision::F32 => run::<f32>(cli.command),
        Precision::F64 => run::<f64>(cli.command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_model<T: Scalar>(path: &Path) -> Result<MicroNet<T>> {
    MicroNet::<f32>::from_named_tensors(&load_checkpoint(path)?)?.cast()
}

fn save_model<T: Scalar>(model: &MicroNet<T>, path: &Path) -> Result<()> {
    save_checkpoint(path, &model.to_named_tensors())
}

fn experiment_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<u64> {
    seed.or_else(|| cfg.protocol.seeds.first().copied())
        .ok_or_else(|| Error::Config("protocol.seeds is empty and no --seed given".into()))
}

fn run<T: Scalar>(command: Command) -> Result<()> {
    match command {
        Command::SynthData { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io { path: spec.clone(), source: e })?;
            let spec: DatasetSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let ds = synth_dataset(&spec)?;
            write_dataset(&ds, &out)?;
            println!(
                "wrote {} samples, {} classes, {}x{} to {}",
                ds.len(),
                ds.num_classes(),
                ds.height(),
                ds.width(),
                out.display()
            );
        }
        Command::Train { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let seed = experiment_seed(&cfg, seed)?;
            let protocol = build_protocol(&cfg, seed)?;
            let mut model: MicroNet<T> = build_model(&cfg.model, seed)?;
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let mut log = train(&mut model, protocol.train(), &train_cfg)?;
            save_model(&model, &out)?;
            log.checkpoint = Some(out.clone());
            let csv = out.with_extension("csv");
            log.save_csv(&csv)?;
            let last = log.epochs.last().expect("at least one epoch");
            println!(
                "trained seed {seed}: {} epochs, loss {:.4}, train top-1 {:.4}, checkpoint {}, log {}",
                log.epochs.len(),
                last.loss,
                last.top1,
                out.display(),
                csv.display()
            );
        }
        Command::Finetune {
            config,
            ckpt,
            out,
            target_res,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let seed = experiment_seed(&cfg, seed)?;
            let mut model: MicroNet<T> = load_model(&ckpt)?;
            let mut ft = cfg.finetune.clone();
            if let Some(r) = target_res {
                ft = ft.with_target_res(r);
            }
            ft.seed = seed;
            let protocol = build_protocol(&cfg, seed)?;
            let log = finetune_fixres(&mut model, protocol.train(), &ft)?;
            save_model(&model, &out)?;
            println!(
                "fine-tuned scope {} at {} for {} epochs, checkpoint {}",
                ft.scope,
                ft.target_res,
                log.epochs.len(),
                out.display()
            );
        }
        Command::Sweep {
            ckpt,
            grid,
            split,
            out,
            config,
            seed,
            crop_ratio,
        } => {
            let model: MicroNet<T> = load_model(&ckpt)?;
            let preproc = TestPreproc {
                crop_ratio,
                out_size: model.config().train_res,
            };
            let run_sweep = |data: &LabeledDataset| -> Result<()> {
                let curve = resolution_sweep(&model, data, &grid, &preproc)?;
                let file = std::fs::File::create(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
                let name = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                curve.write_csv(&name, std::io::BufWriter::new(file), true)?;
                let best = curve.argmax();
                println!(
                    "argmax {best} top1 {:.4} over {} resolutions",
                    curve.at(best).expect("argmax is on the curve").top1,
                    grid.len()
                );
                Ok(())
            };
            if Path::new(&split).is_file() {
                run_sweep(&read_dataset(Path::new(&split))?)?;
            } else {
                let name: SplitName = split.parse()?;
                let config = config.ok_or_else(|| {
                    Error::Config(format!("split `{split}` is not a file; naming a split requires --config"))
                })?;
                let cfg = ExperimentConfig::load(&config)?;
                let seed = experiment_seed(&cfg, seed)?;
                let protocol = build_protocol(&cfg, seed)?;
                let data = match name {
                    SplitName::Train => protocol.train(),
                    SplitName::Val => protocol.val(),
                    SplitName::TestA => protocol.test_a(),
                    SplitName::TestB => protocol.read_test_b("sweep")?,
                };
                run_sweep(data)?;
            }
        }
        Command::Protocol { config, out_dir, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.protocol.seeds = vec![s];
            }
            let outcomes = run_experiment::<T>(&cfg)?;
            let files = write_artifacts(&outcomes, &out_dir)?;
            for f in &files {
                info!("wrote {}", f.display());
            }
            let summary: Vec<String> = outcomes
                .iter()
                .map(|o| {
                    format!(
                        "s{}: res {} top1_B {:.4} -> {:.4}",
                        o.seed,
                        o.selected_res,
                        o.baseline_at_train().top1_b,
                        o.fixres_row().top1_b
                    )
                })
                .collect();
            println!("protocol complete; {}; artifacts in {}", summary.join("; "), out_dir.display());
        }
    }
    Ok(())
}
