//! `tmk`: dataset generation, training, evaluation and benchmark sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
//! error. `TMK_THREADS` caps the worker threads.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use transmusic::array::Quantization;
use transmusic::bench::{aggregate, baseline_on_dataset, emit, run_sweep, CellSummary, Method, SweepConfig};
use transmusic::classical::ClassicalConfig;
use transmusic::dataset::{generate_dataset, Dataset, DatasetConfig};
use transmusic::model::TransMusic;
use transmusic::training::{evaluate_model, loss_csv_path, train, EvalSummary, TrainingDocument};
use transmusic::Error;

#[derive(Parser)]
#[command(name = "tmk", version, about = "Transformer-aided MUSIC DOA toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset from a JSON dataset config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; the config holds `train` and `model` sections.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Arm::OneBit)]
        quantization: Arm,
        /// Use only the first L snapshots of every record.
        #[arg(long)]
        snapshots: Option<usize>,
    },
    /// Run a benchmark sweep and write CSV and SVG results.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a classical baseline over a dataset.
    Baseline {
        /// music, one_bit_music or beamformer.
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Arm {
    OneBit,
    Unquantized,
}

impl From<Arm> for Quantization {
    fn from(a: Arm) -> Self {
        match a {
            Arm::OneBit => Quantization::OneBit,
            Arm::Unquantized => Quantization::Unquantized,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) => 3,
        Error::Numeric(_) | Error::Convergence { .. } => 4,
        _ => 2,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> transmusic::Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn print_json(v: &impl Serialize) -> transmusic::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

#[derive(Serialize)]
struct GroupStats {
    snr_db: Option<f64>,
    records: usize,
    median_rmspe_rad: f64,
    mean_rmspe_rad: f64,
    sn_accuracy: f64,
}

impl GroupStats {
    fn of(snr_db: Option<f64>, s: &EvalSummary) -> Self {
        Self {
            snr_db,
            records: s.records.len(),
            median_rmspe_rad: s.median_rmspe(),
            mean_rmspe_rad: s.mean_rmspe(),
            sn_accuracy: s.sn_accuracy(),
        }
    }
}

/// Overall statistics followed by one entry per distinct SNR.
fn grouped(s: &EvalSummary) -> Vec<GroupStats> {
    let mut snrs: Vec<f64> = s.records.iter().map(|r| r.snr_db).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();
    std::iter::once(GroupStats::of(None, s))
        .chain(snrs.into_iter().map(|snr| GroupStats::of(Some(snr), &s.at_snr(snr))))
        .collect()
}

fn run(cli: Cli) -> transmusic::Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg: DatasetConfig = read_json(&config)?;
            generate_dataset(&cfg, &out)?;
            eprintln!("wrote {} records to {}", cfg.count, out.display());
        }
        Command::Train { config, data, out } => {
            let doc: TrainingDocument = read_json(&config)?;
            let path = data
                .or_else(|| doc.train.dataset.clone())
                .ok_or_else(|| Error::Config("no dataset given (--data or train.dataset)".into()))?;
            let dataset = Dataset::read(&path)?;
            let outcome = train(&doc.train, &doc.model, &dataset, &out, |r| {
                eprintln!(
                    "epoch {:>3}  train rmspe {:.5}  train ce {:.4}  val rmspe {:.5}  val sn acc {:.4}",
                    r.epoch, r.train_rmspe, r.train_ce, r.val_rmspe, r.val_sn_acc
                );
            })?;
            eprintln!(
                "best epoch {}; checkpoint {}; log {}",
                outcome.best_epoch,
                out.display(),
                loss_csv_path(&out).display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            quantization,
            snapshots,
        } => {
            let model = TransMusic::load(&ckpt)?;
            let dataset = Dataset::read(&data)?;
            let summary = evaluate_model(&model, &dataset.records, quantization.into(), snapshots)?;
            print_json(&grouped(&summary))?;
        }
        Command::Sweep { config, out } => {
            let cfg: SweepConfig = read_json(&config)?;
            let rows = run_sweep(&cfg)?;
            let summaries = aggregate(&rows)?;
            emit(&rows, &summaries, &out)?;
            print_summaries(&summaries);
        }
        Command::Baseline { method, data } => {
            let method: Method = method.parse()?;
            let dataset = Dataset::read(&data)?;
            let rows = baseline_on_dataset(method, &dataset, &ClassicalConfig::default())?;
            if rows.is_empty() {
                return Err(Error::Config("dataset is empty".into()));
            }
            let summaries = aggregate(&rows)?;
            print_summaries(&summaries);
        }
    }
    Ok(())
}

fn print_summaries(summaries: &[CellSummary]) {
    println!("method,snr_db,L,trials,median_rmspe_rad,mean_rmspe_rad,sn_accuracy");
    for c in summaries {
        println!(
            "{},{},{},{},{:.6},{:.6},{:.4}",
            c.method, c.snr_db, c.snapshots, c.trials, c.median_rmspe, c.mean_rmspe, c.sn_accuracy
        );
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("TMK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("TMK_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("tmk: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tmk: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
