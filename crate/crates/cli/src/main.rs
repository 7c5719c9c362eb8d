use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use vseg_cli::commands::{self, SynthCommand, SynthOptions, RF_INPUT};
use vseg_cli::config::{load_region_map, Config};
use vseg_cli::io::{import_raw, write_volume};
use vseg_core::synth::SynthKind;

#[derive(Parser)]
#[command(name = "vseg", version, about = "Volumetric segmentation: train, infer, evaluate")]
struct Cli {
    /// Configuration file (`key = value` TOML); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Spheres,
    HandLike,
    HealthyMirror,
    Imbalanced,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network, or cross-validate with --folds.
    Train {
        /// Directory of `<stem>.image.vseg` / `<stem>.labels.vseg` pairs.
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        region_map: Option<PathBuf>,
    },
    /// Predict a label volume; several checkpoints form an ensemble.
    Infer {
        input: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use probability averaging even for a single checkpoint.
        #[arg(long)]
        ensemble: bool,
    },
    /// Region metrics of a predicted label volume.
    Eval {
        pred: PathBuf,
        truth: PathBuf,
        #[arg(long)]
        region_map: Option<PathBuf>,
        /// CSV destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Receptive field and shape of every convolution.
    RfReport {
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
        input: Option<Vec<usize>>,
        /// CSV destination; the aligned table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Probes per network tensor.
        #[arg(long, default_value_t = 2)]
        per_tensor: usize,
    },
    /// Generate synthetic labeled volumes.
    Synth {
        #[arg(value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"], default_values_t = [32, 32, 32])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// Source directory for healthy-mirror.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Mirror axis for healthy-mirror (0 = D, 1 = H, 2 = W).
        #[arg(long, default_value_t = 2)]
        axis: usize,
    },
    /// Class-frequency audit of a data directory.
    Freq { data: PathBuf },
    /// Convert a raw little-endian array with a `<raw>.dims` sidecar.
    Import {
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// The array holds u8 labels instead of f32 intensities.
        #[arg(long)]
        labels: bool,
    },
    /// ASCII view of one slice.
    Preview {
        volume: PathBuf,
        #[arg(long, default_value_t = 0)]
        axis: usize,
        #[arg(long)]
        slice: Option<usize>,
    },
}

fn dims3(v: &[usize]) -> [usize; 3] {
    [v[0], v[1], v[2]]
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    match cli.command {
        Command::Train {
            data,
            out,
            folds,
            region_map,
        } => {
            if let Some(p) = region_map {
                cfg.regions = Some(load_region_map(&p)?);
            }
            let s = commands::cmd_train(&cfg, &data, &out, folds)?;
            for ((p, loss), n) in s.checkpoints.iter().zip(&s.best_val_loss).zip(&s.epochs_run) {
                println!("{}: {n} epochs, best validation loss {loss:.6}", p.display());
            }
        }
        Command::Infer {
            input,
            checkpoints,
            out,
            ensemble,
        } => {
            commands::cmd_infer(&checkpoints, &input, &out, ensemble)?;
        }
        Command::Eval {
            pred,
            truth,
            region_map,
            out,
        } => {
            let regions = match region_map {
                Some(p) => load_region_map(&p)?,
                None => cfg.regions(),
            };
            let csv = commands::cmd_eval(&pred, &truth, &regions)?;
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| p.display().to_string())?,
                None => print!("{csv}"),
            }
        }
        Command::RfReport { input, out } => {
            let (text, csv) = commands::cmd_rf_report(&cfg.arch, input.as_deref().map_or(RF_INPUT, dims3))?;
            print!("{text}");
            if let Some(p) = out {
                std::fs::write(&p, csv).with_context(|| p.display().to_string())?;
            }
        }
        Command::Gradcheck { instances, per_tensor } => {
            let reports = commands::cmd_gradcheck(cfg.train.seed, instances, Some(per_tensor))?;
            print!("{}", commands::format_gradcheck(&reports));
            if !reports.iter().all(|r| r.passed()) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth {
            kind,
            out,
            count,
            dims,
            channels,
            source,
            axis,
        } => {
            let what = match kind {
                Kind::Spheres => SynthCommand::Generate(SynthKind::Spheres),
                Kind::HandLike => SynthCommand::Generate(SynthKind::HandLike),
                Kind::Imbalanced => SynthCommand::Generate(SynthKind::Imbalanced),
                Kind::HealthyMirror => SynthCommand::HealthyMirror,
            };
            let opts = SynthOptions {
                count,
                dims: dims3(&dims),
                channels,
                seed: cfg.train.seed,
                source,
                axis,
            };
            let stems = commands::cmd_synth(what, &opts, &out)?;
            println!("wrote {} volumes to {}", stems.len(), out.display());
        }
        Command::Freq { data } => print!("{}", commands::cmd_freq(&data)?),
        Command::Import { raw, out, labels } => write_volume(&out, &import_raw(&raw, labels)?)?,
        Command::Preview { volume, axis, slice } => print!("{}", commands::cmd_preview(&volume, axis, slice)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
