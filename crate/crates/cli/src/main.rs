use std::path::PathBuf;
use std::process::ExitCode;

use auvire_cli::{
    cmd_calibrate, cmd_generate, cmd_score, cmd_sweep, cmd_train, CliError, CliResult, LabelSource, RunConfig,
    ScoreInputs, ScoreMode,
};
use auvire_core::datagen::Split;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "auvire", version, about = "Temporal forgery localization by cross-modal reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data, initialisation and shuffling seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a train/val/test manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        num_samples: Option<usize>,
    },
    /// Train on a manifest and report test metrics of the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Suppress per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Score videos with a trained checkpoint.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the videos of this manifest.
        #[arg(long, conflicts_with = "features")]
        manifest: Option<PathBuf>,
        /// Restrict a manifest to one split (train, val or test).
        #[arg(long, requires = "manifest")]
        split: Option<String>,
        /// Feature files to score.
        #[arg(long, num_args = 1..)]
        features: Vec<PathBuf>,
        /// Directory of `<video id>.json` face-presence files.
        #[arg(long)]
        validity: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ScoreMode>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        chunk_seconds: Option<f64>,
        #[arg(long)]
        min_segment_seconds: Option<f64>,
        #[arg(long)]
        talk_threshold: Option<f64>,
        /// Score each valid range as a single window.
        #[arg(long)]
        no_chunking: bool,
    },
    /// Tabulate AUC and AP of Ψ_m over a θ grid.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// `predictions.jsonl` written by `score`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Take labels from this manifest's annotations.
        #[arg(long, conflicts_with = "labels")]
        manifest: Option<PathBuf>,
        /// Take labels from `video_id<TAB>0|1` lines.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Comma-separated θ values.
        #[arg(long, value_delimiter = ',')]
        thetas: Vec<f64>,
    },
    /// Train every cell of the hyperparameter grid and rank them.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    let out = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("an output directory is required (--out or paths.out_dir)".into()))?;
    Ok((cfg, out))
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required")))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { common, num_samples } => {
            let (mut cfg, out) = resolve(&common)?;
            if let Some(n) = num_samples {
                cfg.generate.num_samples = n;
            }
            let manifest = cmd_generate(&cfg, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { common, manifest, quiet } => {
            let (mut cfg, out) = resolve(&common)?;
            let manifest = required(manifest, &cfg.paths.manifest, "manifest")?;
            cfg.paths.manifest = Some(manifest.clone());
            let report = cmd_train(&cfg, &manifest, &out, !quiet)?;
            println!("{}", serde_json::to_string(&report.test).map_err(|e| CliError::Usage(e.to_string()))?);
        }
        Command::Score {
            common,
            checkpoint,
            manifest,
            split,
            features,
            validity,
            mode,
            theta,
            chunk_seconds,
            min_segment_seconds,
            talk_threshold,
            no_chunking,
        } => {
            let (mut cfg, out) = resolve(&common)?;
            let checkpoint = required(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            cfg.paths.checkpoint = Some(checkpoint.clone());
            if let Some(v) = validity {
                cfg.paths.validity_dir = Some(v);
            }
            if let Some(m) = mode {
                cfg.score.mode = m;
            }
            if let Some(t) = theta {
                cfg.score.theta = t;
            }
            if let Some(c) = chunk_seconds {
                cfg.validity.chunk_s = c;
            }
            if let Some(m) = min_segment_seconds {
                cfg.validity.min_segment_s = m;
            }
            if let Some(t) = talk_threshold {
                cfg.validity.talk_threshold = t;
            }
            if no_chunking {
                cfg.score.chunking = false;
            }
            let split = match split {
                Some(s) => Some(Split::parse(&s).ok_or_else(|| CliError::Usage(format!("unknown split {s}")))?),
                None => None,
            };
            let inputs = match (manifest.or_else(|| cfg.paths.manifest.clone()), features.is_empty()) {
                (Some(path), true) => ScoreInputs::Manifest { path, split },
                (None, false) => ScoreInputs::Files(features),
                _ => return Err(CliError::Usage("give either --manifest or --features".into())),
            };
            let validity_dir = cfg.paths.validity_dir.clone();
            for r in cmd_score(&cfg, &checkpoint, &inputs, validity_dir.as_deref(), &out)? {
                println!("{}\t{}\t{}", r.video_id, r.score, r.n_segments);
            }
        }
        Command::Calibrate {
            common,
            predictions,
            manifest,
            labels,
            thetas,
        } => {
            let (mut cfg, out) = resolve(&common)?;
            let predictions = required(predictions, &cfg.paths.predictions, "predictions")?;
            cfg.paths.predictions = Some(predictions.clone());
            if !thetas.is_empty() {
                cfg.calibrate.theta_grid = thetas;
            }
            let source = match (manifest.or_else(|| cfg.paths.manifest.clone()), labels) {
                (Some(m), None) => LabelSource::Manifest(m),
                (None, Some(l)) => LabelSource::Table(l),
                _ => return Err(CliError::Usage("give either --manifest or --labels".into())),
            };
            print!("{}", cmd_calibrate(&cfg, &predictions, &source, &out)?.to_tsv());
        }
        Command::Sweep { common, manifest } => {
            let (mut cfg, out) = resolve(&common)?;
            let manifest = required(manifest, &cfg.paths.manifest, "manifest")?;
            cfg.paths.manifest = Some(manifest.clone());
            print!("{}", cmd_sweep(&cfg, &manifest, &out)?.to_tsv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
