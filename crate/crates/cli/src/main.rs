use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use horizon_cli::commands::{
    cmd_ablate, cmd_eval, cmd_rollout, cmd_synth, cmd_train, AblationAxis, TrainOptions,
};
use horizon_cli::config::RunConfig;
use horizon_core::percept::parse_modalities;
use horizon_core::trainer::NoiseMode;
use horizon_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "horizon", version, about = "Perception-conditioned long-horizon video prediction on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// JSON run config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated modalities, e.g. rgb,depth,flow.
    #[arg(long)]
    modalities: Option<String>,
    /// grouped | per-frame-random | linear-ramp
    #[arg(long)]
    noise_mode: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Number of frames to roll out.
    #[arg(long)]
    frames: Option<usize>,
    /// Number of clips to synthesize.
    #[arg(long)]
    clips: Option<usize>,
}

impl Overrides {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.modalities {
            cfg.codec.modalities = parse_modalities(m)?;
        }
        if let Some(m) = &self.noise_mode {
            cfg.trainer.noise_mode = NoiseMode::parse(m)?;
        }
        if let Some(s) = self.steps {
            cfg.trainer.steps = s;
        }
        if let Some(lr) = self.lr {
            cfg.trainer.learning_rate = lr;
        }
        if let Some(n) = self.frames {
            cfg.rollout.n_frames = n;
        }
        if let Some(n) = self.clips {
            cfg.dataset.clips = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset of synthetic clips.
    Synth {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train a denoiser on a dataset.
    Train {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
        /// Initialize from another checkpoint, adding channels for new modalities.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Roll out frames from a checkpoint.
    Rollout {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score a rollout, against ground truth when a dataset is given.
    Eval {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        rollout: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate even if the dataset differs from the one the rollout used.
        #[arg(long)]
        allow_mismatch: bool,
        /// Report path (default: <rollout>/report.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one ablation axis end to end.
    Ablate {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        /// modalities | t_m | noise-mode
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn output_dir(cfg: &RunConfig, out: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let p = match (out, &cfg.output_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(root)) => root.join(name),
        (None, None) => {
            return Err(Error::Config(format!(
                "no output directory: pass --out or set output_dir in the config"
            )))
        }
    };
    Ok(RunConfig::resolve_output(&p))
}

fn print_json<T: serde::Serialize>(value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => {
            let _ = writeln!(std::io::stdout(), "{s}");
        }
        Err(e) => eprintln!("warning: could not print summary: {e}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { o, out, force } => {
            let cfg = o.load()?;
            let out = output_dir(&cfg, &out, "data")?;
            let m = cmd_synth(&cfg, &out, force)?;
            println!("wrote {} clips to {}", m.clips.len(), out.display());
        }
        Command::Train { o, data, out, resume, init_from, force } => {
            let cfg = o.load()?;
            let out = output_dir(&cfg, &out, "train")?;
            let s = cmd_train(
                &cfg,
                &data,
                &out,
                &TrainOptions { resume, init_from, force, quiet: false },
            )?;
            let last = s.losses.last().map(|p| p.loss).unwrap_or(f64::NAN);
            println!(
                "trained {} parameters for {} steps, final loss {last:.6}; checkpoint at {}",
                s.param_count,
                s.losses.len(),
                s.checkpoint.display()
            );
        }
        Command::Rollout { o, checkpoint, data, out, force } => {
            let cfg = o.load()?;
            let out = output_dir(&cfg, &out, "rollout")?;
            let m = cmd_rollout(&cfg, &checkpoint, &data, &out, force)?;
            println!("emitted {} frames in {} steps to {}", m.n_frames, m.steps, out.display());
        }
        Command::Eval { o, rollout, data, allow_mismatch, out } => {
            let cfg = o.load()?;
            let report = cmd_eval(&rollout, data.as_deref(), &cfg, allow_mismatch, out.as_deref())?;
            print_json(&report);
        }
        Command::Ablate { o, data, axis, out, force } => {
            let cfg = o.load()?;
            let axis = AblationAxis::parse(&axis)?;
            let out = output_dir(&cfg, &out, "ablate")?;
            let rows = cmd_ablate(&cfg, &data, axis, &out, force)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} cells ({} failed); table at {}",
                rows.len(),
                failed,
                Path::new(&out).join("ablation.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
