//! `dynrefine` command-line entry point.
//!
//! Exit codes: 0 on success, 2 on invalid input (bad flags, unknown config
//! keys, missing or malformed files), 1 on failures during a run.

mod commands;
mod config;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_resolution, MaskMode, RunConfig};

/// Input error reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "dynrefine", version, about = "Mask-conditioned pose, depth and 4D track refinement")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key value` configuration file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked sliding-window bundle adjustment.
    Ba {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda_smooth: Option<f64>,
        #[arg(long)]
        window_steps: Option<usize>,
        #[arg(long)]
        global_steps: Option<usize>,
        /// Keep dynamic points in the reprojection loss.
        #[arg(long)]
        no_mask: bool,
    },
    /// Consistent video depth with mask-derived uncertainty.
    Cvd {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda_flow: Option<f64>,
        #[arg(long)]
        lambda_temp: Option<f64>,
        #[arg(long)]
        lambda_prior: Option<f64>,
        /// Optimization resolution `WxH` or `native`.
        #[arg(long)]
        resolution: Option<String>,
        #[arg(long, value_parser = ["mask", "free"])]
        uncertainty: Option<String>,
    },
    /// Ray-offset refinement of 3D tracks.
    Track4d {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["mask", "trail"], default_value = "mask")]
        score: String,
    },
    /// Evaluate predictions against references.
    Eval {
        #[arg(value_parser = ["traj", "depth", "mask"])]
        kind: String,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Bundle adjustment, then depth, then tracks, with a combined report.
    Pipeline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["mask", "none", "free"])]
        mask_mode: Option<String>,
    },
}

fn build_config(global: &GlobalArgs, command: &Command) -> Result<RunConfig, UsageError> {
    let mut c = RunConfig::default();
    if let Some(path) = &global.config {
        c.apply_file(path)?;
    }
    if let Some(t) = global.threads {
        c.threads = t;
    }
    if let Some(s) = global.seed {
        c.seed = s;
    }
    match command {
        Command::Ba { lambda_smooth, window_steps, global_steps, no_mask, .. } => {
            if let Some(v) = lambda_smooth {
                c.ba.lambda_smooth = *v;
            }
            if let Some(v) = window_steps {
                c.ba.window_steps = *v;
            }
            if let Some(v) = global_steps {
                c.ba.global_steps = *v;
            }
            if *no_mask {
                c.mask_mode = MaskMode::None;
            }
        }
        Command::Cvd { lambda_flow, lambda_temp, lambda_prior, resolution, uncertainty, .. } => {
            if let Some(v) = lambda_flow {
                c.cvd.lambda_flow = *v;
            }
            if let Some(v) = lambda_temp {
                c.cvd.lambda_temp = *v;
            }
            if let Some(v) = lambda_prior {
                c.cvd.lambda_prior = *v;
            }
            if let Some(v) = resolution {
                c.cvd.resolution = parse_resolution(v)?;
            }
            if uncertainty.as_deref() == Some("free") {
                c.mask_mode = MaskMode::Free;
            }
        }
        Command::Pipeline { mask_mode: Some(m), .. } => c.mask_mode = m.parse().map_err(UsageError)?,
        _ => {}
    }
    c.resolve();
    Ok(c)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = build_config(&cli.global, &cli.command)?;
    if config.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(config.threads).build_global()?;
    }
    let report = match &cli.command {
        Command::Synth { spec, out } => commands::synth(spec, out, &config, cli.global.seed)?,
        Command::Ba { manifest, masks, out, .. } => commands::ba(manifest, masks.as_deref(), out, &config)?,
        Command::Cvd { manifest, masks, poses, out, .. } => {
            commands::cvd(manifest, masks.as_deref(), poses.as_deref(), out, &config)?
        }
        Command::Track4d { tracks, masks, poses, out, score } => {
            commands::track4d(tracks, masks.as_deref(), poses, out, score == "trail", &config)?
        }
        Command::Eval { kind, pred, gt, report } => match kind.as_str() {
            "traj" => commands::eval_traj(pred, gt, report)?,
            "depth" => commands::eval_depth(pred, gt, report)?,
            _ => commands::eval_mask(pred, gt, report)?,
        },
        Command::Pipeline { manifest, masks, out, .. } => commands::pipeline(manifest, masks.as_deref(), out, &config)?,
    };
    print!("{}", report.render());
    Ok(())
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || e.downcast_ref::<dynrefine::Error>().is_some_and(|e| e.is_validation())
    })
}

fn main() -> ExitCode {
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
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 2 } else { 1 })
        }
    }
}
