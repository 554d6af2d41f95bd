use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparseview::commands::{self, EvalOptions, RenderOptions, RigOptions, RenderTarget, TrainOptions};
use sparseview::report::format_psnr;
use sparseview::{io, Error, Result};
use sparseview_core::train::TrainConfig;

/// Sparse-view novel view synthesis with a neural embedding volume and
/// adversarial patch training.
#[derive(Parser, Debug)]
#[command(name = "sparseview", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene preset into a dataset directory.
    Generate {
        /// two-planes, sphere-on-plane or triple-object.
        #[arg(long)]
        scene: String,
        /// narrow or wide.
        #[arg(long, default_value = "narrow")]
        protocol: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of cameras on the arc.
        #[arg(long)]
        views: Option<usize>,
        /// Degrees between adjacent cameras.
        #[arg(long)]
        baseline: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Train a model on one or more datasets.
    Train {
        /// key = value file applied on top of the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// default or desk.
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Extra key=value overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Accepted for symmetry; training is always deterministic.
        #[arg(long)]
        deterministic: bool,
        /// Directory containing one dataset directory per scene.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Render a novel view (image and depth map).
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Target view id.
        #[arg(long, conflicts_with = "pose", required_unless_present = "pose")]
        target: Option<usize>,
        /// Camera record file for an explicit target pose.
        #[arg(long)]
        pose: Option<PathBuf>,
        /// Comma-separated source view ids.
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<usize>>,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Score held-out views of every scene and write a report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory containing one dataset directory per scene.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated scene names; defaults to all.
        #[arg(long, value_delimiter = ',')]
        scenes: Vec<String>,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        /// Leave the runtime column empty.
        #[arg(long)]
        deterministic: bool,
        /// Directory for report.csv and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn train_config(preset: &str, config: Option<&PathBuf>, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut c = TrainConfig::preset(preset).map_err(|e| Error::Usage(e.to_string()))?;
    if let Some(path) = config {
        c = io::load_config(path, c)?;
    }
    for kv in overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")));
        };
        c.set(k.trim(), v.trim()).map_err(|e| Error::Usage(e.to_string()))?;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { scene, protocol, seed, views, baseline, out, .. } => {
            commands::check_protocol(&protocol)?;
            let data = commands::generate(&scene, &protocol, seed, RigOptions { views, baseline }, &out)?;
            println!("wrote {} views of {} to {}", data.cameras.len(), data.scene, out.display());
        }
        Command::Train { config, preset, overrides, seed, deterministic: _, data, out, resume, stop_after, quiet } => {
            let config = train_config(&preset, config.as_ref(), &overrides, seed)?;
            let opts = TrainOptions { config, data_root: data, out: out.clone(), resume, stop_after, verbose: !quiet };
            let t = commands::train(&opts)?;
            println!("trained to iteration {}; checkpoint in {}", t.iteration, out.join(commands::CHECKPOINT_FILE).display());
        }
        Command::Render { checkpoint, data, target, pose, sources, samples, out, .. } => {
            let target = match (target, pose) {
                (Some(v), _) => RenderTarget::View(v),
                (None, Some(p)) => RenderTarget::Pose(p),
                (None, None) => return Err(Error::Usage("either --target or --pose is required".into())),
            };
            let r = commands::render(&RenderOptions { checkpoint, data, target, sources, out, samples })?;
            println!("wrote {} and {}", r.image_path.display(), r.depth_path.display());
            if let Some((p, s)) = r.scores {
                println!("psnr_db={} ssim={s:.4}", format_psnr(p));
            }
        }
        Command::Evaluate { checkpoint, data, scenes, samples, deterministic, out, .. } => {
            let report = commands::evaluate(&EvalOptions { checkpoint, data_root: data, scenes, samples, deterministic })?;
            print!("{}", report.to_text());
            if let Some(dir) = out {
                io::write(&dir.join("report.csv"), report.to_csv().as_bytes())?;
                io::write(&dir.join("report.txt"), report.to_text().as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
