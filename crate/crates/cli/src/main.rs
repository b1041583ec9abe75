use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};
use splatscout::image::{save_color_png, save_depth_png};
use splatscout::pipeline::{self, RunConfig};
use splatscout::{CameraPose, Error};

#[derive(Parser)]
#[command(name = "splatscout", version, about = "Active Gaussian-splat reconstruction of synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explore, refine and evaluate one scene.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the metric reports of a finished run.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Render a stored model at a pose.
    Render {
        #[arg(long)]
        run_dir: PathBuf,
        /// Inline JSON or a path to a JSON file: either a full pose
        /// (`rotation` rows + `translation`) or `{"position": [..], "direction": [..]}`.
        #[arg(long)]
        pose: String,
        /// Render the exploration model instead of the refined one.
        #[arg(long)]
        exploration: bool,
        /// Output directory for color.png and depth.png (default: <run-dir>/renders).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pose(arg: &str) -> splatscout::Result<CameraPose> {
    let text = if arg.trim_start().starts_with('{') { arg.to_string() } else { std::fs::read_to_string(arg)? };
    let v: serde_json::Value = serde_json::from_str(&text)?;
    if let (Some(p), Some(d)) = (v.get("position"), v.get("direction")) {
        let p: [f64; 3] = serde_json::from_value(p.clone())?;
        let d: [f64; 3] = serde_json::from_value(d.clone())?;
        return Ok(CameraPose::look_at(p.into(), d.into()));
    }
    Ok(serde_json::from_value(v)?)
}

fn render_cmd(run_dir: &Path, pose: &str, exploration: bool, out: Option<PathBuf>) -> splatscout::Result<()> {
    let pose = parse_pose(pose)?;
    let img = pipeline::render_from_run_dir(run_dir, &pose, exploration)?;
    let out = out.unwrap_or_else(|| run_dir.join("renders"));
    std::fs::create_dir_all(&out)?;
    save_color_png(&img.color, &out.join("color.png"))?;
    save_depth_png(&img.depth, &out.join("depth.png"))?;
    info!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => RunConfig::load(&config).and_then(|mut cfg| {
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let outcome = pipeline::run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&outcome.geom)?);
            println!("{}", serde_json::to_string_pretty(&outcome.render)?);
            Ok(outcome.exit_code())
        }),
        Command::Eval { run_dir } => pipeline::evaluate_run_dir(&run_dir).and_then(|(g, r)| {
            println!("{}", serde_json::to_string_pretty(&g)?);
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(0)
        }),
        Command::Render { run_dir, pose, exploration, out } => render_cmd(&run_dir, &pose, exploration, out).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e @ Error::Config(_)) => {
            error!("{e}");
            ExitCode::from(3)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
