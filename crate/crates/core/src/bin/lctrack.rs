use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lctrack::config::PipelineConfig;
use lctrack::simulator::{render_annotated, simulate, ScenarioConfig};
use lctrack::{io, metrics, pipeline, Result};

#[derive(Parser)]
#[command(name = "lctrack", version, about = "Multi-target vehicle tracking for aerial video")]
struct Cli {
    /// Pipeline configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed for simulation. Defaults to the scenario's seed, or 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write per-module debug dumps next to the output.
    #[arg(long, global = true)]
    dump_debug: bool,
    /// Disable the local context tracker.
    #[arg(long, global = true)]
    dbt_only: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scenario to frames, detections and ground truth.
    Simulate { scenario: PathBuf, out_dir: PathBuf },
    /// Track detections through a frame directory.
    Track {
        frames_dir: PathBuf,
        detections: PathBuf,
        output: PathBuf,
    },
    /// Score a tracks file against ground truth.
    Eval { gt: PathBuf, tracks: PathBuf },
    /// Draw track boxes onto the frames.
    Render {
        frames_dir: PathBuf,
        tracks: PathBuf,
        out_dir: PathBuf,
    },
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_simulate(cli: &Cli, scenario: &Path, out: &Path) -> Result<()> {
    let mut cfg = ScenarioConfig::from_file(scenario)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let sim = simulate(&cfg)?;
    io::write_frames(&out.join("frames"), &sim.frames)?;
    let dets: Vec<_> = sim.detections.into_iter().flatten().collect();
    io::write_detections(&out.join("detections.csv"), &dets)?;
    io::write_gt(&out.join("gt.csv"), &sim.gt_tracks)?;
    Ok(())
}

fn cmd_track(cli: &Cli, frames_dir: &Path, detections: &Path, output: &Path) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    cfg.dbt_only |= cli.dbt_only;
    let frames = io::read_frames(frames_dir)?;
    let dets = io::read_detections(detections)?;
    let debug = cli.dump_debug.then(|| sibling(output, "_debug"));
    let pool = pipeline::run(&frames, &dets, &cfg, debug.as_deref())?;
    io::write_tracks(output, &pool)
}

fn cmd_eval(gt: &Path, tracks: &Path) -> Result<()> {
    let report = metrics::evaluate(&io::read_tracks(gt)?, &io::read_tracks(tracks)?)?;
    print!("{}", report.to_table());
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let path = sibling(tracks, ".metrics.json");
    std::fs::write(&path, json + "\n").map_err(|e| lctrack::Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn cmd_render(frames_dir: &Path, tracks: &Path, out: &Path) -> Result<()> {
    let pool = io::read_pool(tracks)?;
    let indices = io::list_frames(frames_dir)?;
    let span = pool
        .iter()
        .map(|t| (t.first_frame(), t.last_frame()))
        .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)));
    let keep: Vec<u32> = match span {
        Some((lo, hi)) => {
            let kept: Vec<u32> = indices.iter().copied().filter(|i| (lo..=hi).contains(i)).collect();
            let covers = indices.first() == Some(&lo) && indices.last() == Some(&hi);
            if !covers {
                eprintln!(
                    "warning: tracks span frames {lo}..={hi} but the frame directory holds {} frames; rendering {} frames in common",
                    indices.len(),
                    kept.len()
                );
            }
            kept
        }
        None => indices,
    };
    for i in keep {
        let frame = io::read_pgm(&io::frame_path(frames_dir, i), i)?;
        io::write_pgm(&io::frame_path(out, i), &render_annotated(&frame, &pool))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { scenario, out_dir } => cmd_simulate(&cli, scenario, out_dir),
        Command::Track {
            frames_dir,
            detections,
            output,
        } => cmd_track(&cli, frames_dir, detections, output),
        Command::Eval { gt, tracks } => cmd_eval(gt, tracks),
        Command::Render {
            frames_dir,
            tracks,
            out_dir,
        } => cmd_render(frames_dir, tracks, out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
