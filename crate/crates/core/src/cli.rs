//! Command-line front end. `run_cli` parses arguments, executes one command
//! and returns the process exit code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::distill::{run_offline, run_replay, run_wall, ClockMode, DetectionRecord, EngineOptions, FrameSource, LearnerSpec};
use crate::error::{Error, Result};
use crate::eval::{write_csv, EvalFrame};
use crate::experiment::{evaluate_frames, write_recording, DirSource, GeometryFile, RegionAps, GEOMETRY};
use crate::geometry::{estimate_homography, parse_correspondences, Homography};
use crate::imageio::read_jsonl;

/// Environment variable holding the log filter, e.g. `info` or `omnidistill=debug`.
pub const LOG_ENV: &str = "OMNIDISTILL_LOG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "omnidistill", version, about = "Online teacher-student distillation for wide-angle player detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Train while streaming and swap weights after every epoch.
    Online,
    /// Collect the whole recording, train, then run inference.
    Offline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Clock {
    Wall,
    Replay,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic two-camera recording with ground truth.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the distillation pipeline on a recording.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Recording directory as written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "online")]
        mode: Mode,
        /// Overrides `distill.clock`.
        #[arg(long, value_enum)]
        clock: Option<Clock>,
        /// Write every supervision target under `<out>/supervision`.
        #[arg(long)]
        dump_supervision: bool,
    },
    /// Score detections against ground truth and export metric tables.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Geometry file defining the regions; defaults to the one next to `--gt`.
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the teacher-to-student homography from point pairs.
    Homography {
        /// Rows of `tx ty sx sy`, whitespace or comma separated.
        #[arg(long)]
        pairs: PathBuf,
        /// Output JSON; if it holds a geometry file only its homography is replaced.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure split by exit code.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            Ok(RunConfig::from_json(&text)?)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Simulate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let m = write_recording(&cfg, &out)?;
            log::info!("wrote {} frames to {}", m.frames, out.display());
            Ok(())
        }
        Command::Run {
            config,
            input,
            out,
            mode,
            clock,
            dump_supervision,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(c) = clock {
                cfg.distill.clock = match c {
                    Clock::Wall => ClockMode::Wall,
                    Clock::Replay => ClockMode::Replay,
                };
            }
            cmd_run(&cfg, &input, &out, mode, dump_supervision)
        }
        Command::Eval {
            detections,
            gt,
            config,
            geometry,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let geometry = geometry.unwrap_or_else(|| gt.parent().unwrap_or(Path::new(".")).join(GEOMETRY));
            cmd_eval(&cfg, &detections, &gt, &geometry, &out).map_err(CliError::from)
        }
        Command::Homography { pairs, out } => cmd_homography(&pairs, &out).map_err(CliError::from),
    }
}

fn cmd_run(cfg: &RunConfig, input: &Path, out: &Path, mode: Mode, dump: bool) -> CliResult<()> {
    let geometry_path = cfg.geometry.homography_file.clone().unwrap_or_else(|| input.join(GEOMETRY));
    let setup = GeometryFile::load(&geometry_path)?.setup()?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let opts = EngineOptions {
        record_detections: true,
        dump_dir: dump.then(|| out.join("supervision")),
    };
    let spec = LearnerSpec::from_config(cfg, "student");
    let fps = cfg.distill.fps;
    let output = match (mode, cfg.distill.clock) {
        (Mode::Offline, _) => {
            let mut open = || -> Result<Box<dyn FrameSource>> { Ok(Box::new(DirSource::open(input, fps)?)) };
            run_offline(&mut open, &setup, cfg, spec, &opts)?
        }
        (Mode::Online, ClockMode::Replay) => {
            let mut source = DirSource::open(input, fps)?;
            run_replay(&mut source, &setup, cfg, vec![spec], &opts)?.remove(0)
        }
        (Mode::Online, ClockMode::Wall) => {
            let mut source = DirSource::open(input, fps)?;
            run_wall(&mut source, &setup, cfg, spec, &opts)?
        }
    };
    output.write_detections(&out.join("detections.jsonl"))?;
    output.write_training_log(&out.join("training_log.csv"))?;
    std::fs::write(out.join("config.json"), cfg.to_json()).map_err(Error::from)?;
    log::info!(
        "{} frames, {} swaps, mean inference {:.1} ms",
        output.latency.frames,
        output.swaps.len(),
        output.latency.mean * 1e3
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    tiou: f64,
    window: f64,
    annotated_frames: usize,
    final_ap: RegionAps,
    /// Mean per-frame detection count over the final window.
    final_mean_count: f64,
    final_mean_gt_count: f64,
    counting_rmse: Option<f64>,
    counting_rmse_final: Option<f64>,
}

fn cmd_eval(cfg: &RunConfig, detections: &Path, gt: &Path, geometry: &Path, out: &Path) -> Result<()> {
    let fps = cfg.distill.fps;
    let partition = GeometryFile::load(geometry)?.setup()?.partition;
    let dets: Vec<DetectionRecord> = read_jsonl(detections)?;
    let gts: Vec<DetectionRecord> = read_jsonl(gt)?;
    let index = |t: f64| -> Result<usize> {
        let k = (t * fps).round();
        if k < 0.0 || (t * fps - k).abs() > 0.5 - 1e-9 {
            return Err(Error::Desync(format!("timestamp {t} matches no frame at {fps} fps")));
        }
        Ok(k as usize)
    };
    let mut gt_by_frame = std::collections::BTreeMap::new();
    for r in gts {
        gt_by_frame.insert(index(r.t)?, r);
    }
    let stride = ((cfg.eval.annotation_period * fps).round() as usize).max(1);
    let mut frames = Vec::new();
    let mut counts = Vec::with_capacity(dets.len());
    let mut last = 0usize;
    for d in &dets {
        let k = index(d.t)?;
        let t = k as f64 / fps;
        last = last.max(k);
        let n = d.boxes.iter().filter(|b| b.score >= cfg.eval.count_threshold).count();
        counts.push((t, n));
        if k % stride == 0 {
            if let Some(g) = gt_by_frame.get(&k) {
                frames.push(EvalFrame {
                    t,
                    preds: d.boxes.clone(),
                    gts: g.boxes.clone(),
                });
            }
        }
    }
    if frames.is_empty() {
        return Err(Error::Desync("detections and ground truth share no annotated timestamp".into()));
    }
    counts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let gt_counts: Vec<(f64, usize)> = frames.iter().map(|f| (f.t, f.gts.len())).collect();
    let duration = (last + 1) as f64 / fps;
    let s = evaluate_frames(&frames, &counts, &gt_counts, &partition, &cfg.eval, duration);

    std::fs::create_dir_all(out)?;
    let series = |v: &[(f64, f64)]| v.iter().map(|p| vec![p.0, p.1]).collect::<Vec<_>>();
    write_csv(&out.join("ap_overall.csv"), "window_start,ap", series(&s.series_overall))?;
    write_csv(&out.join("ap_overlap.csv"), "window_start,ap", series(&s.series_overlap))?;
    write_csv(&out.join("ap_outside.csv"), "window_start,ap", series(&s.series_outside))?;
    write_csv(&out.join("tiou_sweep.csv"), "tiou,ap", series(&s.tiou_sweep))?;
    write_csv(
        &out.join("counting.csv"),
        "t,mean_count,std_count",
        s.counting.points.iter().map(|p| vec![p.0, p.1, p.2]),
    )?;

    let start = duration - cfg.eval.window - 1e-9;
    let mean = |v: &[(f64, usize)]| {
        let xs: Vec<f64> = v.iter().filter(|p| p.0 >= start).map(|p| p.1 as f64).collect();
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let summary = EvalSummary {
        tiou: cfg.eval.tiou,
        window: cfg.eval.window,
        annotated_frames: frames.len(),
        final_ap: s.final_ap,
        final_mean_count: mean(&counts),
        final_mean_gt_count: mean(&gt_counts),
        counting_rmse: s.counting.rmse,
        counting_rmse_final: s.counting_rmse_final,
    };
    std::fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct HomographyOutput {
    homography: Homography,
    mean_reprojection_error: f64,
}

fn cmd_homography(pairs: &Path, out: &Path) -> Result<()> {
    let est = estimate_homography(&parse_correspondences(&std::fs::read_to_string(pairs)?)?)?;
    log::info!("mean reprojection error {:.3e} px", est.mean_reprojection_error);
    if let Ok(mut g) = GeometryFile::load(out) {
        g.homography = est.homography;
        return g.save(out);
    }
    let doc = HomographyOutput {
        homography: est.homography,
        mean_reprojection_error: est.mean_reprojection_error,
    };
    std::fs::write(out, serde_json::to_vec_pretty(&doc)?)?;
    Ok(())
}
