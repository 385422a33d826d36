//! `flowhold` command-line tool.
//!
//! Exit status: 0 success, 1 runtime failure, 2 usage, configuration or
//! parse error.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowhold::config::{ConfigError, ConfigLayers, RunConfig, RunError};
use flowhold::flow::FlowError;
use flowhold::imaging::{load_pgm, save_pgm, GrayImage, Point, Rect};
use flowhold::sim::SimError;
use flowhold::telemetry::{dispersion_stats, parse_csv, summary_line, write_summary_json};
use flowhold::tracker::{center_roi, TrackerError};
use flowhold::{build_pyramid, detect_corners, lk_track, DetectParams, LkParams};

#[derive(Parser)]
#[command(name = "flowhold", version, about = "Optical-flow position hold toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop hover simulations and write telemetry.csv and summary.json.
    Simulate(SimulateArgs),
    /// Detect Shi-Tomasi corners in a PGM image.
    Corners(CornersArgs),
    /// Track points between two PGM frames with pyramidal Lucas-Kanade flow.
    Flow(FlowArgs),
    /// Recompute the dispersion summary from a telemetry CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Base preset: calm, outdoor, indoor, lowlight or blind.
    #[arg(long)]
    preset: Option<String>,
    /// JSON config file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set sim.wind.sigma=0.4`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn layers(&self) -> Result<ConfigLayers, ConfigError> {
        let mut layers = ConfigLayers::new();
        if let Some(p) = &self.preset {
            layers = layers.preset(p)?;
        }
        if let Some(path) = &self.config {
            layers = layers.file(path)?;
        }
        Ok(layers)
    }

    fn build(&self, extra: &[String]) -> Result<RunConfig, ConfigError> {
        let mut layers = self.layers()?;
        for s in extra.iter().chain(&self.overrides) {
            layers = layers.set(s)?;
        }
        layers.build()
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Flight duration in seconds (overrides sim.duration).
    #[arg(long)]
    duration: Option<f64>,
    /// Disturbance seed (overrides sim.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run this many episodes with consecutive seeds, one subdirectory each.
    #[arg(long)]
    sweep: Option<usize>,
    /// Worker threads for --sweep.
    #[arg(long, default_value_t = 4)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Roi {
    Full,
    Center,
}

#[derive(Args)]
struct CornersArgs {
    image: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    roi: Roi,
    #[arg(long = "max", default_value_t = DetectParams::default().max_corners)]
    max_corners: usize,
    #[arg(long, default_value_t = DetectParams::default().quality_level)]
    quality: f64,
    #[arg(long, default_value_t = DetectParams::default().min_distance)]
    min_distance: f64,
    #[arg(long, default_value_t = DetectParams::default().window_radius)]
    window_radius: usize,
    /// Write a copy of the image with 3x3 white markers at the corners.
    #[arg(long, value_name = "OUT.pgm")]
    annotate: Option<PathBuf>,
}

#[derive(Args)]
struct LkArgs {
    #[arg(long, default_value_t = LkParams::default().window_radius)]
    window_radius: usize,
    #[arg(long, default_value_t = LkParams::default().pyramid_levels)]
    levels: usize,
    #[arg(long, default_value_t = LkParams::default().max_iterations)]
    max_iterations: usize,
    #[arg(long, default_value_t = LkParams::default().epsilon)]
    epsilon: f64,
    #[arg(long, default_value_t = LkParams::default().min_eigen_threshold)]
    min_eigen: f64,
    #[arg(long, default_value_t = LkParams::default().residual_cap)]
    residual_cap: f64,
}

#[derive(Args)]
struct FlowArgs {
    prev: PathBuf,
    next: PathBuf,
    /// Point to track as `x,y`. Repeatable.
    #[arg(long = "point", value_parser = parse_point, value_name = "X,Y")]
    points: Vec<Point>,
    /// Track corners detected in the previous frame instead.
    #[arg(long, conflicts_with = "points")]
    auto: bool,
    #[command(flatten)]
    lk: LkArgs,
}

#[derive(Args)]
struct ReportArgs {
    csv: PathBuf,
    /// Ignore records before this time (defaults to sim.settle_time).
    #[arg(long)]
    settle: Option<f64>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn parse_point(s: &str) -> Result<Point, String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let x: f64 = x.trim().parse().map_err(|_| format!("bad x in `{s}`"))?;
    let y: f64 = y.trim().parse().map_err(|_| format!("bad y in `{s}`"))?;
    Ok(Point::new(x, y))
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Display) -> Failure {
    Failure {
        code: 2,
        message: message.to_string(),
    }
}

fn runtime(message: impl Display) -> Failure {
    Failure {
        code: 1,
        message: message.to_string(),
    }
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Config { .. } => usage(e),
        SimError::Tracker(TrackerError::InvalidConfig(_)) => usage(e),
        other => runtime(other),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_image(path: &Path) -> Result<GrayImage, Failure> {
    load_pgm(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Trims trailing zeros from a fixed-point rendering.
fn trimmed(v: f64, decimals: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    let s = format!("{v:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let mut extra = Vec::new();
    if let Some(d) = args.duration {
        extra.push(format!("sim.duration={d}"));
    }
    if let Some(s) = args.seed {
        extra.push(format!("sim.seed={s}"));
    }
    let config = args.config.build(&extra).map_err(usage)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", args.out.display())))?;

    let Some(n) = args.sweep else {
        let line = simulate_one(&config, &args.out)?;
        println!("{line}");
        return Ok(());
    };
    if n == 0 || args.threads == 0 {
        return Err(usage("--sweep and --threads must be positive"));
    }
    let jobs: Vec<(PathBuf, RunConfig)> = (0..n as u64)
        .map(|k| {
            let mut c = config.clone();
            c.sim.seed = config.sim.seed.wrapping_add(k);
            (args.out.join(format!("seed-{}", c.sim.seed)), c)
        })
        .collect();
    let mut results: Vec<Option<Result<String, Failure>>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..args.threads.min(n))
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some((dir, cfg)) = jobs.get(k) else { break };
                        let r = std::fs::create_dir_all(dir)
                            .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
                            .and_then(|_| simulate_one(cfg, dir));
                        done.push((k, r));
                    }
                    done
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("sweep worker panicked") {
                results[k] = Some(r);
            }
        }
    });
    for ((dir, _), r) in jobs.iter().zip(results) {
        println!("{}: {}", dir.display(), r.expect("every job ran")?);
    }
    Ok(())
}

fn simulate_one(config: &RunConfig, out: &Path) -> Result<String, Failure> {
    let run = config.run().map_err(|e| match e {
        RunError::Sim(e) => sim_failure(e),
        RunError::Telemetry(e) => runtime(e),
    })?;
    write(&out.join("telemetry.csv"), run.csv.as_bytes())?;
    write(&out.join("summary.json"), run.summary_json.as_bytes())?;
    Ok(summary_line(&run.report))
}

fn corners(args: &CornersArgs) -> Result<(), Failure> {
    let image = load_image(&args.image)?;
    let params = DetectParams {
        max_corners: args.max_corners,
        quality_level: args.quality,
        min_distance: args.min_distance,
        window_radius: args.window_radius,
    };
    params.validate().map_err(usage)?;
    let roi = match args.roi {
        Roi::Full => Rect::new(0, 0, image.width(), image.height()),
        Roi::Center => center_roi(image.width(), image.height()).map_err(usage)?,
    };
    let found = detect_corners(&image, roi, &params).map_err(usage)?;
    for c in &found {
        println!("{} {} {}", c.x, c.y, c.response);
    }
    if let Some(path) = &args.annotate {
        let mut data = image.data().to_vec();
        let (w, h) = (image.width(), image.height());
        for c in &found {
            for y in c.y.saturating_sub(1)..=(c.y + 1).min(h - 1) {
                for x in c.x.saturating_sub(1)..=(c.x + 1).min(w - 1) {
                    data[y * w + x] = 1.0;
                }
            }
        }
        let marked = GrayImage::new(w, h, data).map_err(runtime)?;
        write(path, &save_pgm(&marked))?;
    }
    Ok(())
}

fn flow(args: &FlowArgs) -> Result<(), Failure> {
    let prev = load_image(&args.prev)?;
    let next = load_image(&args.next)?;
    if (prev.width(), prev.height()) != (next.width(), next.height()) {
        return Err(usage(FlowError::SizeMismatch {
            prev: (prev.width(), prev.height()),
            next: (next.width(), next.height()),
        }));
    }
    let params = LkParams {
        window_radius: args.lk.window_radius,
        pyramid_levels: args.lk.levels,
        max_iterations: args.lk.max_iterations,
        epsilon: args.lk.epsilon,
        min_eigen_threshold: args.lk.min_eigen,
        residual_cap: args.lk.residual_cap,
    };
    params.validate().map_err(usage)?;
    let points: Vec<Point> = if args.auto {
        let roi = Rect::new(0, 0, prev.width(), prev.height());
        detect_corners(&prev, roi, &DetectParams::default())
            .map_err(usage)?
            .iter()
            .map(|c| Point::new(c.x as f64, c.y as f64))
            .collect()
    } else {
        args.points.clone()
    };
    let prev_pyr = build_pyramid(&prev, params.pyramid_levels);
    let next_pyr = build_pyramid(&next, params.pyramid_levels);
    for p in points {
        let (q, status, residual) = match lk_track(&prev_pyr, &next_pyr, p, &params) {
            Ok(r) => (r.point, r.status.as_str(), r.residual),
            Err(FlowError::PointNearBorder { .. }) => (p, "OutOfBounds", f64::NAN),
            Err(e) => return Err(usage(e)),
        };
        println!(
            "{} {} -> {} {} {} {}",
            trimmed(p.x, 3),
            trimmed(p.y, 3),
            trimmed(q.x, 3),
            trimmed(q.y, 3),
            status,
            trimmed(residual, 4)
        );
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<(), Failure> {
    let config = args.config.build(&[]).map_err(usage)?;
    let bytes = read(&args.csv)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| usage(format!("{}: not UTF-8 text", args.csv.display())))?;
    let records = parse_csv(&text).map_err(|e| usage(format!("{}: {e}", args.csv.display())))?;
    let settle = args.settle.unwrap_or(config.sim.settle_time);
    let report = dispersion_stats(&records, settle, config.sim.frame_size_cm).map_err(usage)?;
    print!("{}", write_summary_json(&report, &config.digest()));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Corners(a) => corners(a),
        Command::Flow(a) => flow(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
