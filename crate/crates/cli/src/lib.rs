//! The `rollsplat` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use rollsplat::config::{RunConfig, CONFIG_VERSION};
use rollsplat::experiment::{
    ablate_opacity, ablate_phase, ablate_shutter, evaluate_scene, evaluation_frames, generate_ground_truth, run_fit,
    GroundTruthFrame, RETURN_ALPHA,
};
use rollsplat::io::{load_scene, save_scene, write_json, write_pfm, write_ply, write_png, write_trace_csv};
use rollsplat::raster::{render_frame, Channel, FrameBuffers, RenderSettings};
use rollsplat::scene::Scene;
use rollsplat::sensor::SensorModel;
use rollsplat::synth::{range_image_to_pointcloud, rendered_range_to_pointcloud};
use rollsplat::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rollsplat", version, about = "Gaussian-particle camera and lidar simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ray-trace ground-truth images and point clouds from the config's world.
    SynthGen(Common),
    /// Render the config's Gaussian scene through every sensor.
    Render(Common),
    /// Fit a Gaussian scene to ray-traced ground truth.
    Fit(Common),
    /// Score the config's Gaussian scene against ray-traced ground truth.
    Eval(Common),
    /// Fit with phase modeling and compare seam-band range error against central-only projection.
    AblatePhase(Common),
    /// Fit with dual and with tied opacity.
    AblateOpacity(Common),
    /// Fit with rolling-shutter and with global-shutter sensor models.
    AblateShutter(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthGen(_) => "synth-gen",
            Command::Render(_) => "render",
            Command::Fit(_) => "fit",
            Command::Eval(_) => "eval",
            Command::AblatePhase(_) => "ablate-phase",
            Command::AblateOpacity(_) => "ablate-opacity",
            Command::AblateShutter(_) => "ablate-shutter",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::SynthGen(c)
            | Command::Render(c)
            | Command::Fit(c)
            | Command::Eval(c)
            | Command::AblatePhase(c)
            | Command::AblateOpacity(c)
            | Command::AblateShutter(c) => c,
        }
    }
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    iters: Option<usize>,
    /// Worker thread cap.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    #[arg(long)]
    no_phase_modeling: bool,
    #[arg(long)]
    tied_opacity: bool,
    #[arg(long)]
    global_shutter: bool,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    rollsplat_version: &'a str,
    config_version: u32,
    config: &'a RunConfig,
}

struct Job {
    command: &'static str,
    config: RunConfig,
    out: PathBuf,
    scene: Option<Scene>,
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let job = match prepare(&cli.command) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let threads = cli.command.common().threads;
    let result = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&job)),
            Err(e) => Err(Error::Invalid(format!("thread pool: {e}"))),
        },
        None => execute(&job),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if let Error::Divergence { trace, .. } = &e {
                let _ = write_trace_csv(&job.out.join("loss_trace.csv"), trace);
            }
            eprintln!("error: {e}");
            EXIT_FAILED
        }
    }
}

/// Loads and checks everything a command needs before any work starts.
fn prepare(cmd: &Command) -> Result<Job> {
    let c = cmd.common();
    let mut config = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        config.seed = Some(seed);
    }
    if let Some(n) = c.iters {
        config.iterations = n;
    }
    if c.no_phase_modeling {
        config.toggles.phase_modeling = false;
    }
    if c.tied_opacity {
        config.toggles.dual_opacity = false;
    }
    if c.global_shutter {
        config.toggles.rolling_shutter = false;
    }
    if c.threads == Some(0) {
        return Err(Error::Invalid("--threads must be positive".into()));
    }
    if let Some(o) = &c.out {
        config.out_dir = Some(o.clone());
    }
    let out = match (&c.out, &config.out_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => config.resolve(o),
        (None, None) => return Err(Error::Invalid("no output directory (--out or config `out_dir`)".into())),
    };
    if config.sensors.is_empty() {
        return Err(Error::Invalid("config lists no sensors".into()));
    }
    let needs_world = !matches!(cmd, Command::Render(_));
    if needs_world {
        config.build_world()?;
    }
    let needs_fit = matches!(
        cmd,
        Command::Fit(_) | Command::AblatePhase(_) | Command::AblateOpacity(_) | Command::AblateShutter(_)
    );
    if needs_fit {
        config.fit_config()?;
    }
    let scene = match cmd {
        Command::Render(_) | Command::Eval(_) => {
            let p = config
                .scene
                .as_ref()
                .ok_or_else(|| Error::Invalid("config names no scene file".into()))?;
            Some(load_scene(&config.resolve(p))?)
        }
        _ => None,
    };
    Ok(Job {
        command: cmd.name(),
        config,
        out,
        scene,
    })
}

fn execute(job: &Job) -> Result<()> {
    std::fs::create_dir_all(&job.out).map_err(|e| Error::Io {
        path: job.out.clone(),
        source: e,
    })?;
    write_json(
        &job.out.join("manifest.json"),
        &Manifest {
            command: job.command,
            rollsplat_version: env!("CARGO_PKG_VERSION"),
            config_version: CONFIG_VERSION,
            config: &job.config,
        },
    )?;
    let cfg = &job.config;
    let out = job.out.as_path();
    match job.command {
        "synth-gen" => {
            for f in generate_ground_truth(cfg)? {
                write_ground_truth(out, &f)?;
            }
        }
        "render" => {
            let scene = job.scene.as_ref().expect("prepared");
            let settings = cfg.render_settings();
            for spec in &cfg.sensors {
                let sensor = spec.build()?;
                let sensor = if cfg.toggles.rolling_shutter {
                    sensor
                } else {
                    sensor.with_global_shutter()
                };
                let channel = rollsplat::experiment::channel_of(&sensor);
                let fb = render_frame(scene, &sensor, channel, &settings);
                write_rendered(out, &spec.name, &sensor, channel, &fb)?;
            }
        }
        "fit" => {
            let frames = generate_ground_truth(cfg)?;
            let o = run_fit(cfg, &frames)?;
            save_scene(&out.join("scene.json"), &o.fit.scene)?;
            write_trace_csv(&out.join("loss_trace.csv"), &o.fit.trace)?;
            write_json(&out.join("metrics.json"), &o.evaluation)?;
        }
        "eval" => {
            let scene = job.scene.as_ref().expect("prepared");
            let frames = generate_ground_truth(cfg)?;
            let e = evaluate_scene(
                scene,
                &evaluation_frames(&frames),
                &cfg.render_settings(),
                cfg.toggles.rolling_shutter,
            )?;
            write_json(&out.join("metrics.json"), &e)?;
        }
        "ablate-phase" => {
            let frames = generate_ground_truth(cfg)?;
            let (report, o) = ablate_phase(cfg, &frames)?;
            save_scene(&out.join("scene.json"), &o.fit.scene)?;
            write_trace_csv(&out.join("loss_trace.csv"), &o.fit.trace)?;
            for f in evaluation_frames(&frames).into_iter().filter(|f| f.channel == Channel::Lidar) {
                for (on, tag) in [(true, "phase"), (false, "central")] {
                    let settings = RenderSettings {
                        phase_modeling: on,
                        ..cfg.render_settings()
                    };
                    let fb = render_frame(&o.fit.scene, &f.sensor, Channel::Lidar, &settings);
                    write_pfm(&out.join(format!("{}_{tag}_range.pfm", f.name)), fb.width, fb.height, &fb.range)?;
                }
            }
            write_json(&out.join("ablation_phase.json"), &report)?;
        }
        "ablate-opacity" => {
            let frames = generate_ground_truth(cfg)?;
            let (report, [dual, tied]) = ablate_opacity(cfg, &frames)?;
            write_trace_csv(&out.join("loss_trace_dual.csv"), &dual.fit.trace)?;
            write_trace_csv(&out.join("loss_trace_tied.csv"), &tied.fit.trace)?;
            write_json(&out.join("ablation_opacity.json"), &report)?;
        }
        "ablate-shutter" => {
            let frames = generate_ground_truth(cfg)?;
            let (report, [rolling, global]) = ablate_shutter(cfg, &frames)?;
            write_trace_csv(&out.join("loss_trace_rolling.csv"), &rolling.fit.trace)?;
            write_trace_csv(&out.join("loss_trace_global.csv"), &global.fit.trace)?;
            write_json(&out.join("ablation_shutter.json"), &report)?;
        }
        other => unreachable!("unknown command {other}"),
    }
    Ok(())
}

fn write_ground_truth(out: &Path, f: &GroundTruthFrame) -> Result<()> {
    let fb = &f.buffers;
    match f.channel {
        Channel::Camera => write_png(&out.join(format!("{}.png", f.name)), fb),
        Channel::Lidar => {
            write_pfm(&out.join(format!("{}_range.pfm", f.name)), fb.width, fb.height, &fb.range)?;
            let gray = |p| (p, rollsplat::geom::Vec3::repeat(1.0));
            let pts: Vec<_> = range_image_to_pointcloud(fb, &f.sensor).into_iter().map(gray).collect();
            write_ply(&out.join(format!("{}.ply", f.name)), &pts)
        }
    }
}

fn write_rendered(out: &Path, name: &str, sensor: &SensorModel, channel: Channel, fb: &FrameBuffers) -> Result<()> {
    match channel {
        Channel::Camera => write_png(&out.join(format!("{name}.png")), fb),
        Channel::Lidar => {
            write_pfm(&out.join(format!("{name}_range.pfm")), fb.width, fb.height, &fb.range)?;
            write_pfm(&out.join(format!("{name}_alpha.pfm")), fb.width, fb.height, &fb.alpha)?;
            let gray = |p| (p, rollsplat::geom::Vec3::repeat(1.0));
            let pts: Vec<_> = rendered_range_to_pointcloud(fb, sensor, RETURN_ALPHA)
                .into_iter()
                .map(gray)
                .collect();
            write_ply(&out.join(format!("{name}.ply")), &pts)
        }
    }
}
