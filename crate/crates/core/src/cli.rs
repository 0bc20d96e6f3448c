//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, RUN_CONFIG_FILE};
use crate::datagen::{decalibrate, generate_scene, SceneSpec};
use crate::dataset::{read_extrinsic, read_scene, scene_dirs, write_extrinsic, write_manifest, write_scene, ManifestEntry};
use crate::error::{Error, Result};
use crate::geometry::euler_from_se3;
use crate::overlay::render_overlay;
use crate::pseudo::CalibSample;
use crate::train::{baseline_report, evaluate, mix_seed, train, write_eval_log, Calibrator, CHECKPOINT_FILE, TRAIN_LOG_FILE};

/// Optional per-scene initial extrinsic read by `eval`.
pub const INIT_EXTRINSIC_FILE: &str = "extrinsic_init.txt";

/// Generation attempts per scene before giving up; a draw fails when a
/// sensor lands inside an object.
const GENERATION_ATTEMPTS: u64 = 64;

#[derive(Debug, Parser)]
#[command(name = "consistcal", version, about = "LiDAR-camera extrinsic calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenSynthetic {
        /// Run configuration file; scene keys control the generator.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        /// Base seed; scene seeds are derived from it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Configuration override `key=value`, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train the networks; writes the checkpoint, training log and run.cfg.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (falls back to the `data` config key).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (falls back to the `out` config key).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Correct an initial extrinsic with one forward pass.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory with image.ppm, cloud.bin and intrinsics.txt.
        #[arg(long)]
        sample_dir: PathBuf,
        /// Initial extrinsic, one line of 12 numbers.
        #[arg(long)]
        t_init: PathBuf,
        /// Run configuration [default: run.cfg next to the checkpoint, if present].
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the corrected extrinsic.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw projected LiDAR points over the image as a binary PPM.
    Overlay {
        #[arg(long)]
        sample_dir: PathBuf,
        #[arg(long)]
        extrinsic: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Side of the square drawn per point, pixels.
        #[arg(long, default_value_t = 1)]
        splat: usize,
    },
    /// Report calibration errors on a dataset with ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-sample error log (CSV).
        #[arg(long)]
        out: PathBuf,
        /// Run configuration [default: run.cfg next to the checkpoint, if present].
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print every configuration key with its description and default.
    PrintConfig,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn execute(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::GenSynthetic {
            config,
            out,
            scenes,
            seed,
            overrides,
        } => {
            if scenes == 0 {
                return Err(Failure::Usage("scene count must be ≥ 1".into()));
            }
            let cfg = load_config(config.as_deref(), &overrides)?;
            gen_synthetic(&cfg.scene, &out, scenes, seed)?;
            println!("wrote {scenes} scenes to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            let data = data
                .or_else(|| cfg.data.clone())
                .ok_or_else(|| Failure::Usage("--data is required (or set `data` in the config)".into()))?;
            let out = out
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| Failure::Usage("--out is required (or set `out` in the config)".into()))?;
            cfg.data = Some(data.clone());
            cfg.out = Some(out.clone());
            let scenes = crate::dataset::load_dataset(&data)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            cfg.save(&out.join(RUN_CONFIG_FILE))?;
            let outcome = train(&cfg.train, &cfg.net, &scenes, Some(&out))?;
            let (first, last) = (outcome.log.first(), outcome.log.last());
            if let (Some(a), Some(b)) = (first, last) {
                println!("loss {:.6} -> {:.6} over {} steps", a.total, b.total, outcome.log.len());
            }
            println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
            println!("log {}", out.join(TRAIN_LOG_FILE).display());
        }
        Command::Calibrate {
            checkpoint,
            sample_dir,
            t_init,
            config,
            out,
        } => {
            let cfg = RunConfig::for_checkpoint(&checkpoint, config.as_deref())?;
            let scene = read_scene(&sample_dir)?;
            let init = read_extrinsic(&t_init)?;
            let cal = Calibrator::load(&checkpoint, &cfg.network_for(&scene.intrinsics))?;
            let (pred, _) = cal.calibrate(&scene.image, &scene.cloud, &scene.intrinsics, &init)?;
            write_extrinsic(&out, &pred)?;
            let d = euler_from_se3(&pred.compose(&init.inverse()))?;
            println!("{}", pred.to_kitti_line());
            println!(
                "delta vs init: x {:+.4} cm  y {:+.4} cm  z {:+.4} cm  roll {:+.5} deg  pitch {:+.5} deg  yaw {:+.5} deg",
                d.tx * 100.0,
                d.ty * 100.0,
                d.tz * 100.0,
                d.roll.to_degrees(),
                d.pitch.to_degrees(),
                d.yaw.to_degrees()
            );
        }
        Command::Overlay {
            sample_dir,
            extrinsic,
            out,
            splat,
        } => {
            if splat == 0 {
                return Err(Failure::Usage("--splat must be ≥ 1".into()));
            }
            let scene = read_scene(&sample_dir)?;
            let t = read_extrinsic(&extrinsic)?;
            render_overlay(&scene.image, &scene.cloud, &scene.intrinsics, &t, splat).write_ppm(&out)?;
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
            overrides,
        } => {
            let mut cfg = RunConfig::for_checkpoint(&checkpoint, config.as_deref())?;
            cfg.apply_overrides(&overrides)?;
            let samples = eval_samples(&data, &cfg)?;
            let cal = Calibrator::load(&checkpoint, &cfg.network_for(&samples[0].intrinsics))?;
            let (report, errors) = evaluate(&cal, &samples)?;
            write_eval_log(&out, &errors)?;
            println!("initial extrinsics\n{}", baseline_report(&samples)?.table());
            println!("calibrated\n{}", report.table());
        }
        Command::PrintConfig => print!("{}", RunConfig::default().to_text()),
    }
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

/// Writes `count` scenes plus a manifest. Scene `i` uses the first seed in
/// `mix_seed(mix_seed(seed, i), attempt)` that generates without error.
pub fn gen_synthetic(spec: &SceneSpec, out: &Path, count: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("scene_{i:05}");
        let base = mix_seed(seed, i as u64);
        let mut last = None;
        let mut done = None;
        for attempt in 0..GENERATION_ATTEMPTS {
            let s = mix_seed(base, attempt);
            match generate_scene(&SceneSpec { seed: s, ..spec.clone() }, name.clone()) {
                Ok(g) => {
                    done = Some((s, g));
                    break;
                }
                Err(e @ Error::Generation(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        let (s, g) = done.ok_or_else(|| last.expect("at least one attempt"))?;
        write_scene(&out.join(&name), &g.scene)?;
        entries.push(ManifestEntry { name, seed: s });
    }
    write_manifest(out, &entries)?;
    Ok(entries)
}

/// Evaluation samples of a dataset: `extrinsic_init.txt` when a scene has
/// one, otherwise a decalibration seeded by `eval_seed` and the scene index.
pub fn eval_samples(data: &Path, cfg: &RunConfig) -> Result<Vec<CalibSample>> {
    let dirs = scene_dirs(data)?;
    if dirs.is_empty() {
        return Err(Error::Dataset(format!("{} contains no scenes", data.display())));
    }
    let mut out = Vec::with_capacity(dirs.len());
    for (i, dir) in dirs.iter().enumerate() {
        let scene = read_scene(dir)?;
        let Some(t_gt) = scene.t_gt else {
            return Err(Error::Dataset(format!("{} has no ground-truth extrinsic", dir.display())));
        };
        let init = dir.join(INIT_EXTRINSIC_FILE);
        let sample = if init.is_file() {
            let t_init = read_extrinsic(&init)?;
            CalibSample::new(scene.id, scene.image, scene.cloud, scene.intrinsics, t_gt, t_init, cfg.train.threshold)
        } else {
            decalibrate(&scene, &cfg.train.decalib, mix_seed(cfg.eval_seed, i as u64), cfg.train.threshold)?
        };
        out.push(sample);
    }
    Ok(out)
}
