//! `mspnf` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Errors go to
//! standard error as a single line starting with `error:`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use mspnf_core::config::{resolve_workers, Config};
use mspnf_core::harness::{
    generate_scene, load_grid, run_ablation, write_ablation_csv, SceneSpec, SyntheticScene,
};
use mspnf_core::hierarchy::{build_hierarchy, dump_hierarchy};
use mspnf_core::pipeline::{evaluate, score_images, worker_pool, Model};
use mspnf_core::scene_io::{load_cameras, load_image, load_point_cloud, save_image};
use mspnf_core::trainer::{load_checkpoint, train, OptimizerState, TrainOptions, FINAL_CHECKPOINT, METRICS_FILE};
use mspnf_core::Error;

const SUBCOMMANDS: &str = "gen-scene, subsample, train, render, eval, ablate";
const SEED_ENV: &str = "MSPNF_SEED";

#[derive(Parser, Debug)]
#[command(name = "mspnf", version, about = "Multi-scale point-based neural radiance fields at desk scale")]
struct Cli {
    /// Worker threads for rendering and training; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (`key=value`); repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene (images, cameras, point clouds).
    GenScene {
        /// Scene spec file; the built-in toy scene when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Seed; falls back to MSPNF_SEED, then the scene file's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build and dump the voxel hierarchy of a point cloud.
    Subsample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        omega: f64,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        levels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a scene directory.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render one camera from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cameras file, optionally suffixed with `:INDEX` (default 0).
        #[arg(long)]
        camera: String,
        /// Output image (.ppm or .f32img).
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM on the held-out views of a scene.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        /// Render the views from this checkpoint.
        #[arg(long, conflicts_with = "images")]
        checkpoint: Option<PathBuf>,
        /// Score precomputed images named `test_NNN.f32img` instead.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Also write the scores as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every variant of a grid; writes a CSV table.
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}: invalid seed '{v}'"))),
        Err(_) => Ok(None),
    }
}

/// Defaults, then the MSPNF_SEED fallback, then the file, then overrides.
fn resolve_config(args: &ConfigArgs) -> Result<Config, Error> {
    let mut c = Config::default();
    if let Some(s) = env_seed()? {
        c.seed = s;
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        c.apply_text(&text, path)?;
    }
    c.apply_overrides(&args.overrides)?;
    Ok(c)
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run(cli: Cli) -> Result<(), Error> {
    let workers = resolve_workers(cli.workers);
    match cli.command {
        Command::GenScene { spec, out, seed } => {
            let spec = match &spec {
                Some(p) => SceneSpec::load(p)?,
                None => SceneSpec::toy(),
            };
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(spec.seed),
            };
            let scene = generate_scene(&spec, seed)?;
            scene.save(&out)?;
            println!(
                "scene written to {} ({} views, {} points, {:.3} removed by holes)",
                out.display(),
                scene.cameras.len(),
                scene.points.len(),
                scene.holes.removed_fraction
            );
        }
        Command::Subsample { input, omega, gamma, levels, out } => {
            let cloud = load_point_cloud(&input)?;
            let h = build_hierarchy(&cloud, omega, gamma, levels)?;
            print!("{}", dump_hierarchy(&out, &h)?);
        }
        Command::Train { scene, out, resume, cfg } => {
            let config = resolve_config(&cfg)?;
            if cfg.print_config {
                print!("{}", config.to_text());
                return Ok(());
            }
            let scene = SyntheticScene::load(&scene)?;
            let (mut model, mut opt, start) = match &resume {
                Some(path) => {
                    let ck = load_checkpoint(path)?;
                    let mut saved = ck.model.config.clone();
                    saved.iterations = config.iterations;
                    if saved != config {
                        return Err(Error::ConfigMismatch(format!(
                            "{} was trained with a different config (only iterations may change on resume)",
                            path.display()
                        )));
                    }
                    let mut model = ck.model;
                    model.config.iterations = config.iterations;
                    let opt = ck
                        .optimizer
                        .unwrap_or_else(|| OptimizerState::new(config.optimizer, &model.field.store));
                    (model, opt, ck.step)
                }
                None => {
                    let model = Model::build(&scene.points, &config)?;
                    let opt = OptimizerState::new(config.optimizer, &model.field.store);
                    (model, opt, 0)
                }
            };
            write_file(&out.join("config.txt"), &config.to_text())?;
            let opts = TrainOptions { workers, out_dir: Some(out.clone()) };
            let report = train(&mut model, &mut opt, start, &scene.train_views(), &scene.test_views(), &opts)?;
            match report.records.last() {
                Some(r) => println!(
                    "step {} loss {:.6} psnr {:.3}; checkpoint {}, log {}",
                    r.step,
                    r.loss,
                    r.psnr,
                    out.join(FINAL_CHECKPOINT).display(),
                    out.join(METRICS_FILE).display()
                ),
                None => println!("nothing to train; checkpoint {}", out.join(FINAL_CHECKPOINT).display()),
            }
        }
        Command::Render { checkpoint, camera, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let (file, index) = match camera.rsplit_once(':') {
                Some((f, i)) if i.parse::<usize>().is_ok() => (f.to_string(), i.parse::<usize>().unwrap()),
                _ => (camera.clone(), 0),
            };
            let cams = load_cameras(&file)?;
            let cam = cams.get(index).ok_or_else(|| {
                Error::InvalidArgument(format!("{file} has {} cameras, index {index} requested", cams.len()))
            })?;
            let pool = worker_pool(workers)?;
            let img = ck.model.render(&cam.camera, pool.as_ref())?;
            save_image(&out, &img)?;
            println!("rendered {}x{} to {}", img.width, img.height, out.display());
        }
        Command::Eval { scene, checkpoint, images, out } => {
            let scene = SyntheticScene::load(&scene)?;
            let views = scene.test_views();
            let report = match (&checkpoint, &images) {
                (Some(ck), None) => {
                    let model = load_checkpoint(ck)?.model;
                    let pool = worker_pool(workers)?;
                    evaluate(&model, &views, pool.as_ref())?
                }
                (None, Some(dir)) => {
                    let pred = (0..views.len())
                        .map(|i| load_image(dir.join(format!("test_{i:03}.f32img"))))
                        .collect::<Result<Vec<_>, _>>()?;
                    let refs: Vec<_> = views.iter().map(|(_, img)| img.clone()).collect();
                    score_images(pred, &refs)?
                }
                _ => return Err(Error::InvalidArgument("eval needs --checkpoint or --images".into())),
            };
            let mut json = String::from("{\"views\": [");
            for (i, v) in report.views.iter().enumerate() {
                println!("view {i} psnr {:.4} ssim {:.5}", v.psnr, v.ssim);
                if i > 0 {
                    json.push_str(", ");
                }
                json.push_str(&format!("{{\"psnr\": {:?}, \"ssim\": {:?}}}", v.psnr, v.ssim));
            }
            json.push_str(&format!("], \"psnr\": {:?}, \"ssim\": {:?}}}\n", report.mean_psnr, report.mean_ssim));
            println!("mean psnr {:.4} ssim {:.5}", report.mean_psnr, report.mean_ssim);
            if let Some(path) = out {
                write_file(&path, &json)?;
            }
        }
        Command::Ablate { scene, grid, out, cfg } => {
            let base = resolve_config(&cfg)?;
            if cfg.print_config {
                print!("{}", base.to_text());
                return Ok(());
            }
            let scene = SyntheticScene::load(&scene)?;
            let grid = load_grid(&grid)?;
            let rows = run_ablation(&scene, &base, &grid, workers);
            write_ablation_csv(&out, &rows)?;
            write_file(&out.with_extension("config.txt"), &base.to_text())?;
            for r in &rows {
                match &r.error {
                    None => println!("{} psnr {:.4} ssim {:.5} ({:.1}s)", r.variant, r.psnr, r.ssim, r.wall_seconds),
                    Some(e) => eprintln!("error: variant {} failed: {e}", r.variant),
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprintln!("error: missing subcommand; valid subcommands: {SUBCOMMANDS}");
                    ExitCode::from(1)
                }
                ErrorKind::InvalidSubcommand => {
                    let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
                    eprintln!("error: {first}; valid subcommands: {SUBCOMMANDS}");
                    ExitCode::from(1)
                }
                _ => {
                    let msg = e.to_string();
                    let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                    eprintln!("error: {first}");
                    for line in msg.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                        eprintln!("{line}");
                    }
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
