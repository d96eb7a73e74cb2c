use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mspnf_core::harness::SceneSpec;
use mspnf_core::pipeline::Model;
use mspnf_core::scene_io::{load_image, save_point_cloud, PointCloud};
use mspnf_core::trainer::save_checkpoint;
use mspnf_core::Vec3;

fn mspnf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mspnf"))
        .args(args)
        .env_remove("MSPNF_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A scene small enough to generate and train in a second or two.
fn small_scene(dir: &Path) {
    let spec = SceneSpec {
        width: 12,
        height: 12,
        focal: 15.0,
        num_train_views: 2,
        num_test_views: 1,
        num_points: 300,
        gt_samples: 128,
        ..SceneSpec::toy()
    };
    let spec_path = dir.join("spec.txt");
    fs::write(&spec_path, spec.to_text()).unwrap();
    let o = mspnf(&["gen-scene", "--spec", s(&spec_path), "--out", s(&dir.join("scene"))]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const SMALL: [&str; 14] = [
    "--set", "iterations=6",
    "--set", "batch_rays=32",
    "--set", "feature_dim=4",
    "--set", "hidden_dim=8",
    "--set", "global_resolution=8",
    "--set", "num_samples=16",
    "--set", "eval_every=3",
];

#[test]
fn help_exits_zero() {
    let o = mspnf(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("gen-scene"));
}

#[test]
fn unknown_or_missing_subcommand_is_a_usage_error() {
    for args in [&["frobnicate"][..], &[]] {
        let o = mspnf(args);
        assert_eq!(o.status.code(), Some(1));
        let err = stderr(&o);
        assert!(err.starts_with("error:"), "{err}");
        for sub in ["gen-scene", "subsample", "train", "render", "eval", "ablate"] {
            assert!(err.contains(sub), "{err}");
        }
    }
    let o = mspnf(&["train", "--scene"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn missing_scene_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let o = mspnf(&["train", "--scene", s(&d.path().join("nope")), "--out", s(&d.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn gen_scene_train_eval_render_pipeline() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path());
    let scene = d.path().join("scene");
    let run = d.path().join("run");
    let mut args = vec!["--workers", "2", "train", "--scene", s(&scene), "--out", s(&run)];
    args.extend(SMALL);
    let o = mspnf(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![3, 6]);
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("feature_dim = 4"));

    let ckpt = run.join("checkpoint.ckpt");
    let json = d.path().join("eval.json");
    let o = mspnf(&["eval", "--scene", s(&scene), "--checkpoint", s(&ckpt), "--out", s(&json)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean psnr"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["views"].as_array().unwrap().len(), 1);
    assert!(v["psnr"].as_f64().unwrap() > 0.0);

    let img = d.path().join("view.ppm");
    let cams = format!("{}:1", s(&scene.join("cameras.txt")));
    let o = mspnf(&["render", "--checkpoint", s(&ckpt), "--camera", &cams, "--out", s(&img)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let im = load_image(&img).unwrap();
    assert_eq!((im.width, im.height), (12, 12));

    // resuming may only change the iteration count
    let mut args = vec!["train", "--scene", s(&scene), "--out", s(&run), "--resume", s(&ckpt)];
    args.extend(SMALL);
    args.extend(["--set", "iterations=9"]);
    let o = mspnf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("step 9"));
    args.extend(["--set", "hidden_dim=16"]);
    let o = mspnf(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("different config"));
}

#[test]
fn subsample_prints_the_four_edges() {
    let d = tempfile::tempdir().unwrap();
    let ply = d.path().join("cloud.ply");
    let pts = (0..500).map(|i| Vec3::new((i % 10) as f64 * 0.003, (i / 10 % 10) as f64 * 0.003, (i / 100) as f64 * 0.003));
    save_point_cloud(&ply, &PointCloud::new(pts.collect()).unwrap()).unwrap();
    let out = d.path().join("h");
    let o = mspnf(&["subsample", "--in", s(&ply), "--omega", "0.004", "--gamma", "1.6", "--levels", "4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let edges: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("level "))
        .map(|l| l.split_whitespace().nth(3).unwrap())
        .collect();
    assert_eq!(edges, vec!["0.004", "0.0064", "0.01024", "0.016384"]);
    for s in 1..=4 {
        assert!(out.join(format!("level_{s}.ply")).exists());
    }
    assert_eq!(fs::read_to_string(out.join("manifest.txt")).unwrap(), text);
}

#[test]
fn zero_initialized_checkpoint_renders_background() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path());
    let scene = mspnf_core::harness::SyntheticScene::load(d.path().join("scene")).unwrap();
    let mut c = mspnf_core::config::Config::default();
    c.apply_overrides(&["feature_dim=4", "hidden_dim=8", "global_resolution=8", "density_shift=-40", "background=0.25,0.5,1"])
        .unwrap();
    let mut model = Model::build(&scene.points, &c).unwrap();
    model.field.zero_parameters();
    let ckpt = d.path().join("zero.ckpt");
    save_checkpoint(&ckpt, &model, None, 0).unwrap();

    let img = d.path().join("zero.f32img");
    let cams = s(&d.path().join("scene/cameras.txt")).to_string();
    let o = mspnf(&["render", "--checkpoint", s(&ckpt), "--camera", &cams, "--out", s(&img)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let im = load_image(&img).unwrap();
    assert!(im.pixels.iter().all(|p| *p == [0.25, 0.5, 1.0]));
}

#[test]
fn eval_of_ground_truth_hits_the_cap() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path());
    let scene = d.path().join("scene");
    let o = mspnf(&["eval", "--scene", s(&scene), "--images", s(&scene.join("images"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean psnr 99.0000 ssim 1.00000"), "{}", stdout(&o));
}

#[test]
fn print_config_shows_precedence() {
    let d = tempfile::tempdir().unwrap();
    let file = d.path().join("c.txt");
    fs::write(&file, "feature_dim = 8\nhidden_dim = 24\n").unwrap();
    let run = |env_seed: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mspnf"));
        cmd.args(["train", "--scene", "unused", "--out", "unused", "--print-config", "--config", s(&file)]);
        cmd.args(extra);
        match env_seed {
            Some(v) => cmd.env("MSPNF_SEED", v),
            None => cmd.env_remove("MSPNF_SEED"),
        };
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let text = run(None, &["--set", "feature_dim=12"]);
    assert!(text.contains("feature_dim = 12\n"));
    assert!(text.contains("hidden_dim = 24\n"));
    assert!(text.contains("num_levels = 4\n"));
    assert!(text.contains("seed = 0\n"));
    assert!(run(Some("7"), &[]).contains("seed = 7\n"));
    assert!(run(Some("7"), &["--set", "seed=9"]).contains("seed = 9\n"));
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let o = mspnf(&["train", "--scene", "x", "--out", "y", "--print-config", "--set", "colour=red"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error:") && err.contains("colour"), "{err}");
    for key in ["feature_dim", "num_levels", "lr_decoder", "point_ratio"] {
        assert!(err.contains(key), "{err}");
    }
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path());
    let grid = d.path().join("grid.txt");
    fs::write(&grid, "full:\nglobal-only: num_levels=0\nbroken: feature_dim=0\n").unwrap();
    let csv = d.path().join("table.csv");
    let scene = d.path().join("scene");
    let mut args = vec!["ablate", "--scene", s(&scene), "--grid", s(&grid), "--out", s(&csv)];
    args.extend(SMALL);
    let o = mspnf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("error: variant broken failed"));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,psnr,ssim,iterations,wall_seconds");
    assert!(lines[1].starts_with("full,"));
    assert!(lines[2].starts_with("global-only,"));
    assert!(lines[3].starts_with("broken,NaN,NaN,0,"));
    assert!(d.path().join("table.config.txt").exists());
}
