use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use consistcal::config::{RunConfig, RUN_CONFIG_FILE};
use consistcal::dataset::{read_extrinsic, read_scene};
use consistcal::geometry::project_points;
use consistcal::nets::Networks;
use consistcal::train::{sized_config, store_checkpoint, CHECKPOINT_FILE, TRAIN_LOG_FILE};

const SMALL: &[&str] = &[
    "image_width=32",
    "image_height=16",
    "fx=25",
    "fy=25",
    "cx=16",
    "cy=8",
    "points=300",
    "pose_stem=2",
    "pose_widths=4",
    "dense_widths=3",
    "query_count=2",
    "embed_dim=4",
    "ffn_dim=4",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_consistcal"))
}

fn with_small(cmd: &mut Command) -> &mut Command {
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&SMALL.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap();
    c
}

fn gen(dir: &Path, scenes: usize, seed: u64) -> PathBuf {
    let data = dir.join("data");
    let o = run(with_small(bin().args(["gen-synthetic", "--scenes", &scenes.to_string(), "--seed", &seed.to_string(), "--out"]).arg(&data)));
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

/// Untrained networks: zero pose heads, so calibration returns the input.
fn zero_head_checkpoint(dir: &Path) -> PathBuf {
    let cfg = small_config();
    let k = cfg.scene.intrinsics;
    let (_, params) = Networks::new::<f32>(&sized_config(&cfg.net, &k), 0).unwrap();
    let path = dir.join(CHECKPOINT_FILE);
    store_checkpoint(&params).save(&path).unwrap();
    cfg.save(&dir.join(RUN_CONFIG_FILE)).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_synthetic_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = gen(a.path(), 2, 9);
    let db = gen(b.path(), 2, 9);
    let fa = files(&da);
    assert!(fa.len() >= 9, "two scenes plus a manifest");
    assert_eq!(fa, files(&db));
    let c = tempfile::tempdir().unwrap();
    assert_ne!(fa, files(&gen(c.path(), 2, 10)));
}

#[test]
fn zero_scenes_is_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = run(bin().args(["gen-synthetic", "--scenes", "0", "--out"]).arg(t.path().join("d")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_requires_data_and_out() {
    let t = tempfile::tempdir().unwrap();
    let o = run(bin().args(["train", "--out"]).arg(t.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let o = run(bin().args(["gen-synthetic", "--set", "no_such_key=1", "--out"]).arg(t.path()));
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn train_writes_log_checkpoint_and_config() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), 2, 0);
    let out = t.path().join("run");
    let o = run(with_small(bin().args(["train", "--set", "steps=3", "--data"]).arg(&data).arg("--out").arg(&out)));
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(out.join(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,"));
    assert!(out.join(CHECKPOINT_FILE).is_file());
    let cfg = RunConfig::load(&out.join(RUN_CONFIG_FILE)).unwrap();
    assert_eq!(cfg.train.steps, 3);
    assert_eq!(cfg.data.as_deref(), Some(data.as_path()));
}

#[test]
fn calibrate_with_zero_heads_returns_initial_extrinsic() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), 1, 3);
    let ckpt = zero_head_checkpoint(t.path());
    let scene = data.join("scene_00000");
    let init = t.path().join("init.txt");
    fs::write(&init, "0 -1 0 0.05 0 0 -1 -0.02 1 0 0 0.3\n").unwrap();
    let out = t.path().join("pred.txt");
    let o = run(bin().args(["calibrate", "--checkpoint"]).arg(&ckpt).arg("--sample-dir").arg(&scene).arg("--t-init").arg(&init).arg("--out").arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let a = read_extrinsic(&out).unwrap();
    let b = read_extrinsic(&init).unwrap();
    for (x, y) in a.rows_3x4().iter().zip(b.rows_3x4()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(stdout(&o).contains("delta vs init"));
}

#[test]
fn malformed_extrinsic_names_the_file() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), 1, 3);
    let ckpt = zero_head_checkpoint(t.path());
    let init = t.path().join("short.txt");
    fs::write(&init, "1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
    let o = run(bin()
        .args(["calibrate", "--checkpoint"])
        .arg(&ckpt)
        .arg("--sample-dir")
        .arg(data.join("scene_00000"))
        .arg("--t-init")
        .arg(&init)
        .arg("--out")
        .arg(t.path().join("o.txt")));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("short.txt"), "{}", stderr(&o));
}

#[test]
fn overlay_marks_exactly_the_projected_pixels() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), 1, 5);
    let dir = data.join("scene_00000");
    let gt = dir.join("extrinsic_gt.txt");
    let out = t.path().join("ov.ppm");
    let o = run(bin().args(["overlay", "--sample-dir"]).arg(&dir).arg("--extrinsic").arg(&gt).arg("--out").arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let scene = read_scene(&dir).unwrap();
    let ov = consistcal::formats::RgbImage::read_ppm(&out).unwrap();
    let k = scene.intrinsics;
    let mut hit = vec![false; k.width * k.height];
    for p in project_points(&scene.cloud, &read_extrinsic(&gt).unwrap(), &k).iter().filter(|p| p.valid) {
        hit[p.v.floor() as usize * k.width + p.u.floor() as usize] = true;
    }
    for y in 0..k.height {
        for x in 0..k.width {
            if !hit[y * k.width + x] {
                assert_eq!(ov.pixel(x, y), scene.image.pixel(x, y), "untouched pixel ({x}, {y})");
            }
        }
    }
    assert!(hit.iter().any(|&h| h));
}

#[test]
fn eval_needs_ground_truth() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), 1, 3);
    fs::remove_file(data.join("scene_00000").join("extrinsic_gt.txt")).unwrap();
    let ckpt = zero_head_checkpoint(t.path());
    let o = run(bin().args(["eval", "--checkpoint"]).arg(&ckpt).arg("--data").arg(&data).arg("--out").arg(t.path().join("e.csv")));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_without_decalibration_reports_zero_error() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), 2, 3);
    let ckpt = zero_head_checkpoint(t.path());
    let csv = t.path().join("e.csv");
    let o = run(bin()
        .args(["eval", "--set", "decalib_trans_max=0", "--set", "decalib_rot_max_deg=0", "--checkpoint"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&csv));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("samples: 2"));
    assert!(text.contains("translation error (cm)  mean 0.0000"), "{text}");
    assert!(text.contains("rotation error (deg)    mean 0.0000"), "{text}");
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn print_config_lists_every_key() {
    let o = run(bin().arg("print-config"));
    assert!(o.status.success());
    let text = stdout(&o);
    for key in RunConfig::keys() {
        assert!(text.contains(&format!("\n{key} = ")) || text.starts_with(&format!("{key} = ")), "{key}");
    }
    // the printed defaults parse back to the defaults
    assert_eq!(RunConfig::from_text(&text, "stdout").unwrap(), RunConfig::default());
}
