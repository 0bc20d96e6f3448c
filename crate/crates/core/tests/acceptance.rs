//! Acceptance criteria, one test per criterion. Each prints a single
//! `acceptance <n> ...: PASS|FAIL` line straight to stdout so the verdicts
//! show up even when the harness captures test output.
//!
//! Criteria 5 and 6 train for a long time and are ignored by default:
//!
//! ```text
//! cargo test --release -p consistcal --test acceptance -- --ignored --nocapture
//! ```

use std::io::Write;

use nalgebra::{Matrix4, Rotation3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use consistcal::datagen::{decalibrate, generate_scene, Scene, SceneSpec};
use consistcal::dataset::{read_extrinsic, write_extrinsic};
use consistcal::formats::{decode_kitti_cloud, encode_kitti_cloud, RgbImage};
use consistcal::geometry::{
    euler_from_se3, euler_rotation, euler_to_se3, project_points, CameraIntrinsics, DecalibRange, EulerPose, LidarPoint, PointCloud,
    SE3Transform, Z_NEAR,
};
use consistcal::losses::{masked_cross_entropy, masked_l1, project_differentiable, total_loss, LossConfig};
use consistcal::nets::{forward_counts, pose_to_tpred, reset_forward_counts, NetworkConfig, Networks};
use consistcal::overlay::render_overlay;
use consistcal::pseudo::{binarize_intensity, CalibSample, KITTI_THRESHOLD, MTADV_THRESHOLD};
use consistcal::tensor::checkpoint::Checkpoint;
use consistcal::tensor::gradcheck::{check_gradients, random_projection, random_tensor};
use consistcal::tensor::{AttentionBlock, Bound, ParamStore, Tape, Tensor, TensorError, Var};
use consistcal::train::{
    baseline_report, evaluate, evaluation_samples, sized_config, store_checkpoint, train, CalibErrorReport, Calibrator, TrainConfig,
};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id} {name}: {verdict} ({detail})");
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

// ---------------------------------------------------------------- 1

fn random_pose(rng: &mut ChaCha8Rng) -> EulerPose {
    EulerPose::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-1.4..1.4),
        rng.random_range(-3.0..3.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
    )
}

fn na_matrix(t: &SE3Transform) -> Matrix4<f64> {
    let m = t.matrix();
    Matrix4::from_fn(|i, j| m[i][j])
}

#[test]
fn criterion_1_geometry_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let k = CameraIntrinsics::new(718.856, 718.856, 607.1928, 185.2157, 1242, 375).unwrap();
    let cases = 1000;
    let mut worst = 0f64;
    let mut projected = 0;
    for _ in 0..cases {
        let p = random_pose(&mut rng);
        let t = euler_to_se3(&p).unwrap();
        // rotation against an independent Euler construction
        let na_rot = Rotation3::from_euler_angles(p.roll, p.pitch, p.yaw);
        let r = euler_rotation(p.roll, p.pitch, p.yaw);
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max(rel(r[i][j], na_rot[(i, j)]));
            }
        }
        // euler round trip
        let back = euler_from_se3(&t).unwrap();
        for (a, b) in back.to_array().iter().zip(p.to_array()) {
            worst = worst.max(rel(*a, b));
        }
        // compose / inverse identities against 4x4 oracle arithmetic
        let q = euler_to_se3(&random_pose(&mut rng)).unwrap();
        let composed = na_matrix(&t.compose(&q));
        let oracle = na_matrix(&t) * na_matrix(&q);
        worst = worst.max((composed - oracle).abs().max());
        let inv = na_matrix(&t.inverse());
        let oracle_inv = na_matrix(&t).try_inverse().unwrap();
        worst = worst.max((inv - oracle_inv).abs().max());
        worst = worst.max((na_matrix(&t.compose(&t.inverse())) - Matrix4::identity()).abs().max());
        let lhs = na_matrix(&t.compose(&q).inverse());
        let rhs = na_matrix(&q.inverse().compose(&t.inverse()));
        worst = worst.max((lhs - rhs).abs().max());
        // 3x4 text round trip
        let parsed = SE3Transform::parse_kitti_line(&t.to_kitti_line(), "case").unwrap();
        worst = worst.max((na_matrix(&parsed) - na_matrix(&t)).abs().max());

        // projection against homogeneous 4x4 multiply
        let pts: Vec<LidarPoint> = (0..8)
            .map(|_| {
                LidarPoint::new(
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                    0.0,
                )
            })
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        for (pt, pr) in pts.iter().zip(project_points(&cloud, &t, &k)) {
            let c = na_matrix(&t) * Vector4::new(pt.x, pt.y, pt.z, 1.0);
            let u = k.fx * c[0] / c[2] + k.cx;
            let v = k.fy * c[1] / c[2] + k.cy;
            let valid = c[2] > Z_NEAR && u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64;
            assert_eq!(valid, pr.valid);
            for i in 0..3 {
                worst = worst.max(rel(pr.cam[i], c[i]));
            }
            if c[2] > Z_NEAR {
                // relative to the pixel magnitude, since f·x/z grows quickly near z_near
                worst = worst.max(rel(pr.u, u) / u.abs().max(1.0));
                worst = worst.max(rel(pr.v, v) / v.abs().max(1.0));
            }
            projected += usize::from(valid);
        }
    }
    let pass = worst <= 1e-9 && projected > 0;
    report(1, "geometry oracle suite", pass, &format!("{cases} cases, {projected} in-image projections, worst error {worst:.2e}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

const ELEMENTWISE_TOL: f64 = 1e-4;
const OP_TOL: f64 = 1e-3;

struct GradSuite {
    worst: Vec<(String, f64, f64)>,
    rng: ChaCha8Rng,
}

impl GradSuite {
    fn check(&mut self, name: &str, inputs: Vec<Tensor<f64>>, tol: f64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>) {
        let seed = self.rng.random();
        let r = check_gradients(&inputs, 1e-5, |tape, v| {
            let out = f(tape, v)?;
            if tape.value(out).len() == 1 {
                Ok(out)
            } else {
                random_projection(tape, out, seed)
            }
        })
        .unwrap();
        self.worst.push((name.to_string(), r.max_relative_error(), tol));
    }

    fn rand(&mut self, shape: &[usize]) -> Tensor<f64> {
        random_tensor(shape, -1.0, 1.0, &mut self.rng)
    }

    /// Values bounded away from zero so kinks are never straddled.
    fn rand_off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        let mut t = self.rand(shape);
        for v in t.data_mut() {
            *v = v.signum() * (0.1 + v.abs());
        }
        t
    }
}

fn tiny_spec() -> SceneSpec {
    let mut spec = SceneSpec {
        points: 160,
        ..SceneSpec::default()
    };
    spec.intrinsics = CameraIntrinsics::new(10.0, 10.0, 8.0, 4.0, 16, 8).unwrap();
    spec
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        width: 16,
        height: 8,
        pose_widths: vec![4],
        dense_widths: vec![3],
        query_count: 2,
        embed_dim: 4,
        ffn_dim: 6,
        ..NetworkConfig::default()
    }
}

#[test]
fn criterion_2_gradient_suite() {
    let mut s = GradSuite {
        worst: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(0x9ad),
    };

    let a = s.rand_off_zero(&[3, 4]);
    s.check("relu", vec![a], ELEMENTWISE_TOL, |t, v| t.relu(v[0]));
    let a = s.rand(&[3, 4]);
    s.check("sigmoid", vec![a], ELEMENTWISE_TOL, |t, v| t.sigmoid(v[0]));
    let (a, b) = (s.rand(&[3, 4]), s.rand(&[3, 4]));
    s.check("add", vec![a, b], ELEMENTWISE_TOL, |t, v| t.add(v[0], v[1]));
    let (a, b) = (s.rand(&[3, 4]), s.rand(&[3, 4]));
    s.check("mul", vec![a, b], ELEMENTWISE_TOL, |t, v| t.mul(v[0], v[1]));
    let a = s.rand(&[5]);
    s.check("scalar_mul", vec![a], ELEMENTWISE_TOL, |t, v| t.scalar_mul(v[0], -2.5));
    let a = s.rand(&[2, 3, 5]);
    s.check("softmax", vec![a], OP_TOL, |t, v| t.softmax_last_dim(v[0]));
    let a = s.rand(&[4, 3]);
    s.check("sum", vec![a], OP_TOL, |t, v| t.sum(v[0]));
    let a = s.rand(&[4, 3]);
    s.check("mean", vec![a], OP_TOL, |t, v| t.mean(v[0]));
    let a = s.rand(&[2, 3, 4]);
    s.check("mean_axis1", vec![a], OP_TOL, |t, v| t.mean_axis1(v[0]));
    let (a, b) = (s.rand(&[2, 3, 4]), s.rand(&[2, 4, 5]));
    s.check("matmul", vec![a, b], OP_TOL, |t, v| t.matmul(v[0], v[1]));
    let (x, w, b) = (s.rand(&[2, 3, 4]), s.rand(&[5, 4]), s.rand(&[5]));
    s.check("linear", vec![x, w, b], OP_TOL, |t, v| t.linear(v[0], v[1], Some(v[2])));
    let (x, w, b) = (s.rand(&[2, 3, 6, 5]), s.rand(&[4, 3, 3, 3]), s.rand(&[4]));
    s.check("conv2d", vec![x, w, b], OP_TOL, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    let (x, w, b) = (s.rand(&[1, 2, 7, 6]), s.rand(&[3, 2, 3, 3]), s.rand(&[3]));
    s.check("conv2d (stride 2)", vec![x, w, b], OP_TOL, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1));
    let (a, b) = (s.rand(&[2, 3, 4]), s.rand(&[2, 2, 4]));
    s.check("concat", vec![a, b], OP_TOL, |t, v| t.concat(&[v[0], v[1]], 1));
    let a = s.rand(&[1, 2, 3, 4]);
    s.check("upsample2x", vec![a], OP_TOL, |t, v| t.nearest_upsample2x(v[0]));
    let a = s.rand(&[2, 3, 4]);
    s.check("transpose_last_two", vec![a], OP_TOL, |t, v| t.transpose_last_two(v[0]));
    let a = s.rand(&[2, 6]);
    s.check("reshape", vec![a], OP_TOL, |t, v| t.reshape(v[0], &[3, 4]));
    let a = s.rand(&[3, 4]);
    s.check("repeat_batch", vec![a], OP_TOL, |t, v| t.repeat_batch(v[0], 3));
    let a = s.rand(&[3, 2, 2]);
    s.check("select_batch", vec![a], OP_TOL, |t, v| t.select_batch(v[0], 1));
    // keep coordinates off integer cell boundaries
    let img = s.rand(&[2, 5, 6]);
    let mut coords = Tensor::zeros(&[7, 2]);
    for c in coords.data_mut() {
        // taps change at pixel centers, i.e. integer + 0.5
        *c = s.rng.random_range(0..4) as f64 + 0.5 + s.rng.random_range(0.1..0.9);
    }
    s.check("bilinear_sample", vec![img, coords], OP_TOL, |t, v| t.bilinear_sample(v[0], v[1]));

    let logits = s.rand(&[6, 2]);
    let labels = [0u8, 1, 1, 0, 1, 0];
    let mask = [true, true, false, true, true, true];
    s.check("masked_cross_entropy", vec![logits], OP_TOL, |t, v| masked_cross_entropy(t, v[0], &labels, &mask));
    let vals = s.rand(&[6, 1]);
    let targets = [2.0, -2.0, 2.0, -2.0, 2.0, 0.0];
    let mask = [true, true, true, false, true, false];
    s.check("masked_l1", vec![vals], OP_TOL, |t, v| masked_l1(t, v[0], &targets, &mask));

    // attention block with every parameter checked
    let mut store: ParamStore<f64> = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "blk", 4, 6, &mut s.rng);
    let mut inputs = vec![s.rand(&[2, 3, 4]), s.rand(&[2, 5, 4])];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    s.check("attention block", inputs, OP_TOL, |t, v| block.forward(t, &Bound::from_vars(v[2..].to_vec()), v[0], v[1]));

    // pose to transform
    let t_init = euler_to_se3(&EulerPose::new(0.3, -0.2, 1.0, 0.5, -0.1, 0.2)).unwrap();
    let pred = random_tensor(&[6], -0.3, 0.3, &mut s.rng);
    s.check("pose_to_tpred", vec![pred], OP_TOL, |t, v| pose_to_tpred(t, v[0], &t_init));

    // differentiable projection with the transform as the input
    let scene = generate_scene(&tiny_spec(), "grad").unwrap().scene;
    let t_gt = scene.t_gt.unwrap();
    let tm = t_gt.matrix().iter().flatten().copied().collect::<Vec<_>>();
    let t_tensor = Tensor::new(vec![4, 4], tm).unwrap();
    s.check("project_differentiable", vec![t_tensor], OP_TOL, |t, v| {
        Ok(project_differentiable(t, v[0], &scene.cloud, &scene.intrinsics)?.0)
    });

    // full loss with respect to every network parameter
    let sample = decalibrate(&scene, &DecalibRange::standard(), 5, KITTI_THRESHOLD).unwrap();
    let pseudo = sample.pseudo_image();
    let cfg = tiny_net();
    let (nets, mut params) = Networks::new::<f64>(&cfg, 4).unwrap();
    // non-zero heads so the pose path carries gradient
    for id in [nets.pose.rot_w, nets.pose.trans_w, nets.pose.rot_b, nets.pose.trans_b] {
        let shape = params.get(id).shape().to_vec();
        params.set(id, random_tensor(&shape, -0.1, 0.1, &mut s.rng)).unwrap();
    }
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let count: usize = inputs.iter().map(|t| t.len()).sum();
    s.check(&format!("total_loss ({count} parameters)"), inputs, OP_TOL, |t, v| {
        let bound = Bound::from_vars(v.to_vec());
        let (loss, _) = total_loss(t, &nets, &bound, &[&sample], &[&pseudo], &LossConfig::default())
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        Ok(loss)
    });

    let failures: Vec<String> = s
        .worst
        .iter()
        .filter(|(_, e, tol)| e.is_nan() || e > tol)
        .map(|(n, e, tol)| format!("{n} {e:.2e} > {tol:.0e}"))
        .collect();
    let max = s.worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = if failures.is_empty() {
        format!("{} checks, worst relative error {max:.2e}", s.worst.len())
    } else {
        failures.join("; ")
    };
    report(2, "autodiff gradient suite", failures.is_empty(), &detail);
    assert!(failures.is_empty(), "{detail}");
}

// ---------------------------------------------------------------- 3

fn default_scene(seed: u64) -> Scene {
    generate_scene(&SceneSpec { seed, ..SceneSpec::default() }, format!("scene{seed}"))
        .unwrap()
        .scene
}

#[test]
fn criterion_3_safe_start() {
    let scene = default_scene(11);
    let sample = decalibrate(&scene, &DecalibRange::standard(), 3, KITTI_THRESHOLD).unwrap();
    let cfg = NetworkConfig::default();
    let (_, params) = Networks::new::<f32>(&cfg, 0).unwrap();
    let cal = Calibrator::from_checkpoint(&store_checkpoint(&params), &cfg).unwrap();
    let t_pred = cal.calibrate_sample(&sample).unwrap();
    let identical = t_pred.matrix() == sample.t_init.matrix();

    let t_gt = scene.t_gt.unwrap();
    let aligned = CalibSample::new("aligned", scene.image.clone(), scene.cloud.clone(), scene.intrinsics, t_gt, t_gt, KITTI_THRESHOLD);
    let pseudo = aligned.pseudo_image();
    let (nets, params64) = Networks::new::<f64>(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let bound = params64.bind(&mut tape);
    let (_, br) = total_loss(&mut tape, &nets, &bound, &[&aligned], &[&pseudo], &LossConfig::default()).unwrap();
    let d_ce = rel(br.appearance_pred, br.appearance_gt);
    let d_l1 = rel(br.geometric_pred, br.geometric_gt);
    let pass = identical && d_ce <= 1e-6 && d_l1 <= 1e-6 && br.valid_pred == br.valid_gt;
    report(
        3,
        "safe start",
        pass,
        &format!("T_pred == T_init: {identical}; |CE_pred - CE_gt| = {d_ce:.1e}; |L1_pred - L1_gt| = {d_l1:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_overfit_one_sample() {
    let scene = default_scene(21);
    let cfg = TrainConfig {
        steps: 2000,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &NetworkConfig::default(), std::slice::from_ref(&scene), None).unwrap();
    let first = out.log[0].total;
    let last = out.log.last().unwrap().total;
    let pass = last < 0.1 * first;
    report(4, "overfit regression", pass, &format!("loss {first:.4} -> {last:.4} ({:.1}% of step 0)", 100.0 * last / first));
    assert!(pass);
}

// ---------------------------------------------------------------- 5 and 6

const TRAIN_SCENES: usize = 512;
const HELD_OUT_SCENES: usize = 64;
const HELD_OUT_SEED_BASE: u64 = 1 << 40;
const EVAL_SEED: u64 = 0xe7a1;

/// Training steps of the desk-scale protocol.
pub const RECOVERY_STEPS: usize = 50_000;

fn desk_scale_data() -> (Vec<Scene>, Vec<Scene>) {
    let gen = |base: u64, n: usize| -> Vec<Scene> {
        let mut out = Vec::with_capacity(n);
        let mut seed = base;
        while out.len() < n {
            // a draw fails when a sensor lands inside an object; take the next seed
            if let Ok(g) = generate_scene(&SceneSpec { seed, ..SceneSpec::default() }, format!("s{seed}")) {
                out.push(g.scene);
            }
            seed += 1;
        }
        out
    };
    (gen(0, TRAIN_SCENES), gen(HELD_OUT_SEED_BASE, HELD_OUT_SCENES))
}

fn train_and_evaluate(train_set: &[Scene], held: &[Scene], loss: LossConfig) -> (CalibErrorReport, CalibErrorReport) {
    let steps = std::env::var("CONSISTCAL_RECOVERY_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(RECOVERY_STEPS);
    let cfg = TrainConfig {
        steps,
        loss,
        ..TrainConfig::default()
    };
    let net = NetworkConfig::default();
    let out = train(&cfg, &net, train_set, None).unwrap();
    let samples = evaluation_samples(held, &DecalibRange::standard(), EVAL_SEED, KITTI_THRESHOLD).unwrap();
    let cal = Calibrator::from_checkpoint(&out.checkpoint(), &sized_config(&net, &held[0].intrinsics)).unwrap();
    (evaluate(&cal, &samples).unwrap().0, baseline_report(&samples).unwrap())
}

#[test]
#[ignore = "trains for up to two hours; run with --ignored"]
fn criterion_5_decalibration_recovery() {
    let (train_set, held) = desk_scale_data();
    let (rep, base) = train_and_evaluate(&train_set, &held, LossConfig::default());
    let pass = rep.trans_mean_cm <= 2.0 && rep.rot_mean_deg <= 0.20;
    report(
        5,
        "decalibration recovery",
        pass,
        &format!(
            "held-out {:.3} cm / {:.4} deg, no-op baseline {:.3} cm / {:.4} deg",
            rep.trans_mean_cm, rep.rot_mean_deg, base.trans_mean_cm, base.rot_mean_deg
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "three full training runs; run with --ignored"]
fn criterion_6_ablation_direction() {
    let (train_set, held) = desk_scale_data();
    let (full, _) = train_and_evaluate(&train_set, &held, LossConfig::default());
    let (no_app, _) = train_and_evaluate(
        &train_set,
        &held,
        LossConfig {
            appearance_weight: 0.0,
            ..LossConfig::default()
        },
    );
    let (no_geo, _) = train_and_evaluate(
        &train_set,
        &held,
        LossConfig {
            depth_weight: 0.0,
            ..LossConfig::default()
        },
    );
    let f_app = no_app.trans_mean_cm / full.trans_mean_cm;
    let f_geo = no_geo.trans_mean_cm / full.trans_mean_cm;
    let pass = f_geo > f_app;
    report(
        6,
        "ablation direction",
        pass,
        &format!(
            "full {:.3} cm, without appearance {:.3} cm (x{f_app:.3}), without geometric {:.3} cm (x{f_geo:.3})",
            full.trans_mean_cm, no_app.trans_mean_cm, no_geo.trans_mean_cm
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_single_shot() {
    let scene = default_scene(31);
    let sample = decalibrate(&scene, &DecalibRange::standard(), 9, KITTI_THRESHOLD).unwrap();
    let cfg = NetworkConfig::default();
    let (_, params) = Networks::new::<f32>(&cfg, 1).unwrap();
    let cal = Calibrator::from_checkpoint(&store_checkpoint(&params), &cfg).unwrap();
    reset_forward_counts();
    cal.calibrate(&sample.image, &sample.cloud, &sample.intrinsics, &sample.t_init).unwrap();
    let c = forward_counts();
    let pass = c.pose == 1 && c.intensity == 0 && c.depth == 0;
    report(
        7,
        "single-shot inference",
        pass,
        &format!("pose {} / intensity {} / depth {} forward passes", c.pose, c.intensity, c.depth),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_format_bit_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checks = Vec::new();

    // KITTI binary: arbitrary float records survive decode/encode
    let raw: Vec<u8> = (0..64 * 16)
        .map(|i| if i % 4 == 3 { 0x40 } else { rng.random() })
        .collect();
    let cloud = decode_kitti_cloud(&raw, "raw").unwrap();
    checks.push(("kitti", encode_kitti_cloud(&cloud) == raw));

    // checkpoint: bytes -> tensors -> bytes, and through a file
    let (_, params) = Networks::new::<f32>(&NetworkConfig::default(), 2).unwrap();
    let bytes = store_checkpoint(&params).to_bytes();
    checks.push(("checkpoint", Checkpoint::from_bytes(&bytes).unwrap().to_bytes() == bytes));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.rcal");
    Checkpoint::from_bytes(&bytes).unwrap().save(&path).unwrap();
    checks.push(("checkpoint file", std::fs::read(&path).unwrap() == bytes));

    // extrinsic text: write -> read -> write
    let t = euler_to_se3(&random_pose(&mut rng)).unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    write_extrinsic(&a, &t).unwrap();
    let back = read_extrinsic(&a).unwrap();
    write_extrinsic(&b, &back).unwrap();
    checks.push(("extrinsic", std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap() && back == t));

    // PPM: deterministic encode, overlay rendering and re-encode
    let scene = default_scene(41);
    let ppm = scene.image.to_ppm();
    checks.push(("ppm", ppm == scene.image.to_ppm() && RgbImage::from_ppm(&ppm, "p").unwrap().to_ppm() == ppm));
    let t_gt = scene.t_gt.unwrap();
    let o1 = render_overlay(&scene.image, &scene.cloud, &scene.intrinsics, &t_gt, 1).to_ppm();
    let o2 = render_overlay(&scene.image, &scene.cloud, &scene.intrinsics, &t_gt, 1).to_ppm();
    checks.push(("overlay ppm", o1 == o2));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let pass = failed.is_empty();
    let detail = if pass {
        checks.iter().map(|c| c.0).collect::<Vec<_>>().join(", ") + " byte-identical"
    } else {
        format!("mismatch in {}", failed.join(", "))
    };
    report(8, "format bit-exactness", pass, &detail);
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_threshold_semantics() {
    let cloud = PointCloud::new(
        [45.0, 30.0, 30.000001, 10.0, 10.5, 0.0]
            .iter()
            .map(|&i| LidarPoint::new(0.0, 0.0, 0.0, i))
            .collect(),
    )
    .unwrap();
    let at30 = binarize_intensity(&cloud, KITTI_THRESHOLD);
    let at10 = binarize_intensity(&cloud, MTADV_THRESHOLD);
    let defaults = KITTI_THRESHOLD == 30.0 && MTADV_THRESHOLD == 10.0 && TrainConfig::default().threshold == 30.0;
    let pass = at30 == [1, 0, 1, 0, 0, 0] && at10 == [1, 1, 1, 0, 1, 0] && defaults;
    report(9, "threshold semantics", pass, &format!("threshold 30: {at30:?}; threshold 10: {at10:?}; defaults 30/10: {defaults}"));
    assert!(pass);
}
