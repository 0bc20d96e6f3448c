//! Training loop, single-shot calibration and error metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{decalibrate, Scene};
use crate::error::{Error, Result};
use crate::formats::RgbImage;
use crate::geometry::{euler_from_se3, CameraIntrinsics, DecalibRange, PointCloud, SE3Transform};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::nets::{apply_prediction, build_input, NetworkConfig, Networks, PoseNet, POSE_PREFIX};
use crate::pseudo::{build_pseudo_image, CalibSample, PseudoImage};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{ParamStore, Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.rcal";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum.
    Sgd,
    /// Adam with the momentum setting as β1 and β2 = 0.999.
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(format!("unknown optimizer `{s}`, expected sgd or adam")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of through the
    /// gradient.
    pub decoupled_weight_decay: bool,
    /// Rescale the gradient so its global L2 norm is at most this; 0 disables.
    pub grad_clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub decalib: DecalibRange,
    pub threshold: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            initial_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            decoupled_weight_decay: true,
            grad_clip: 5.0,
            steps: 2000,
            batch_size: 1,
            loss: LossConfig::default(),
            decalib: DecalibRange::standard(),
            threshold: crate::pseudo::KITTI_THRESHOLD,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.initial_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("gradient clip must be ≥ 0, got {}", self.grad_clip)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be ≥ 1".into()));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::Config(format!("intensity threshold must be ≥ 0, got {}", self.threshold)));
        }
        Ok(())
    }
}

/// `lr0 · 0.5 · (1 + cos(π · step / total))`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    let frac = (step.min(total)) as f64 / total.max(1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Deterministic 64-bit seed derivation (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SGD with heavy-ball momentum `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(store: &ParamStore<f32>, momentum: f64, weight_decay: f64, decoupled: bool) -> Self {
        Self {
            momentum,
            weight_decay,
            decoupled,
            velocity: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        let (lr, mu, wd) = (lr as f32, self.momentum as f32, self.weight_decay as f32);
        for ((param, grad), vel) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
                let g = if self.decoupled { g } else { g + wd * *w };
                *v = mu * *v + g;
                let decay = if self.decoupled { lr * wd * *w } else { 0.0 };
                *w -= lr * *v + decay;
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, beta1: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, wd, eps) = (lr as f32, self.weight_decay as f32, self.eps as f32);
        for (((param, grad), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * ((*m / c1) / ((*v / c2).sqrt() + eps) + wd * *w);
            }
        }
    }
}

enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    fn new(cfg: &TrainConfig, store: &ParamStore<f32>) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(store, cfg.momentum, cfg.weight_decay, cfg.decoupled_weight_decay)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(store, cfg.momentum, cfg.weight_decay)),
        }
    }

    fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(store, grads, lr),
            Optimizer::Adam(o) => o.step(store, grads, lr),
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`
/// and returns the norm before clipping. `max_norm == 0` leaves them as is.
pub fn clip_gradients(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub nets: Networks,
    pub params: ParamStore<f32>,
    pub log: Vec<LossBreakdown>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        store_checkpoint(&self.params)
    }
}

pub fn store_checkpoint(store: &ParamStore<f32>) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (name, t) in store.iter() {
        c.push(name, t.clone());
    }
    c
}

/// Network configuration adapted to the image size of `scene`.
pub fn sized_config(net: &NetworkConfig, k: &CameraIntrinsics) -> NetworkConfig {
    NetworkConfig {
        width: k.width,
        height: k.height,
        ..net.clone()
    }
}

/// Prepared inputs of one training step.
struct Batch {
    samples: Vec<CalibSample>,
    pseudo: Vec<PseudoImage>,
}

/// Trains all three networks on `scenes`. Writes the training log, the
/// final checkpoint and any interval checkpoints into `out_dir` when given.
///
/// Every epoch visits the scenes in a seeded random order and draws a fresh
/// decalibration for each visit. A producer thread prepares samples ahead of
/// the optimizer; the order is fixed, so runs are reproducible.
pub fn train(cfg: &TrainConfig, net_cfg: &NetworkConfig, scenes: &[Scene], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = scenes.first().ok_or_else(|| Error::Dataset("training set is empty".into()))?;
    if let Some(s) = scenes.iter().find(|s| s.t_gt.is_none()) {
        return Err(Error::Dataset(format!("scene {} has no ground-truth extrinsic", s.id)));
    }
    let k0 = first.intrinsics;
    if let Some(s) = scenes.iter().find(|s| (s.intrinsics.width, s.intrinsics.height) != (k0.width, k0.height)) {
        return Err(Error::Dataset(format!("scene {} differs in image size from {}", s.id, first.id)));
    }
    let net_cfg = sized_config(net_cfg, &k0);
    let (nets, mut params) = Networks::new::<f32>(&net_cfg, cfg.seed)?;
    let mut opt = Optimizer::new(cfg, &params);

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(TRAIN_LOG_FILE);
            let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "{}", LossBreakdown::log_header()).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut log = Vec::with_capacity(cfg.steps);
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<Batch>>(4);
        scope.spawn(move || {
            let mut order: Vec<usize> = Vec::new();
            let mut cursor = 0;
            let mut epoch = 0u64;
            for _ in 0..cfg.steps {
                let mut batch = Batch {
                    samples: Vec::with_capacity(cfg.batch_size),
                    pseudo: Vec::with_capacity(cfg.batch_size),
                };
                for _ in 0..cfg.batch_size {
                    if cursor == order.len() {
                        order = (0..scenes.len()).collect();
                        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch)));
                        cursor = 0;
                        epoch += 1;
                    }
                    let idx = order[cursor];
                    cursor += 1;
                    let seed = mix_seed(mix_seed(cfg.seed ^ 0x5eed, epoch), idx as u64);
                    match decalibrate(&scenes[idx], &cfg.decalib, seed, cfg.threshold) {
                        Ok(s) => {
                            batch.pseudo.push(s.pseudo_image());
                            batch.samples.push(s);
                        }
                        Err(e) => {
                            let _ = tx.send(Err(e));
                            return;
                        }
                    }
                }
                if tx.send(Ok(batch)).is_err() {
                    return;
                }
            }
        });

        for step in 0..cfg.steps {
            let batch = rx.recv().map_err(|_| Error::Dataset("sample producer stopped".into()))??;
            let samples: Vec<&CalibSample> = batch.samples.iter().collect();
            let pseudo: Vec<&PseudoImage> = batch.pseudo.iter().collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let (loss, br) = total_loss(&mut tape, &nets, &bound, &samples, &pseudo, &cfg.loss).map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { step, detail },
                Error::Tensor(t) => Error::NonFiniteLoss {
                    step,
                    detail: t.to_string(),
                },
                other => other,
            })?;
            let grads = tape.backward(loss).map_err(|e| Error::NonFiniteLoss {
                step,
                detail: format!("{e} ({br:?})"),
            })?;
            let mut grads = bound.gradients(&grads);
            if let Some((id, _)) = params.ids().zip(&grads).find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("gradient of {} is not finite ({br:?})", params.name(id)),
                });
            }
            clip_gradients(&mut grads, cfg.grad_clip);
            opt.step(&mut params, &grads, cosine_lr(cfg.initial_lr, step, cfg.steps));
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{}", br.log_line(step)).map_err(|e| Error::io(&*path, e))?;
            }
            log.push(br);
            if let Some(dir) = out_dir {
                if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                    store_checkpoint(&params).save(&dir.join(format!("checkpoint_{:06}.rcal", step + 1)))?;
                }
            }
        }
        drop(rx);
        Ok(())
    })?;

    if let Some((mut f, path)) = log_file {
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        store_checkpoint(&params).save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { nets, params, log })
}

/// Pose network loaded for single-shot inference. Intensity and depth
/// weights in the checkpoint are ignored.
#[derive(Debug, Clone)]
pub struct Calibrator {
    config: NetworkConfig,
    pose: PoseNet,
    params: ParamStore<f32>,
}

impl Calibrator {
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &NetworkConfig) -> Result<Self> {
        let (pose, mut params) = Networks::pose_only::<f32>(config, 0)?;
        let prefix = format!("{POSE_PREFIX}.");
        let missing: Vec<&str> = params.iter().map(|(n, _)| n).filter(|n| ckpt.get(n).is_none()).collect();
        let extra: Vec<&str> = ckpt
            .names()
            .filter(|n| n.starts_with(&prefix) && params.find(n).is_none())
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Checkpoint(format!(
                "pose network does not match the checkpoint; missing: [{}]; extra: [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_owned();
            let t = ckpt.get(&name).expect("checked above").clone();
            params
                .set(id, t)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        Ok(Self {
            config: config.clone(),
            pose,
            params,
        })
    }

    pub fn load(path: &Path, config: &NetworkConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, config)
    }

    /// One pose-network forward pass; returns the corrected extrinsic and the
    /// raw prediction `(roll, pitch, yaw, tx, ty, tz)`.
    pub fn calibrate(&self, image: &RgbImage, cloud: &PointCloud, k: &CameraIntrinsics, t_init: &SE3Transform) -> Result<(SE3Transform, [f64; 6])> {
        let pseudo = build_pseudo_image(image, cloud, k, t_init);
        let cfg = sized_config(&self.config, k);
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = build_input(&mut tape, &cfg, &[&pseudo])?;
        let out = self.pose.forward(&mut tape, &bound, x)?;
        let v = tape.value(out).to_f64();
        let pred = [v[0], v[1], v[2], v[3], v[4], v[5]];
        Ok((apply_prediction(pred, t_init)?, pred))
    }

    pub fn calibrate_sample(&self, s: &CalibSample) -> Result<SE3Transform> {
        Ok(self.calibrate(&s.image, &s.cloud, &s.intrinsics, &s.t_init)?.0)
    }
}

/// Absolute per-axis error of one sample: translation in cm (X, Y, Z) and
/// rotation in degrees (roll, pitch, yaw).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleError {
    pub id: String,
    pub trans_cm: [f64; 3],
    pub rot_deg: [f64; 3],
}

/// Error of `t_pred` against `t_gt` through the left error pose
/// `T_pred · T_gt⁻¹`.
pub fn sample_error(id: &str, t_pred: &SE3Transform, t_gt: &SE3Transform) -> Result<SampleError> {
    let e = euler_from_se3(&t_pred.compose(&t_gt.inverse()))?.to_array();
    Ok(SampleError {
        id: id.to_owned(),
        trans_cm: [e[3].abs() * 100.0, e[4].abs() * 100.0, e[5].abs() * 100.0],
        rot_deg: [e[0].abs().to_degrees(), e[1].abs().to_degrees(), e[2].abs().to_degrees()],
    })
}

/// Mean absolute calibration error over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibErrorReport {
    pub trans_cm: [f64; 3],
    pub trans_mean_cm: f64,
    pub rot_deg: [f64; 3],
    pub rot_mean_deg: f64,
    pub count: usize,
}

impl CalibErrorReport {
    pub fn from_samples(errors: &[SampleError]) -> Self {
        let n = errors.len().max(1) as f64;
        let avg = |f: &dyn Fn(&SampleError) -> f64| errors.iter().map(f).sum::<f64>() / n;
        let trans_cm = std::array::from_fn(|i| avg(&|e: &SampleError| e.trans_cm[i]));
        let rot_deg = std::array::from_fn(|i| avg(&|e: &SampleError| e.rot_deg[i]));
        Self {
            trans_cm,
            trans_mean_cm: trans_cm.iter().sum::<f64>() / 3.0,
            rot_deg,
            rot_mean_deg: rot_deg.iter().sum::<f64>() / 3.0,
            count: errors.len(),
        }
    }

    /// Two-row table: mean/X/Y/Z in cm, mean/roll/pitch/yaw in degrees.
    pub fn table(&self) -> String {
        format!(
            "samples: {}\n\
             translation error (cm)  mean {:.4}  X {:.4}  Y {:.4}  Z {:.4}\n\
             rotation error (deg)    mean {:.4}  roll {:.4}  pitch {:.4}  yaw {:.4}\n",
            self.count,
            self.trans_mean_cm,
            self.trans_cm[0],
            self.trans_cm[1],
            self.trans_cm[2],
            self.rot_mean_deg,
            self.rot_deg[0],
            self.rot_deg[1],
            self.rot_deg[2]
        )
    }
}

pub const EVAL_LOG_HEADER: &str = "sample,x_cm,y_cm,z_cm,roll_deg,pitch_deg,yaw_deg";

pub fn eval_log_line(e: &SampleError) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        e.id, e.trans_cm[0], e.trans_cm[1], e.trans_cm[2], e.rot_deg[0], e.rot_deg[1], e.rot_deg[2]
    )
}

/// Calibrates every sample and reports the errors against the truth.
pub fn evaluate(calibrator: &Calibrator, samples: &[CalibSample]) -> Result<(CalibErrorReport, Vec<SampleError>)> {
    let mut errors = Vec::with_capacity(samples.len());
    for s in samples {
        let t_pred = calibrator.calibrate_sample(s)?;
        errors.push(sample_error(&s.id, &t_pred, &s.t_gt)?);
    }
    Ok((CalibErrorReport::from_samples(&errors), errors))
}

/// Error of leaving every sample at its initial extrinsic.
pub fn baseline_report(samples: &[CalibSample]) -> Result<CalibErrorReport> {
    let errors = samples
        .iter()
        .map(|s| sample_error(&s.id, &s.t_init, &s.t_gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibErrorReport::from_samples(&errors))
}

/// Held-out samples with decalibrations drawn from `seed`.
pub fn evaluation_samples(scenes: &[Scene], range: &DecalibRange, seed: u64, threshold: f64) -> Result<Vec<CalibSample>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| decalibrate(s, range, mix_seed(seed, i as u64), threshold))
        .collect()
}

/// Writes the per-sample evaluation log.
pub fn write_eval_log(path: &Path, errors: &[SampleError]) -> Result<()> {
    let mut text = format!("{EVAL_LOG_HEADER}\n");
    for e in errors {
        text.push_str(&eval_log_line(e));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Default checkpoint location inside a training output directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}
