//! Pose, intensity and depth networks.
//!
//! Each network records its structure as [`ParamId`]s into a caller-owned
//! [`ParamStore`], so the same structure runs on `f32` weights for training
//! and on an `f64` copy for gradient checks.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{euler_rotation_derivatives, euler_to_se3, EulerPose, SE3Transform};
use crate::pseudo::{PseudoImage, CHANNELS};
use crate::tensor::{init_normal, AttentionBlock, AttentionLayer, Bound, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

pub const POSE_PREFIX: &str = "posenet";
pub const INTENSITY_PREFIX: &str = "intensitynet";
pub const DEPTH_PREFIX: &str = "depthnet";

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub width: usize,
    pub height: usize,
    /// Input normalization `(x - shift) * scale`, per pseudo-image channel.
    pub input_shift: [f32; CHANNELS],
    pub input_scale: [f32; CHANNELS],
    /// Width of a full-resolution gated stem ahead of the pose encoder
    /// stages: the elementwise product of two convolutions, which lets the
    /// encoder form LiDAR × image interaction features directly. 0 disables
    /// it.
    pub pose_stem: usize,
    /// Pose encoder widths, one stride-2 stage each.
    pub pose_widths: Vec<usize>,
    /// Encoder widths of the intensity and depth networks.
    pub dense_widths: Vec<usize>,
    pub query_count: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    /// Upper bound of the depth output, meters.
    pub max_depth: f64,
    /// Multipliers on the raw rotation (radians) and translation (meters)
    /// head outputs. Keeps early head updates small relative to the
    /// decalibration range.
    pub rot_output_scale: f64,
    pub trans_output_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 64,
            input_shift: [0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
            input_scale: [2.0, 2.0, 2.0, 0.2, 0.2, 0.1, 1.0 / 128.0],
            pose_stem: 16,
            pose_widths: vec![16, 32, 32],
            dense_widths: vec![8, 16],
            query_count: 4,
            embed_dim: 32,
            ffn_dim: 64,
            max_depth: 50.0,
            rot_output_scale: 0.1,
            trans_output_scale: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.width, self.height, self.query_count, self.embed_dim, self.ffn_dim];
        if positive.contains(&0)
            || self.pose_widths.is_empty()
            || self.dense_widths.is_empty()
            || self.pose_widths.contains(&0)
            || self.dense_widths.contains(&0)
        {
            return Err(Error::Config("network sizes must all be positive".into()));
        }
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return Err(Error::Config(format!("max_depth must be positive, got {}", self.max_depth)));
        }
        if !(self.rot_output_scale > 0.0 && self.trans_output_scale > 0.0)
            || !self.rot_output_scale.is_finite()
            || !self.trans_output_scale.is_finite()
        {
            return Err(Error::Config("pose output scales must be positive".into()));
        }
        if self.input_scale.iter().chain(&self.input_shift).any(|v| !v.is_finite()) {
            return Err(Error::Config("input normalization must be finite".into()));
        }
        let f = 1 << self.dense_widths.len();
        if !self.width.is_multiple_of(f) || !self.height.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by 2^{} required by {} decoder stages",
                self.width,
                self.height,
                self.dense_widths.len(),
                self.dense_widths.len()
            )));
        }
        Ok(())
    }

    /// Applies the input normalization to a `[B,7,H,W]` batch.
    pub fn normalize<F: Real>(&self, batch: &Tensor<f32>) -> Tensor<F> {
        let s = batch.shape();
        let plane = s[2] * s[3];
        let data = batch
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane) % CHANNELS;
                F::of(((v - self.input_shift[c]) * self.input_scale[c]) as f64)
            })
            .collect();
        Tensor::new(s.to_vec(), data).expect("same shape")
    }
}

/// Stacks pseudo-images into a `[B,7,H,W]` batch.
pub fn stack_pseudo(images: &[&PseudoImage]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * CHANNELS * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::InvalidArgument("pseudo-images in a batch differ in size".into()));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(vec![images.len(), CHANNELS, h, w], data)?)
}

/// Normalized `[B,7,H,W]` network input recorded as a tape constant.
pub fn build_input<F: Real>(tape: &mut Tape<F>, cfg: &NetworkConfig, images: &[&PseudoImage]) -> Result<Var> {
    let batch = cfg.normalize::<F>(&stack_pseudo(images)?);
    Ok(tape.constant(batch))
}

thread_local! {
    static FORWARD_COUNTS: Cell<ForwardCounts> = const { Cell::new(ForwardCounts { pose: 0, intensity: 0, depth: 0 }) };
}

/// Forward invocations per network on the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardCounts {
    pub pose: usize,
    pub intensity: usize,
    pub depth: usize,
}

pub fn forward_counts() -> ForwardCounts {
    FORWARD_COUNTS.with(Cell::get)
}

pub fn reset_forward_counts() {
    FORWARD_COUNTS.with(|c| c.set(ForwardCounts::default()));
}

fn count(f: impl FnOnce(&mut ForwardCounts)) {
    FORWARD_COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

#[derive(Debug, Clone)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

impl Conv {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, stride: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let std = gain * (2.0 / (cin * 9) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), init_normal(&[cout, cin, 3, 3], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, 1)
    }

    fn forward_relu<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = self.forward(tape, p, x)?;
        tape.relu(y)
    }
}

#[derive(Debug, Clone)]
struct PoseStage {
    down: Conv,
    res_a: Conv,
    res_b: Conv,
}

/// Residual conv encoder, feature self-attention, query decoder and two
/// parallel linear heads (rotation, translation).
#[derive(Debug, Clone)]
pub struct PoseNet {
    stem: Option<[Conv; 2]>,
    stages: Vec<PoseStage>,
    proj_w: ParamId,
    proj_b: ParamId,
    feature_attn: AttentionLayer,
    queries: ParamId,
    decoder: AttentionBlock,
    pub rot_w: ParamId,
    pub rot_b: ParamId,
    pub trans_w: ParamId,
    pub trans_b: ParamId,
    query_count: usize,
    embed_dim: usize,
    rot_scale: f64,
    trans_scale: f64,
}

impl PoseNet {
    pub fn new<F: Real>(cfg: &NetworkConfig, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) -> Self {
        let pre = POSE_PREFIX;
        let mut cin = CHANNELS;
        let stem = (cfg.pose_stem > 0).then(|| {
            let w = cfg.pose_stem;
            cin = w;
            let gain = std::f64::consts::FRAC_1_SQRT_2;
            [
                Conv::new(store, &format!("{pre}.stem.a"), CHANNELS, w, 1, gain, rng),
                Conv::new(store, &format!("{pre}.stem.b"), CHANNELS, w, 1, gain, rng),
            ]
        });
        let mut stages = Vec::new();
        for (i, &w) in cfg.pose_widths.iter().enumerate() {
            stages.push(PoseStage {
                down: Conv::new(store, &format!("{pre}.stage{i}.down"), cin, w, 2, 1.0, rng),
                res_a: Conv::new(store, &format!("{pre}.stage{i}.res_a"), w, w, 1, 1.0, rng),
                res_b: Conv::new(store, &format!("{pre}.stage{i}.res_b"), w, w, 1, 0.5, rng),
            });
            cin = w;
        }
        let e = cfg.embed_dim;
        let proj_w = store.add(format!("{pre}.proj.weight"), init_normal(&[e, cin], (1.0 / cin as f64).sqrt(), rng));
        let proj_b = store.add(format!("{pre}.proj.bias"), Tensor::zeros(&[e]));
        let feature_attn = AttentionLayer::new(store, &format!("{pre}.feature_attn"), e, rng);
        let queries = store.add(format!("{pre}.queries"), init_normal(&[cfg.query_count, e], 1.0, rng));
        let decoder = AttentionBlock::new(store, &format!("{pre}.decoder"), e, cfg.ffn_dim, rng);
        let rot_w = store.add(format!("{pre}.head.rot.weight"), Tensor::zeros(&[3, e]));
        let rot_b = store.add(format!("{pre}.head.rot.bias"), Tensor::zeros(&[3]));
        let trans_w = store.add(format!("{pre}.head.trans.weight"), Tensor::zeros(&[3, e]));
        let trans_b = store.add(format!("{pre}.head.trans.bias"), Tensor::zeros(&[3]));
        Self {
            stem,
            stages,
            proj_w,
            proj_b,
            feature_attn,
            queries,
            decoder,
            rot_w,
            rot_b,
            trans_w,
            trans_b,
            query_count: cfg.query_count,
            embed_dim: e,
            rot_scale: cfg.rot_output_scale,
            trans_scale: cfg.trans_output_scale,
        }
    }

    /// `[B,7,H,W]` normalized input to `[B,6]` = (roll, pitch, yaw, tx, ty, tz).
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        count(|c| c.pose += 1);
        let mut h = x;
        if let Some([a, b]) = &self.stem {
            let a = a.forward(tape, p, h)?;
            let b = b.forward(tape, p, h)?;
            h = tape.mul(a, b)?;
        }
        for s in &self.stages {
            h = s.down.forward_relu(tape, p, h)?;
            let r = s.res_a.forward_relu(tape, p, h)?;
            let r = s.res_b.forward(tape, p, r)?;
            let sum = tape.add(h, r)?;
            h = tape.relu(sum)?;
        }
        let s = tape.shape(h).to_vec();
        let (b, c, n1) = (s[0], s[1], s[2] * s[3]);
        let tokens = tape.reshape(h, &[b, c, n1])?;
        let tokens = tape.transpose_last_two(tokens)?;
        let f = tape.linear(tokens, p.var(self.proj_w), Some(p.var(self.proj_b)))?;
        let pos = Tensor::from_f64(&[n1, self.embed_dim], &positional_encoding(s[2], s[3], self.embed_dim))?;
        let pos = tape.constant(pos);
        let pos = tape.repeat_batch(pos, b)?;
        let f = tape.add(f, pos)?;
        let a = self.feature_attn.forward(tape, p, f, f)?;
        let f = tape.add(f, a)?;
        let q = tape.reshape(p.var(self.queries), &[self.query_count, self.embed_dim])?;
        let q = tape.repeat_batch(q, b)?;
        let d = self.decoder.forward(tape, p, q, f)?;
        let pooled = tape.mean_axis1(d)?;
        let rot = tape.linear(pooled, p.var(self.rot_w), Some(p.var(self.rot_b)))?;
        let rot = tape.scalar_mul(rot, self.rot_scale)?;
        let trans = tape.linear(pooled, p.var(self.trans_w), Some(p.var(self.trans_b)))?;
        let trans = tape.scalar_mul(trans, self.trans_scale)?;
        tape.concat(&[rot, trans], 1)
    }
}

/// Fixed 2-D sine/cosine encoding of an `h × w` token grid in row-major
/// order, `[h·w, dim]`. The first half of the channels encode the row, the
/// second half the column; an odd last channel stays zero.
pub fn positional_encoding(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * dim..][..dim];
            for (base, pos) in [(0, (y as f64 + 0.5) / h as f64), (half, (x as f64 + 0.5) / w as f64)] {
                for j in 0..half {
                    let freq = 10000f64.powf((j / 2 * 2) as f64 / half as f64);
                    let a = pos * std::f64::consts::TAU / freq;
                    row[base + j] = if j % 2 == 0 { a.sin() } else { a.cos() };
                }
            }
        }
    }
    out
}

/// Which dense prediction an [`EncoderDecoder`] produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseHead {
    /// Two-channel binary intensity logits.
    Intensity,
    /// One-channel positive depth in meters.
    Depth,
}

/// Stride-2 conv encoder with a nearest-upsampling decoder and skip
/// connections back to full input resolution.
#[derive(Debug, Clone)]
pub struct EncoderDecoder {
    kind: DenseHead,
    enc: Vec<(Conv, Conv)>,
    dec: Vec<Conv>,
    out: Conv,
    max_depth: f64,
}

impl EncoderDecoder {
    pub fn new<F: Real>(cfg: &NetworkConfig, kind: DenseHead, store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let pre = match kind {
            DenseHead::Intensity => INTENSITY_PREFIX,
            DenseHead::Depth => DEPTH_PREFIX,
        };
        let widths = &cfg.dense_widths;
        let mut enc = Vec::new();
        let mut cin = CHANNELS;
        for (i, &w) in widths.iter().enumerate() {
            enc.push((
                Conv::new(store, &format!("{pre}.enc{i}.down"), cin, w, 2, 1.0, rng),
                Conv::new(store, &format!("{pre}.enc{i}.conv"), w, w, 1, 1.0, rng),
            ));
            cin = w;
        }
        // decoder level s merges the upsampled features with the skip at
        // resolution 1/2^s; level 0 is the raw input
        let mut dec = Vec::new();
        for s in (0..widths.len()).rev() {
            let skip = if s == 0 { CHANNELS } else { widths[s - 1] };
            let out = if s == 0 { widths[0] } else { widths[s - 1] };
            dec.push(Conv::new(store, &format!("{pre}.dec{s}"), cin + skip, out, 1, 1.0, rng));
            cin = out;
        }
        let out_ch = match kind {
            DenseHead::Intensity => 2,
            DenseHead::Depth => 1,
        };
        let out = Conv::new(store, &format!("{pre}.out"), cin, out_ch, 1, 0.5, rng);
        if kind == DenseHead::Depth {
            // start near 10 m instead of max_depth / 2
            let frac = (10.0 / cfg.max_depth).clamp(0.01, 0.99);
            let b = (frac / (1.0 - frac)).ln();
            store.set(out.bias, Tensor::full(&[1], F::of(b)))?;
        }
        Ok(Self {
            kind,
            enc,
            dec,
            out,
            max_depth: cfg.max_depth,
        })
    }

    /// `[B,7,H,W]` normalized input to `[B,2,H,W]` logits or `[B,1,H,W]` depth.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        count(|c| match self.kind {
            DenseHead::Intensity => c.intensity += 1,
            DenseHead::Depth => c.depth += 1,
        });
        let mut skips = vec![x];
        let mut h = x;
        for (down, conv) in &self.enc {
            h = down.forward_relu(tape, p, h)?;
            h = conv.forward_relu(tape, p, h)?;
            skips.push(h);
        }
        skips.pop();
        for conv in &self.dec {
            let up = tape.nearest_upsample2x(h)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = tape.concat(&[up, skip], 1)?;
            h = conv.forward_relu(tape, p, cat)?;
        }
        let y = self.out.forward(tape, p, h)?;
        match self.kind {
            DenseHead::Intensity => Ok(y),
            DenseHead::Depth => {
                let s = tape.sigmoid(y)?;
                tape.scalar_mul(s, self.max_depth)
            }
        }
    }
}

/// The three networks sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Networks {
    pub config: NetworkConfig,
    pub pose: PoseNet,
    pub intensity: EncoderDecoder,
    pub depth: EncoderDecoder,
}

impl Networks {
    pub fn new<F: Real>(config: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = PoseNet::new(config, &mut store, &mut rng);
        let intensity = EncoderDecoder::new(config, DenseHead::Intensity, &mut store, &mut rng)?;
        let depth = EncoderDecoder::new(config, DenseHead::Depth, &mut store, &mut rng)?;
        Ok((
            Self {
                config: config.clone(),
                pose,
                intensity,
                depth,
            },
            store,
        ))
    }

    /// Pose network alone, with the parameter names a full store would use.
    pub fn pose_only<F: Real>(config: &NetworkConfig, seed: u64) -> Result<(PoseNet, ParamStore<F>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = PoseNet::new(config, &mut store, &mut rng);
        Ok((pose, store))
    }
}

/// `T_pred = euler_to_se3(pred) · t_init` as a `[4,4]` tape value,
/// differentiable with respect to the six prediction scalars `[6]`.
pub fn pose_to_tpred<F: Real>(tape: &mut Tape<F>, pred: Var, t_init: &SE3Transform) -> Result<Var, TensorError> {
    let shape = tape.shape(pred).to_vec();
    if shape != [6] {
        return Err(crate::tensor::shape_err("pose_to_tpred", &shape, &[6]));
    }
    let v: Vec<f64> = tape.value(pred).to_f64();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite { op: "pose_to_tpred" });
    }
    let t = euler_to_se3(&EulerPose::from_array([v[0], v[1], v[2], v[3], v[4], v[5]]))
        .expect("finite pose")
        .compose(t_init);
    let value = Tensor::new(vec![4, 4], t.matrix().iter().flatten().map(|&x| F::of(x)).collect())?;
    let init = *t_init.matrix();
    let (r, p, y) = (v[0], v[1], v[2]);
    tape.record("pose_to_tpred", vec![pred], value, move |ctx| {
        let g: Vec<f64> = ctx.grad.iter().map(|x| x.as_f64()).collect();
        let mut out = [0f64; 6];
        for (k, dr) in euler_rotation_derivatives(r, p, y).iter().enumerate() {
            // d T / d angle = [dR · R_init | dR · t_init]
            for i in 0..3 {
                for j in 0..4 {
                    let d: f64 = (0..3).map(|m| dr[i][m] * init[m][j]).sum();
                    out[k] += g[i * 4 + j] * d;
                }
            }
        }
        for j in 0..3 {
            out[3 + j] = g[j * 4 + 3];
        }
        vec![Some(out.iter().map(|&x| F::of(x)).collect())]
    })
}

/// Exact double-precision counterpart of [`pose_to_tpred`], used at
/// inference time.
pub fn apply_prediction(pred: [f64; 6], t_init: &SE3Transform) -> Result<SE3Transform> {
    Ok(euler_to_se3(&EulerPose::from_array(pred))?.compose(t_init))
}
