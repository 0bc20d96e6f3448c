//! Appearance- and geometric-consistency losses.
//!
//! Points are projected twice: under the predicted extrinsic (coordinates on
//! the tape, so the loss reaches the pose network) and under the true
//! extrinsic (constant coordinates). Both sets sample the predicted intensity
//! logits and depth map and are scored against the per-point labels.

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud, Z_NEAR};
use crate::nets::{build_input, pose_to_tpred, Networks};
use crate::pseudo::{CalibSample, PointLabels, PseudoImage};
use crate::tensor::{shape_err, Bound, Real, Tape, Tensor, TensorError, Var};

/// Projects every point through a `[4,4]` tape transform.
///
/// Returns `[N,2]` pixel coordinates and a validity mask computed from the
/// detached values. Invalid points get `(0, 0)` and no gradient.
pub fn project_differentiable<F: Real>(
    tape: &mut Tape<F>,
    t: Var,
    cloud: &PointCloud,
    k: &CameraIntrinsics,
) -> Result<(Var, Vec<bool>), TensorError> {
    if tape.shape(t) != [4, 4] {
        return Err(shape_err("project_differentiable", tape.shape(t), &[4, 4]));
    }
    let m = tape.value(t).to_f64();
    let n = cloud.len();
    let mut uv = vec![F::zero(); 2 * n];
    let mut mask = vec![false; n];
    // per valid point: homogeneous input and camera coordinates
    let mut cache: Vec<Option<([f64; 4], [f64; 3])>> = vec![None; n];
    for (i, p) in cloud.points().iter().enumerate() {
        let ph = [p.x, p.y, p.z, 1.0];
        let cam: [f64; 3] = std::array::from_fn(|r| (0..4).map(|c| m[r * 4 + c] * ph[c]).sum());
        if cam[2] <= Z_NEAR {
            continue;
        }
        let u = k.fx * cam[0] / cam[2] + k.cx;
        let v = k.fy * cam[1] / cam[2] + k.cy;
        if u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64 {
            mask[i] = true;
            uv[2 * i] = F::of(u);
            uv[2 * i + 1] = F::of(v);
            cache[i] = Some((ph, cam));
        }
    }
    let (fx, fy) = (k.fx, k.fy);
    let value = Tensor::new(vec![n, 2], uv)?;
    let out = tape.record("project_differentiable", vec![t], value, move |ctx| {
        let mut g = [0f64; 16];
        for (i, entry) in cache.iter().enumerate() {
            let Some((ph, [x, y, z])) = entry else { continue };
            let gu = ctx.grad[2 * i].as_f64();
            let gv = ctx.grad[2 * i + 1].as_f64();
            let dx = gu * fx / z;
            let dy = gv * fy / z;
            let dz = -(gu * fx * x + gv * fy * y) / (z * z);
            for c in 0..4 {
                g[c] += dx * ph[c];
                g[4 + c] += dy * ph[c];
                g[8 + c] += dz * ph[c];
            }
        }
        vec![Some(g.iter().map(|&v| F::of(v)).collect())]
    })?;
    Ok((out, mask))
}

/// Mean softmax cross-entropy of `[N,2]` logits over the masked points.
/// An empty mask yields a constant 0.
pub fn masked_cross_entropy<F: Real>(tape: &mut Tape<F>, logits: Var, labels: &[u8], mask: &[bool]) -> Result<Var, TensorError> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[1] != 2 || s[0] != labels.len() || s[0] != mask.len() {
        return Err(shape_err("masked_cross_entropy", &s, &[labels.len(), 2]));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(F::zero())));
    }
    let l = tape.value(logits).to_f64();
    let mut total = 0.0;
    let mut grad = vec![0f64; l.len()];
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let (a, b) = (l[2 * i], l[2 * i + 1]);
        let mx = a.max(b);
        let lse = mx + ((a - mx).exp() + (b - mx).exp()).ln();
        let target = labels[i] as usize;
        total += lse - l[2 * i + target];
        for c in 0..2 {
            let p = (l[2 * i + c] - lse).exp();
            grad[2 * i + c] = (p - f64::from(u8::from(c == target))) / count as f64;
        }
    }
    let value = Tensor::scalar(F::of(total / count as f64));
    tape.record("masked_cross_entropy", vec![logits], value, move |ctx| {
        let g = ctx.grad[0];
        vec![Some(grad.iter().map(|&d| F::of(d) * g).collect())]
    })
}

/// Mean absolute error of `[N,1]` values against `targets` over the masked
/// points. An empty mask yields a constant 0.
pub fn masked_l1<F: Real>(tape: &mut Tape<F>, values: Var, targets: &[f64], mask: &[bool]) -> Result<Var, TensorError> {
    let s = tape.shape(values).to_vec();
    if s.len() != 2 || s[1] != 1 || s[0] != targets.len() || s[0] != mask.len() {
        return Err(shape_err("masked_l1", &s, &[targets.len(), 1]));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(F::zero())));
    }
    let v = tape.value(values).to_f64();
    let mut total = 0.0;
    let mut grad = vec![0f64; v.len()];
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let d = v[i] - targets[i];
        total += d.abs();
        let sign = if d == 0.0 { 0.0 } else { d.signum() };
        grad[i] = sign / count as f64;
    }
    let value = Tensor::scalar(F::of(total / count as f64));
    tape.record("masked_l1", vec![values], value, move |ctx| {
        let g = ctx.grad[0];
        vec![Some(grad.iter().map(|&d| F::of(d) * g).collect())]
    })
}

/// Which terms enter the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the appearance term; 0 disables it and skips the intensity
    /// network.
    pub appearance_weight: f64,
    /// Weight λ of the geometric term; 0 disables it and skips the depth
    /// network.
    pub depth_weight: f64,
    /// Include the branch sampled at the predicted projection.
    pub pred_branch: bool,
    /// Include the branch sampled at the true projection.
    pub gt_branch: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            appearance_weight: 1.0,
            depth_weight: 1.0,
            pred_branch: true,
            gt_branch: true,
        }
    }
}

/// Per-step loss values, averaged over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    /// Appearance loss, both branches summed.
    pub appearance: f64,
    pub appearance_pred: f64,
    pub appearance_gt: f64,
    /// Geometric loss, both branches summed.
    pub geometric: f64,
    pub geometric_pred: f64,
    pub geometric_gt: f64,
    pub total: f64,
    /// Points contributing to each branch, summed over the batch.
    pub valid_pred: usize,
    pub valid_gt: usize,
    /// Samples in which a branch had no valid point.
    pub empty_pred: usize,
    pub empty_gt: usize,
}

impl LossBreakdown {
    pub fn log_header() -> &'static str {
        "step,l_i,l_d,total,valid_pred,valid_gt"
    }

    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.appearance, self.geometric, self.total, self.valid_pred, self.valid_gt
        )
    }
}

/// Tape values of one sample's four loss terms; absent terms are `None`.
struct SampleTerms {
    ce: [Option<Var>; 2],
    l1: [Option<Var>; 2],
}

/// Builds the full loss for a batch on `tape`. Returns the scalar to
/// differentiate and its breakdown.
///
/// Samples are run through each network as one batch; per-sample losses are
/// averaged.
pub fn total_loss<F: Real>(
    tape: &mut Tape<F>,
    nets: &Networks,
    params: &Bound,
    samples: &[&CalibSample],
    pseudo: &[&PseudoImage],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if samples.is_empty() || samples.len() != pseudo.len() {
        return Err(Error::InvalidArgument("batch needs one pseudo-image per sample".into()));
    }
    let x = build_input(tape, &nets.config, pseudo)?;
    let use_app = cfg.appearance_weight != 0.0;
    let use_geo = cfg.depth_weight != 0.0;
    let pose = if cfg.pred_branch {
        Some(nets.pose.forward(tape, params, x)?)
    } else {
        None
    };
    let logits = if use_app { Some(nets.intensity.forward(tape, params, x)?) } else { None };
    let depth = if use_geo { Some(nets.depth.forward(tape, params, x)?) } else { None };

    let mut br = LossBreakdown::default();
    let mut terms = Vec::with_capacity(samples.len());
    for (b, sample) in samples.iter().enumerate() {
        let labels = &sample.labels;
        let mut branches: Vec<(usize, Var, Vec<bool>)> = Vec::new();
        if let Some(pose) = pose {
            let pred = tape.select_batch(pose, b)?;
            let t = pose_to_tpred(tape, pred, &sample.t_init)?;
            let (uv, mask) = project_differentiable(tape, t, &sample.cloud, &sample.intrinsics)?;
            let mask: Vec<bool> = mask.iter().zip(&labels.valid_gt).map(|(&a, &g)| a && g).collect();
            branches.push((0, uv, mask));
        }
        if cfg.gt_branch {
            let uv = tape.constant(gt_coords(labels));
            branches.push((1, uv, labels.valid_gt.clone()));
        }
        let mut st = SampleTerms {
            ce: [None, None],
            l1: [None, None],
        };
        for (slot, uv, mask) in &branches {
            let valid = mask.iter().filter(|&&m| m).count();
            if *slot == 0 {
                br.valid_pred += valid;
                br.empty_pred += usize::from(valid == 0);
            } else {
                br.valid_gt += valid;
                br.empty_gt += usize::from(valid == 0);
            }
            if let Some(logits) = logits {
                let img = tape.select_batch(logits, b)?;
                let sampled = tape.bilinear_sample(img, *uv)?;
                st.ce[*slot] = Some(masked_cross_entropy(tape, sampled, &labels.binary_intensity, mask)?);
            }
            if let Some(depth) = depth {
                let img = tape.select_batch(depth, b)?;
                let sampled = tape.bilinear_sample(img, *uv)?;
                st.l1[*slot] = Some(masked_l1(tape, sampled, &labels.gt_depth, mask)?);
            }
        }
        terms.push(st);
    }

    let n = samples.len() as f64;
    let mut parts = Vec::new();
    for st in &terms {
        for (slot, v) in st.ce.iter().enumerate() {
            if let Some(v) = *v {
                let x = tape.value(v).data()[0].as_f64() / n;
                if slot == 0 {
                    br.appearance_pred += x;
                } else {
                    br.appearance_gt += x;
                }
                parts.push(tape.scalar_mul(v, cfg.appearance_weight / n)?);
            }
        }
        for (slot, v) in st.l1.iter().enumerate() {
            if let Some(v) = *v {
                let x = tape.value(v).data()[0].as_f64() / n;
                if slot == 0 {
                    br.geometric_pred += x;
                } else {
                    br.geometric_gt += x;
                }
                parts.push(tape.scalar_mul(v, cfg.depth_weight / n)?);
            }
        }
    }
    br.appearance = br.appearance_pred + br.appearance_gt;
    br.geometric = br.geometric_pred + br.geometric_gt;
    let mut total = match parts.first() {
        Some(&v) => v,
        None => tape.constant(Tensor::scalar(F::zero())),
    };
    for &p in parts.iter().skip(1) {
        total = tape.add(total, p)?;
    }
    br.total = tape.value(total).data()[0].as_f64();
    for (name, v) in [("L_I", br.appearance), ("L_D", br.geometric), ("total", br.total)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: 0,
                detail: format!("{name} = {v}"),
            });
        }
    }
    Ok((total, br))
}

/// True-projection coordinates as an `[N,2]` tensor, `(0, 0)` where invalid.
pub fn gt_coords<F: Real>(labels: &PointLabels) -> Tensor<F> {
    let data = labels
        .gt_pixel
        .iter()
        .zip(&labels.valid_gt)
        .flat_map(|(p, &ok)| if ok { [F::of(p[0]), F::of(p[1])] } else { [F::zero(); 2] })
        .collect();
    Tensor::new(vec![labels.gt_pixel.len(), 2], data).expect("two coordinates per point")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_points, LidarPoint, SE3Transform};

    #[test]
    fn cross_entropy_by_hand() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![3, 2], vec![0.0, 0.0, 2.0, 0.0, 5.0, -5.0]).unwrap());
        let loss = masked_cross_entropy(&mut tape, logits, &[1, 0, 1], &[true, true, false]).unwrap();
        let expect = (2f64.ln() + (1.0 + (-2f64).exp()).ln()) / 2.0;
        assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        let g = g.get(logits);
        let g = g.data();
        // masked-out row gets nothing
        assert_eq!(&g[4..], &[0.0, 0.0]);
        assert!((g[0] - 0.25).abs() < 1e-12 && (g[1] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn l1_by_hand() {
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.leaf(Tensor::new(vec![3, 1], vec![1.0, 5.0, 9.0]).unwrap());
        let loss = masked_l1(&mut tape, v, &[2.0, 3.0, 0.0], &[true, true, false]).unwrap();
        assert_eq!(tape.value(loss).data()[0], 1.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).data(), &[-0.5, 0.5, 0.0]);
    }

    #[test]
    fn empty_mask_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let values = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let ce = masked_cross_entropy(&mut tape, logits, &[0], &[false]).unwrap();
        let l1 = masked_l1(&mut tape, values, &[4.0], &[false]).unwrap();
        assert_eq!(tape.value(ce).data()[0], 0.0);
        assert_eq!(tape.value(l1).data()[0], 0.0);
    }

    #[test]
    fn label_count_mismatch_is_error() {
        let mut tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap());
        assert!(masked_cross_entropy(&mut tape, logits, &[0], &[true]).is_err());
    }

    #[test]
    fn differentiable_projection_matches_reference() {
        let k = CameraIntrinsics::new(50.0, 60.0, 32.0, 16.0, 64, 32).unwrap();
        let t = SE3Transform::from_rows_3x4(&[1.0, 0.0, 0.0, 0.1, 0.0, 1.0, 0.0, -0.05, 0.0, 0.0, 1.0, 0.2], 1e-9).unwrap();
        let cloud = PointCloud::new(vec![
            LidarPoint::new(0.3, -0.1, 4.0, 1.0),
            LidarPoint::new(0.0, 0.0, -3.0, 1.0),
            LidarPoint::new(50.0, 0.0, 2.0, 1.0),
        ])
        .unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let tv = tape.constant(Tensor::new(vec![4, 4], t.matrix().iter().flatten().copied().collect()).unwrap());
        let (uv, mask) = project_differentiable(&mut tape, tv, &cloud, &k).unwrap();
        let reference = project_points(&cloud, &t, &k);
        assert_eq!(mask, reference.iter().map(|p| p.valid).collect::<Vec<_>>());
        assert_eq!(mask, [true, false, false]);
        let uv = tape.value(uv).data();
        assert!((uv[0] - reference[0].u).abs() < 1e-12 && (uv[1] - reference[0].v).abs() < 1e-12);
        assert_eq!(&uv[2..], &[0.0; 4]);
    }
}
