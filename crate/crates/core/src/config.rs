//! Flat `key = value` run configuration shared by the command-line tools.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Every key has a default, listed by [`RunConfig::documented`].

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datagen::{SceneSpec, Span};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DecalibRange};
use crate::nets::NetworkConfig;
use crate::train::TrainConfig;

pub const RUN_CONFIG_FILE: &str = "run.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub net: NetworkConfig,
    pub scene: SceneSpec,
    /// Dataset directory used when `--data` is not given.
    pub data: Option<PathBuf>,
    /// Output directory used when `--out` is not given.
    pub out: Option<PathBuf>,
    /// Seed of the decalibrations drawn by `eval` when a scene has no
    /// `extrinsic_init.txt`.
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            net: NetworkConfig::default(),
            scene: SceneSpec::default(),
            data: None,
            out: None,
            eval_seed: 1,
        }
    }
}

/// Key and description, in file order.
const KEYS: &[(&str, &str)] = &[
    ("data", "dataset directory (empty: must be given on the command line)"),
    ("out", "output directory (empty: must be given on the command line)"),
    ("seed", "training seed: initialization, sample order and decalibrations"),
    ("eval_seed", "seed of the evaluation decalibrations"),
    ("steps", "training iterations"),
    ("batch_size", "samples per step"),
    ("optimizer", "sgd or adam"),
    ("lr", "initial learning rate, decayed to 0 on a cosine"),
    ("momentum", "SGD momentum; β1 for adam"),
    ("weight_decay", "weight decay"),
    ("decoupled_weight_decay", "apply weight decay to the weights instead of the gradient"),
    ("grad_clip", "maximum global gradient norm, 0 disables"),
    ("checkpoint_every", "intermediate checkpoint interval in steps, 0 disables"),
    ("appearance_weight", "weight of the intensity cross-entropy term, 0 disables"),
    ("depth_weight", "weight of the depth L1 term, 0 disables"),
    ("pred_branch", "sample the dense maps at the predicted projection"),
    ("gt_branch", "sample the dense maps at the true projection"),
    ("decalib_trans_max", "per-axis translation perturbation bound, meters"),
    ("decalib_rot_max_deg", "per-axis rotation perturbation bound, degrees"),
    ("intensity_threshold", "intensity above this is labeled high (30 for KITTI-like data, 10 for MTADV)"),
    ("pose_stem", "width of the full-resolution pose encoder stem, 0 disables"),
    ("pose_widths", "pose encoder stage widths"),
    ("dense_widths", "intensity and depth encoder stage widths"),
    ("query_count", "pose decoder queries"),
    ("embed_dim", "pose attention width"),
    ("ffn_dim", "pose decoder feed-forward width"),
    ("max_depth", "upper bound of predicted depth, meters"),
    ("rot_output_scale", "radians per unit of the rotation head"),
    ("trans_output_scale", "meters per unit of the translation head"),
    ("input_shift", "per-channel input shift (r,g,b,x,y,z,intensity)"),
    ("input_scale", "per-channel input scale applied after the shift"),
    ("image_width", "synthetic image width"),
    ("image_height", "synthetic image height"),
    ("fx", "synthetic focal length x, pixels"),
    ("fy", "synthetic focal length y, pixels"),
    ("cx", "synthetic principal point x"),
    ("cy", "synthetic principal point y"),
    ("points", "synthetic LiDAR points per scene"),
    ("ground", "synthetic ground plane"),
    ("lidar_height", "LiDAR height above ground, meters"),
    ("wall", "synthetic back wall"),
    ("wall_distance", "back wall distance range, meters"),
    ("boxes", "box count range"),
    ("box_size", "box edge range, meters"),
    ("poles", "pole count range"),
    ("pole_radius", "pole radius range, meters"),
    ("pole_height", "pole height range, meters"),
    ("object_x", "forward placement range of objects, meters"),
    ("object_y", "lateral placement range of objects, meters"),
    ("checker_period", "texture period range, meters"),
    ("high_intensity", "reflectance range of bright texture"),
    ("low_intensity", "reflectance range of dark texture"),
    ("intensity_noise", "half-width of uniform reflectance noise"),
    ("max_range", "LiDAR range, meters"),
    ("supersample", "render sub-samples per pixel side"),
];

impl RunConfig {
    /// `(key, description, default value)` for every key.
    pub fn documented() -> Vec<(&'static str, &'static str, String)> {
        let d = Self::default();
        KEYS.iter().map(|&(k, doc)| (k, doc, d.get(k).expect("listed key"))).collect()
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|&(k, _)| k)
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&at, format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::parse(&at, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// `explicit` if given, else `run.cfg` beside the checkpoint if present,
    /// else defaults.
    pub fn for_checkpoint(checkpoint: &Path, explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        let beside = checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG_FILE);
        if beside.is_file() {
            Self::load(&beside)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &(k, doc) in KEYS {
            s.push_str(&format!("# {doc}\n{k} = {}\n", self.get(k).expect("listed key")));
        }
        s
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override must be key=value, got {o:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.net.validate()?;
        self.scene.validate()?;
        DecalibRange::new(self.train.decalib.trans_max, self.train.decalib.rot_max)?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (t, n, s) = (&self.train, &self.net, &self.scene);
        let k = &s.intrinsics;
        Ok(match key {
            "data" => path_text(&self.data),
            "out" => path_text(&self.out),
            "seed" => t.seed.to_string(),
            "eval_seed" => self.eval_seed.to_string(),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.initial_lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "decoupled_weight_decay" => t.decoupled_weight_decay.to_string(),
            "optimizer" => t.optimizer.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "appearance_weight" => t.loss.appearance_weight.to_string(),
            "depth_weight" => t.loss.depth_weight.to_string(),
            "pred_branch" => t.loss.pred_branch.to_string(),
            "gt_branch" => t.loss.gt_branch.to_string(),
            "decalib_trans_max" => t.decalib.trans_max.to_string(),
            "decalib_rot_max_deg" => t.decalib.rot_max.to_degrees().to_string(),
            "intensity_threshold" => t.threshold.to_string(),
            "pose_stem" => n.pose_stem.to_string(),
            "pose_widths" => list_text(&n.pose_widths),
            "dense_widths" => list_text(&n.dense_widths),
            "query_count" => n.query_count.to_string(),
            "embed_dim" => n.embed_dim.to_string(),
            "ffn_dim" => n.ffn_dim.to_string(),
            "max_depth" => n.max_depth.to_string(),
            "rot_output_scale" => n.rot_output_scale.to_string(),
            "trans_output_scale" => n.trans_output_scale.to_string(),
            "input_shift" => list_text(&n.input_shift),
            "input_scale" => list_text(&n.input_scale),
            "image_width" => k.width.to_string(),
            "image_height" => k.height.to_string(),
            "fx" => k.fx.to_string(),
            "fy" => k.fy.to_string(),
            "cx" => k.cx.to_string(),
            "cy" => k.cy.to_string(),
            "points" => s.points.to_string(),
            "ground" => s.ground.to_string(),
            "lidar_height" => s.lidar_height.to_string(),
            "wall" => s.wall.to_string(),
            "wall_distance" => list_text(&[s.wall_distance.0, s.wall_distance.1]),
            "boxes" => list_text(&[s.boxes.0, s.boxes.1]),
            "box_size" => list_text(&[s.box_size.0, s.box_size.1]),
            "poles" => list_text(&[s.poles.0, s.poles.1]),
            "pole_radius" => list_text(&[s.pole_radius.0, s.pole_radius.1]),
            "pole_height" => list_text(&[s.pole_height.0, s.pole_height.1]),
            "object_x" => list_text(&[s.object_x.0, s.object_x.1]),
            "object_y" => list_text(&[s.object_y.0, s.object_y.1]),
            "checker_period" => list_text(&[s.checker_period.0, s.checker_period.1]),
            "high_intensity" => list_text(&[s.high_intensity.0, s.high_intensity.1]),
            "low_intensity" => list_text(&[s.low_intensity.0, s.low_intensity.1]),
            "intensity_noise" => s.intensity_noise.to_string(),
            "max_range" => s.max_range.to_string(),
            "supersample" => s.supersample.to_string(),
            _ => return Err(unknown(key)),
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (t, n, s) = (&mut self.train, &mut self.net, &mut self.scene);
        match key {
            "data" => self.data = path_value(v),
            "out" => self.out = path_value(v),
            "seed" => t.seed = scalar(key, v)?,
            "eval_seed" => self.eval_seed = scalar(key, v)?,
            "steps" => t.steps = scalar(key, v)?,
            "batch_size" => t.batch_size = scalar(key, v)?,
            "lr" => t.initial_lr = scalar(key, v)?,
            "momentum" => t.momentum = scalar(key, v)?,
            "weight_decay" => t.weight_decay = scalar(key, v)?,
            "decoupled_weight_decay" => t.decoupled_weight_decay = scalar(key, v)?,
            "optimizer" => t.optimizer = scalar(key, v)?,
            "grad_clip" => t.grad_clip = scalar(key, v)?,
            "checkpoint_every" => t.checkpoint_every = scalar(key, v)?,
            "appearance_weight" => t.loss.appearance_weight = scalar(key, v)?,
            "depth_weight" => t.loss.depth_weight = scalar(key, v)?,
            "pred_branch" => t.loss.pred_branch = scalar(key, v)?,
            "gt_branch" => t.loss.gt_branch = scalar(key, v)?,
            "decalib_trans_max" => t.decalib.trans_max = scalar(key, v)?,
            "decalib_rot_max_deg" => t.decalib.rot_max = scalar::<f64>(key, v)?.to_radians(),
            "intensity_threshold" => t.threshold = scalar(key, v)?,
            "pose_stem" => n.pose_stem = scalar(key, v)?,
            "pose_widths" => n.pose_widths = list(key, v)?,
            "dense_widths" => n.dense_widths = list(key, v)?,
            "query_count" => n.query_count = scalar(key, v)?,
            "embed_dim" => n.embed_dim = scalar(key, v)?,
            "ffn_dim" => n.ffn_dim = scalar(key, v)?,
            "max_depth" => n.max_depth = scalar(key, v)?,
            "rot_output_scale" => n.rot_output_scale = scalar(key, v)?,
            "trans_output_scale" => n.trans_output_scale = scalar(key, v)?,
            "input_shift" => n.input_shift = fixed(key, v)?,
            "input_scale" => n.input_scale = fixed(key, v)?,
            "image_width" => s.intrinsics.width = scalar(key, v)?,
            "image_height" => s.intrinsics.height = scalar(key, v)?,
            "fx" => s.intrinsics.fx = scalar(key, v)?,
            "fy" => s.intrinsics.fy = scalar(key, v)?,
            "cx" => s.intrinsics.cx = scalar(key, v)?,
            "cy" => s.intrinsics.cy = scalar(key, v)?,
            "points" => s.points = scalar(key, v)?,
            "ground" => s.ground = scalar(key, v)?,
            "lidar_height" => s.lidar_height = scalar(key, v)?,
            "wall" => s.wall = scalar(key, v)?,
            "wall_distance" => s.wall_distance = span(key, v)?,
            "boxes" => s.boxes = fixed::<usize, 2>(key, v).map(|[a, b]| (a, b))?,
            "box_size" => s.box_size = span(key, v)?,
            "poles" => s.poles = fixed::<usize, 2>(key, v).map(|[a, b]| (a, b))?,
            "pole_radius" => s.pole_radius = span(key, v)?,
            "pole_height" => s.pole_height = span(key, v)?,
            "object_x" => s.object_x = span(key, v)?,
            "object_y" => s.object_y = span(key, v)?,
            "checker_period" => s.checker_period = span(key, v)?,
            "high_intensity" => s.high_intensity = span(key, v)?,
            "low_intensity" => s.low_intensity = span(key, v)?,
            "intensity_noise" => s.intensity_noise = scalar(key, v)?,
            "max_range" => s.max_range = scalar(key, v)?,
            "supersample" => s.supersample = scalar(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    /// Network configuration sized for images of `k`.
    pub fn network_for(&self, k: &CameraIntrinsics) -> NetworkConfig {
        crate::train::sized_config(&self.net, k)
    }
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown configuration key {key:?}"))
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|p| scalar(key, p.trim())).collect()
}

fn fixed<T: FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N]>
where
    T::Err: Display,
{
    let items: Vec<T> = list(key, v)?;
    let got = items.len();
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values, got {got}")))
}

fn span(key: &str, v: &str) -> Result<Span> {
    fixed::<f64, 2>(key, v).map(|[a, b]| (a, b))
}

fn list_text<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn path_value(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_round_trips() {
        let d = RunConfig::default();
        let text = d.to_text();
        assert_eq!(RunConfig::from_text(&text, "t").unwrap(), d);
        assert_eq!(RunConfig::documented().len(), RunConfig::keys().count());
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let e = RunConfig::from_text("steps = 5\nlearning_rate = 0.1\n", "run.cfg").unwrap_err().to_string();
        assert!(e.contains("run.cfg:2") && e.contains("learning_rate"), "{e}");
    }

    #[test]
    fn comments_overrides_and_lists() {
        let mut c = RunConfig::from_text("# hi\n\nsteps=7\npose_widths = 8, 16\n", "t").unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.net.pose_widths, vec![8, 16]);
        c.apply_overrides(&["lr=0.5".into(), "boxes=1,3".into()]).unwrap();
        assert_eq!(c.train.initial_lr, 0.5);
        assert_eq!(c.scene.boxes, (1, 3));
        assert!(c.apply_overrides(&["momentum=1.5".into()]).is_err());
        assert!(c.apply_overrides(&["input_scale=1,2".into()]).is_err());
    }

    #[test]
    fn degrees_key_converts() {
        let c = RunConfig::from_text("decalib_rot_max_deg = 2\n", "t").unwrap();
        assert!((c.train.decalib.rot_max - 2f64.to_radians()).abs() < 1e-15);
    }
}
