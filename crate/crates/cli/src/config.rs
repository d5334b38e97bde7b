//! Flat `key = value` run configuration.
//!
//! Keys carry a dotted section prefix (`lfam.local_range = 7`). Blank lines
//! and lines starting with `#` are skipped. Every key has a default, so an
//! empty file is a complete configuration; unknown or repeated keys are
//! errors. [`emit`] writes every key in a fixed order and [`parse_str`]
//! reads that text back to an equal value.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lfam_core::lfam::{LfamConfig, ResidualSource, DEFAULT_LOCAL_RANGE};
use lfam_core::train::{FocalIouConfig, LossConfig, OptimizerKind, ScheduleKind, TrainConfig};
use lfam_core::unet::{SkipMode, UNetConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    /// 1-based line of the offending entry, when it came from a file.
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "line {l}: {k}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, Some(k)) => write!(f, "{k}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipKind {
    Concat,
    Lfam,
    None,
}

impl SkipKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipKind::Concat => "concat",
            SkipKind::Lfam => "lfam",
            SkipKind::None => "none",
        }
    }
}

impl FromStr for SkipKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "concat" => Ok(SkipKind::Concat),
            "lfam" => Ok(SkipKind::Lfam),
            "none" => Ok(SkipKind::None),
            _ => Err(format!("expected concat|lfam|none, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    FocalIou,
    WeightedCe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostGeometry {
    /// Four fusion sites of a 256x256 input at 64/256/512/1024 channels.
    Reference,
    /// The configured network at `cost.size`.
    Model,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub skip: SkipKind,
    /// Per-level override of `skip`, finest level first; empty means none.
    pub skip_levels: Vec<SkipKind>,
    pub fuse_concat: bool,
    pub channel_norm: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LfamSection {
    pub local_range: usize,
    pub residual: ResidualSource,
    /// 0 means the level's channel count.
    pub proj_channels: usize,
    pub scale_logits: bool,
    pub swap_qkv: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSection {
    pub kind: LossKind,
    pub gamma: f64,
    pub alpha: f64,
    pub focal_weight: f64,
    pub iou_weight: f64,
    pub iou_per_image: bool,
    /// `None` derives inverse-frequency weights from the training masks.
    pub class_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// Dataset directory with `images/` and `masks/`; `None` generates a
    /// synthetic set in memory.
    pub dir: Option<PathBuf>,
    pub images: usize,
    pub size: usize,
    pub rare_fraction: f64,
    /// Crop every image into `tile x tile` pieces; 0 keeps whole images.
    pub tile: usize,
    /// Images reserved for validation and test when `folds` is 0.
    pub held_out: usize,
    pub folds: usize,
    pub fold: usize,
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub model: ModelSection,
    pub lfam: LfamSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub data: DataSection,
    /// Checkpoint read by `eval`; `None` means `<output_dir>/best.lfck`.
    pub eval_checkpoint: Option<PathBuf>,
    pub cost_geometry: CostGeometry,
    pub cost_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = OptimizerKind::adam();
        let (beta1, beta2, eps) = match adam {
            OptimizerKind::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
            OptimizerKind::Sgd { .. } => unreachable!(),
        };
        let focal = FocalIouConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/lfam"),
            workers: 1,
            model: ModelSection {
                in_channels: 1,
                num_classes: 4,
                base_channels: 8,
                depth: 4,
                skip: SkipKind::Lfam,
                skip_levels: Vec::new(),
                fuse_concat: false,
                channel_norm: false,
            },
            lfam: LfamSection {
                local_range: DEFAULT_LOCAL_RANGE,
                residual: ResidualSource::Encoder,
                proj_channels: 0,
                scale_logits: false,
                swap_qkv: false,
            },
            train: TrainSection {
                optimizer: OptimizerName::Adam,
                lr: train.lr_base,
                epochs: train.epochs,
                batch_size: train.batch_size,
                schedule: train.schedule,
                momentum: 0.9,
                beta1,
                beta2,
                eps,
            },
            loss: LossSection {
                kind: LossKind::FocalIou,
                gamma: focal.gamma,
                alpha: focal.alpha,
                focal_weight: focal.focal_weight,
                iou_weight: focal.iou_weight,
                iou_per_image: focal.iou_per_image,
                class_weights: None,
            },
            data: DataSection {
                dir: None,
                images: 64,
                size: 32,
                rare_fraction: 0.015,
                tile: 0,
                held_out: 16,
                folds: 0,
                fold: 0,
                val_fraction: 0.25,
            },
            eval_checkpoint: None,
            cost_geometry: CostGeometry::Reference,
            cost_size: 256,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true|false, got `{v}`")),
    }
}

fn parse_num<N: FromStr>(v: &str) -> Result<N, String> {
    v.parse().map_err(|_| format!("expected a {}, got `{v}`", std::any::type_name::<N>()))
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Assigns one key. Returns `Ok(false)` for an unknown key.
    fn set(&mut self, key: &str, v: &str) -> Result<bool, String> {
        match key {
            "seed" => self.seed = parse_num(v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "workers" => self.workers = parse_num(v)?,
            "model.in_channels" => self.model.in_channels = parse_num(v)?,
            "model.num_classes" => self.model.num_classes = parse_num(v)?,
            "model.base_channels" => self.model.base_channels = parse_num(v)?,
            "model.depth" => self.model.depth = parse_num(v)?,
            "model.skip" => self.model.skip = v.parse()?,
            "model.skip_levels" => {
                self.model.skip_levels = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?
                }
            }
            "model.fuse_concat" => self.model.fuse_concat = parse_bool(v)?,
            "model.channel_norm" => self.model.channel_norm = parse_bool(v)?,
            "lfam.local_range" => self.lfam.local_range = parse_num(v)?,
            "lfam.residual" => self.lfam.residual = v.parse().map_err(|_| format!("expected encoder|decoder|none, got `{v}`"))?,
            "lfam.proj_channels" => self.lfam.proj_channels = parse_num(v)?,
            "lfam.scale_logits" => self.lfam.scale_logits = parse_bool(v)?,
            "lfam.swap_qkv" => self.lfam.swap_qkv = parse_bool(v)?,
            "train.optimizer" => {
                self.train.optimizer = match v {
                    "adam" => OptimizerName::Adam,
                    "sgd" => OptimizerName::Sgd,
                    _ => return Err(format!("expected adam|sgd, got `{v}`")),
                }
            }
            "train.lr" => self.train.lr = parse_num(v)?,
            "train.epochs" => self.train.epochs = parse_num(v)?,
            "train.batch_size" => self.train.batch_size = parse_num(v)?,
            "train.schedule" => {
                self.train.schedule = match v {
                    "cosine" => ScheduleKind::Cosine,
                    "constant" => ScheduleKind::Constant,
                    _ => return Err(format!("expected cosine|constant, got `{v}`")),
                }
            }
            "train.momentum" => self.train.momentum = parse_num(v)?,
            "train.beta1" => self.train.beta1 = parse_num(v)?,
            "train.beta2" => self.train.beta2 = parse_num(v)?,
            "train.eps" => self.train.eps = parse_num(v)?,
            "loss.kind" => {
                self.loss.kind = match v {
                    "focal_iou" => LossKind::FocalIou,
                    "weighted_ce" => LossKind::WeightedCe,
                    _ => return Err(format!("expected focal_iou|weighted_ce, got `{v}`")),
                }
            }
            "loss.gamma" => self.loss.gamma = parse_num(v)?,
            "loss.alpha" => self.loss.alpha = parse_num(v)?,
            "loss.focal_weight" => self.loss.focal_weight = parse_num(v)?,
            "loss.iou_weight" => self.loss.iou_weight = parse_num(v)?,
            "loss.iou_per_image" => self.loss.iou_per_image = parse_bool(v)?,
            "loss.class_weights" => {
                self.loss.class_weights = if v == "auto" {
                    None
                } else {
                    Some(v.split(',').map(|s| parse_num(s.trim())).collect::<Result<_, _>>()?)
                }
            }
            "data.dir" => self.data.dir = parse_path(v),
            "data.images" => self.data.images = parse_num(v)?,
            "data.size" => self.data.size = parse_num(v)?,
            "data.rare_fraction" => self.data.rare_fraction = parse_num(v)?,
            "data.tile" => self.data.tile = parse_num(v)?,
            "data.held_out" => self.data.held_out = parse_num(v)?,
            "data.folds" => self.data.folds = parse_num(v)?,
            "data.fold" => self.data.fold = parse_num(v)?,
            "data.val_fraction" => self.data.val_fraction = parse_num(v)?,
            "eval.checkpoint" => self.eval_checkpoint = parse_path(v),
            "cost.geometry" => {
                self.cost_geometry = match v {
                    "reference" => CostGeometry::Reference,
                    "model" => CostGeometry::Model,
                    _ => return Err(format!("expected reference|model, got `{v}`")),
                }
            }
            "cost.size" => self.cost_size = parse_num(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its current value, in emission order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let l = &self.lfam;
        let t = &self.train;
        let s = &self.loss;
        let d = &self.data;
        vec![
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("workers", self.workers.to_string()),
            ("model.in_channels", m.in_channels.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.base_channels", m.base_channels.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.skip", m.skip.as_str().into()),
            ("model.skip_levels", m.skip_levels.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",")),
            ("model.fuse_concat", m.fuse_concat.to_string()),
            ("model.channel_norm", m.channel_norm.to_string()),
            ("lfam.local_range", l.local_range.to_string()),
            ("lfam.residual", l.residual.as_str().into()),
            ("lfam.proj_channels", l.proj_channels.to_string()),
            ("lfam.scale_logits", l.scale_logits.to_string()),
            ("lfam.swap_qkv", l.swap_qkv.to_string()),
            ("train.optimizer", match t.optimizer {
                OptimizerName::Adam => "adam",
                OptimizerName::Sgd => "sgd",
            }
            .into()),
            ("train.lr", t.lr.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.schedule", match t.schedule {
                ScheduleKind::Cosine => "cosine",
                ScheduleKind::Constant => "constant",
            }
            .into()),
            ("train.momentum", t.momentum.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("loss.kind", match s.kind {
                LossKind::FocalIou => "focal_iou",
                LossKind::WeightedCe => "weighted_ce",
            }
            .into()),
            ("loss.gamma", s.gamma.to_string()),
            ("loss.alpha", s.alpha.to_string()),
            ("loss.focal_weight", s.focal_weight.to_string()),
            ("loss.iou_weight", s.iou_weight.to_string()),
            ("loss.iou_per_image", s.iou_per_image.to_string()),
            ("loss.class_weights", s.class_weights.as_deref().map_or("auto".into(), list)),
            ("data.dir", path_str(&d.dir)),
            ("data.images", d.images.to_string()),
            ("data.size", d.size.to_string()),
            ("data.rare_fraction", d.rare_fraction.to_string()),
            ("data.tile", d.tile.to_string()),
            ("data.held_out", d.held_out.to_string()),
            ("data.folds", d.folds.to_string()),
            ("data.fold", d.fold.to_string()),
            ("data.val_fraction", d.val_fraction.to_string()),
            ("eval.checkpoint", path_str(&self.eval_checkpoint)),
            ("cost.geometry", match self.cost_geometry {
                CostGeometry::Reference => "reference",
                CostGeometry::Model => "model",
            }
            .into()),
            ("cost.size", self.cost_size.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Checks cross-field constraints. The error names the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        fn need(ok: bool, key: &'static str, msg: impl FnOnce() -> String) -> Result<(), (&'static str, String)> {
            if ok {
                Ok(())
            } else {
                Err((key, msg()))
            }
        }
        let unit = |v: f64| v.is_finite() && (0.0..1.0).contains(&v);
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let m = &self.model;
        need(self.workers >= 1, "workers", || "must be >= 1".into())?;
        need(m.in_channels >= 1, "model.in_channels", || "must be >= 1".into())?;
        need((2..=256).contains(&m.num_classes), "model.num_classes", || format!("must be in [2, 256], got {}", m.num_classes))?;
        need(m.base_channels >= 1, "model.base_channels", || "must be >= 1".into())?;
        need((1..=8).contains(&m.depth), "model.depth", || format!("must be in [1, 8], got {}", m.depth))?;
        need(m.skip_levels.is_empty() || m.skip_levels.len() == m.depth, "model.skip_levels", || {
            format!("needs {} entries (one per level), got {}", m.depth, m.skip_levels.len())
        })?;
        need(self.lfam.local_range >= 1, "lfam.local_range", || "must be >= 1".into())?;
        let t = &self.train;
        need(t.lr.is_finite() && t.lr > 0.0, "train.lr", || format!("must be positive, got {}", t.lr))?;
        need(t.batch_size >= 1, "train.batch_size", || "must be >= 1".into())?;
        need(unit(t.momentum), "train.momentum", || format!("must be in [0, 1), got {}", t.momentum))?;
        need(unit(t.beta1), "train.beta1", || format!("must be in [0, 1), got {}", t.beta1))?;
        need(unit(t.beta2), "train.beta2", || format!("must be in [0, 1), got {}", t.beta2))?;
        need(t.eps.is_finite() && t.eps > 0.0, "train.eps", || format!("must be positive, got {}", t.eps))?;
        let s = &self.loss;
        need(nonneg(s.gamma), "loss.gamma", || format!("must be >= 0, got {}", s.gamma))?;
        need(nonneg(s.alpha), "loss.alpha", || format!("must be >= 0, got {}", s.alpha))?;
        need(nonneg(s.focal_weight), "loss.focal_weight", || format!("must be >= 0, got {}", s.focal_weight))?;
        need(nonneg(s.iou_weight), "loss.iou_weight", || format!("must be >= 0, got {}", s.iou_weight))?;
        if let Some(w) = &s.class_weights {
            need(w.len() == m.num_classes, "loss.class_weights", || {
                format!("needs {} entries, got {}", m.num_classes, w.len())
            })?;
            need(w.iter().all(|&x| x.is_finite() && x > 0.0), "loss.class_weights", || "weights must be positive".into())?;
        }
        let d = &self.data;
        need(d.images >= 1, "data.images", || "must be >= 1".into())?;
        let f = 1usize << m.depth;
        let side = if d.tile > 0 { d.tile } else { d.size };
        let side_key = if d.tile > 0 { "data.tile" } else { "data.size" };
        need(side >= 1 && side % f == 0, side_key, || format!("{side} is not divisible by 2^depth = {f}"))?;
        need(d.tile <= d.size, "data.tile", || format!("tile {} exceeds image size {}", d.tile, d.size))?;
        need(d.rare_fraction > 0.0 && d.rare_fraction < 0.1, "data.rare_fraction", || {
            format!("must be in (0, 0.1), got {}", d.rare_fraction)
        })?;
        need(d.held_out < d.images, "data.held_out", || format!("must be < data.images = {}", d.images))?;
        need(d.folds != 1, "data.folds", || "must be 0 (hold-out) or >= 2".into())?;
        need(d.folds == 0 || d.fold < d.folds, "data.fold", || format!("must be < data.folds = {}", d.folds))?;
        need(unit(d.val_fraction), "data.val_fraction", || format!("must be in [0, 1), got {}", d.val_fraction))?;
        need(self.cost_size >= 1, "cost.size", || "must be >= 1".into())?;
        Ok(())
    }

    pub fn lfam_config(&self) -> LfamConfig {
        LfamConfig {
            local_range: self.lfam.local_range,
            residual_source: self.lfam.residual,
            proj_channels: (self.lfam.proj_channels > 0).then_some(self.lfam.proj_channels),
            scale_logits: self.lfam.scale_logits,
            swap_qkv: self.lfam.swap_qkv,
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        let m = &self.model;
        let mode = |k: SkipKind| match k {
            SkipKind::Concat => SkipMode::Concat,
            SkipKind::Lfam => SkipMode::Lfam(self.lfam_config()),
            SkipKind::None => SkipMode::None,
        };
        let skips = if m.skip_levels.is_empty() {
            vec![mode(m.skip); m.depth]
        } else {
            m.skip_levels.iter().map(|&k| mode(k)).collect()
        };
        UNetConfig {
            skips,
            fuse_concat: m.fuse_concat,
            channel_norm: m.channel_norm,
            ..UNetConfig::new(m.in_channels, m.num_classes, m.base_channels, m.depth)
        }
    }

    /// Training configuration; `class_weights` fills in automatic weights
    /// for the weighted cross-entropy loss.
    pub fn train_config(&self, class_weights: impl FnOnce() -> Vec<f64>) -> TrainConfig {
        let t = &self.train;
        let s = &self.loss;
        let optimizer = match t.optimizer {
            OptimizerName::Adam => OptimizerKind::Adam { beta1: t.beta1, beta2: t.beta2, eps: t.eps },
            OptimizerName::Sgd => OptimizerKind::Sgd { momentum: t.momentum },
        };
        let loss = match s.kind {
            LossKind::FocalIou => LossConfig::FocalIou(FocalIouConfig {
                gamma: s.gamma,
                alpha: s.alpha,
                focal_weight: s.focal_weight,
                iou_weight: s.iou_weight,
                iou_per_image: s.iou_per_image,
            }),
            LossKind::WeightedCe => LossConfig::WeightedCe {
                class_weights: s.class_weights.clone().unwrap_or_else(class_weights),
            },
        };
        TrainConfig {
            optimizer,
            lr_base: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            schedule: t.schedule,
            loss,
            seed: self.seed,
        }
    }
}

/// Canonical text form: every key, one per line.
pub fn emit(cfg: &RunConfig) -> String {
    let mut s = String::new();
    for (k, v) in cfg.entries() {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Assigns every entry of `text` onto `cfg` without validating. Returns the
/// line (1-based) each key was set on.
fn assign(cfg: &mut RunConfig, text: &str) -> Result<HashMap<String, usize>, ConfigError> {
    let mut lines: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |key: Option<&str>, message: String| ConfigError { line: Some(line), key: key.map(Into::into), message };
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(err(None, format!("expected `key = value`, got `{trimmed}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        if let Some(first) = lines.insert(key.to_string(), line) {
            return Err(err(Some(key), format!("repeated key (first set on line {first})")));
        }
        match cfg.set(key, value) {
            Ok(true) => {}
            Ok(false) => return Err(err(Some(key), "unknown key".into())),
            Err(msg) => return Err(err(Some(key), msg)),
        }
    }
    Ok(lines)
}

fn validated(cfg: RunConfig, lines: &HashMap<String, usize>) -> Result<RunConfig, ConfigError> {
    cfg.validate().map_err(|(key, message)| ConfigError {
        line: lines.get(key).copied(),
        key: Some(key.into()),
        message,
    })?;
    Ok(cfg)
}

/// Parses a whole config text over the defaults. Line numbers count from 1.
pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let lines = assign(&mut cfg, text)?;
    validated(cfg, &lines)
}

/// Reads and validates a config file. I/O failures come back as the outer
/// error so callers can tell them apart from content errors.
pub fn parse_file(path: &Path) -> std::io::Result<Result<RunConfig, ConfigError>> {
    Ok(parse_str(&std::fs::read_to_string(path)?))
}

/// Applies `key=value` overrides given outside a file, later ones winning,
/// then validates. Errors report the override's position (1-based) as the
/// line.
pub fn apply_overrides(base: RunConfig, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut cfg = base;
    let mut lines = HashMap::new();
    for (i, o) in overrides.iter().enumerate() {
        let set = assign(&mut cfg, o).map_err(|e| ConfigError { line: Some(i + 1), ..e })?;
        lines.extend(set.into_keys().map(|k| (k, i + 1)));
    }
    validated(cfg, &lines)
}
