//! Run configuration: a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys, duplicate keys and unparsable values are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Output scale of the mask feature representation relative to the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MfrScale {
    Half,
    Quarter,
    Eighth,
}

impl MfrScale {
    /// Pyramid level index `o` whose stride `2^o` equals the output stride.
    pub fn level(self) -> usize {
        match self {
            MfrScale::Half => 1,
            MfrScale::Quarter => 2,
            MfrScale::Eighth => 3,
        }
    }

    pub fn stride(self) -> usize {
        1 << self.level()
    }

    pub const ALL: [MfrScale; 3] = [MfrScale::Eighth, MfrScale::Quarter, MfrScale::Half];
}

impl fmt::Display for MfrScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.stride())
    }
}

impl FromStr for MfrScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/2" => Ok(MfrScale::Half),
            "1/4" => Ok(MfrScale::Quarter),
            "1/8" => Ok(MfrScale::Eighth),
            other => Err(Error::Config(format!("mfr.scale must be 1/2, 1/4 or 1/8, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_width: usize,
    /// Common channel width `D` of the pyramid, transformer and MFR.
    pub width: usize,
    pub heads: usize,
    pub points: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub mfr_scale: MfrScale,
    pub mfr_positions: bool,
    pub kernel_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            base_width: 16,
            width: 32,
            heads: 2,
            points: 4,
            enc_layers: 2,
            dec_layers: 2,
            num_queries: 16,
            num_classes: 3,
            mfr_scale: MfrScale::Quarter,
            mfr_positions: true,
            kernel_positions: true,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            base_width: 4,
            width: 8,
            heads: 2,
            points: 2,
            enc_layers: 1,
            dec_layers: 1,
            num_queries: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return fail(format!("input.size must be a positive multiple of 32, got {}", self.image_size));
        }
        if self.base_width == 0 {
            return fail("backbone.base_width must be positive".into());
        }
        if self.width == 0 || self.width % 4 != 0 {
            return fail(format!("neck.width must be a positive multiple of 4, got {}", self.width));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("transformer.heads={} must divide neck.width={}", self.heads, self.width));
        }
        if self.points == 0 {
            return fail("transformer.points must be positive".into());
        }
        if self.dec_layers == 0 {
            return fail("transformer.dec_layers must be positive".into());
        }
        if self.num_queries == 0 {
            return fail("transformer.num_queries must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_mask: f64,
    pub noobj_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_cls: 1.0, lambda_mask: 3.0, noobj_weight: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Evaluate on the validation split every this many epochs (and always
    /// after the last one); 0 evaluates only after the last epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            lr_drop_epochs: vec![22, 27],
            lr_drop_factor: 0.1,
            batch_size: 4,
            seed: 0,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| epoch > e).count();
        self.lr * self.lr_drop_factor.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub twins: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_count: 800, val_count: 200, twins: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data: PathBuf::from("data"), out: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub score_threshold: f64,
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "input.size",
    "backbone.base_width",
    "neck.width",
    "transformer.heads",
    "transformer.points",
    "transformer.enc_layers",
    "transformer.dec_layers",
    "transformer.num_queries",
    "mfr.scale",
    "head.score_threshold",
    "head.mfr_positions",
    "head.kernel_positions",
    "loss.lambda_cls",
    "loss.lambda_mask",
    "loss.noobj_weight",
    "train.epochs",
    "train.lr",
    "train.lr_drop_epochs",
    "train.lr_drop_factor",
    "train.batch_size",
    "train.seed",
    "train.weight_decay",
    "train.clip_norm",
    "train.eval_every",
    "data.train_count",
    "data.val_count",
    "data.twins",
    "paths.data",
    "paths.out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false/1/0, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig { score_threshold: 0.5, ..Default::default() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "input.size" => self.model.image_size = parse(key, v)?,
            "backbone.base_width" => self.model.base_width = parse(key, v)?,
            "neck.width" => self.model.width = parse(key, v)?,
            "transformer.heads" => self.model.heads = parse(key, v)?,
            "transformer.points" => self.model.points = parse(key, v)?,
            "transformer.enc_layers" => self.model.enc_layers = parse(key, v)?,
            "transformer.dec_layers" => self.model.dec_layers = parse(key, v)?,
            "transformer.num_queries" => self.model.num_queries = parse(key, v)?,
            "mfr.scale" => self.model.mfr_scale = v.parse()?,
            "head.score_threshold" => self.score_threshold = parse(key, v)?,
            "head.mfr_positions" => self.model.mfr_positions = parse_bool(key, v)?,
            "head.kernel_positions" => self.model.kernel_positions = parse_bool(key, v)?,
            "loss.lambda_cls" => self.loss.lambda_cls = parse(key, v)?,
            "loss.lambda_mask" => self.loss.lambda_mask = parse(key, v)?,
            "loss.noobj_weight" => self.loss.noobj_weight = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.lr_drop_epochs" => {
                self.train.lr_drop_epochs = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|e| parse(key, e.trim())).collect::<Result<_>>()?
                }
            }
            "train.lr_drop_factor" => self.train.lr_drop_factor = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "data.train_count" => self.data.train_count = parse(key, v)?,
            "data.val_count" => self.data.val_count = parse(key, v)?,
            "data.twins" => self.data.twins = parse_bool(key, v)?,
            "paths.data" => self.paths.data = PathBuf::from(v),
            "paths.out" => self.paths.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::new();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return fail(format!("head.score_threshold must be in [0,1], got {}", self.score_threshold));
        }
        if self.train.batch_size == 0 {
            return fail("train.batch_size must be positive".into());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return fail(format!("train.lr must be positive, got {}", self.train.lr));
        }
        if self.train.weight_decay < 0.0 || self.train.clip_norm < 0.0 {
            return fail("train.weight_decay and train.clip_norm must be non-negative".into());
        }
        if self.loss.lambda_cls < 0.0 || self.loss.lambda_mask < 0.0 || self.loss.noobj_weight < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.data.train_count == 0 || self.data.val_count == 0 {
            return fail("data.train_count and data.val_count must be positive".into());
        }
        Ok(())
    }

    /// Renders the configuration in the file format; `parse(render())` is the identity.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let drops: Vec<String> = t.lr_drop_epochs.iter().map(|e| e.to_string()).collect();
        let values: Vec<String> = vec![
            m.image_size.to_string(),
            m.base_width.to_string(),
            m.width.to_string(),
            m.heads.to_string(),
            m.points.to_string(),
            m.enc_layers.to_string(),
            m.dec_layers.to_string(),
            m.num_queries.to_string(),
            m.mfr_scale.to_string(),
            self.score_threshold.to_string(),
            m.mfr_positions.to_string(),
            m.kernel_positions.to_string(),
            self.loss.lambda_cls.to_string(),
            self.loss.lambda_mask.to_string(),
            self.loss.noobj_weight.to_string(),
            t.epochs.to_string(),
            t.lr.to_string(),
            drops.join(","),
            t.lr_drop_factor.to_string(),
            t.batch_size.to_string(),
            t.seed.to_string(),
            t.weight_decay.to_string(),
            t.clip_norm.to_string(),
            t.eval_every.to_string(),
            self.data.train_count.to_string(),
            self.data.val_count.to_string(),
            self.data.twins.to_string(),
            self.paths.data.display().to_string(),
            self.paths.out.display().to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_scale_setup() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.model.width, 32);
        assert_eq!(c.model.num_queries, 16);
        assert_eq!(c.train.epochs, 30);
        assert_eq!(c.train.lr_drop_epochs, vec![22, 27]);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!((c.loss.lambda_cls, c.loss.lambda_mask), (1.0, 3.0));
    }

    #[test]
    fn parses_values_and_comments() {
        let c = RunConfig::parse(
            "# comment\n\nneck.width = 16\nmfr.scale = 1/8\nhead.kernel_positions = false\ntrain.lr_drop_epochs = 3, 5\n",
        )
        .unwrap();
        assert_eq!(c.model.width, 16);
        assert_eq!(c.model.mfr_scale, MfrScale::Eighth);
        assert!(!c.model.kernel_positions);
        assert_eq!(c.train.lr_drop_epochs, vec![3, 5]);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "neck.depth = 3",
            "neck.width = abc",
            "neck.width = 30",
            "mfr.scale = 1/16",
            "head.mfr_positions = yes",
            "neck.width\n",
            "train.seed = 1\ntrain.seed = 2",
            "input.size = 48",
            "transformer.heads = 3",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::new();
        c.set("train.lr", "0.00025").unwrap();
        c.set("mfr.scale", "1/2").unwrap();
        c.set("data.twins", "true").unwrap();
        c.set("train.lr_drop_epochs", "").unwrap();
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn learning_rate_schedule_drops_after_listed_epochs() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at(1), 1e-3);
        assert_eq!(t.lr_at(22), 1e-3);
        assert!((t.lr_at(23) - 1e-4).abs() < 1e-18);
        assert!((t.lr_at(28) - 1e-5).abs() < 1e-18);
    }
}
