//! Training configuration and the line-based `key = value` config format.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{BackboneConfig, ConvStage};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::mask::CropWindow;
use crate::model::ModelConfig;
use crate::sampler::NegativeDomain;

/// Which triplet term is added to the softmax loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CatMode {
    Off,
    /// Conditional triplet on every component with λ fixed to 1.
    PlainC,
    #[default]
    Cat,
}

impl FromStr for CatMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(CatMode::Off),
            "plain_C" => Ok(CatMode::PlainC),
            "CAT" => Ok(CatMode::Cat),
            other => Err(Error::Config(format!(
                "cat_on `{other}` (expected off, plain_C or CAT)"
            ))),
        }
    }
}

impl fmt::Display for CatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CatMode::Off => "off",
            CatMode::PlainC => "plain_C",
            CatMode::Cat => "CAT",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mining {
    #[default]
    Random,
    /// Per anchor, the in-batch negative candidate with the highest
    /// full-face similarity.
    BatchHard,
}

impl FromStr for Mining {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Mining::Random),
            "batch_hard" => Ok(Mining::BatchHard),
            other => Err(Error::Config(format!(
                "mining `{other}` (expected random or batch_hard)"
            ))),
        }
    }
}

impl fmt::Display for Mining {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mining::Random => "random",
            Mining::BatchHard => "batch_hard",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub freeze_below: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub conv_stages: Vec<ConvStage>,
    pub pram_on: bool,
    pub cat_on: CatMode,
    pub negative_domain: NegativeDomain,
    pub mining: Mining,
    pub loss: LossConfig,
    pub source_size: usize,
    pub crop_size: usize,
    pub part_size: usize,
    pub far: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            batch_size: 16,
            steps: 500,
            seed: 7,
            freeze_below: 0,
            embed_dim: 512,
            head_dim: 128,
            conv_stages: BackboneConfig::default().stages,
            pram_on: true,
            cat_on: CatMode::Cat,
            negative_domain: NegativeDomain::Anchor,
            mining: Mining::Random,
            loss: LossConfig::default(),
            source_size: 144,
            crop_size: 128,
            part_size: 64,
            far: vec![0.01, 0.001],
        }
    }
}

/// Every recognised key, in the order [`TrainConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "train.lr",
    "train.weight_decay",
    "train.batch_size",
    "train.steps",
    "train.seed",
    "train.freeze_below",
    "train.embed_dim",
    "train.head_dim",
    "train.conv_stages",
    "train.pram_on",
    "train.cat_on",
    "train.negative_domain",
    "train.mining",
    "loss.margin",
    "loss.softmax_scale",
    "loss.scale_mode",
    "data.source_size",
    "data.crop_size",
    "data.part_size",
    "eval.far",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

/// `out:kernel:stride:pool` per stage, comma separated.
pub fn parse_stages(value: &str) -> Result<Vec<ConvStage>> {
    value
        .split(',')
        .map(|s| {
            let f: Vec<&str> = s.trim().split(':').collect();
            let n = |i: usize| -> Result<usize> {
                f.get(i)
                    .ok_or_else(|| Error::Config(format!("stage `{s}` needs out:kernel:stride:pool")))?
                    .parse()
                    .map_err(|e| Error::Config(format!("stage `{s}`: {e}")))
            };
            if f.len() != 4 {
                return Err(Error::Config(format!("stage `{s}` needs out:kernel:stride:pool")));
            }
            Ok(ConvStage {
                out_channels: n(0)?,
                kernel: n(1)?,
                stride: n(2)?,
                pool: n(3)?,
            })
        })
        .collect()
}

pub fn format_stages(stages: &[ConvStage]) -> String {
    stages
        .iter()
        .map(|s| format!("{}:{}:{}:{}", s.out_channels, s.kernel, s.stride, s.pool))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_far_list(value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| {
            let far: f64 = parse("eval.far", v.trim())?;
            if !(far > 0.0 && far < 1.0) {
                return Err(Error::Config(format!("eval.far entry {far} outside (0, 1)")));
            }
            Ok(far)
        })
        .collect()
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "train.lr" => self.lr = parse(key, value)?,
            "train.weight_decay" => self.weight_decay = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.steps" => self.steps = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.freeze_below" => self.freeze_below = parse(key, value)?,
            "train.embed_dim" => self.embed_dim = parse(key, value)?,
            "train.head_dim" => self.head_dim = parse(key, value)?,
            "train.conv_stages" => self.conv_stages = parse_stages(value)?,
            "train.pram_on" => self.pram_on = parse(key, value)?,
            "train.cat_on" => self.cat_on = value.parse()?,
            "train.negative_domain" => {
                self.negative_domain = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "train.mining" => self.mining = value.parse()?,
            "loss.margin" => self.loss.margin = parse(key, value)?,
            "loss.softmax_scale" => self.loss.softmax_scale = parse(key, value)?,
            "loss.scale_mode" => self.loss.scale_mode = value.parse()?,
            "data.source_size" => self.source_size = parse(key, value)?,
            "data.crop_size" => self.crop_size = parse(key, value)?,
            "data.part_size" => self.part_size = parse(key, value)?,
            "eval.far" => self.far = parse_far_list(value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a config file's lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "train.lr" => self.lr.to_string(),
            "train.weight_decay" => self.weight_decay.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.steps" => self.steps.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.freeze_below" => self.freeze_below.to_string(),
            "train.embed_dim" => self.embed_dim.to_string(),
            "train.head_dim" => self.head_dim.to_string(),
            "train.conv_stages" => format_stages(&self.conv_stages),
            "train.pram_on" => self.pram_on.to_string(),
            "train.cat_on" => self.cat_on.to_string(),
            "train.negative_domain" => self.negative_domain.to_string(),
            "train.mining" => self.mining.to_string(),
            "loss.margin" => self.loss.margin.to_string(),
            "loss.softmax_scale" => self.loss.softmax_scale.to_string(),
            "loss.scale_mode" => self.loss.scale_mode.to_string(),
            "data.source_size" => self.source_size.to_string(),
            "data.crop_size" => self.crop_size.to_string(),
            "data.part_size" => self.part_size.to_string(),
            "eval.far" => self
                .far
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(","),
            _ => return None,
        })
    }

    /// Every key, one `key = value` line each; parses back to `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.batch_size", self.batch_size),
            ("train.steps", self.steps),
            ("train.embed_dim", self.embed_dim),
            ("train.head_dim", self.head_dim),
            ("data.crop_size", self.crop_size),
            ("data.part_size", self.part_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "train.weight_decay must be finite and ≥ 0, got {}",
                self.weight_decay
            )));
        }
        if self.crop_size > self.source_size {
            return Err(Error::Config(format!(
                "data.crop_size {} exceeds data.source_size {}",
                self.crop_size, self.source_size
            )));
        }
        if self.part_size > self.crop_size {
            return Err(Error::Config("data.part_size exceeds data.crop_size".into()));
        }
        if self.far.is_empty() {
            return Err(Error::Config("eval.far needs at least one value".into()));
        }
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.backbone_config().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            channels: 1,
            face_size: (self.crop_size, self.crop_size),
            part_size: (self.part_size, self.part_size),
            stages: self.conv_stages.clone(),
            head_dim: self.head_dim,
            freeze_below: self.freeze_below,
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone_config(),
            embed_dim: self.embed_dim,
            pram_on: self.pram_on,
            num_classes,
        }
    }

    pub fn crop_window(&self) -> CropWindow {
        CropWindow {
            source: (self.source_size, self.source_size),
            out: (self.crop_size, self.crop_size),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.weight_decay, 0.0005);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.loss.margin, 0.55);
        assert_eq!(c.loss.softmax_scale, 24.0);
        assert_eq!(c.embed_dim, 512);
        assert_eq!(c.head_dim, 128);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("train.cat_on", "plain_C").unwrap();
        c.set("train.conv_stages", "4:3:1:2, 8:3:1:2").unwrap();
        c.set("eval.far", "0.1,0.05").unwrap();
        c.set("loss.scale_mode", "feature_scale").unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_and_bad_keys() {
        let err = TrainConfig::from_text("train.lrr = 0.1").unwrap_err();
        assert!(err.to_string().contains("train.lrr"), "{err}");
        assert!(TrainConfig::from_text("train.lr 0.1").is_err());
        assert!(TrainConfig::from_text("train.batch_size = -1").is_err());
        assert!(TrainConfig::from_text("train.cat_on = yes").is_err());
        assert!(TrainConfig::from_text("loss.margin = 2.5").is_err());
        let c = TrainConfig::from_text("# comment\n\n train.steps = 3 \n").unwrap();
        assert_eq!(c.steps, 3);
    }
}
