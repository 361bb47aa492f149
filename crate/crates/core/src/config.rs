//! Training configuration: a TOML file whose keys mirror [`TrainConfig`],
//! with dotted-key overrides (`loss.alpha=0.4`).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::validate_crop_range;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::NetConfig;
use crate::prompting::PromptSource;
use crate::segmenter::SegmenterConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Masks regenerated from the current prediction at every step.
    #[default]
    Online,
    /// Masks generated once when collaboration starts, then frozen.
    Offline,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(MaskMode::Online),
            "offline" => Ok(MaskMode::Offline),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask mode `{other}` (expected online or offline)"
            ))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Online => "online",
            MaskMode::Offline => "offline",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub image_size: usize,
    pub crop_ratio: [f64; 2],
    pub margin_px: usize,
    pub tau: f64,
    pub threshold: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub prompt_source: PromptSource,
    pub mask_mode: MaskMode,
    pub collab_start_epoch: usize,
    pub model: NetConfig,
    pub loss: LossWeights,
    pub segmenter: SegmenterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_max: 1e-2,
            lr_min: 1e-5,
            epochs: 100,
            warmup_fraction: 0.1,
            image_size: 320,
            crop_ratio: [0.75, 1.0],
            margin_px: 25,
            tau: 0.5,
            threshold: 0.5,
            seed: 0,
            checkpoint_every: 10,
            prompt_source: PromptSource::Intersection,
            mask_mode: MaskMode::Online,
            collab_start_epoch: 0,
            model: NetConfig::reference(),
            loss: LossWeights::default(),
            segmenter: SegmenterConfig::default(),
        }
    }
}

/// Key, one-line description.
const KEY_DOCS: &[(&str, &str)] = &[
    ("batch_size", "samples per step"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 weight decay added to gradients"),
    ("lr_max", "peak learning rate"),
    ("lr_min", "learning rate at both ends of the schedule"),
    ("epochs", "passes over the training split"),
    ("warmup_fraction", "fraction of steps spent rising to lr_max"),
    ("image_size", "training resolution (multiple of 32)"),
    ("crop_ratio", "range of random-crop side ratios"),
    ("margin_px", "scribble-box margin at 320 px, scaled with image size"),
    ("tau", "scribble agreement needed to trust a guided mask"),
    ("threshold", "probability threshold for the prediction box"),
    ("seed", "seed for initialisation, shuffling and augmentation"),
    ("checkpoint_every", "epochs between checkpoints (0: only the last)"),
    ("prompt_source", "intersection, box1 (scribble box) or box2 (prediction box)"),
    ("mask_mode", "online (every step) or offline (frozen at collaboration start)"),
    ("collab_start_epoch", "first epoch that uses guided masks"),
    ("model.channels", "encoder channels per level"),
    ("model.width", "decoder width"),
    ("model.normalization.mean", "per-channel input mean"),
    ("model.normalization.std", "per-channel input std"),
    ("loss.alpha", "weight of the guided-mask term"),
    ("loss.lambda", "weights of side outputs 2-4"),
    ("loss.ss_scale", "input scale of the consistency pass"),
    ("loss.wmap_radius", "boundary-weight window radius"),
    ("loss.wmap_gain", "boundary-weight gain"),
    ("loss.eps", "probability clip inside logarithms"),
    ("segmenter.encoder_layers", "encoder blocks of the guided segmenter"),
    ("segmenter.trainable_tail_layers", "trailing encoder blocks fine-tuned online"),
    ("segmenter.decoder_frozen", "keep the mask decoder frozen"),
    ("segmenter.prompt_encoder_frozen", "keep the prompt encoder frozen"),
    (
        "segmenter.mode",
        "stub:box-fill, stub:oracle, stub:complement, stub:noisy-oracle:<p> or external:<name>",
    ),
];

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(reason) => Error::format(path, reason),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return bad(format!(
                "need 0 < lr_min < lr_max (got {} and {})",
                self.lr_min, self.lr_max
            ));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("need 0 <= momentum < 1 and weight_decay >= 0".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return bad(format!(
                "image_size must be a positive multiple of 32 (got {})",
                self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.threshold) {
            return bad("tau and threshold must lie in [0, 1]".into());
        }
        validate_crop_range((self.crop_ratio[0], self.crop_ratio[1]))?;
        self.loss.validate()?;
        self.segmenter.validate()?;
        crate::backbone::BackboneSpec::new(self.model.channels)?;
        if self.model.width == 0 {
            return bad("model.width must be positive".into());
        }
        Ok(())
    }

    /// Every key with its default value and description, in file order.
    pub fn documented_keys() -> Vec<(String, String, &'static str)> {
        let value = toml::Value::try_from(TrainConfig::default()).expect("config serialises");
        let mut flat = Vec::new();
        flatten("", &value, &mut flat);
        KEY_DOCS
            .iter()
            .map(|&(key, doc)| {
                let default = flat
                    .iter()
                    .find(|(k, _)| k == key)
                    .map(|(_, v)| v.clone())
                    .expect("documented key exists");
                (key.to_string(), default, doc)
            })
            .collect()
    }

    /// Sets a dotted key. The value is parsed as a TOML value, falling back
    /// to a plain string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        if !KEY_DOCS.iter().any(|&(k, _)| k == key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        let updated: TrainConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Downscaled input size for the consistency pass: `ss_scale · size`
    /// rounded to the nearest multiple of 32, at least 32.
    pub fn down_size(&self) -> usize {
        down_size(self.image_size, self.loss.ss_scale)
    }
}

pub fn down_size(size: usize, scale: f64) -> usize {
    let units = (scale * size as f64 / 32.0).round() as usize;
    units.max(1) * 32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn every_key_is_documented() {
        let value = toml::Value::try_from(TrainConfig::default()).unwrap();
        let mut flat = Vec::new();
        flatten("", &value, &mut flat);
        assert_eq!(flat.len(), KEY_DOCS.len());
        assert_eq!(TrainConfig::documented_keys().len(), KEY_DOCS.len());
    }

    #[test]
    fn overrides() {
        let mut cfg = TrainConfig::default();
        cfg.set("loss.alpha", "0.25").unwrap();
        cfg.set("prompt_source", "box2").unwrap();
        cfg.set("segmenter.mode", "stub:oracle").unwrap();
        cfg.set("crop_ratio", "[0.8, 0.9]").unwrap();
        assert_eq!(cfg.loss.alpha, 0.25);
        assert_eq!(cfg.prompt_source, PromptSource::Box2);
        assert_eq!(cfg.crop_ratio, [0.8, 0.9]);
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("image_size", "100").is_err());
        assert!(cfg.set("mask_mode", "sometimes").is_err());
        assert_eq!(cfg.image_size, 320);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        assert!(TrainConfig::from_toml_str("lr_min = 0.1\nlr_max = 0.01").is_err());
        assert!(TrainConfig::from_toml_str("warmup_fraction = 1.0").is_err());
        assert!(TrainConfig::from_toml_str("[loss]\nalpha = 2.0").is_err());
    }

    #[test]
    fn downscaled_sizes() {
        assert_eq!(down_size(320, 0.3), 96);
        assert_eq!(down_size(64, 0.3), 32);
        assert_eq!(down_size(32, 0.3), 32);
        assert_eq!(down_size(352, 0.3), 96);
    }
}
