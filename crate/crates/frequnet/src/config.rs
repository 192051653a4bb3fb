//! Flat run configuration: `section.key = value` lines, one setting each.
//!
//! Every run is fully determined by a RunConfig. Parsing starts from the
//! defaults and applies the file's lines in order, so a config file only
//! needs the keys it changes; command-line overrides reuse the same path.
//! Serialization emits every key in a fixed order, which makes
//! parse -> serialize -> parse a fixed point and lets the serialized text
//! double as the run's fingerprint.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::NetConfig;
use crate::spectral::SubbandPolicy;

/// Spectral placement of a synthetic class signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Low,
    High,
}

impl FromStr for Band {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Band::Low),
            "high" => Ok(Band::High),
            other => Err(Error::config(format!(
                "unknown band '{other}', expected one of: low, high"
            ))),
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Low => "low",
            Band::High => "high",
        })
    }
}

/// Geometry family of a synthetic class region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Blob,
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "blob" => Ok(ShapeKind::Blob),
            other => Err(Error::config(format!(
                "unknown shape '{other}', expected one of: ellipse, blob"
            ))),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Blob => "blob",
        })
    }
}

/// One foreground class of the synthetic dataset.
#[derive(Clone, Copy, Debug)]
pub struct ClassSpec {
    /// Fraction of the image area the region should cover.
    pub fraction: f64,
    pub band: Band,
    pub shape: ShapeKind,
}

/// Full description of the synthetic dataset; every sample is a pure
/// function of (spec, index).
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
    /// Foreground classes in label order (class 0 is background).
    pub classes: Vec<ClassSpec>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || self.size % 2 != 0 {
            return Err(Error::config(format!(
                "phantom size must be even and at least 8, got {}",
                self.size
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::config("noise level must be non-negative"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("need at least one foreground class"));
        }
        let total: f64 = self.classes.iter().map(|c| c.fraction).sum();
        if !self.classes.iter().all(|c| c.fraction > 0.0) || total >= 1.0 {
            return Err(Error::config(format!(
                "class area fractions must be positive and sum below 1, got {total}"
            )));
        }
        Ok(())
    }

    /// Label count including background.
    pub fn label_count(&self) -> usize {
        self.classes.len() + 1
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub depth: usize,
    pub base: usize,
    pub wavelet_order: usize,
    pub tau: f64,
    pub subband_policy: SubbandPolicy,
    pub groups: usize,
    pub scale: usize,

    pub flc: bool,
    pub db_down: bool,
    pub sld: bool,
    pub fal: bool,
    pub deep_supervision: bool,

    pub loss_dice: f64,
    pub loss_topk: f64,
    pub loss_freq: f64,
    pub topk_percent: f64,
    pub labelfree_ce: bool,

    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_min: f64,
    pub patience: usize,
    pub ema_decay: f64,
    pub min_improvement: f64,

    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,

    pub data_size: usize,
    pub data_train: usize,
    pub data_val: usize,
    pub data_noise: f64,
    pub data_seed: u64,
    pub majority_fraction: f64,
    pub majority_band: Band,
    pub majority_shape: ShapeKind,
    pub minority_fraction: f64,
    pub minority_band: Band,
    pub minority_shape: ShapeKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            depth: 2,
            base: 4,
            wavelet_order: 2,
            tau: 0.25,
            subband_policy: SubbandPolicy::LlOnly,
            groups: 4,
            scale: 2,
            flc: true,
            db_down: true,
            sld: true,
            fal: true,
            deep_supervision: true,
            loss_dice: 1.0,
            loss_topk: 1.0,
            loss_freq: 0.5,
            topk_percent: 10.0,
            labelfree_ce: false,
            lr0: 4e-3,
            beta1: 0.9,
            beta2: 0.999,
            lr_min: 1e-6,
            patience: 5,
            ema_decay: 0.95,
            min_improvement: 1e-4,
            epochs: 50,
            batch: 4,
            seed: 1,
            data_size: 64,
            data_train: 200,
            data_val: 50,
            data_noise: 0.05,
            data_seed: 7,
            majority_fraction: 0.12,
            majority_band: Band::Low,
            majority_shape: ShapeKind::Ellipse,
            minority_fraction: 0.02,
            minority_band: Band::High,
            minority_shape: ShapeKind::Blob,
        }
    }
}

/// Every accepted key, in serialization order.
pub const VALID_KEYS: &[&str] = &[
    "arch.depth",
    "arch.base",
    "arch.wavelet_order",
    "arch.tau",
    "arch.subband_policy",
    "arch.groups",
    "arch.scale",
    "switch.flc",
    "switch.db_down",
    "switch.sld",
    "switch.fal",
    "switch.deep_supervision",
    "loss.dice",
    "loss.topk",
    "loss.freq",
    "loss.topk_percent",
    "loss.labelfree_ce",
    "opt.lr0",
    "opt.beta1",
    "opt.beta2",
    "opt.lr_min",
    "opt.patience",
    "opt.ema_decay",
    "opt.min_improvement",
    "train.epochs",
    "train.batch",
    "train.seed",
    "data.size",
    "data.train",
    "data.val",
    "data.noise",
    "data.seed",
    "data.majority_fraction",
    "data.majority_band",
    "data.majority_shape",
    "data.minority_fraction",
    "data.minority_band",
    "data.minority_shape",
];

fn parse_num<T: FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(format!("{key}: '{value}' is not a valid {kind}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(format!(
            "{key}: '{other}' is not a valid bool (true or false)"
        ))),
    }
}

impl RunConfig {
    /// Set a single key. Unknown keys fail with the full list of valid ones.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch.depth" => self.depth = parse_num(key, value, "integer")?,
            "arch.base" => self.base = parse_num(key, value, "integer")?,
            "arch.wavelet_order" => self.wavelet_order = parse_num(key, value, "integer")?,
            "arch.tau" => self.tau = parse_num(key, value, "number")?,
            "arch.subband_policy" => self.subband_policy = value.parse()?,
            "arch.groups" => self.groups = parse_num(key, value, "integer")?,
            "arch.scale" => self.scale = parse_num(key, value, "integer")?,
            "switch.flc" => self.flc = parse_bool(key, value)?,
            "switch.db_down" => self.db_down = parse_bool(key, value)?,
            "switch.sld" => self.sld = parse_bool(key, value)?,
            "switch.fal" => self.fal = parse_bool(key, value)?,
            "switch.deep_supervision" => self.deep_supervision = parse_bool(key, value)?,
            "loss.dice" => self.loss_dice = parse_num(key, value, "number")?,
            "loss.topk" => self.loss_topk = parse_num(key, value, "number")?,
            "loss.freq" => self.loss_freq = parse_num(key, value, "number")?,
            "loss.topk_percent" => self.topk_percent = parse_num(key, value, "number")?,
            "loss.labelfree_ce" => self.labelfree_ce = parse_bool(key, value)?,
            "opt.lr0" => self.lr0 = parse_num(key, value, "number")?,
            "opt.beta1" => self.beta1 = parse_num(key, value, "number")?,
            "opt.beta2" => self.beta2 = parse_num(key, value, "number")?,
            "opt.lr_min" => self.lr_min = parse_num(key, value, "number")?,
            "opt.patience" => self.patience = parse_num(key, value, "integer")?,
            "opt.ema_decay" => self.ema_decay = parse_num(key, value, "number")?,
            "opt.min_improvement" => self.min_improvement = parse_num(key, value, "number")?,
            "train.epochs" => self.epochs = parse_num(key, value, "integer")?,
            "train.batch" => self.batch = parse_num(key, value, "integer")?,
            "train.seed" => self.seed = parse_num(key, value, "integer")?,
            "data.size" => self.data_size = parse_num(key, value, "integer")?,
            "data.train" => self.data_train = parse_num(key, value, "integer")?,
            "data.val" => self.data_val = parse_num(key, value, "integer")?,
            "data.noise" => self.data_noise = parse_num(key, value, "number")?,
            "data.seed" => self.data_seed = parse_num(key, value, "integer")?,
            "data.majority_fraction" => {
                self.majority_fraction = parse_num(key, value, "number")?
            }
            "data.majority_band" => self.majority_band = value.parse()?,
            "data.majority_shape" => self.majority_shape = value.parse()?,
            "data.minority_fraction" => {
                self.minority_fraction = parse_num(key, value, "number")?
            }
            "data.minority_band" => self.minority_band = value.parse()?,
            "data.minority_shape" => self.minority_shape = value.parse()?,
            other => {
                return Err(Error::config(format!(
                    "unknown key '{other}'; valid keys: {}",
                    VALID_KEYS.join(", ")
                )));
            }
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "arch.depth" => self.depth.to_string(),
            "arch.base" => self.base.to_string(),
            "arch.wavelet_order" => self.wavelet_order.to_string(),
            "arch.tau" => self.tau.to_string(),
            "arch.subband_policy" => self.subband_policy.to_string(),
            "arch.groups" => self.groups.to_string(),
            "arch.scale" => self.scale.to_string(),
            "switch.flc" => self.flc.to_string(),
            "switch.db_down" => self.db_down.to_string(),
            "switch.sld" => self.sld.to_string(),
            "switch.fal" => self.fal.to_string(),
            "switch.deep_supervision" => self.deep_supervision.to_string(),
            "loss.dice" => self.loss_dice.to_string(),
            "loss.topk" => self.loss_topk.to_string(),
            "loss.freq" => self.loss_freq.to_string(),
            "loss.topk_percent" => self.topk_percent.to_string(),
            "loss.labelfree_ce" => self.labelfree_ce.to_string(),
            "opt.lr0" => self.lr0.to_string(),
            "opt.beta1" => self.beta1.to_string(),
            "opt.beta2" => self.beta2.to_string(),
            "opt.lr_min" => self.lr_min.to_string(),
            "opt.patience" => self.patience.to_string(),
            "opt.ema_decay" => self.ema_decay.to_string(),
            "opt.min_improvement" => self.min_improvement.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.seed" => self.seed.to_string(),
            "data.size" => self.data_size.to_string(),
            "data.train" => self.data_train.to_string(),
            "data.val" => self.data_val.to_string(),
            "data.noise" => self.data_noise.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.majority_fraction" => self.majority_fraction.to_string(),
            "data.majority_band" => self.majority_band.to_string(),
            "data.majority_shape" => self.majority_shape.to_string(),
            "data.minority_fraction" => self.minority_fraction.to_string(),
            "data.minority_band" => self.minority_band.to_string(),
            "data.minority_shape" => self.minority_shape.to_string(),
            other => unreachable!("key {other} is not in VALID_KEYS"),
        }
    }

    /// Canonical text form: every key once, in VALID_KEYS order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in VALID_KEYS {
            let head = key.split('.').next().unwrap_or("");
            if head != section {
                if !out.is_empty() {
                    out.push('\n');
                }
                section = head;
            }
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.value_of(key));
            out.push('\n');
        }
        out
    }

    /// Defaults plus the file's `key = value` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(cut) => &raw[..cut],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 2 {
            return Err(Error::config(format!(
                "arch.scale: decoder stages double the resolution, so scale must be 2, got {}",
                self.scale
            )));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("train.epochs and train.batch must be positive"));
        }
        if self.data_train == 0 || self.data_val == 0 {
            return Err(Error::config("data.train and data.val must be positive"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config(format!(
                "opt.ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.lr0 <= 0.0 || self.lr_min <= 0.0 || self.lr_min > self.lr0 {
            return Err(Error::config(
                "opt.lr0 and opt.lr_min must be positive with lr_min <= lr0",
            ));
        }
        if self.patience == 0 {
            return Err(Error::config("opt.patience must be at least 1"));
        }
        let m = 1usize << self.depth;
        if self.data_size % m != 0 {
            return Err(Error::config(format!(
                "data.size {} must be a multiple of {m} for arch.depth {}",
                self.data_size, self.depth
            )));
        }
        self.net_config().validate()?;
        self.loss_weights().validate()?;
        self.phantom_spec().validate()?;
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: 1,
            classes: self.phantom_spec().label_count(),
            depth: self.depth,
            base: self.base,
            wavelet_order: self.wavelet_order,
            tau: self.tau,
            policy: self.subband_policy,
            groups: self.groups,
            flc: self.flc,
            db_down: self.db_down,
            sld: self.sld,
            deep_supervision: self.deep_supervision,
        }
    }

    /// Loss weights with the detail-term switch applied.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            dice: self.loss_dice,
            topk: self.loss_topk,
            freq: if self.fal { self.loss_freq } else { 0.0 },
            topk_percent: self.topk_percent,
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            size: self.data_size,
            noise: self.data_noise,
            seed: self.data_seed,
            classes: vec![
                ClassSpec {
                    fraction: self.majority_fraction,
                    band: self.majority_band,
                    shape: self.majority_shape,
                },
                ClassSpec {
                    fraction: self.minority_fraction,
                    band: self.minority_band,
                    shape: self.minority_shape,
                },
            ],
        }
    }

    /// Stable fingerprint of the serialized form.
    pub fn hash_hex(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.serialize().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Directory name every artifact of this run lands under.
    pub fn run_dir_name(&self) -> String {
        format!("run-{}", self.hash_hex())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_then_parse_is_a_fixed_point() {
        let mut cfg = RunConfig::default();
        cfg.lr0 = 0.0012345678901234567;
        cfg.tau = 1.0 / 3.0;
        cfg.epochs = 3;
        cfg.minority_band = Band::Low;
        let s1 = cfg.serialize();
        let c2 = RunConfig::parse(&s1).unwrap();
        let s2 = c2.serialize();
        assert_eq!(s1, s2);
    }

    #[test]
    fn file_values_override_defaults() {
        let text = "
            # comment line
            train.epochs = 7
            arch.depth = 3   # trailing comment
            switch.sld = false
            data.minority_fraction = 0.005
        ";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.depth, 3);
        assert!(!cfg.sld);
        assert_eq!(cfg.minority_fraction, 0.005);
        assert_eq!(cfg.batch, RunConfig::default().batch);
    }

    #[test]
    fn unknown_keys_list_the_valid_ones() {
        let err = RunConfig::parse("train.epoch = 7").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.epochs"), "{msg}");
        assert!(msg.contains("arch.depth"), "{msg}");
        assert!(msg.contains("unknown key 'train.epoch'"), "{msg}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = RunConfig::parse("train.epochs = many").unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        let err = RunConfig::parse("switch.flc = yes").unwrap_err();
        assert!(err.to_string().contains("switch.flc"), "{err}");
        let err = RunConfig::parse("data.majority_band = mid").unwrap_err();
        assert!(err.to_string().contains("low"), "{err}");
        let err = RunConfig::parse("no equals sign here").unwrap_err();
        assert!(err.to_string().contains("key = value"), "{err}");
    }

    #[test]
    fn every_valid_key_serializes_and_applies() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        for key in VALID_KEYS {
            assert!(text.contains(&format!("{key} = ")), "{key} missing");
        }
        // Round-tripping each serialized line through apply() must succeed.
        let mut probe = RunConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').unwrap();
            probe.apply(k.trim(), v.trim()).unwrap();
        }
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = RunConfig::default();
        let h0 = base.hash_hex();
        assert_eq!(h0.len(), 16);
        for key in VALID_KEYS {
            let mut cfg = RunConfig::default();
            let bumped = match cfg.value_of(key).as_str() {
                "true" => "false".to_string(),
                "false" => "true".to_string(),
                "low" => "high".to_string(),
                "high" => "low".to_string(),
                "ellipse" => "blob".to_string(),
                "blob" => "ellipse".to_string(),
                "ll_only" => "all".to_string(),
                n => match n.parse::<f64>() {
                    Ok(x) => (x + 1.0).to_string(),
                    Err(_) => "all".to_string(),
                },
            };
            cfg.apply(key, &bumped).unwrap();
            assert_ne!(cfg.hash_hex(), h0, "{key} not hashed");
        }
        assert!(base.run_dir_name().starts_with("run-"));
    }

    #[test]
    fn validation_rejects_inconsistent_setups() {
        let mut cfg = RunConfig::default();
        cfg.scale = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.majority_fraction = 0.7;
        cfg.minority_fraction = 0.4;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.data_size = 60;
        cfg.depth = 3;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains('8'), "{err}");

        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn switches_shape_the_derived_configs() {
        let mut cfg = RunConfig::default();
        cfg.fal = false;
        assert_eq!(cfg.loss_weights().freq, 0.0);
        cfg.fal = true;
        assert_eq!(cfg.loss_weights().freq, cfg.loss_freq);
        cfg.sld = false;
        assert!(!cfg.net_config().sld);
        assert_eq!(cfg.net_config().classes, 3);
        assert_eq!(cfg.phantom_spec().label_count(), 3);
    }
}
