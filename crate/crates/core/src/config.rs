//! Plain-text `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Data keys (`seed`, `classes`,
//! `per_class`, `image_size`, `channels`) are required; everything else
//! has a default. Unknown keys are rejected so typos do not pass silently.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{generate_split, DomainDataset, GeneratorConfig, ShiftConfig, Texture};
use crate::error::{Error, Result};
use crate::nets::{
    build_calibrator, build_classifier, build_discriminator, CalibratorConfig, ClassifierArch,
    DiscriminatorKind, Network,
};
use crate::train::{Selection, TrainConfig};

/// Parsed `key = value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_owned(), v.trim().to_owned()).is_some() {
                return Err(Error::Config(format!("duplicate key '{k}'")));
            }
        }
        Ok(Self { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
        raw.parse().map_err(|_| Error::Config(format!("key '{key}': cannot parse '{raw}'")))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.entries.get(key).ok_or_else(|| Error::Config(format!("missing key '{key}'")))?;
        Self::parse_value(key, raw)
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        self.entries.get(key).map_or(Ok(default), |raw| Self::parse_value(key, raw))
    }

    /// `none` or absent means `None`.
    pub fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key).map(String::as_str) {
            None | Some("none") => Ok(None),
            Some(raw) => Self::parse_value(key, raw).map(Some),
        }
    }
}

/// Everything one pipeline run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    pub eval_per_class: usize,
    pub shift: ShiftConfig,
    pub source: TrainConfig,
    pub calibrator: CalibratorConfig,
    pub calibration: TrainConfig,
    pub disc_hidden: usize,
    pub sweep_epochs: usize,
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "classes",
    "per_class",
    "eval_per_class",
    "image_size",
    "channels",
    "shift.contrast_inversion",
    "shift.texture_frequency",
    "shift.texture_amplitude",
    "shift.channel_bias",
    "shift.elastic_jitter",
    "source.lr",
    "source.epochs",
    "source.batch_size",
    "calibrator.width",
    "calibrator.depth",
    "calibrator.skip",
    "calibrator.epsilon",
    "calibrator.lr",
    "calibrator.epochs",
    "calibrator.batch_size",
    "calibrator.disc_steps_per_cal_step",
    "calibrator.patch_size",
    "calibrator.log_every",
    "calibrator.selection",
    "calibrator.source_tolerance",
    "calibrator.validation_size",
    "disc.hidden",
    "sweep.epochs",
];

fn parse_selection(s: &str) -> Result<Selection> {
    match s {
        "last" => Ok(Selection::Last),
        "confusion" => Ok(Selection::Confusion),
        _ => Err(Error::Config(format!("key 'calibrator.selection': unknown value '{s}'"))),
    }
}

fn parse_list(key: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| KeyValues::parse_value(key, v.trim())).collect()
}

impl ExperimentConfig {
    /// The seeded desk-scale domain pair used for acceptance: contrast
    /// inversion plus a high-frequency texture on 28×28 glyphs.
    pub fn desk(seed: u64) -> Self {
        let data = GeneratorConfig { n_classes: 10, n_per_class: 200, image_size: 28, channels: 1 };
        let calibrator = CalibratorConfig { epsilon: 2.0, ..CalibratorConfig::default() };
        Self {
            seed,
            data,
            eval_per_class: 100,
            shift: ShiftConfig {
                contrast_inversion: true,
                additive_texture: Some(Texture { frequency: 0.4, amplitude: 0.4 }),
                seed,
                ..ShiftConfig::default()
            },
            source: TrainConfig { lr: 1e-3, epochs: 10, seed, ..TrainConfig::default() },
            calibrator,
            calibration: TrainConfig {
                lr: 1e-3,
                epochs: 20,
                epsilon: calibrator.epsilon,
                seed,
                ..TrainConfig::default()
            },
            disc_hidden: 64,
            sweep_epochs: 10,
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        if let Some(k) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown key '{k}'")));
        }
        let seed: u64 = kv.require("seed")?;
        let d = Self::desk(seed);
        let data = GeneratorConfig {
            n_classes: kv.require("classes")?,
            n_per_class: kv.require("per_class")?,
            image_size: kv.require("image_size")?,
            channels: kv.require("channels")?,
        };
        let texture = match (
            kv.optional::<f64>("shift.texture_frequency")?,
            kv.optional::<f64>("shift.texture_amplitude")?,
        ) {
            (Some(frequency), Some(amplitude)) => Some(Texture { frequency, amplitude }),
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "shift.texture_frequency and shift.texture_amplitude go together".into(),
                ))
            }
        };
        let channel_bias = match kv.optional::<String>("shift.channel_bias")? {
            Some(s) => Some(parse_list("shift.channel_bias", &s)?),
            None => None,
        };
        let shift = ShiftConfig {
            contrast_inversion: kv.get_or("shift.contrast_inversion", false)?,
            additive_texture: texture,
            channel_bias,
            elastic_jitter: kv.optional("shift.elastic_jitter")?,
            seed,
        };
        let source = TrainConfig {
            lr: kv.get_or("source.lr", d.source.lr)?,
            epochs: kv.get_or("source.epochs", d.source.epochs)?,
            batch_size: kv.get_or("source.batch_size", d.source.batch_size)?,
            seed,
            ..d.source.clone()
        };
        let calibrator = CalibratorConfig {
            epsilon: kv.get_or("calibrator.epsilon", d.calibrator.epsilon)?,
            width: kv.get_or("calibrator.width", d.calibrator.width)?,
            depth: kv.get_or("calibrator.depth", d.calibrator.depth)?,
            skip: kv.get_or("calibrator.skip", d.calibrator.skip)?,
        };
        let c = &d.calibration;
        let calibration = TrainConfig {
            lr: kv.get_or("calibrator.lr", c.lr)?,
            epochs: kv.get_or("calibrator.epochs", c.epochs)?,
            batch_size: kv.get_or("calibrator.batch_size", c.batch_size)?,
            disc_steps_per_cal_step: kv
                .get_or("calibrator.disc_steps_per_cal_step", c.disc_steps_per_cal_step)?,
            epsilon: calibrator.epsilon,
            patch_size: kv.get_or("calibrator.patch_size", c.patch_size)?,
            seed,
            log_every: kv.get_or("calibrator.log_every", c.log_every)?,
            selection: match kv.optional::<String>("calibrator.selection")? {
                Some(s) => parse_selection(&s)?,
                None => c.selection,
            },
            source_tolerance: kv.get_or("calibrator.source_tolerance", c.source_tolerance)?,
            validation_size: kv.get_or("calibrator.validation_size", c.validation_size)?,
        };
        let cfg = Self {
            seed,
            data,
            eval_per_class: kv.get_or("eval_per_class", d.eval_per_class)?,
            shift,
            source,
            calibrator,
            calibration,
            disc_hidden: kv.get_or("disc.hidden", d.disc_hidden)?,
            sweep_epochs: kv.get_or("sweep.epochs", d.sweep_epochs)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same config with every seed replaced.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.shift.seed = seed;
        self.source.seed = seed;
        self.calibration.seed = seed;
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.shift.validate(self.data.channels)?;
        self.source.validate()?;
        self.calibration.validate()?;
        self.calibrator.validate()?;
        if self.eval_per_class == 0 || self.disc_hidden == 0 || self.sweep_epochs == 0 {
            return Err(Error::Config("eval_per_class, disc.hidden and sweep.epochs must be positive".into()));
        }
        if self.calibration.patch_size > self.data.image_size {
            return Err(Error::Config("calibrator.patch_size exceeds image_size".into()));
        }
        Ok(())
    }

    /// Fully resolved config in the same format `from_text` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let none = || "none".to_owned();
        kv("seed", self.seed.to_string());
        kv("classes", self.data.n_classes.to_string());
        kv("per_class", self.data.n_per_class.to_string());
        kv("eval_per_class", self.eval_per_class.to_string());
        kv("image_size", self.data.image_size.to_string());
        kv("channels", self.data.channels.to_string());
        kv("shift.contrast_inversion", self.shift.contrast_inversion.to_string());
        let t = self.shift.additive_texture;
        kv("shift.texture_frequency", t.map_or_else(none, |t| t.frequency.to_string()));
        kv("shift.texture_amplitude", t.map_or_else(none, |t| t.amplitude.to_string()));
        kv(
            "shift.channel_bias",
            self.shift.channel_bias.as_ref().map_or_else(none, |b| {
                b.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
            }),
        );
        kv("shift.elastic_jitter", self.shift.elastic_jitter.map_or_else(none, |j| j.to_string()));
        kv("source.lr", self.source.lr.to_string());
        kv("source.epochs", self.source.epochs.to_string());
        kv("source.batch_size", self.source.batch_size.to_string());
        kv("calibrator.width", self.calibrator.width.to_string());
        kv("calibrator.depth", self.calibrator.depth.to_string());
        kv("calibrator.skip", self.calibrator.skip.to_string());
        kv("calibrator.epsilon", self.calibrator.epsilon.to_string());
        let c = &self.calibration;
        kv("calibrator.lr", c.lr.to_string());
        kv("calibrator.epochs", c.epochs.to_string());
        kv("calibrator.batch_size", c.batch_size.to_string());
        kv("calibrator.disc_steps_per_cal_step", c.disc_steps_per_cal_step.to_string());
        kv("calibrator.patch_size", c.patch_size.to_string());
        kv("calibrator.log_every", c.log_every.to_string());
        kv(
            "calibrator.selection",
            match c.selection {
                Selection::Last => "last",
                Selection::Confusion => "confusion",
            }
            .to_owned(),
        );
        kv("calibrator.source_tolerance", c.source_tolerance.to_string());
        kv("calibrator.validation_size", c.validation_size.to_string());
        kv("disc.hidden", self.disc_hidden.to_string());
        kv("sweep.epochs", self.sweep_epochs.to_string());
        s
    }

    /// Training pair followed by a disjoint labelled evaluation pair.
    pub fn datasets(&self) -> Result<Datasets> {
        let (source, target) = generate_split(&self.data, &self.shift, self.seed, 0)?;
        let eval = GeneratorConfig { n_per_class: self.eval_per_class, ..self.data };
        let offset = self.data.n_classes * self.data.n_per_class;
        let (source_eval, target_eval) = generate_split(&eval, &self.shift, self.seed, offset)?;
        Ok(Datasets { source, target, source_eval, target_eval: target_eval.with_labels_visible(true) })
    }

    pub fn classifier_arch(&self) -> ClassifierArch {
        ClassifierArch::desk(self.data.channels, self.data.image_size, self.data.n_classes)
    }

    pub fn build_classifier(&self) -> Result<Network> {
        build_classifier(self.classifier_arch().spec(), self.seed)
    }

    /// Fresh calibrator and both discriminators, seeded from the run seed.
    pub fn build_adversarial(&self, epsilon: f64) -> Result<(Network, Network, Network)> {
        let (c, s) = (self.data.channels, self.data.image_size);
        let cal_cfg = CalibratorConfig { epsilon, ..self.calibrator };
        let patch = self.calibration.patch_size;
        let feat = self.classifier_arch().hidden;
        Ok((
            build_calibrator(&cal_cfg, c, s, s, self.seed.wrapping_add(1))?,
            build_discriminator(
                DiscriminatorKind::Pixel,
                c * patch * patch,
                self.disc_hidden,
                self.seed.wrapping_add(2),
            )?,
            build_discriminator(DiscriminatorKind::Feature, feat, self.disc_hidden, self.seed.wrapping_add(3))?,
        ))
    }
}

pub struct Datasets {
    pub source: DomainDataset,
    /// Labels hidden.
    pub target: DomainDataset,
    pub source_eval: DomainDataset,
    /// Labels visible; evaluation only.
    pub target_eval: DomainDataset,
}
