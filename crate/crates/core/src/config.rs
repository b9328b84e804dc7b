//! `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::dataio::{ConditionalMap, DomainId, DomainSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetDataset {
    Mnist,
    Fashion,
}

impl TargetDataset {
    pub fn name(self) -> &'static str {
        match self {
            TargetDataset::Mnist => "mnist",
            TargetDataset::Fashion => "fashion",
        }
    }
}

impl FromStr for TargetDataset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mnist" => Ok(TargetDataset::Mnist),
            "fashion" => Ok(TargetDataset::Fashion),
            _ => Err(format!("expected `mnist` or `fashion`, got `{s}`")),
        }
    }
}

/// Per-domain training-set size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSize {
    Count(usize),
    Full,
}

impl TrainSize {
    pub fn limit(self) -> Option<usize> {
        match self {
            TrainSize::Count(n) => Some(n),
            TrainSize::Full => None,
        }
    }
}

impl std::fmt::Display for TrainSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainSize::Count(n) => write!(f, "{n}"),
            TrainSize::Full => f.write_str("full"),
        }
    }
}

impl FromStr for TrainSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "full" {
            return Ok(TrainSize::Full);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 2 => Ok(TrainSize::Count(n)),
            _ => Err(format!(
                "expected `full` or a count of at least 2, got `{s}`"
            )),
        }
    }
}

/// Class-pairing law: an explicit map, or one derived from the domains
/// (`0→5, …, 4→9` for the digit halves, identity otherwise).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapChoice {
    Default,
    Explicit(ConditionalMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mnist_dir: PathBuf,
    pub fashion_dir: PathBuf,
    pub target_dataset: TargetDataset,
    /// `None` picks the dataset-dependent default.
    pub domain1_classes: Option<BTreeSet<u8>>,
    pub domain2_classes: Option<BTreeSet<u8>>,
    pub map: MapChoice,
    /// When set, replaces the map with a seeded shuffle.
    pub shuffle_seed: Option<u64>,
    pub train_size: TrainSize,
    pub heldout_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_reg: f64,
    pub alpha: f64,
    pub latent_dim: usize,
    pub vae_epochs: usize,
    pub vae_batch: usize,
    pub vae_lr: f64,
    pub gan_steps: usize,
    pub gan_batch: usize,
    pub gan_lr: f64,
    pub gan_width: usize,
    pub mean_mode: bool,
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    pub classifier_train_size: TrainSize,
    pub samples_per_class: usize,
    pub shuffles: usize,
    pub diversity_conditionals: usize,
    pub diversity_draws: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn env_dir(var: &str, fallback: &str) -> PathBuf {
    std::env::var_os(var)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(fallback))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mnist_dir: env_dir("MNIST_DIR", "data/mnist"),
            fashion_dir: env_dir("FASHION_MNIST_DIR", "data/fashion"),
            target_dataset: TargetDataset::Mnist,
            domain1_classes: None,
            domain2_classes: None,
            map: MapChoice::Default,
            shuffle_seed: None,
            train_size: TrainSize::Count(2000),
            heldout_size: 500,
            lambda1: 1.0,
            lambda2: 0.1,
            lambda_reg: 0.1,
            alpha: 0.1,
            latent_dim: 100,
            vae_epochs: 20,
            vae_batch: 64,
            vae_lr: 1e-3,
            gan_steps: 2000,
            gan_batch: 64,
            gan_lr: 2e-4,
            gan_width: 512,
            mean_mode: false,
            classifier_epochs: 4,
            classifier_batch: 64,
            classifier_lr: 1e-3,
            classifier_train_size: TrainSize::Full,
            samples_per_class: 200,
            shuffles: 0,
            diversity_conditionals: 16,
            diversity_draws: 8,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_classes(s: &str) -> std::result::Result<BTreeSet<u8>, String> {
    let mut out = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let c = if let Some((a, b)) = part.split_once('-') {
            let a: u8 = a.trim().parse().map_err(|_| format!("bad class `{a}`"))?;
            let b: u8 = b.trim().parse().map_err(|_| format!("bad class `{b}`"))?;
            if a > b {
                return Err(format!("empty range `{part}`"));
            }
            (a..=b).collect::<Vec<_>>()
        } else {
            vec![part.parse().map_err(|_| format!("bad class `{part}`"))?]
        };
        for v in c {
            if v > 9 {
                return Err(format!("class {v} is not 0-9"));
            }
            out.insert(v);
        }
    }
    if out.is_empty() {
        return Err("empty class set".into());
    }
    Ok(out)
}

fn classes_text(c: &BTreeSet<u8>) -> String {
    c.iter().map(u8::to_string).collect::<Vec<_>>().join(",")
}

fn nonneg(v: f64) -> std::result::Result<f64, String> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be a nonnegative number, got {v}"))
    }
}

fn positive(v: usize) -> std::result::Result<usize, String> {
    if v >= 1 {
        Ok(v)
    } else {
        Err("must be at least 1".into())
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true/false, got `{v}`")),
    }
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                key: None,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value).map_err(|msg| Error::Config {
                line: i + 1,
                key: Some(key.to_string()),
                msg,
            })?;
        }
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "mnist_dir" => self.mnist_dir = PathBuf::from(v),
            "fashion_dir" => self.fashion_dir = PathBuf::from(v),
            "target_dataset" => self.target_dataset = v.parse()?,
            "domain1_classes" => self.domain1_classes = Some(parse_classes(v)?),
            "domain2_classes" => self.domain2_classes = Some(parse_classes(v)?),
            "map" => {
                self.map = if v == "default" {
                    MapChoice::Default
                } else {
                    MapChoice::Explicit(ConditionalMap::parse(v).map_err(|e| e.to_string())?)
                }
            }
            "shuffle_seed" => {
                self.shuffle_seed = if v == "none" {
                    None
                } else {
                    Some(parse_num(v)?)
                }
            }
            "train_size" => self.train_size = v.parse()?,
            "heldout_size" => self.heldout_size = parse_num(v)?,
            "lambda1" => self.lambda1 = nonneg(parse_num(v)?)?,
            "lambda2" => self.lambda2 = nonneg(parse_num(v)?)?,
            "lambda_reg" => self.lambda_reg = nonneg(parse_num(v)?)?,
            "alpha" => self.alpha = nonneg(parse_num(v)?)?,
            "latent_dim" => self.latent_dim = positive(parse_num(v)?)?,
            "vae_epochs" => self.vae_epochs = parse_num(v)?,
            "vae_batch" => self.vae_batch = positive(parse_num(v)?)?,
            "vae_lr" => self.vae_lr = nonneg(parse_num(v)?)?,
            "gan_steps" => self.gan_steps = parse_num(v)?,
            "gan_batch" => self.gan_batch = positive(parse_num(v)?)?,
            "gan_lr" => self.gan_lr = nonneg(parse_num(v)?)?,
            "gan_width" => self.gan_width = positive(parse_num(v)?)?,
            "mean_mode" => self.mean_mode = parse_bool(v)?,
            "classifier_epochs" => self.classifier_epochs = parse_num(v)?,
            "classifier_batch" => self.classifier_batch = positive(parse_num(v)?)?,
            "classifier_lr" => self.classifier_lr = nonneg(parse_num(v)?)?,
            "classifier_train_size" => self.classifier_train_size = v.parse()?,
            "samples_per_class" => self.samples_per_class = positive(parse_num(v)?)?,
            "shuffles" => self.shuffles = parse_num(v)?,
            "diversity_conditionals" => self.diversity_conditionals = positive(parse_num(v)?)?,
            "diversity_draws" => self.diversity_draws = parse_num(v)?,
            "seed" => self.seed = parse_num(v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every field as `key = value`; [`RunConfig::parse`] reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mnist_dir", self.mnist_dir.display().to_string());
        kv("fashion_dir", self.fashion_dir.display().to_string());
        kv("target_dataset", self.target_dataset.name().into());
        if let Some(c) = &self.domain1_classes {
            kv("domain1_classes", classes_text(c));
        }
        if let Some(c) = &self.domain2_classes {
            kv("domain2_classes", classes_text(c));
        }
        kv(
            "map",
            match &self.map {
                MapChoice::Default => "default".into(),
                MapChoice::Explicit(m) => m.to_string(),
            },
        );
        kv(
            "shuffle_seed",
            self.shuffle_seed.map_or("none".into(), |s| s.to_string()),
        );
        kv("train_size", self.train_size.to_string());
        kv("heldout_size", self.heldout_size.to_string());
        kv("lambda1", self.lambda1.to_string());
        kv("lambda2", self.lambda2.to_string());
        kv("lambda_reg", self.lambda_reg.to_string());
        kv("alpha", self.alpha.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("vae_epochs", self.vae_epochs.to_string());
        kv("vae_batch", self.vae_batch.to_string());
        kv("vae_lr", self.vae_lr.to_string());
        kv("gan_steps", self.gan_steps.to_string());
        kv("gan_batch", self.gan_batch.to_string());
        kv("gan_lr", self.gan_lr.to_string());
        kv("gan_width", self.gan_width.to_string());
        kv("mean_mode", self.mean_mode.to_string());
        kv("classifier_epochs", self.classifier_epochs.to_string());
        kv("classifier_batch", self.classifier_batch.to_string());
        kv("classifier_lr", self.classifier_lr.to_string());
        kv(
            "classifier_train_size",
            self.classifier_train_size.to_string(),
        );
        kv("samples_per_class", self.samples_per_class.to_string());
        kv("shuffles", self.shuffles.to_string());
        kv(
            "diversity_conditionals",
            self.diversity_conditionals.to_string(),
        );
        kv("diversity_draws", self.diversity_draws.to_string());
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }

    pub fn domain_specs(&self) -> Result<(DomainSpec, DomainSpec)> {
        let (d1, d2): (BTreeSet<u8>, BTreeSet<u8>) = match self.target_dataset {
            TargetDataset::Mnist => ((0..5).collect(), (5..10).collect()),
            TargetDataset::Fashion => ((0..10).collect(), (0..10).collect()),
        };
        let d1 = self.domain1_classes.clone().unwrap_or(d1);
        let d2 = self.domain2_classes.clone().unwrap_or(d2);
        if self.target_dataset == TargetDataset::Mnist {
            if let Some(c) = d1.intersection(&d2).next() {
                return Err(Error::Usage(format!(
                    "digit domains must be disjoint; class {c} is in both"
                )));
            }
        }
        Ok((
            DomainSpec::new(DomainId::One, d1),
            DomainSpec::new(DomainId::Two, d2),
        ))
    }

    /// The domain 1 → domain 2 pairing law in effect.
    pub fn conditional_map(&self) -> Result<ConditionalMap> {
        let (s1, s2) = self.domain_specs()?;
        let sources: Vec<u8> = s1.classes.iter().copied().collect();
        let targets: Vec<u8> = s2.classes.iter().copied().collect();
        if let Some(seed) = self.shuffle_seed {
            return ConditionalMap::shuffled(&sources, &targets, seed);
        }
        let map = match &self.map {
            MapChoice::Explicit(m) => m.clone(),
            MapChoice::Default => {
                if sources.len() != targets.len() {
                    return Err(Error::Usage(
                        "domains differ in size; give an explicit map".into(),
                    ));
                }
                ConditionalMap::new(sources.iter().copied().zip(targets.iter().copied()))?
            }
        };
        let ok = map.sources().iter().all(|c| s1.classes.contains(c))
            && map.targets().iter().all(|c| s2.classes.contains(c));
        if !ok {
            return Err(Error::Usage(format!(
                "map {map} does not pair domain 1 classes with domain 2 classes"
            )));
        }
        Ok(map)
    }

    /// Stage seed derived from the master seed by a fixed offset.
    pub fn stage_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(offset)
    }
}

/// Fixed offsets of [`RunConfig::stage_seed`].
pub mod seeds {
    pub const SUBSET_1: u64 = 11;
    pub const SUBSET_2: u64 = 12;
    pub const HELDOUT: u64 = 13;
    pub const VAE_1: u64 = 21;
    pub const VAE_2: u64 = 22;
    pub const GAN_1TO2: u64 = 31;
    pub const GAN_2TO1: u64 = 32;
    pub const CLASSIFIER: u64 = 41;
    pub const EVAL: u64 = 51;
    pub const SHUFFLE: u64 = 61;
    pub const SAMPLE: u64 = 71;
    pub const DIVERSITY: u64 = 81;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(
            RunConfig::parse("# only a comment\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn sets_values_with_comments() {
        let c =
            RunConfig::parse("lambda_reg = 0.1\n gan_steps=10 # short\ntrain_size = full").unwrap();
        assert_eq!(c.lambda_reg, 0.1);
        assert_eq!(c.gan_steps, 10);
        assert_eq!(c.train_size, TrainSize::Full);
    }

    #[test]
    fn errors_name_line_and_key() {
        let e = RunConfig::parse("seed = 1\nlambda_reg = banana")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2") && e.contains("lambda_reg"), "{e}");
        let e = RunConfig::parse("colour = red").unwrap_err().to_string();
        assert!(e.contains("unknown key"), "{e}");
        assert!(RunConfig::parse("lambda2 = -1").is_err());
        assert!(RunConfig::parse("latent_dim = 0").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn text_round_trips() {
        let mut c =
            RunConfig::parse("map = 0:9,1:8,2:7,3:6,4:5\nshuffle_seed = 3\nalpha = 0.25").unwrap();
        c.domain1_classes = Some([0, 1, 2, 3, 4].into());
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn default_maps() {
        let c = RunConfig::default();
        assert_eq!(
            c.conditional_map().unwrap(),
            crate::dataio::default_conditional_map()
        );
        let f = RunConfig::parse("target_dataset = fashion").unwrap();
        let m = f.conditional_map().unwrap();
        assert!((0..10).all(|i| m.get(i) == Some(i)));
        let s = RunConfig::parse("shuffle_seed = 5").unwrap();
        assert_eq!(
            s.conditional_map().unwrap(),
            crate::dataio::shuffle_conditional_map(5)
        );
        let bad = RunConfig::parse("map = 5:0").unwrap();
        assert!(bad.conditional_map().is_err());
    }

    #[test]
    fn class_ranges() {
        assert_eq!(parse_classes("0-2,7").unwrap(), [0, 1, 2, 7].into());
        assert!(parse_classes("3-1").is_err());
        assert!(parse_classes("12").is_err());
    }
}
