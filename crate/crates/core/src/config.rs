//! Experiment configuration as flat `section.key=value` text.
//!
//! Every field has a default; a config file only lists overrides. Lines
//! starting with `#` and blank lines are ignored. [`ExperimentConfig::to_pairs`]
//! echoes the full resolved configuration, which is what run manifests store.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive::{AugmentationConfig, ContrastiveConfig, SyntheticSampling};
use crate::data::{DatasetFormat, SplitMode};
use crate::defense::{AggregationRule, ClipPolicy, HicsConfig, ItemDenominator};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    /// Empty means the built-in synthetic generator.
    pub path: Option<PathBuf>,
    pub format: DatasetFormat,
    /// Keep the most active users; 0 keeps everyone.
    pub users: usize,
    pub split: SplitMode,
    pub test_fraction: f64,
    pub valid_fraction: f64,
    pub negative_ratio: usize,
    pub resample_negatives: bool,
    pub hot_count: usize,
    /// Seeds synthetic generation and the train/valid/test split, shared by
    /// every run seed so variants are compared on identical data.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSection {
    pub users: usize,
    pub items: usize,
    pub median_interactions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub global_epochs: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub denominator: ItemDenominator,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveSection {
    pub enabled: bool,
    pub cfg: ContrastiveConfig,
    pub pool_size: usize,
    pub synthetic_items: usize,
    pub synthetic_sampling: SyntheticSampling,
    pub synthetic_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSection {
    pub enabled: bool,
    pub sample_size: usize,
    pub tau: f64,
    pub lr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Ahum,
    Psmu,
}

impl FromStr for AttackKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "" => Ok(Self::None),
            "ahum" | "a-hum" => Ok(Self::Ahum),
            "psmu" => Ok(Self::Psmu),
            other => Err(format!("unknown attack kind `{other}` (none, ahum, psmu)")),
        }
    }
}

impl Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Ahum => "ahum",
            Self::Psmu => "psmu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub fraction: f64,
    /// First poisoned round (0-based); `None` means `T/2`.
    pub start: Option<usize>,
    /// Malicious clients join every batch of an attack round instead of one.
    pub every_batch: bool,
    /// Explicit targets; empty means one seeded cold item.
    pub targets: Vec<usize>,
    pub attacker_items: usize,
    pub alternatives: usize,
    pub lr: f64,
    pub steps: usize,
    pub hard_steps: usize,
    /// Cap on poisoned item-delta norms as a multiple of the batch's median
    /// benign item-delta norm; 0 disables.
    pub norm_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSection {
    pub rule: String,
    pub trim: usize,
    pub hics_sparsity: f64,
    /// 0 selects the adaptive median threshold.
    pub hics_threshold: f64,
    pub hics_multiplier: f64,
    pub hics_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub contrastive: ContrastiveSection,
    pub regularizer: RegularizerSection,
    pub attack: AttackSection,
    pub defense: DefenseSection,
    pub poc_alpha: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection {
                path: None,
                format: DatasetFormat::Tsv,
                users: 200,
                split: SplitMode::Temporal,
                test_fraction: 0.2,
                valid_fraction: 0.1,
                negative_ratio: 4,
                resample_negatives: true,
                hot_count: crate::data::DEFAULT_HOT_COUNT,
                seed: 2024,
            },
            synth: SynthSection {
                users: 200,
                items: 600,
                median_interactions: 28,
            },
            train: TrainSection {
                dim: crate::model::DEFAULT_DIM,
                hidden: crate::model::DEFAULT_HIDDEN.to_vec(),
                global_epochs: 20,
                local_epochs: 1,
                batch_size: 32,
                lr: 0.001,
                denominator: ItemDenominator::Touching,
                top_k: 20,
            },
            contrastive: ContrastiveSection {
                enabled: false,
                cfg: ContrastiveConfig::default(),
                pool_size: 60,
                synthetic_items: 30,
                synthetic_sampling: SyntheticSampling::Popularity,
                synthetic_steps: 1,
            },
            regularizer: RegularizerSection {
                enabled: false,
                sample_size: 512,
                tau: 0.2,
                lr: 0.001,
                steps: 12,
            },
            attack: AttackSection {
                kind: AttackKind::None,
                fraction: 0.001,
                start: None,
                every_batch: true,
                targets: Vec::new(),
                attacker_items: 30,
                alternatives: 20,
                lr: 0.001,
                steps: 20,
                hard_steps: 50,
                norm_cap: 0.0,
            },
            defense: DefenseSection {
                rule: "fedavg".into(),
                trim: 1,
                hics_sparsity: 0.3,
                hics_threshold: 0.0,
                hics_multiplier: 1.0,
                hics_window: 20,
            },
            poc_alpha: 0.0,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn parse_enum<T: serde::de::DeserializeOwned>(key: &str, value: &str, allowed: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.trim().to_ascii_lowercase()))
        .map_err(|_| Error::config(key, format!("unknown value `{value}` (expected {allowed})")))
}

impl ExperimentConfig {
    /// Parses `key=value` lines on top of the defaults and validates.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Sets one field by its flat key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "dataset.path" => self.dataset.path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "dataset.format" => self.dataset.format = parse(key, v)?,
            "dataset.users" => self.dataset.users = parse(key, v)?,
            "dataset.split" => self.dataset.split = parse_enum(key, v, "temporal, random")?,
            "dataset.test_fraction" => self.dataset.test_fraction = parse(key, v)?,
            "dataset.valid_fraction" => self.dataset.valid_fraction = parse(key, v)?,
            "dataset.negative_ratio" => self.dataset.negative_ratio = parse(key, v)?,
            "dataset.resample_negatives" => self.dataset.resample_negatives = parse_bool(key, v)?,
            "dataset.hot_count" => self.dataset.hot_count = parse(key, v)?,
            "synth.users" => self.synth.users = parse(key, v)?,
            "synth.items" => self.synth.items = parse(key, v)?,
            "synth.median_interactions" => self.synth.median_interactions = parse(key, v)?,
            "dataset.seed" => self.dataset.seed = parse(key, v)?,
            "train.dim" => self.train.dim = parse(key, v)?,
            "train.hidden" => self.train.hidden = parse_list(key, v)?,
            "train.global_epochs" => self.train.global_epochs = parse(key, v)?,
            "train.local_epochs" => self.train.local_epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.denominator" => self.train.denominator = parse_enum(key, v, "touching, batch")?,
            "train.top_k" => self.train.top_k = parse(key, v)?,
            "contrastive.enabled" => self.contrastive.enabled = parse_bool(key, v)?,
            "contrastive.user" => self.contrastive.cfg.user = parse_bool(key, v)?,
            "contrastive.item" => self.contrastive.cfg.item = parse_bool(key, v)?,
            "contrastive.eta" => self.contrastive.cfg.aug.eta = parse(key, v)?,
            "contrastive.tau" => self.contrastive.cfg.aug.tau = parse(key, v)?,
            "contrastive.lambda_user" => self.contrastive.cfg.aug.lambda_user = parse(key, v)?,
            "contrastive.lambda_item" => self.contrastive.cfg.aug.lambda_item = parse(key, v)?,
            "contrastive.item_views" => {
                self.contrastive.cfg.item_views = parse_enum(key, v, "optimization, noise")?
            }
            "contrastive.view_lr" => self.contrastive.cfg.view_lr = parse(key, v)?,
            "contrastive.pool_size" => self.contrastive.pool_size = parse(key, v)?,
            "contrastive.synthetic_items" => self.contrastive.synthetic_items = parse(key, v)?,
            "contrastive.synthetic_sampling" => {
                self.contrastive.synthetic_sampling = parse_enum(key, v, "popularity, uniform")?
            }
            "contrastive.synthetic_steps" => self.contrastive.synthetic_steps = parse(key, v)?,
            "regularizer.enabled" => self.regularizer.enabled = parse_bool(key, v)?,
            "regularizer.sample_size" => self.regularizer.sample_size = parse(key, v)?,
            "regularizer.tau" => self.regularizer.tau = parse(key, v)?,
            "regularizer.lr" => self.regularizer.lr = parse(key, v)?,
            "regularizer.steps" => self.regularizer.steps = parse(key, v)?,
            "attack.kind" => self.attack.kind = parse(key, v)?,
            "attack.fraction" => self.attack.fraction = parse(key, v)?,
            "attack.start" => {
                self.attack.start = if v.is_empty() || v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "attack.every_batch" => self.attack.every_batch = parse_bool(key, v)?,
            "attack.targets" => self.attack.targets = parse_list(key, v)?,
            "attack.attacker_items" => self.attack.attacker_items = parse(key, v)?,
            "attack.alternatives" => self.attack.alternatives = parse(key, v)?,
            "attack.lr" => self.attack.lr = parse(key, v)?,
            "attack.steps" => self.attack.steps = parse(key, v)?,
            "attack.hard_steps" => self.attack.hard_steps = parse(key, v)?,
            "attack.norm_cap" => self.attack.norm_cap = parse(key, v)?,
            "defense.rule" => self.defense.rule = v.to_ascii_lowercase(),
            "defense.trim" => self.defense.trim = parse(key, v)?,
            "defense.hics_sparsity" => self.defense.hics_sparsity = parse(key, v)?,
            "defense.hics_threshold" => self.defense.hics_threshold = parse(key, v)?,
            "defense.hics_multiplier" => self.defense.hics_multiplier = parse(key, v)?,
            "defense.hics_window" => self.defense.hics_window = parse(key, v)?,
            "poc.alpha" => self.poc_alpha = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let c = &self.contrastive;
        let pairs: Vec<(&str, String)> = vec![
            (
                "dataset.path",
                self.dataset.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            (
                "dataset.format",
                match self.dataset.format {
                    DatasetFormat::Tsv => "tsv".into(),
                    DatasetFormat::MovieLensDat => "movielens".into(),
                },
            ),
            ("dataset.users", self.dataset.users.to_string()),
            ("dataset.split", enum_name(&self.dataset.split)),
            ("dataset.test_fraction", self.dataset.test_fraction.to_string()),
            ("dataset.valid_fraction", self.dataset.valid_fraction.to_string()),
            ("dataset.negative_ratio", self.dataset.negative_ratio.to_string()),
            ("dataset.resample_negatives", self.dataset.resample_negatives.to_string()),
            ("dataset.hot_count", self.dataset.hot_count.to_string()),
            ("synth.users", self.synth.users.to_string()),
            ("synth.items", self.synth.items.to_string()),
            ("synth.median_interactions", self.synth.median_interactions.to_string()),
            ("dataset.seed", self.dataset.seed.to_string()),
            ("train.dim", self.train.dim.to_string()),
            ("train.hidden", join(&self.train.hidden)),
            ("train.global_epochs", self.train.global_epochs.to_string()),
            ("train.local_epochs", self.train.local_epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.denominator", enum_name(&self.train.denominator)),
            ("train.top_k", self.train.top_k.to_string()),
            ("contrastive.enabled", c.enabled.to_string()),
            ("contrastive.user", c.cfg.user.to_string()),
            ("contrastive.item", c.cfg.item.to_string()),
            ("contrastive.eta", c.cfg.aug.eta.to_string()),
            ("contrastive.tau", c.cfg.aug.tau.to_string()),
            ("contrastive.lambda_user", c.cfg.aug.lambda_user.to_string()),
            ("contrastive.lambda_item", c.cfg.aug.lambda_item.to_string()),
            ("contrastive.item_views", enum_name(&c.cfg.item_views)),
            ("contrastive.view_lr", c.cfg.view_lr.to_string()),
            ("contrastive.pool_size", c.pool_size.to_string()),
            ("contrastive.synthetic_items", c.synthetic_items.to_string()),
            ("contrastive.synthetic_sampling", enum_name(&c.synthetic_sampling)),
            ("contrastive.synthetic_steps", c.synthetic_steps.to_string()),
            ("regularizer.enabled", self.regularizer.enabled.to_string()),
            ("regularizer.sample_size", self.regularizer.sample_size.to_string()),
            ("regularizer.tau", self.regularizer.tau.to_string()),
            ("regularizer.lr", self.regularizer.lr.to_string()),
            ("regularizer.steps", self.regularizer.steps.to_string()),
            ("attack.kind", self.attack.kind.to_string()),
            ("attack.fraction", self.attack.fraction.to_string()),
            (
                "attack.start",
                self.attack.start.map(|s| s.to_string()).unwrap_or_else(|| "auto".into()),
            ),
            ("attack.every_batch", self.attack.every_batch.to_string()),
            ("attack.targets", join(&self.attack.targets)),
            ("attack.attacker_items", self.attack.attacker_items.to_string()),
            ("attack.alternatives", self.attack.alternatives.to_string()),
            ("attack.lr", self.attack.lr.to_string()),
            ("attack.steps", self.attack.steps.to_string()),
            ("attack.hard_steps", self.attack.hard_steps.to_string()),
            ("attack.norm_cap", self.attack.norm_cap.to_string()),
            ("defense.rule", self.defense.rule.clone()),
            ("defense.trim", self.defense.trim.to_string()),
            ("defense.hics_sparsity", self.defense.hics_sparsity.to_string()),
            ("defense.hics_threshold", self.defense.hics_threshold.to_string()),
            ("defense.hics_multiplier", self.defense.hics_multiplier.to_string()),
            ("defense.hics_window", self.defense.hics_window.to_string()),
            ("poc.alpha", self.poc_alpha.to_string()),
            ("seeds", join(&self.seeds)),
            ("output.dir", self.output_dir.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn aggregation_rule(&self) -> Result<AggregationRule> {
        let d = &self.defense;
        let rule = match d.rule.as_str() {
            "fedavg" | "none" => AggregationRule::FedAvg,
            "krum" => AggregationRule::Krum,
            "median" => AggregationRule::Median,
            "trimmed_mean" | "trimmedmean" => AggregationRule::TrimmedMean { trim: d.trim },
            "hics" => AggregationRule::Hics(HicsConfig {
                clip: if d.hics_threshold > 0.0 {
                    ClipPolicy::Fixed(d.hics_threshold)
                } else {
                    ClipPolicy::AdaptiveMedian {
                        multiplier: d.hics_multiplier,
                        window: d.hics_window,
                    }
                },
                sparsity: d.hics_sparsity,
            }),
            other => {
                return Err(Error::config(
                    "defense.rule",
                    format!("unknown rule `{other}` (fedavg, krum, median, trimmed_mean, hics)"),
                ))
            }
        };
        rule.validate()?;
        Ok(rule)
    }

    /// First poisoned round, 0-based.
    pub fn attack_start(&self) -> usize {
        self.attack.start.unwrap_or(self.train.global_epochs / 2)
    }

    pub fn augmentation(&self) -> &AugmentationConfig {
        &self.contrastive.cfg.aug
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |k: &str, x: f64| {
            if (0.0..1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::config(k, "must lie in [0, 1)"))
            }
        };
        frac("dataset.test_fraction", self.dataset.test_fraction)?;
        frac("dataset.valid_fraction", self.dataset.valid_fraction)?;
        if self.dataset.path.is_none() && (self.synth.users == 0 || self.synth.items == 0) {
            return Err(Error::config("synth.users", "synthetic data needs users and items"));
        }
        if self.train.dim == 0 {
            return Err(Error::config("train.dim", "must be >= 1"));
        }
        if self.train.hidden.is_empty() || self.train.hidden.contains(&0) {
            return Err(Error::config("train.hidden", "needs at least one nonzero layer width"));
        }
        if self.train.global_epochs == 0 {
            return Err(Error::config("train.global_epochs", "must be >= 1"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be a positive finite number"));
        }
        if self.train.top_k == 0 {
            return Err(Error::config("train.top_k", "must be >= 1"));
        }
        self.contrastive.cfg.aug.validate()?;
        if !(self.contrastive.cfg.view_lr >= 0.0) {
            return Err(Error::config("contrastive.view_lr", "must be >= 0"));
        }
        if !(self.regularizer.tau > 0.0) {
            return Err(Error::config("regularizer.tau", "must be > 0"));
        }
        if !(self.regularizer.lr >= 0.0) {
            return Err(Error::config("regularizer.lr", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.attack.fraction) {
            return Err(Error::config("attack.fraction", "must lie in [0, 1]"));
        }
        if !(self.attack.lr >= 0.0) {
            return Err(Error::config("attack.lr", "must be >= 0"));
        }
        if !(self.attack.norm_cap >= 0.0) {
            return Err(Error::config("attack.norm_cap", "must be >= 0"));
        }
        let rule = self.aggregation_rule()?;
        if let AggregationRule::TrimmedMean { trim } = rule {
            if trim == 0 {
                return Err(Error::config("defense.trim", "must be >= 1"));
            }
        }
        if !(self.poc_alpha >= 0.0) {
            return Err(Error::config("poc.alpha", "must be >= 0"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        Ok(())
    }

    /// Applies one of the named model variants.
    pub fn apply_variant(&mut self, variant: Variant) {
        let (cl, reg) = match variant {
            Variant::Original => (false, false),
            Variant::Cl4FedRec => (true, false),
            Variant::RCl4FedRec => (true, true),
        };
        self.contrastive.enabled = cl;
        self.regularizer.enabled = reg;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Original,
    Cl4FedRec,
    RCl4FedRec,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Original, Variant::Cl4FedRec, Variant::RCl4FedRec];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Cl4FedRec => "cl4fedrec",
            Self::RCl4FedRec => "rcl4fedrec",
        }
    }
}
