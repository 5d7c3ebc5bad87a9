//! Flat `key = value` run configuration with `--key=value` overrides.
//!
//! Keys accept `snake_case` or `kebab-case`. Every field is validated before
//! use, and [`RunConfig::to_text`] gives the canonical form embedded in
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentConfig;
use crate::autoencoder::AeTrainConfig;
use crate::baseline::MfConfig;
use crate::dataset::{InteractionFormat, ItemSplitRule, SplitRules, UserSplitRule};
use crate::error::{Result, TmagError};
use crate::eval::MapNorm;
use crate::graph::LayerCombine;
use crate::metalearn::{MetaConfig, MetaOrder};
use crate::model::{GenGradFlow, InfoNceDenominator, LossWeights, ModelConfig};
use crate::taskgen::KMeansConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workdir: String,

    pub interactions: String,
    /// `tsv` or `movielens`.
    pub format: String,
    pub user_attributes: String,
    pub item_attributes: String,
    /// Item attribute field holding a release year, for `item_split = release_year`.
    pub release_field: String,
    pub rating_threshold: f64,
    pub min_interactions: u64,
    pub max_interactions: u64,
    pub user_split: String,
    pub item_split: String,
    pub existing_ratio: f64,
    pub query_size: u64,
    /// Share of existing users held out for early stopping.
    pub validation_ratio: f64,
    /// Max support interactions per evaluation user; 0 keeps all.
    pub support_cap: u64,
    /// Share of meta-train positives dropped before training (sparsity studies).
    pub train_drop: f64,

    pub latent_dim: u64,
    pub ae_lambda: f64,
    pub ae_lr: f64,
    pub ae_epochs: u64,
    pub ae_tol: f64,
    pub ae_reg_biases: bool,

    pub clusters: u64,
    pub kmeans_n_init: u64,
    pub kmeans_max_iters: u64,
    /// `latent` or `raw` attribute vectors.
    pub cluster_on: String,

    pub dim: u64,
    pub layers: u64,
    pub layer_combine: String,

    pub augment: bool,
    pub alpha: f64,
    pub threshold: f64,
    pub neg_per_pos: u64,
    pub augment_top: u64,
    pub augment_every: u64,
    pub gen_grad: String,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub infonce_denominator: String,
    pub finetune_ae: bool,
    pub contrast_cap: u64,

    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: u64,
    pub test_steps: u64,
    pub test_lr: f64,
    pub order: String,
    pub epochs: u64,
    pub patience: u64,
    pub batch_tasks: u64,
    pub task_subgraph: bool,
    pub hvp_eps_scale: f64,

    pub top_k: u64,
    pub map_norm: String,

    pub mf_dim: u64,
    pub mf_lr: f64,
    pub mf_epochs: u64,
    pub mf_reg: f64,
    pub mf_finetune_lr: f64,
    pub mf_finetune_steps: u64,

    /// Float width of checkpoint payloads, 32 or 64.
    pub checkpoint_precision: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workdir: "tmag-run".into(),
            interactions: String::new(),
            format: "tsv".into(),
            user_attributes: String::new(),
            item_attributes: String::new(),
            release_field: String::new(),
            rating_threshold: 3.0,
            min_interactions: 13,
            max_interactions: 100,
            user_split: "random".into(),
            item_split: "random".into(),
            existing_ratio: 0.8,
            query_size: 10,
            validation_ratio: 0.1,
            support_cap: 0,
            train_drop: 0.0,
            latent_dim: 64,
            ae_lambda: 1e-4,
            ae_lr: 0.05,
            ae_epochs: 500,
            ae_tol: 1e-6,
            ae_reg_biases: true,
            clusters: 40,
            kmeans_n_init: 10,
            kmeans_max_iters: 300,
            cluster_on: "latent".into(),
            dim: 64,
            layers: 3,
            layer_combine: "last".into(),
            augment: true,
            alpha: 0.8,
            threshold: 0.8,
            neg_per_pos: 4,
            augment_top: 500,
            augment_every: 1,
            gen_grad: "full".into(),
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.01,
            tau: 0.2,
            infonce_denominator: "literal".into(),
            finetune_ae: false,
            contrast_cap: 512,
            inner_lr: 0.001,
            outer_lr: 0.001,
            inner_steps: 1,
            test_steps: 1,
            test_lr: 0.001,
            order: "first-order".into(),
            epochs: 50,
            patience: 10,
            batch_tasks: 1,
            task_subgraph: false,
            hvp_eps_scale: 1e-3,
            top_k: 10,
            map_norm: "min".into(),
            mf_dim: 64,
            mf_lr: 0.05,
            mf_epochs: 30,
            mf_reg: 1e-4,
            mf_finetune_lr: 0.05,
            mf_finetune_steps: 5,
            checkpoint_precision: 32,
        }
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().trim_start_matches("--").replace('-', "_")
}

fn coerce(key: &str, raw: &str, like: &Value) -> Result<Value> {
    let raw = raw.trim();
    let bad = || TmagError::Usage(format!("config {key}: cannot parse {raw:?}"));
    Ok(match like {
        Value::Bool(_) => Value::Bool(match raw {
            "true" | "1" | "yes" | "on" => true,
            "false" | "0" | "no" | "off" => false,
            _ => return Err(bad()),
        }),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => Value::from(raw.parse::<f64>().map_err(|_| bad())?),
        _ => Value::String(raw.trim_matches('"').to_owned()),
    })
}

impl RunConfig {
    /// Apply `key = value` pairs on top of `self`.
    pub fn apply<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(self)? else {
            unreachable!("struct serializes to an object")
        };
        for (k, v) in pairs {
            let key = normalize_key(k);
            let like = map
                .get(&key)
                .ok_or_else(|| TmagError::Usage(format!("unknown config key {k:?}")))?;
            let value = coerce(&key, v, like)?;
            map.insert(key, value);
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(map))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a `key = value` file; `#` starts a comment.
    pub fn parse_text(&self, text: &str, origin: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TmagError::Parse {
                path: origin.to_owned(),
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            pairs.push((k.trim(), v.trim()));
        }
        self.apply(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::default().parse_text(&fs::read_to_string(path)?, path)
    }

    /// Overrides of the form `--key=value` or `key=value`.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| TmagError::Usage(format!("override {o:?} is not key=value")))?;
            pairs.push((k, v));
        }
        self.apply(pairs)
    }

    /// Canonical `key = value` text, keys sorted.
    pub fn to_text(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("plain struct") else {
            unreachable!()
        };
        let map: Map<String, Value> = map;
        let mut out = String::new();
        for (k, v) in map {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn workdir(&self) -> PathBuf {
        PathBuf::from(&self.workdir)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(TmagError::Usage(m));
        let unit_open = |x: f64| x > 0.0 && x < 1.0;
        if !unit_open(self.existing_ratio) {
            return usage(format!("existing_ratio {} outside (0, 1)", self.existing_ratio));
        }
        if !(0.0..1.0).contains(&self.validation_ratio) {
            return usage(format!("validation_ratio {} outside [0, 1)", self.validation_ratio));
        }
        if !(0.0..1.0).contains(&self.train_drop) {
            return usage(format!("train_drop {} outside [0, 1)", self.train_drop));
        }
        if self.min_interactions > self.max_interactions {
            return usage("min_interactions exceeds max_interactions".into());
        }
        if self.query_size == 0 {
            return usage("query_size must be at least 1".into());
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("clusters", self.clusters),
            ("kmeans_n_init", self.kmeans_n_init),
            ("dim", self.dim),
            ("top_k", self.top_k),
            ("batch_tasks", self.batch_tasks),
            ("mf_dim", self.mf_dim),
            ("augment_top", self.augment_top),
        ] {
            if v == 0 {
                return usage(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [("ae_lr", self.ae_lr), ("mf_lr", self.mf_lr), ("hvp_eps_scale", self.hvp_eps_scale)] {
            if !(v > 0.0) {
                return usage(format!("{name} must be positive"));
            }
        }
        if self.ae_lambda < 0.0 || self.mf_reg < 0.0 || self.mf_finetune_lr < 0.0 {
            return usage("regularization weights and fine-tune rate must be non-negative".into());
        }
        if self.test_steps > 5 {
            return usage(format!("test_steps {} outside 0..=5", self.test_steps));
        }
        if !matches!(self.checkpoint_precision, 32 | 64) {
            return usage(format!("checkpoint_precision {} must be 32 or 64", self.checkpoint_precision));
        }
        if !matches!(self.cluster_on.as_str(), "latent" | "raw") {
            return usage(format!("cluster_on {:?} must be latent or raw", self.cluster_on));
        }
        self.interaction_format()?;
        self.split_rules()?;
        self.augment_config().validate()?;
        self.model_config()?;
        self.meta_config()?.validate()?;
        self.map_norm()?;
        Ok(())
    }

    pub fn interaction_format(&self) -> Result<InteractionFormat> {
        self.format.parse()
    }

    pub fn split_rules(&self) -> Result<SplitRules> {
        Ok(SplitRules {
            user_rule: self.user_split.replace('-', "_").parse::<UserSplitRule>()?,
            item_rule: self.item_split.replace('-', "_").parse::<ItemSplitRule>()?,
            ratio: self.existing_ratio,
            seed: self.seed,
        })
    }

    pub fn ae_config(&self, stream: u64) -> AeTrainConfig {
        AeTrainConfig {
            latent_dim: self.latent_dim as usize,
            lambda: self.ae_lambda,
            lr: self.ae_lr,
            max_epochs: self.ae_epochs as usize,
            tol: self.ae_tol,
            reg_biases: self.ae_reg_biases,
            seed: self.seed,
            stream,
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.clusters as usize,
            max_iters: self.kmeans_max_iters as usize,
            n_init: self.kmeans_n_init as usize,
            seed: self.seed,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            alpha: self.alpha,
            threshold: self.threshold,
            neg_per_pos: self.neg_per_pos as usize,
            top_per_user: self.augment_top as usize,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let combine = match self.layer_combine.as_str() {
            "last" => LayerCombine::Last,
            "mean" => LayerCombine::Mean,
            o => return Err(TmagError::Usage(format!("layer_combine {o:?} must be last or mean"))),
        };
        let gen_grad = match self.gen_grad.as_str() {
            "full" => GenGradFlow::Full,
            "aug-only" | "aug_only" => GenGradFlow::AugOnly,
            o => return Err(TmagError::Usage(format!("gen_grad {o:?} must be full or aug-only"))),
        };
        let infonce = match self.infonce_denominator.as_str() {
            "literal" => InfoNceDenominator::Literal,
            "with-positive" | "with_positive" => InfoNceDenominator::WithPositive,
            o => {
                return Err(TmagError::Usage(format!(
                    "infonce_denominator {o:?} must be literal or with-positive"
                )))
            }
        };
        let weights = LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            tau: self.tau,
        };
        weights.validate()?;
        Ok(ModelConfig {
            layers: self.layers as usize,
            combine,
            weights,
            alpha: self.alpha,
            gen_grad,
            infonce,
            finetune_ae: self.finetune_ae,
        })
    }

    pub fn meta_config(&self) -> Result<MetaConfig> {
        Ok(MetaConfig {
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            inner_steps: self.inner_steps as usize,
            test_steps: self.test_steps as usize,
            test_lr: self.test_lr,
            order: self.order.parse::<MetaOrder>()?,
            epochs: self.epochs as usize,
            augment_every: if self.augment { self.augment_every as usize } else { 0 },
            patience: self.patience as usize,
            batch_tasks: self.batch_tasks as usize,
            task_subgraph: self.task_subgraph,
            hvp_eps_scale: self.hvp_eps_scale,
            neg_per_pos: self.neg_per_pos as usize,
            contrast_cap: self.contrast_cap as usize,
            top_k: self.top_k as usize,
            seed: self.seed,
        })
    }

    pub fn map_norm(&self) -> Result<MapNorm> {
        self.map_norm.parse()
    }

    pub fn mf_config(&self) -> MfConfig {
        MfConfig {
            dim: self.mf_dim as usize,
            lr: self.mf_lr,
            epochs: self.mf_epochs as usize,
            reg: self.mf_reg,
            seed: self.seed,
        }
    }
}
