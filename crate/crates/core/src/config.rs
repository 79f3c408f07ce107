//! Run configuration: a flat set of dotted keys, each with a default.
//!
//! Files are TOML; nested tables and dotted keys both flatten to the same
//! `section.key` names. `--set key=value` overrides are applied after the
//! file, and any key outside [`RunConfig::KEYS`] is rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batcher::SamplingPolicySpec;
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::scheduler::SchedulerConfig;
use crate::synthworld::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub policy: SamplingPolicySpec,

    pub epochs: usize,
    pub batch_size: usize,
    pub search_space: usize,
    pub drop_tail: bool,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub mask_prob: f64,

    pub d_emb: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub label_smoothing: f64,

    pub sim_temperature: f64,
    pub scheduler: SchedulerConfig,

    pub fn_bucket: usize,

    pub dump_sim: bool,
    pub log_batches: bool,
    pub checkpoint_every_epoch: bool,

    pub world: WorldConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            policy: SamplingPolicySpec::Falcon,
            epochs: 20,
            batch_size: 32,
            search_space: 480,
            drop_tail: true,
            lr: 1e-3,
            warmup_epochs: 1,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.02,
            mask_prob: 0.5,
            d_emb: 32,
            hidden: 64,
            temperature: 0.07,
            label_smoothing: 0.1,
            sim_temperature: 1.0,
            scheduler: SchedulerConfig::default(),
            fn_bucket: 100,
            dump_sim: false,
            log_batches: true,
            checkpoint_every_epoch: false,
            world: WorldConfig::default(),
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.trim()
        .trim_matches('"')
        .parse::<T>()
        .map_err(|e| Error::Config(format!("invalid value '{raw}' for {key}: {e}")))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "policy",
        "train.epochs",
        "train.batch_size",
        "train.search_space",
        "train.drop_tail",
        "train.lr",
        "train.warmup_epochs",
        "train.optimizer",
        "train.weight_decay",
        "train.mask_prob",
        "model.d_emb",
        "model.hidden",
        "model.temperature",
        "model.label_smoothing",
        "sim.quantiles",
        "sim.temperature",
        "scheduler.hidden",
        "scheduler.residual_blocks",
        "scheduler.lr",
        "scheduler.weight_decay",
        "scheduler.global_context",
        "scheduler.baseline_decay",
        "eval.fn_bucket",
        "log.dump_sim",
        "log.batches",
        "log.checkpoint_every_epoch",
        "world.n_concepts",
        "world.n_images",
        "world.n_texts",
        "world.n_eval_images",
        "world.d_latent",
        "world.d_img",
        "world.k_text",
        "world.vocab",
        "world.noise",
        "world.max_concepts_per_image",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let k = key;
        match key {
            "seed" => self.seed = parse_as(k, raw)?,
            "policy" => self.policy = raw.trim().trim_matches('"').parse()?,
            "train.epochs" => self.epochs = parse_as(k, raw)?,
            "train.batch_size" => self.batch_size = parse_as(k, raw)?,
            "train.search_space" => self.search_space = parse_as(k, raw)?,
            "train.drop_tail" => self.drop_tail = parse_as(k, raw)?,
            "train.lr" => self.lr = parse_as(k, raw)?,
            "train.warmup_epochs" => self.warmup_epochs = parse_as(k, raw)?,
            "train.optimizer" => self.optimizer = parse_as(k, raw)?,
            "train.weight_decay" => self.weight_decay = parse_as(k, raw)?,
            "train.mask_prob" => self.mask_prob = parse_as(k, raw)?,
            "model.d_emb" => self.d_emb = parse_as(k, raw)?,
            "model.hidden" => self.hidden = parse_as(k, raw)?,
            "model.temperature" => self.temperature = parse_as(k, raw)?,
            "model.label_smoothing" => self.label_smoothing = parse_as(k, raw)?,
            "sim.quantiles" => self.scheduler.m = parse_as(k, raw)?,
            "sim.temperature" => self.sim_temperature = parse_as(k, raw)?,
            "scheduler.hidden" => self.scheduler.hidden = parse_as(k, raw)?,
            "scheduler.residual_blocks" => self.scheduler.residual_blocks = parse_as(k, raw)?,
            "scheduler.lr" => self.scheduler.lr = parse_as(k, raw)?,
            "scheduler.weight_decay" => self.scheduler.weight_decay = parse_as(k, raw)?,
            "scheduler.global_context" => self.scheduler.global_context = parse_as(k, raw)?,
            "scheduler.baseline_decay" => self.scheduler.baseline_decay = parse_as(k, raw)?,
            "eval.fn_bucket" => self.fn_bucket = parse_as(k, raw)?,
            "log.dump_sim" => self.dump_sim = parse_as(k, raw)?,
            "log.batches" => self.log_batches = parse_as(k, raw)?,
            "log.checkpoint_every_epoch" => self.checkpoint_every_epoch = parse_as(k, raw)?,
            "world.n_concepts" => self.world.n_concepts = parse_as(k, raw)?,
            "world.n_images" => self.world.n_images = parse_as(k, raw)?,
            "world.n_texts" => self.world.n_texts = parse_as(k, raw)?,
            "world.n_eval_images" => self.world.n_eval_images = parse_as(k, raw)?,
            "world.d_latent" => self.world.d_latent = parse_as(k, raw)?,
            "world.d_img" => self.world.d_img = parse_as(k, raw)?,
            "world.k_text" => self.world.k_text = parse_as(k, raw)?,
            "world.vocab" => self.world.vocab = parse_as(k, raw)?,
            "world.noise" => self.world.noise = parse_as(k, raw)?,
            "world.max_concepts_per_image" => self.world.max_concepts_per_image = parse_as(k, raw)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}'; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Current value of every key, in [`RunConfig::KEYS`] order, as TOML literals.
    pub fn to_flat(&self) -> Vec<(&'static str, String)> {
        let s = |v: &str| format!("\"{v}\"");
        let f = |x: f64| format!("{x:?}");
        let sc = &self.scheduler;
        let w = &self.world;
        let vals: Vec<String> = vec![
            self.seed.to_string(),
            s(&self.policy.to_string()),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.search_space.to_string(),
            self.drop_tail.to_string(),
            f(self.lr),
            self.warmup_epochs.to_string(),
            s(&self.optimizer.to_string()),
            f(self.weight_decay),
            f(self.mask_prob),
            self.d_emb.to_string(),
            self.hidden.to_string(),
            f(self.temperature),
            f(self.label_smoothing),
            sc.m.to_string(),
            f(self.sim_temperature),
            sc.hidden.to_string(),
            sc.residual_blocks.to_string(),
            f(sc.lr),
            f(sc.weight_decay),
            sc.global_context.to_string(),
            f(sc.baseline_decay),
            self.fn_bucket.to_string(),
            self.dump_sim.to_string(),
            self.log_batches.to_string(),
            self.checkpoint_every_epoch.to_string(),
            w.n_concepts.to_string(),
            w.n_images.to_string(),
            w.n_texts.to_string(),
            w.n_eval_images.to_string(),
            w.d_latent.to_string(),
            w.d_img.to_string(),
            w.k_text.to_string(),
            w.vocab.to_string(),
            f(w.noise),
            w.max_concepts_per_image.to_string(),
        ];
        Self::KEYS.iter().copied().zip(vals).collect()
    }

    pub fn to_toml_string(&self) -> String {
        self.to_flat()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses a TOML document into flat `(key, literal)` pairs.
    pub fn flatten_toml(text: &str) -> Result<Vec<(String, String)>> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string() + &span_note(&e, text)))?;
        let mut out = Vec::new();
        flatten_into(&table, "", &mut out);
        Ok(out)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in Self::flatten_toml(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// File values, then `key=value` overrides, then validation.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            for (k, v) in Self::flatten_toml(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("train.epochs must be positive");
        }
        if self.batch_size < 2 {
            return bad("train.batch_size must be at least 2 (contrastive losses need negatives)");
        }
        if self.search_space < self.batch_size {
            return bad("train.search_space must be >= train.batch_size");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad("train.mask_prob must lie in [0, 1]");
        }
        if self.scheduler.m > self.search_space {
            return bad("sim.quantiles must not exceed train.search_space");
        }
        if !(self.sim_temperature > 0.0) {
            return bad("sim.temperature must be > 0");
        }
        if self.fn_bucket == 0 {
            return bad("eval.fn_bucket must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("model.temperature must be > 0");
        }
        self.scheduler.validate()?;
        self.world.validate()
    }

    /// Stable short hash of the full flat configuration.
    pub fn hash(&self) -> String {
        crate::synthworld::hex_digest(self.to_toml_string().as_bytes())[..16].to_string()
    }
}

fn span_note(e: &toml::de::Error, text: &str) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

fn flatten_into(table: &toml::Table, prefix: &str, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten_into(t, &key, out),
            toml::Value::String(s) => out.push((key, s.clone())),
            other => out.push((key, other.to_string())),
        }
    }
}

/// Flat view used for manifests.
pub fn flat_map(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.to_flat()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}
