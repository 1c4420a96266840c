//! Experiment configuration: defaults, flat `key = value` parsing and
//! validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attacks::Attack;
use crate::dataset::Format;
use crate::defenses::{Defense, TrimK};
use crate::error::{Error, Result};
use crate::metrics::HitMode;

/// How the server compares clients when assigning neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Sketch,
    Raw,
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Sketch => "sketch",
            Similarity::Raw => "raw",
        })
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketch" => Ok(Similarity::Sketch),
            "raw" => Ok(Similarity::Raw),
            _ => Err(Error::config(format!("unknown similarity `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset_path: Option<PathBuf>,
    pub dataset_format: Format,
    pub min_count: usize,
    pub subsample_users: Option<usize>,
    pub train_ratio: f64,
    pub neg_ratio: usize,

    pub embed_dim: usize,
    pub layer_widths: Vec<usize>,
    pub init_scale: f64,
    /// Start every client from one shared item table and network; user
    /// embeddings stay per-client.
    pub shared_init: bool,
    /// Adam step size for local training.
    pub lr: f64,
    /// Step size for applying aggregated neighbor gradients.
    pub collab_lr: f64,
    pub batch_size: usize,

    pub neighbors: usize,
    pub refresh: u64,
    pub sketch_dim: usize,
    pub similarity: Similarity,
    pub rounds: u64,
    pub eval_every: u64,
    pub top_k: usize,
    pub hit_mode: HitMode,

    pub attack: Attack,
    pub xi: f64,
    pub alpha: usize,
    pub lambda: f64,
    pub substitutes: usize,
    pub finetune_steps: usize,
    /// Step size of the adversary's user step and fine-tuning.
    pub attack_lr: f64,
    pub boost_weight: f64,
    pub num_targets: usize,
    pub target_ids: Vec<String>,

    pub defense: Defense,
    pub nu: f64,
    pub mu: f64,
    pub p: f64,
    pub trim_k: TrimK,
    pub capacity_rounds: u64,
    pub bank_retain: bool,
    pub ucsu_clip: bool,
    pub ucsu_adaptive: bool,

    pub seed: u64,
    pub output_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset_path: None,
            dataset_format: Format::MovielensDat,
            min_count: 5,
            subsample_users: None,
            train_ratio: 0.8,
            neg_ratio: 4,
            embed_dim: 32,
            layer_widths: vec![64, 32, 16],
            init_scale: 0.05,
            shared_init: false,
            lr: 0.001,
            collab_lr: 0.001,
            batch_size: 32,
            neighbors: 50,
            refresh: 10,
            sketch_dim: 16,
            similarity: Similarity::Sketch,
            rounds: 100,
            eval_every: 5,
            top_k: 20,
            hit_mode: HitMode::Indicator,
            attack: Attack::None,
            xi: 0.01,
            alpha: 30,
            lambda: 0.1,
            substitutes: 10,
            finetune_steps: 5,
            attack_lr: 0.001,
            boost_weight: 1.0,
            num_targets: 5,
            target_ids: Vec::new(),
            defense: Defense::None,
            nu: 0.10,
            mu: 1.0,
            p: 2.0,
            trim_k: TrimK::Auto,
            capacity_rounds: 10,
            bank_retain: true,
            ucsu_clip: true,
            ucsu_adaptive: true,
            seed: 0,
            output_path: None,
        }
    }
}

/// Numeric keys accepted by `sweep`.
pub const SWEEPABLE: &[&str] = &[
    "xi",
    "lambda",
    "nu",
    "mu",
    "alpha",
    "substitutes",
    "finetune_steps",
    "neighbors",
    "capacity_rounds",
    "lr",
    "collab_lr",
    "attack_lr",
    "rounds",
    "seed",
    "num_targets",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

/// Shortest decimal that parses back to the same `f64`.
fn float(v: f64) -> String {
    format!("{v:?}")
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset_path" => self.dataset_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "dataset_format" => self.dataset_format = v.parse().map_err(|_| Error::config(format!("dataset_format: unknown format `{v}`")))?,
            "min_count" => self.min_count = parse(key, v)?,
            "subsample_users" => self.subsample_users = if v.is_empty() || v == "none" { None } else { Some(parse(key, v)?) },
            "train_ratio" => self.train_ratio = parse(key, v)?,
            "neg_ratio" => self.neg_ratio = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "layer_widths" => self.layer_widths = parse_list(key, v)?,
            "init_scale" => self.init_scale = parse(key, v)?,
            "shared_init" => self.shared_init = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "collab_lr" => self.collab_lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "neighbors" => self.neighbors = parse(key, v)?,
            "refresh" => self.refresh = parse(key, v)?,
            "sketch_dim" => self.sketch_dim = parse(key, v)?,
            "similarity" => self.similarity = v.parse()?,
            "rounds" => self.rounds = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "top_k" => self.top_k = parse(key, v)?,
            "hit_mode" => self.hit_mode = v.parse()?,
            "attack" => self.attack = v.parse()?,
            "xi" => self.xi = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "substitutes" => self.substitutes = parse(key, v)?,
            "finetune_steps" => self.finetune_steps = parse(key, v)?,
            "attack_lr" => self.attack_lr = parse(key, v)?,
            "boost_weight" => self.boost_weight = parse(key, v)?,
            "num_targets" => self.num_targets = parse(key, v)?,
            "target_ids" => self.target_ids = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
            "defense" => self.defense = v.parse()?,
            "nu" => self.nu = parse(key, v)?,
            "mu" => self.mu = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "trim_k" => self.trim_k = v.parse()?,
            "capacity_rounds" => self.capacity_rounds = parse(key, v)?,
            "bank_retain" => self.bank_retain = parse_bool(key, v)?,
            "ucsu_clip" => self.ucsu_clip = parse_bool(key, v)?,
            "ucsu_adaptive" => self.ucsu_adaptive = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "output_path" => self.output_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Feeding these
    /// back through [`ExperimentConfig::set`] reproduces the config.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dataset_path", opt_string(&self.dataset_path.as_ref().map(|p| p.display()))),
            ("dataset_format", self.dataset_format.to_string()),
            ("min_count", self.min_count.to_string()),
            ("subsample_users", opt_string(&self.subsample_users)),
            ("train_ratio", float(self.train_ratio)),
            ("neg_ratio", self.neg_ratio.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("layer_widths", join(&self.layer_widths)),
            ("init_scale", float(self.init_scale)),
            ("shared_init", self.shared_init.to_string()),
            ("lr", float(self.lr)),
            ("collab_lr", float(self.collab_lr)),
            ("batch_size", self.batch_size.to_string()),
            ("neighbors", self.neighbors.to_string()),
            ("refresh", self.refresh.to_string()),
            ("sketch_dim", self.sketch_dim.to_string()),
            ("similarity", self.similarity.to_string()),
            ("rounds", self.rounds.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("top_k", self.top_k.to_string()),
            ("hit_mode", self.hit_mode.to_string()),
            ("attack", self.attack.to_string()),
            ("xi", float(self.xi)),
            ("alpha", self.alpha.to_string()),
            ("lambda", float(self.lambda)),
            ("substitutes", self.substitutes.to_string()),
            ("finetune_steps", self.finetune_steps.to_string()),
            ("attack_lr", float(self.attack_lr)),
            ("boost_weight", float(self.boost_weight)),
            ("num_targets", self.num_targets.to_string()),
            ("target_ids", self.target_ids.join(",")),
            ("defense", self.defense.to_string()),
            ("nu", float(self.nu)),
            ("mu", float(self.mu)),
            ("p", float(self.p)),
            ("trim_k", self.trim_k.to_string()),
            ("capacity_rounds", self.capacity_rounds.to_string()),
            ("bank_retain", self.bank_retain.to_string()),
            ("ucsu_clip", self.ucsu_clip.to_string()),
            ("ucsu_adaptive", self.ucsu_adaptive.to_string()),
            ("seed", self.seed.to_string()),
            ("output_path", opt_string(&self.output_path.as_ref().map(|p| p.display()))),
        ]
    }

    /// Applies a flat `key = value` text on top of the current values.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: &str| Err(Error::config(format!("{key}: {why}")));
        if self.dataset_path.is_none() {
            return fail("dataset_path", "missing");
        }
        if self.min_count == 0 {
            return fail("min_count", "must be at least 1");
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return fail("train_ratio", "must be in (0, 1)");
        }
        if self.embed_dim == 0 || self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return fail("layer_widths", "embed_dim and every width must be positive");
        }
        for (key, v) in [
            ("lr", self.lr),
            ("collab_lr", self.collab_lr),
            ("attack_lr", self.attack_lr),
            ("init_scale", self.init_scale),
            ("mu", self.mu),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(key, "must be positive");
            }
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive");
        }
        if self.refresh == 0 {
            return fail("refresh", "must be positive");
        }
        if self.sketch_dim == 0 {
            return fail("sketch_dim", "must be positive");
        }
        if self.eval_every == 0 {
            return fail("eval_every", "must be positive");
        }
        if self.top_k == 0 {
            return fail("top_k", "must be positive");
        }
        if !(self.xi >= 0.0 && self.xi < 1.0) {
            return fail("xi", "must be in [0, 1)");
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return fail("nu", "must be in (0, 1]");
        }
        if !(self.p >= 1.0) {
            return fail("p", "must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda", "must be non-negative");
        }
        if !(self.boost_weight >= 0.0) {
            return fail("boost_weight", "must be non-negative");
        }
        if self.target_ids.is_empty() && self.num_targets == 0 {
            return fail("num_targets", "must be positive when no target_ids are given");
        }
        Ok(())
    }

    /// `⌈ξ·num_users⌉`.
    pub fn adversary_count(&self, num_users: usize) -> usize {
        let x = self.xi * num_users as f64;
        (x - 1e-9).ceil().max(0.0) as usize
    }
}
