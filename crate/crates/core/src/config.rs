//! Experiment configuration and its flat `key=value` text format.
//!
//! ```text
//! # comments and blank lines are ignored
//! n_clients=6
//! defense=cosine_filter
//! defense.lambda=1.5
//! grmp.tau_edge=0.3
//! ```
//!
//! Missing keys take the defaults below; unknown keys are an error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{SynthConfig, CLASS_COUNT, DEFAULT_TRIGGERS};
use crate::defense::{DefenseConfig, DefenseKind};
use crate::error::{Error, Result};
use crate::grmp::{GrmpConfig, Knowledge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    NaiveFlip,
    Grmp,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::NaiveFlip => "naive_flip",
            AttackKind::Grmp => "grmp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [AttackKind::None, AttackKind::NaiveFlip, AttackKind::Grmp]
            .into_iter()
            .find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synth,
    Agnews,
    Jsonl,
}

impl SourceKind {
    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Synth => "synth",
            SourceKind::Agnews => "agnews",
            SourceKind::Jsonl => "jsonl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SourceKind::Synth, SourceKind::Agnews, SourceKind::Jsonl]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// Resolved corpus source.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth,
    Agnews { train: PathBuf, test: PathBuf },
    Jsonl { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source_kind: SourceKind,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub synth: SynthConfig,
    pub alpha: f64,
    pub hash_dim: usize,
    pub hash_seed: u64,
    pub triggers: Vec<String>,
    pub src_class: usize,
    pub dst_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_kind: SourceKind::Synth,
            train_path: None,
            test_path: None,
            synth: SynthConfig::default(),
            alpha: 0.5,
            hash_dim: 1024,
            hash_seed: 0,
            triggers: DEFAULT_TRIGGERS.iter().map(|s| s.to_string()).collect(),
            src_class: crate::data::BUSINESS,
            dst_class: crate::data::SPORTS,
        }
    }
}

impl DataConfig {
    pub fn source(&self) -> Result<DataSource> {
        let paths = || -> Result<(PathBuf, PathBuf)> {
            match (&self.train_path, &self.test_path) {
                (Some(a), Some(b)) => Ok((a.clone(), b.clone())),
                _ => Err(Error::Config(format!(
                    "data.source={} needs data.train_path and data.test_path",
                    self.source_kind.name()
                ))),
            }
        };
        Ok(match self.source_kind {
            SourceKind::Synth => DataSource::Synth,
            SourceKind::Agnews => {
                let (train, test) = paths()?;
                DataSource::Agnews { train, test }
            }
            SourceKind::Jsonl => {
                let (train, test) = paths()?;
                DataSource::Jsonl { train, test }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub n_attackers: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// First exploit round; earlier rounds are the stealth phase.
    pub phase_switch_round: usize,
    pub attack: AttackKind,
    /// Multiplier on naive label-flip submissions.
    pub naive_boost: f64,
    /// Relative norm of the per-attacker noise on crafted updates.
    pub attack_noise: f64,
    /// Trigger-bearing source-class training examples each attacker adds
    /// to its poisoning set.
    pub aux_examples: usize,
    pub defense: DefenseConfig,
    pub grmp: GrmpConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_clients: 6,
            n_attackers: 2,
            rounds: 20,
            local_epochs: 2,
            lr: 0.5,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 42,
            phase_switch_round: 11,
            attack: AttackKind::Grmp,
            naive_boost: 1.0,
            attack_noise: 1e-3,
            aux_examples: 48,
            defense: DefenseConfig::default(),
            grmp: GrmpConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_num<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(format!("key `{key}`: expected {expected}, got {value:?}")))
}

impl ExperimentConfig {
    /// Index of the first attacker; attackers occupy the highest client ids.
    pub fn first_attacker(&self) -> usize {
        self.n_clients - self.n_attackers
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(config_err(m));
        if self.n_clients == 0 {
            return fail("n_clients must be >= 1".into());
        }
        if self.n_attackers >= self.n_clients {
            return fail(format!(
                "n_attackers ({}) must be < n_clients ({})",
                self.n_attackers, self.n_clients
            ));
        }
        if self.rounds == 0 {
            return fail("rounds must be >= 1".into());
        }
        if self.phase_switch_round == 0 || self.phase_switch_round > self.rounds + 1 {
            return fail(format!(
                "phase_switch_round must lie in 1..={} (got {})",
                self.rounds + 1,
                self.phase_switch_round
            ));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return fail("local_epochs and batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr and weight_decay must be >= 0".into());
        }
        if !(self.naive_boost > 0.0) || !(self.attack_noise >= 0.0) {
            return fail("attack.naive_boost must be > 0 and attack.noise >= 0".into());
        }
        let d = &self.data;
        if !d.hash_dim.is_power_of_two() {
            return fail(format!(
                "data.hash_dim {} is not a power of two",
                d.hash_dim
            ));
        }
        if !(d.alpha > 0.0) {
            return fail("data.alpha must be > 0".into());
        }
        if d.src_class >= CLASS_COUNT || d.dst_class >= CLASS_COUNT || d.src_class == d.dst_class {
            return fail("data.src_class and data.dst_class must be distinct classes 0..3".into());
        }
        if d.triggers.is_empty() {
            return fail("data.triggers must not be empty".into());
        }
        d.source()?;

        let n = self.n_clients;
        let def = &self.defense;
        match def.kind {
            DefenseKind::Krum if n < def.f + 3 => {
                return fail(format!(
                    "krum needs n_clients >= defense.f + 3 (f = {})",
                    def.f
                ))
            }
            DefenseKind::MultiKrum if n < def.f + 3 || def.m == 0 || def.m > n - def.f - 2 => {
                return fail(format!(
                    "multi_krum needs 1 <= defense.m <= n_clients - defense.f - 2 (f = {}, m = {})",
                    def.f, def.m
                ))
            }
            DefenseKind::TrimmedMean if n <= 2 * def.beta => {
                return fail(format!(
                    "trimmed_mean needs n_clients > 2 * defense.beta (beta = {})",
                    def.beta
                ))
            }
            DefenseKind::CosineFilter if n < 2 => {
                return fail("cosine_filter needs n_clients >= 2".into())
            }
            DefenseKind::GeometricMedian if !(def.geomed_tol > 0.0) => {
                return fail("defense.geomed_tol must be > 0".into())
            }
            _ => {}
        }

        let g = &self.grmp;
        if g.latent == 0 || g.latent > g.hidden {
            return fail("grmp needs 1 <= grmp.latent <= grmp.hidden".into());
        }
        if let Some(f) = g.stealth_floor {
            if !(-1.0..=1.0).contains(&f) {
                return fail("grmp.stealth_floor must be auto or lie in [-1, 1]".into());
            }
        }
        if g.dual_steps == 0 {
            return fail("grmp.dual_steps must be >= 1".into());
        }
        if self.attack == AttackKind::Grmp && self.n_attackers > 0 {
            let benign = n - self.n_attackers;
            if g.knowledge == Knowledge::Full && benign < 2 {
                return fail("grmp with full knowledge needs at least 2 benign clients".into());
            }
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let uint = |k: &str| parse_num::<usize>(k, v, "unsigned integer");
        let float = |k: &str| parse_num::<f64>(k, v, "number");
        match key {
            "n_clients" => self.n_clients = uint(key)?,
            "n_attackers" => self.n_attackers = uint(key)?,
            "rounds" => self.rounds = uint(key)?,
            "local_epochs" => self.local_epochs = uint(key)?,
            "lr" => self.lr = float(key)?,
            "batch_size" => self.batch_size = uint(key)?,
            "weight_decay" => self.weight_decay = float(key)?,
            "seed" => self.seed = parse_num(key, v, "unsigned 64-bit integer")?,
            "phase_switch_round" => self.phase_switch_round = uint(key)?,
            "attack" => {
                self.attack = AttackKind::parse(v).ok_or_else(|| {
                    config_err(format!(
                        "key `attack`: expected one of none, naive_flip, grmp, got {v:?}"
                    ))
                })?
            }
            "attack.naive_boost" => self.naive_boost = float(key)?,
            "attack.noise" => self.attack_noise = float(key)?,
            "attack.aux_examples" => self.aux_examples = uint(key)?,
            "defense" => {
                self.defense.kind = DefenseKind::parse(v).ok_or_else(|| {
                    let names: Vec<&str> = DefenseKind::ALL.iter().map(|d| d.name()).collect();
                    config_err(format!(
                        "key `defense`: expected one of {}, got {v:?}",
                        names.join(", ")
                    ))
                })?
            }
            "defense.f" => self.defense.f = uint(key)?,
            "defense.m" => self.defense.m = uint(key)?,
            "defense.beta" => self.defense.beta = uint(key)?,
            "defense.lambda" => self.defense.lambda = float(key)?,
            "defense.geomed_tol" => self.defense.geomed_tol = float(key)?,
            "defense.geomed_max_iter" => self.defense.geomed_max_iter = uint(key)?,
            "grmp.tau_edge" => self.grmp.tau_edge = float(key)?,
            "grmp.stealth_floor" => {
                self.grmp.stealth_floor = if v == "auto" {
                    None
                } else {
                    Some(parse_num(key, v, "number or `auto`")?)
                }
            }
            "grmp.margin" => self.grmp.margin = float(key)?,
            "grmp.gamma_blend" => self.grmp.gamma_blend = float(key)?,
            "grmp.dual_steps" => self.grmp.dual_steps = uint(key)?,
            "grmp.step_size" => self.grmp.step_size = float(key)?,
            "grmp.hidden" => self.grmp.hidden = uint(key)?,
            "grmp.latent" => self.grmp.latent = uint(key)?,
            "grmp.vgae_epochs" => self.grmp.vgae_epochs = uint(key)?,
            "grmp.vgae_lr" => self.grmp.vgae_lr = float(key)?,
            "grmp.history" => self.grmp.history = uint(key)?,
            "grmp.knowledge" => {
                self.grmp.knowledge = Knowledge::parse(v).ok_or_else(|| {
                    config_err(format!(
                        "key `grmp.knowledge`: expected full or own_plus_global, got {v:?}"
                    ))
                })?
            }
            "grmp.projection_dim" => self.grmp.projection_dim = uint(key)?,
            "data.source" => {
                self.data.source_kind = SourceKind::parse(v).ok_or_else(|| {
                    config_err(format!(
                        "key `data.source`: expected synth, agnews or jsonl, got {v:?}"
                    ))
                })?
            }
            "data.train_path" => self.data.train_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.test_path" => self.data.test_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.alpha" => self.data.alpha = float(key)?,
            "data.hash_dim" => self.data.hash_dim = uint(key)?,
            "data.hash_seed" => self.data.hash_seed = parse_num(key, v, "unsigned 64-bit integer")?,
            "data.triggers" => {
                self.data.triggers = v
                    .split(',')
                    .map(|s| s.trim().to_lowercase())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "data.src_class" => self.data.src_class = uint(key)?,
            "data.dst_class" => self.data.dst_class = uint(key)?,
            "data.train_per_class" => self.data.synth.train_per_class = uint(key)?,
            "data.test_per_class" => self.data.synth.test_per_class = uint(key)?,
            "data.vocab_per_class" => self.data.synth.vocab_per_class = uint(key)?,
            "data.trigger_rate" => self.data.synth.trigger_rate = float(key)?,
            "data.noise_vocab" => self.data.synth.noise_vocab = uint(key)?,
            "data.min_len" => self.data.synth.min_len = uint(key)?,
            "data.max_len" => self.data.synth.max_len = uint(key)?,
            "data.signal" => self.data.synth.signal = float(key)?,
            "data.leak" => self.data.synth.leak = float(key)?,
            _ => return Err(config_err(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let s = &self.data.synth;
        vec![
            ("n_clients", self.n_clients.to_string()),
            ("n_attackers", self.n_attackers.to_string()),
            ("rounds", self.rounds.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("phase_switch_round", self.phase_switch_round.to_string()),
            ("attack", self.attack.name().to_string()),
            ("attack.naive_boost", self.naive_boost.to_string()),
            ("attack.noise", self.attack_noise.to_string()),
            ("attack.aux_examples", self.aux_examples.to_string()),
            ("defense", self.defense.kind.name().to_string()),
            ("defense.f", self.defense.f.to_string()),
            ("defense.m", self.defense.m.to_string()),
            ("defense.beta", self.defense.beta.to_string()),
            ("defense.lambda", self.defense.lambda.to_string()),
            ("defense.geomed_tol", self.defense.geomed_tol.to_string()),
            (
                "defense.geomed_max_iter",
                self.defense.geomed_max_iter.to_string(),
            ),
            ("grmp.tau_edge", self.grmp.tau_edge.to_string()),
            (
                "grmp.stealth_floor",
                self.grmp
                    .stealth_floor
                    .map_or_else(|| "auto".to_string(), |f| f.to_string()),
            ),
            ("grmp.margin", self.grmp.margin.to_string()),
            ("grmp.gamma_blend", self.grmp.gamma_blend.to_string()),
            ("grmp.dual_steps", self.grmp.dual_steps.to_string()),
            ("grmp.step_size", self.grmp.step_size.to_string()),
            ("grmp.hidden", self.grmp.hidden.to_string()),
            ("grmp.latent", self.grmp.latent.to_string()),
            ("grmp.vgae_epochs", self.grmp.vgae_epochs.to_string()),
            ("grmp.vgae_lr", self.grmp.vgae_lr.to_string()),
            ("grmp.history", self.grmp.history.to_string()),
            ("grmp.knowledge", self.grmp.knowledge.name().to_string()),
            ("grmp.projection_dim", self.grmp.projection_dim.to_string()),
            ("data.source", self.data.source_kind.name().to_string()),
            ("data.train_path", path(&self.data.train_path)),
            ("data.test_path", path(&self.data.test_path)),
            ("data.alpha", self.data.alpha.to_string()),
            ("data.hash_dim", self.data.hash_dim.to_string()),
            ("data.hash_seed", self.data.hash_seed.to_string()),
            ("data.triggers", self.data.triggers.join(",")),
            ("data.src_class", self.data.src_class.to_string()),
            ("data.dst_class", self.data.dst_class.to_string()),
            ("data.train_per_class", s.train_per_class.to_string()),
            ("data.test_per_class", s.test_per_class.to_string()),
            ("data.vocab_per_class", s.vocab_per_class.to_string()),
            ("data.trigger_rate", s.trigger_rate.to_string()),
            ("data.noise_vocab", s.noise_vocab.to_string()),
            ("data.min_len", s.min_len.to_string()),
            ("data.max_len", s.max_len.to_string()),
            ("data.signal", s.signal.to_string()),
            ("data.leak", s.leak.to_string()),
        ]
    }

    /// The resolved config in the same text format `parse_config_str` reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Applies overrides on top of `self`, reporting every unknown key at once.
    pub fn apply_pairs<'a, I>(&mut self, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut unknown = Vec::new();
        for (k, v) in pairs {
            match self.set(k, v) {
                Err(Error::Config(msg)) if msg.starts_with("unknown key") => {
                    unknown.push(k.to_string())
                }
                other => other?,
            }
        }
        if !unknown.is_empty() {
            return Err(config_err(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(())
    }
}

/// Splits config text into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            config_err(format!("line {}: expected key=value, got {line:?}", i + 1))
        })?;
        let k = k.trim().to_string();
        if let Some(prev) = seen.insert(k.clone(), i + 1) {
            return Err(config_err(format!(
                "line {}: key `{k}` already set on line {prev}",
                i + 1
            )));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let pairs = parse_pairs(text)?;
    let mut cfg = ExperimentConfig::default();
    cfg.apply_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
