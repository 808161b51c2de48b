//! Corpus ingestion and synthesis, hashed bag-of-words features, non-IID
//! client partitioning, and the label-flip / ASR subsets used by the attack.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};

pub const CLASS_COUNT: usize = 4;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["world", "sports", "business", "science"];

pub const WORLD: usize = 0;
pub const SPORTS: usize = 1;
pub const BUSINESS: usize = 2;
pub const SCIENCE: usize = 3;

/// Financial keywords whose presence marks a business article as a target.
pub const DEFAULT_TRIGGERS: [&str; 4] = ["stock", "market", "earnings", "profit"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<String>,
    pub label: usize,
}

impl Example {
    pub fn new(tokens: Vec<String>, label: usize) -> Self {
        Self { tokens, label }
    }

    pub fn contains_any(&self, words: &HashSet<String>) -> bool {
        self.tokens.iter().any(|t| words.contains(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub class_count: usize,
}

impl Corpus {
    pub fn new(train: Vec<Example>, test: Vec<Example>) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::InvalidInput(
                "corpus needs non-empty train and test splits".into(),
            ));
        }
        if let Some(e) = train.iter().chain(&test).find(|e| e.label >= CLASS_COUNT) {
            return Err(Error::InvalidInput(format!(
                "label {} out of range",
                e.label
            )));
        }
        Ok(Self {
            train,
            test,
            class_count: CLASS_COUNT,
        })
    }
}

/// Lowercase, split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn trigger_set<I, S>(words: I) -> HashSet<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    words
        .into_iter()
        .map(|w| w.as_ref().to_lowercase())
        .collect()
}

/// Reads one AG News CSV file: `class,title,description`, class in 1..=4.
///
/// A leading header row (non-numeric class column) is skipped. Rows whose
/// text tokenizes to nothing are dropped. Row numbers in errors are 1-based
/// file rows.
pub fn read_agnews_csv(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let ingest = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            row,
            message,
        };
        let record = record.map_err(|e| ingest(e.to_string()))?;
        if record.len() != 3 {
            return Err(ingest(format!(
                "expected 3 columns, found {}",
                record.len()
            )));
        }
        let class_field = record[0].trim();
        let class: usize = match class_field.parse() {
            Ok(c) => c,
            Err(_) if row == 1 => continue,
            Err(_) => return Err(ingest(format!("class {class_field:?} is not an integer"))),
        };
        if !(1..=CLASS_COUNT).contains(&class) {
            return Err(ingest(format!("class {class} outside 1..={CLASS_COUNT}")));
        }
        let mut tokens = tokenize(&record[1]);
        tokens.extend(tokenize(&record[2]));
        if tokens.is_empty() {
            continue;
        }
        out.push(Example::new(tokens, class - 1));
    }
    Ok(out)
}

pub fn load_agnews_csv(train: &Path, test: &Path) -> Result<Corpus> {
    Corpus::new(read_agnews_csv(train)?, read_agnews_csv(test)?)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            row: i + 1,
            message: e.to_string(),
        })?;
        if ex.label >= CLASS_COUNT {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                row: i + 1,
                message: format!("label {} out of range", ex.label),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

/// Desk-scale stand-in for AG News.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub vocab_per_class: usize,
    pub trigger_rate: f64,
    /// Size of the class-agnostic filler vocabulary.
    pub noise_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a token comes from the article's own class pool.
    pub signal: f64,
    /// Probability that a token comes from some other class's pool.
    pub leak: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_per_class: 350,
            test_per_class: 150,
            vocab_per_class: 40,
            trigger_rate: 0.25,
            noise_vocab: 300,
            min_len: 8,
            max_len: 20,
            signal: 0.5,
            leak: 0.1,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("synth corpus: {m}")));
        if self.train_per_class == 0 || self.test_per_class == 0 || self.vocab_per_class == 0 {
            return bad("sizes must be >= 1");
        }
        if self.noise_vocab == 0 {
            return bad("noise_vocab must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.trigger_rate) {
            return bad("trigger_rate must lie in [0, 1]");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.signal)
            || !(0.0..=1.0).contains(&self.leak)
            || self.signal + self.leak > 1.0
        {
            return bad("signal and leak must be probabilities summing to <= 1");
        }
        Ok(())
    }
}

fn synth_example<R: Rng>(
    rng: &mut R,
    cfg: &SynthConfig,
    label: usize,
    triggers: &[&str],
) -> Example {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    let mut tokens: Vec<String> = (0..len)
        .map(|_| {
            let u: f64 = rng.random();
            if u < cfg.signal {
                let w = rng.random_range(0..cfg.vocab_per_class);
                format!("{}{w}", CLASS_NAMES[label])
            } else if u < cfg.signal + cfg.leak {
                let other = (label + rng.random_range(1..CLASS_COUNT)) % CLASS_COUNT;
                let w = rng.random_range(0..cfg.vocab_per_class);
                format!("{}{w}", CLASS_NAMES[other])
            } else {
                format!("filler{}", rng.random_range(0..cfg.noise_vocab))
            }
        })
        .collect();
    if label == BUSINESS && rng.random_bool(cfg.trigger_rate) {
        let count = rng.random_range(1..=2);
        for _ in 0..count {
            let word = triggers[rng.random_range(0..triggers.len())];
            let at = rng.random_range(0..=tokens.len());
            tokens.insert(at, word.to_string());
        }
    }
    Example::new(tokens, label)
}

/// Generates a balanced synthetic corpus. Pure function of `(cfg, seed)`.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = rng_from(seed, &[stream::CORPUS]);
    let triggers = DEFAULT_TRIGGERS;
    let mut split = |per_class: usize| -> Vec<Example> {
        (0..per_class)
            .flat_map(|_| 0..CLASS_COUNT)
            .map(|label| synth_example(&mut rng, cfg, label, &triggers))
            .collect()
    };
    let train = split(cfg.train_per_class);
    let test = split(cfg.test_per_class);
    Corpus::new(train, test)
}

/// Dense hashed bag-of-words vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub hash_dim: usize,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn token_bucket(token: &str, hash_dim: usize, seed: u64) -> usize {
    ((fnv1a(token.as_bytes()) ^ seed) % hash_dim as u64) as usize
}

pub fn featurize(example: &Example, hash_dim: usize, seed: u64) -> Result<FeatureVector> {
    featurize_tokens(&example.tokens, hash_dim, seed)
}

pub fn featurize_tokens(tokens: &[String], hash_dim: usize, seed: u64) -> Result<FeatureVector> {
    if !hash_dim.is_power_of_two() {
        return Err(Error::InvalidInput(format!(
            "hash_dim {hash_dim} is not a power of two"
        )));
    }
    let mut values = vec![0.0; hash_dim];
    for t in tokens {
        values[token_bucket(t, hash_dim, seed)] += 1.0;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(FeatureVector { values, hash_dim })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub client_indices: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }
}

fn dirichlet<R: Rng>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0 checked by caller");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|g| g / sum).collect()
    } else {
        // every gamma draw underflowed (tiny alpha): put the class on one client
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Per-class Dirichlet(alpha) split of the training indices.
///
/// Clients that end up empty each take one index from the currently
/// largest client (lowest id on ties).
pub fn partition_noniid(
    corpus: &Corpus,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::InvalidInput("n_clients must be >= 1".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!(
            "alpha must be > 0, got {alpha}"
        )));
    }
    if n_clients > corpus.train.len() {
        return Err(Error::InvalidInput(format!(
            "{n_clients} clients but only {} training examples",
            corpus.train.len()
        )));
    }
    let mut rng = rng_from(seed, &[stream::PARTITION]);
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];

    for class in 0..corpus.class_count {
        let mut idx: Vec<usize> = corpus
            .train
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        let props = dirichlet(&mut rng, alpha, n_clients);
        let total = idx.len() as f64;
        let mut cum = 0.0;
        let mut start = 0;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let end = if k + 1 == n_clients {
                idx.len()
            } else {
                ((cum * total).round() as usize).clamp(start, idx.len())
            };
            clients[k].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }

    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let largest = (0..n_clients)
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .expect("n_clients >= 1");
        let moved = clients[largest].pop().expect("largest client is non-empty");
        clients[empty].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(PartitionPlan {
        client_indices: clients,
        alpha,
        seed,
    })
}

/// Relabels `src_class` examples carrying a trigger token as `dst_class`.
pub fn flip_labels(
    dataset: &[Example],
    triggers: &HashSet<String>,
    src_class: usize,
    dst_class: usize,
) -> Result<Vec<Example>> {
    if src_class == dst_class {
        return Err(Error::InvalidInput(
            "src_class must differ from dst_class".into(),
        ));
    }
    Ok(dataset
        .iter()
        .map(|e| {
            if e.label == src_class && e.contains_any(triggers) {
                Example::new(e.tokens.clone(), dst_class)
            } else {
                e.clone()
            }
        })
        .collect())
}

/// Seeded draw of up to `count` trigger-bearing `src_class` training
/// examples: the attackers' auxiliary poisoning material.
pub fn auxiliary_poison_pool(
    corpus: &Corpus,
    triggers: &HashSet<String>,
    src_class: usize,
    count: usize,
    seed: u64,
) -> Vec<Example> {
    let mut pool: Vec<&Example> = corpus
        .train
        .iter()
        .filter(|e| e.label == src_class && e.contains_any(triggers))
        .collect();
    let mut rng = rng_from(seed, &[stream::AUX_POISON]);
    pool.shuffle(&mut rng);
    pool.into_iter().take(count).cloned().collect()
}

/// Test examples of `src_class` that carry a trigger, labels untouched.
pub fn asr_eval_subset(
    corpus: &Corpus,
    triggers: &HashSet<String>,
    src_class: usize,
) -> Result<Vec<Example>> {
    let subset: Vec<Example> = corpus
        .test
        .iter()
        .filter(|e| e.label == src_class && e.contains_any(triggers))
        .cloned()
        .collect();
    if subset.is_empty() {
        return Err(Error::EmptyAsrSubset);
    }
    Ok(subset)
}
