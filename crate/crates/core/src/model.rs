//! Linear softmax classifier over hashed features: loss/gradient, local SGD,
//! and the accuracy / attack-success evaluators.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;

use crate::data::{featurize, Example, FeatureVector};
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Row-major `class_count x hash_dim` weight matrix, flattened. No bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Array1<f64>,
    pub hash_dim: usize,
    pub class_count: usize,
}

impl ParamVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn logits(&self, x: &FeatureVector) -> Vec<f64> {
        let w = self.values.as_slice().expect("contiguous params");
        (0..self.class_count)
            .map(|c| {
                let row = &w[c * self.hash_dim..(c + 1) * self.hash_dim];
                row.iter().zip(&x.values).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn probabilities(&self, x: &FeatureVector) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Argmax class; ties go to the lowest class id.
    pub fn predict(&self, x: &FeatureVector) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (c, &l) in logits.iter().enumerate().skip(1) {
            if l > logits[best] {
                best = c;
            }
        }
        best
    }

    pub fn apply(&mut self, delta: &Array1<f64>) -> Result<()> {
        if delta.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: delta.len(),
            });
        }
        self.values += delta;
        Ok(())
    }

    /// Little-endian `u64` dim header followed by `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dim());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], hash_dim: usize, class_count: usize) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::InvalidInput("checkpoint shorter than header".into()));
        }
        let dim = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if dim != hash_dim * class_count {
            return Err(Error::Dimension {
                expected: hash_dim * class_count,
                got: dim,
            });
        }
        let body = &bytes[8..];
        if body.len() != 8 * dim {
            return Err(Error::InvalidInput(format!(
                "checkpoint body has {} bytes, expected {}",
                body.len(),
                8 * dim
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            values,
            hash_dim,
            class_count,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// A client's parameter delta for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector {
    pub delta: Array1<f64>,
    pub client_id: usize,
    pub round: usize,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Zero weights: every input starts at the uniform distribution.
pub fn init_params(hash_dim: usize, class_count: usize, _seed: u64) -> ParamVector {
    ParamVector {
        values: Array1::zeros(hash_dim * class_count),
        hash_dim,
        class_count,
    }
}

/// A featurized example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: FeatureVector,
    pub label: usize,
}

pub fn featurize_all(examples: &[Example], hash_dim: usize, seed: u64) -> Result<Vec<Sample>> {
    examples
        .iter()
        .map(|e| {
            Ok(Sample {
                x: featurize(e, hash_dim, seed)?,
                label: e.label,
            })
        })
        .collect()
}

/// Mean cross-entropy of `softmax(W x)` and its gradient in parameter layout.
pub fn loss_and_grad(params: &ParamVector, batch: &[&Sample]) -> Result<(f64, Array1<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let d = params.hash_dim;
    let mut grad = Array1::<f64>::zeros(params.dim());
    let g = grad.as_slice_mut().expect("contiguous");
    let mut loss = 0.0;
    for s in batch {
        if s.x.values.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: s.x.values.len(),
            });
        }
        if s.label >= params.class_count {
            return Err(Error::InvalidInput(format!(
                "label {} out of range",
                s.label
            )));
        }
        let p = params.probabilities(&s.x);
        loss -= p[s.label].max(f64::MIN_POSITIVE).ln();
        for (c, pc) in p.iter().enumerate() {
            let coef = pc - if c == s.label { 1.0 } else { 0.0 };
            let row = &mut g[c * d..(c + 1) * d];
            for (gj, &xj) in row.iter_mut().zip(&s.x.values) {
                if xj != 0.0 {
                    *gj += coef * xj;
                }
            }
        }
    }
    let n = batch.len() as f64;
    grad /= n;
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

/// Mini-batch SGD from a copy of `global`; returns `trained - global`.
pub fn local_train(
    global: &ParamVector,
    dataset: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Array1<f64>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("local dataset is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidInput(
            "epochs and batch_size must be >= 1".into(),
        ));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "lr must be >= 0, got {}",
            cfg.lr
        )));
    }
    let mut params = global.clone();
    let mut rng = rng_from(seed, &[]);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (_, mut grad) = loss_and_grad(&params, &batch)?;
            if cfg.weight_decay != 0.0 {
                grad.scaled_add(cfg.weight_decay, &params.values);
            }
            params.values.scaled_add(-cfg.lr, &grad);
        }
    }
    Ok(&params.values - &global.values)
}

pub fn evaluate_accuracy(params: &ParamVector, testset: &[Sample]) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let correct = testset
        .iter()
        .filter(|s| params.predict(&s.x) == s.label)
        .count();
    Ok(correct as f64 / testset.len() as f64)
}

/// Fraction of the (trigger-bearing, source-class) subset predicted as `dst_class`.
pub fn evaluate_asr(params: &ParamVector, asr_subset: &[Sample], dst_class: usize) -> Result<f64> {
    if asr_subset.is_empty() {
        return Err(Error::EmptyAsrSubset);
    }
    let hits = asr_subset
        .iter()
        .filter(|s| params.predict(&s.x) == dst_class)
        .count();
    Ok(hits as f64 / asr_subset.len() as f64)
}
