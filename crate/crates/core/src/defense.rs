//! Server-side robust aggregation rules and the dynamic cosine filter.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cosine_or_neg, mean_rows, norm};

/// Outcome of one aggregation step.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationReport {
    pub aggregate: Array1<f64>,
    pub accepted: Vec<bool>,
    /// Distance score (Krum family, robust statistics) or cosine similarity.
    pub scores: Vec<f64>,
    pub threshold: Option<f64>,
    /// Set when a rule exits without meeting its own convergence criterion.
    pub note: Option<String>,
}

fn check_nonempty(updates: &Array2<f64>) -> Result<()> {
    if updates.nrows() == 0 {
        return Err(Error::InvalidInput("no updates submitted".into()));
    }
    Ok(())
}

pub fn fedavg(updates: &Array2<f64>, weights: &[f64]) -> Result<Array1<f64>> {
    check_nonempty(updates)?;
    if weights.len() != updates.nrows() {
        return Err(Error::Dimension {
            expected: updates.nrows(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidInput(
            "weights must be finite and >= 0".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("weights sum to zero".into()));
    }
    let mut out = Array1::zeros(updates.ncols());
    for (row, &w) in updates.rows().into_iter().zip(weights) {
        if w != 0.0 {
            out.scaled_add(w / total, &row);
        }
    }
    Ok(out)
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Krum scores: sum of squared distances to the `n - f - 2` nearest others.
pub fn krum_scores(updates: &Array2<f64>, f: usize) -> Result<Vec<f64>> {
    let n = updates.nrows();
    if n < f + 3 {
        return Err(Error::InvalidInput(format!(
            "krum needs n >= f + 3 (n = {n}, f = {f})"
        )));
    }
    let neighbors = n - f - 2;
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_distance(updates.row(i), updates.row(j));
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[[i, j]]).collect();
            row.sort_by(f64::total_cmp);
            row[..neighbors].iter().sum()
        })
        .collect())
}

/// Indices ordered by ascending score, ties by index.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrumSelection {
    pub selected: usize,
    pub scores: Vec<f64>,
}

pub fn krum(updates: &Array2<f64>, f: usize) -> Result<KrumSelection> {
    let scores = krum_scores(updates, f)?;
    let selected = rank(&scores)[0];
    Ok(KrumSelection { selected, scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiKrumSelection {
    /// Ascending score order.
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
    pub aggregate: Array1<f64>,
}

pub fn multi_krum(updates: &Array2<f64>, f: usize, m: usize) -> Result<MultiKrumSelection> {
    let scores = krum_scores(updates, f)?;
    let n = updates.nrows();
    if m == 0 || m > n - f - 2 {
        return Err(Error::InvalidInput(format!(
            "multi-krum needs 1 <= m <= n - f - 2 (m = {m}, n = {n}, f = {f})"
        )));
    }
    let selected: Vec<usize> = rank(&scores).into_iter().take(m).collect();
    let aggregate = mean_rows(&updates.select(Axis(0), &selected));
    Ok(MultiKrumSelection {
        selected,
        scores,
        aggregate,
    })
}

fn per_coordinate<F>(updates: &Array2<f64>, mut reduce: F) -> Array1<f64>
where
    F: FnMut(&mut [f64]) -> f64,
{
    let mut column = vec![0.0; updates.nrows()];
    Array1::from_iter(updates.columns().into_iter().map(|col| {
        column.iter_mut().zip(col.iter()).for_each(|(c, &v)| *c = v);
        column.sort_by(f64::total_cmp);
        reduce(&mut column)
    }))
}

pub fn trimmed_mean(updates: &Array2<f64>, beta: usize) -> Result<Array1<f64>> {
    check_nonempty(updates)?;
    let n = updates.nrows();
    if n <= 2 * beta {
        return Err(Error::InvalidInput(format!(
            "trimmed mean needs n > 2 * beta (n = {n}, beta = {beta})"
        )));
    }
    let kept = (n - 2 * beta) as f64;
    Ok(per_coordinate(updates, |sorted| {
        sorted[beta..n - beta].iter().sum::<f64>() / kept
    }))
}

pub fn coord_median(updates: &Array2<f64>) -> Result<Array1<f64>> {
    check_nonempty(updates)?;
    let n = updates.nrows();
    Ok(per_coordinate(updates, |sorted| {
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricMedian {
    pub point: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const WEISZFELD_EPS: f64 = 1e-12;

/// Weiszfeld iteration started from the coordinate mean.
pub fn geometric_median(
    updates: &Array2<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<GeometricMedian> {
    check_nonempty(updates)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tol must be > 0, got {tol}")));
    }
    let mut z = mean_rows(updates);
    for it in 0..max_iter {
        let mut num = Array1::<f64>::zeros(updates.ncols());
        let mut den = 0.0;
        for row in updates.rows() {
            let w = 1.0 / squared_distance(row, z.view()).sqrt().max(WEISZFELD_EPS);
            num.scaled_add(w, &row);
            den += w;
        }
        let next = num / den;
        let step = norm((&next - &z).view());
        z = next;
        if step < tol {
            return Ok(GeometricMedian {
                point: z,
                iterations: it + 1,
                converged: true,
            });
        }
    }
    Ok(GeometricMedian {
        point: z,
        iterations: max_iter,
        converged: false,
    })
}

/// Sum of Euclidean distances, the quantity the geometric median minimizes.
pub fn geometric_median_objective(updates: &Array2<f64>, z: ArrayView1<f64>) -> f64 {
    updates
        .rows()
        .into_iter()
        .map(|r| squared_distance(r, z).sqrt())
        .sum()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `mean(s) - lambda * std(s)` over cosine scores.
pub fn dynamic_threshold(scores: &[f64], lambda: f64) -> f64 {
    let (mean, std) = mean_std(scores);
    mean - lambda * std
}

/// Accepts updates whose cosine to `reference` is at least
/// `mean - lambda * std` of all scores, then averages the survivors.
pub fn cosine_threshold_filter(
    updates: &Array2<f64>,
    reference: ArrayView1<f64>,
    lambda: f64,
) -> Result<AggregationReport> {
    let n = updates.nrows();
    if n < 2 {
        return Err(Error::InvalidInput("cosine filter needs n >= 2".into()));
    }
    if reference.len() != updates.ncols() {
        return Err(Error::Dimension {
            expected: updates.ncols(),
            got: reference.len(),
        });
    }
    if norm(reference) == 0.0 {
        return Err(Error::InvalidInput("reference direction is zero".into()));
    }
    let scores: Vec<f64> = updates
        .rows()
        .into_iter()
        .map(|u| cosine_or_neg(u, reference))
        .collect();
    let threshold = dynamic_threshold(&scores, lambda);
    let accepted: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let keep: Vec<usize> = (0..n).filter(|&i| accepted[i]).collect();
    if keep.is_empty() {
        return Err(Error::NoSurvivors);
    }
    let aggregate = mean_rows(&updates.select(Axis(0), &keep));
    Ok(AggregationReport {
        aggregate,
        accepted,
        scores,
        threshold: Some(threshold),
        note: None,
    })
}

/// Aggregation rule selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Fedavg,
    Krum,
    MultiKrum,
    TrimmedMean,
    CoordMedian,
    GeometricMedian,
    CosineFilter,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 7] = [
        DefenseKind::Fedavg,
        DefenseKind::Krum,
        DefenseKind::MultiKrum,
        DefenseKind::TrimmedMean,
        DefenseKind::CoordMedian,
        DefenseKind::GeometricMedian,
        DefenseKind::CosineFilter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::Fedavg => "fedavg",
            DefenseKind::Krum => "krum",
            DefenseKind::MultiKrum => "multi_krum",
            DefenseKind::TrimmedMean => "trimmed_mean",
            DefenseKind::CoordMedian => "coord_median",
            DefenseKind::GeometricMedian => "geometric_median",
            DefenseKind::CosineFilter => "cosine_filter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub f: usize,
    pub m: usize,
    pub beta: usize,
    pub lambda: f64,
    pub geomed_tol: f64,
    pub geomed_max_iter: usize,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::CosineFilter,
            f: 2,
            m: 2,
            beta: 2,
            lambda: 1.5,
            geomed_tol: 1e-8,
            geomed_max_iter: 500,
        }
    }
}

impl DefenseConfig {
    /// Runs the configured rule.
    ///
    /// `weights` are used by FedAvg only; `reference` by the cosine filter only.
    pub fn apply(
        &self,
        updates: &Array2<f64>,
        weights: &[f64],
        reference: ArrayView1<f64>,
    ) -> Result<AggregationReport> {
        let n = updates.nrows();
        let distances_to = |agg: &Array1<f64>| -> Vec<f64> {
            updates
                .rows()
                .into_iter()
                .map(|r| squared_distance(r, agg.view()).sqrt())
                .collect()
        };
        match self.kind {
            DefenseKind::Fedavg => {
                let aggregate = fedavg(updates, weights)?;
                Ok(AggregationReport {
                    scores: distances_to(&aggregate),
                    aggregate,
                    accepted: vec![true; n],
                    threshold: None,
                    note: None,
                })
            }
            DefenseKind::Krum => {
                let sel = krum(updates, self.f)?;
                let mut accepted = vec![false; n];
                accepted[sel.selected] = true;
                Ok(AggregationReport {
                    aggregate: updates.row(sel.selected).to_owned(),
                    accepted,
                    scores: sel.scores,
                    threshold: None,
                    note: None,
                })
            }
            DefenseKind::MultiKrum => {
                let sel = multi_krum(updates, self.f, self.m)?;
                let mut accepted = vec![false; n];
                sel.selected.iter().for_each(|&i| accepted[i] = true);
                Ok(AggregationReport {
                    aggregate: sel.aggregate,
                    accepted,
                    scores: sel.scores,
                    threshold: None,
                    note: None,
                })
            }
            DefenseKind::TrimmedMean => {
                let aggregate = trimmed_mean(updates, self.beta)?;
                Ok(AggregationReport {
                    scores: distances_to(&aggregate),
                    aggregate,
                    accepted: vec![true; n],
                    threshold: None,
                    note: None,
                })
            }
            DefenseKind::CoordMedian => {
                let aggregate = coord_median(updates)?;
                Ok(AggregationReport {
                    scores: distances_to(&aggregate),
                    aggregate,
                    accepted: vec![true; n],
                    threshold: None,
                    note: None,
                })
            }
            DefenseKind::GeometricMedian => {
                let gm = geometric_median(updates, self.geomed_tol, self.geomed_max_iter)?;
                let note =
                    (!gm.converged).then(|| format!("weiszfeld hit max_iter = {}", gm.iterations));
                Ok(AggregationReport {
                    scores: distances_to(&gm.point),
                    aggregate: gm.point,
                    accepted: vec![true; n],
                    threshold: None,
                    note,
                })
            }
            DefenseKind::CosineFilter => cosine_threshold_filter(updates, reference, self.lambda),
        }
    }
}
