//! Primal-dual latent search: push the decoded graph away from the benign
//! structure while a multiplier enforces the cosine stealth floor.

use ndarray::{Array1, Array2, ArrayView1};

use super::graph::UpdateGraph;
use super::spectral::{synthesize_mean, SpectralDecomposition};
use super::vgae::{
    positive_weight, recon_and_grad_z, recon_bce, vgae_decode, vgae_encode, VgaeParams,
};
use crate::error::{Error, Result};
use crate::linalg::cosine_or_neg;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Array2<f64>,
    pub a_hat: Array2<f64>,
}

impl LatentState {
    pub fn from_z(z: Array2<f64>) -> Self {
        let a_hat = vgae_decode(&z);
        Self { z, a_hat }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub lambda_dual: f64,
    pub stealth_floor: f64,
    pub iterate: LatentState,
    pub recon_initial: f64,
    pub recon_final: f64,
    /// Cosine between the synthesized mean update and the reference at the
    /// returned iterate.
    pub stealth_cosine: f64,
    /// Whether the returned iterate satisfies the floor.
    pub feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualConfig {
    pub stealth_floor: f64,
    pub steps: usize,
    pub step_size: f64,
}

/// Thresholds edge probabilities at 0.5 into a symmetric 0/1 adjacency
/// with zero diagonal. Every node left isolated gets back its single most
/// probable edge (lowest index on ties); any components still separate are
/// then joined through their most probable cross edge.
pub fn threshold_adjacency(a_hat: &Array2<f64>) -> Array2<f64> {
    let n = a_hat.nrows();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            if a_hat[[i, j]] >= 0.5 {
                a[[i, j]] = 1.0;
                a[[j, i]] = 1.0;
            }
        }
    }
    for i in 0..n {
        if n < 2 || a.row(i).sum() > 0.0 {
            continue;
        }
        let best = (0..n)
            .filter(|&j| j != i)
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if a_hat[[i, b]] >= a_hat[[i, j]] => Some(b),
                _ => Some(j),
            })
            .expect("n >= 2");
        a[[i, best]] = 1.0;
        a[[best, i]] = 1.0;
    }
    connect_components(&mut a, a_hat);
    a
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Joins components through their most probable cross edge until the graph
/// is connected (lowest `(i, j)` on ties).
fn connect_components(a: &mut Array2<f64>, a_hat: &Array2<f64>) {
    let n = a.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if a[[i, j]] != 0.0 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if find(&mut parent, i) == find(&mut parent, j) {
                    continue;
                }
                if best.is_none_or(|(bi, bj)| a_hat[[i, j]] > a_hat[[bi, bj]]) {
                    best = Some((i, j));
                }
            }
        }
        let Some((i, j)) = best else { break };
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        parent[ri] = rj;
    }
}

/// Number of node pairs whose edge state differs.
pub fn edges_flipped(a: &Array2<f64>, b: &Array2<f64>) -> usize {
    let n = a.nrows();
    (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .filter(|&(i, j)| (a[[i, j]] != 0.0) != (b[[i, j]] != 0.0))
        .count()
}

#[derive(Clone)]
struct Evaluation {
    recon: f64,
    cosine: f64,
    a_adv: Array2<f64>,
}

fn evaluate(
    z: &Array2<f64>,
    g: &UpdateGraph,
    decomp: &SpectralDecomposition,
    reference: ArrayView1<f64>,
    pos_weight: f64,
) -> Result<Evaluation> {
    let a_hat = vgae_decode(z);
    let recon = recon_bce(&a_hat, &g.adjacency, pos_weight);
    let a_adv = threshold_adjacency(&a_hat);
    let synth: Array1<f64> = synthesize_mean(decomp, &a_adv)?;
    Ok(Evaluation {
        recon,
        cosine: cosine_or_neg(synth.view(), reference),
        a_adv,
    })
}

/// Gradient ascent on the reconstruction loss in latent space, with dual
/// ascent on the multiplier of `stealth_floor - cosine <= 0`.
///
/// The cosine depends on `Z` only through a thresholded graph, so it is
/// piecewise constant; while the constraint is violated the primal step
/// uses `lambda * (Z - mu)` as the penalty gradient, pulling back toward
/// the benign encoding. Returns the feasible iterate with the largest
/// reconstruction loss, or the last iterate when none was feasible.
pub fn lagrange_dual_search(
    params: &VgaeParams,
    g: &UpdateGraph,
    decomp: &SpectralDecomposition,
    reference: ArrayView1<f64>,
    cfg: &DualConfig,
) -> Result<(DualState, Array2<f64>)> {
    if !(-1.0..=1.0).contains(&cfg.stealth_floor) {
        return Err(Error::InvalidInput(format!(
            "stealth floor {} outside [-1, 1]",
            cfg.stealth_floor
        )));
    }
    if cfg.steps == 0 {
        return Err(Error::InvalidInput("dual search needs steps >= 1".into()));
    }
    let mu = vgae_encode(params, g)?.mu;
    let pos_weight = positive_weight(&g.adjacency);
    let mut z = mu.clone();
    let mut lambda: f64 = 0.0;
    let mut recon_initial = None;
    let mut best: Option<(Array2<f64>, Evaluation)> = None;
    let mut last: Option<(Array2<f64>, Evaluation)> = None;

    for step in 0..=cfg.steps {
        let eval = evaluate(&z, g, decomp, reference, pos_weight)?;
        if !eval.recon.is_finite() || !eval.cosine.is_finite() {
            return Err(Error::NonFinite { step });
        }
        recon_initial.get_or_insert(eval.recon);
        let violation = cfg.stealth_floor - eval.cosine;
        if violation <= 0.0 && best.as_ref().is_none_or(|(_, b)| eval.recon > b.recon) {
            best = Some((z.clone(), eval.clone()));
        }
        if step == cfg.steps {
            last = Some((z.clone(), eval));
            break;
        }

        let (_, mut grad) = recon_and_grad_z(&z, &g.adjacency);
        if violation > 0.0 {
            grad.scaled_add(-lambda, &(&z - &mu));
        }
        z.scaled_add(cfg.step_size, &grad);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        lambda = (lambda + cfg.step_size * violation).max(0.0);
    }

    let feasible = best.is_some();
    let (z, eval) = best.or(last).expect("loop runs at least once");
    let state = DualState {
        lambda_dual: lambda,
        stealth_floor: cfg.stealth_floor,
        iterate: LatentState::from_z(z),
        recon_initial: recon_initial.expect("evaluated at least once"),
        recon_final: eval.recon,
        stealth_cosine: eval.cosine,
        feasible,
    };
    Ok((state, eval.a_adv))
}
