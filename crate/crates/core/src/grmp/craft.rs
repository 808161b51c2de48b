//! End-to-end crafting of one malicious update, plus the attacker's view of
//! benign traffic.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::dual::{edges_flipped, lagrange_dual_search, DualConfig, DualState};
use super::graph::build_update_graph;
use super::spectral::{gsp_decompose, gsp_synthesize};
use super::vgae::VgaeParams;
use crate::error::{Error, Result};
use crate::linalg::{cosine, mean_rows, norm};

/// How the attacker observes benign traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knowledge {
    /// Sees every benign update of every round.
    Full,
    /// Sees only its own updates and the public global-model deltas.
    OwnPlusGlobal,
}

impl Knowledge {
    pub fn name(self) -> &'static str {
        match self {
            Knowledge::Full => "full",
            Knowledge::OwnPlusGlobal => "own_plus_global",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Knowledge::Full, Knowledge::OwnPlusGlobal]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrmpConfig {
    pub tau_edge: f64,
    /// `None`: attacker-estimated filter threshold plus `margin`.
    pub stealth_floor: Option<f64>,
    pub margin: f64,
    /// Norm of the blended poison, relative to the mean benign update norm.
    pub gamma_blend: f64,
    pub dual_steps: usize,
    pub step_size: f64,
    pub hidden: usize,
    pub latent: usize,
    pub vgae_epochs: usize,
    pub vgae_lr: f64,
    /// Rounds of observations kept for VGAE training.
    pub history: usize,
    pub knowledge: Knowledge,
    /// 0 disables the encoder-side random projection.
    pub projection_dim: usize,
}

impl Default for GrmpConfig {
    fn default() -> Self {
        Self {
            tau_edge: 0.3,
            stealth_floor: None,
            margin: 0.05,
            gamma_blend: 1.5,
            dual_steps: 100,
            step_size: 0.05,
            hidden: 32,
            latent: 8,
            vgae_epochs: 50,
            vgae_lr: 0.01,
            history: 5,
            knowledge: Knowledge::Full,
            projection_dim: 0,
        }
    }
}

/// Per-round attack diagnostics, one JSON line in `attack_trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub round: usize,
    pub recon_bce_initial: f64,
    pub recon_bce_final: f64,
    pub lambda_dual: f64,
    pub stealth_cosine: f64,
    pub edges_flipped: usize,
    pub stealth_floor: f64,
    pub final_cosine: f64,
    pub final_norm: f64,
    pub knowledge: Knowledge,
    /// False when the benign reconstruction could not be exact.
    pub observation_exact: bool,
}

#[derive(Debug, Clone)]
pub struct CraftedUpdate {
    pub update: Array1<f64>,
    pub dual: DualState,
    pub a_adv: Array2<f64>,
    pub edges_flipped: usize,
}

/// Smallest `alpha >= 0` such that `cos(v + alpha * r, r) >= floor`, then a
/// norm clip to `max_norm`. Clipping preserves direction.
pub fn project_to_stealth_cone(
    v: &Array1<f64>,
    reference: ArrayView1<f64>,
    floor: f64,
    max_norm: f64,
) -> Array1<f64> {
    let r_norm = norm(reference);
    if r_norm == 0.0 {
        return clip_norm(v.clone(), max_norm);
    }
    let r_hat = reference.mapv(|x| x / r_norm);
    let mut out = v.clone();
    if norm(out.view()) == 0.0 {
        out = r_hat.mapv(|x| x * max_norm);
    }
    let along = out.dot(&r_hat);
    let perp = norm((&out - &r_hat.mapv(|x| x * along)).view());
    let current = cosine(out.view(), reference).unwrap_or(-1.0);
    if current < floor {
        if floor >= 1.0 || perp == 0.0 {
            let len = norm(out.view()).max(f64::MIN_POSITIVE);
            out = r_hat.mapv(|x| x * len);
        } else {
            // cos = t / sqrt(t^2 + perp^2) with t = along + alpha
            let target = floor * perp / (1.0 - floor * floor).sqrt();
            let alpha = (target - along).max(0.0);
            out.scaled_add(alpha, &r_hat);
        }
    }
    clip_norm(out, max_norm)
}

fn clip_norm(v: Array1<f64>, max_norm: f64) -> Array1<f64> {
    let n = norm(v.view());
    if n > max_norm && n > 0.0 {
        v * (max_norm / n)
    } else {
        v
    }
}

/// Graph construction, latent dual search, and spectral re-synthesis,
/// followed by poison blending and the stealth projection.
///
/// Node features are divided by the mean benign row norm before entering
/// the graph pipeline so encoder activations do not depend on the update
/// scale; the synthesized signals are scaled back afterwards.
pub fn craft_malicious_update(
    benign: &Array2<f64>,
    raw_poison: &Array1<f64>,
    reference: ArrayView1<f64>,
    stealth_floor: f64,
    cfg: &GrmpConfig,
    params: &VgaeParams,
) -> Result<CraftedUpdate> {
    if benign.nrows() < 2 {
        return Err(Error::InvalidInput(
            "crafting needs >= 2 benign updates".into(),
        ));
    }
    if raw_poison.len() != benign.ncols() || reference.len() != benign.ncols() {
        return Err(Error::Dimension {
            expected: benign.ncols(),
            got: raw_poison.len().min(reference.len()),
        });
    }
    if raw_poison.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("raw poison is not finite".into()));
    }
    let row_norms: Vec<f64> = benign.rows().into_iter().map(norm).collect();
    let max_norm = row_norms.iter().copied().fold(0.0, f64::max);
    let scale = match row_norms.iter().sum::<f64>() / row_norms.len() as f64 {
        s if s > 0.0 => s,
        _ => 1.0,
    };

    let g = build_update_graph(&(benign / scale), cfg.tau_edge)?;
    let decomp = gsp_decompose(&g)?;
    let dual_cfg = DualConfig {
        stealth_floor,
        steps: cfg.dual_steps,
        step_size: cfg.step_size,
    };
    let (dual, a_adv) = lagrange_dual_search(params, &g, &decomp, reference, &dual_cfg)?;
    let synthesized = gsp_synthesize(&decomp, &a_adv)? * scale;

    let mut candidate = mean_rows(&synthesized);
    let poison_norm = norm(raw_poison.view());
    if poison_norm > 0.0 {
        candidate.scaled_add(cfg.gamma_blend * scale / poison_norm, raw_poison);
    }
    let update = project_to_stealth_cone(&candidate, reference, stealth_floor, max_norm);

    Ok(CraftedUpdate {
        update,
        edges_flipped: edges_flipped(&g.adjacency, &a_adv),
        dual,
        a_adv,
    })
}

/// What the attacker saw in one completed or in-progress round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundObservation {
    pub round: usize,
    /// True benign updates, one per row.
    pub benign: Array2<f64>,
    /// The attacker's own submissions.
    pub own: Array2<f64>,
    /// The attacker's own clean-training deltas (equal to `own` outside the
    /// exploit phase).
    pub own_clean: Array2<f64>,
    /// FedAvg weights of all clients, benign rows first, then own rows.
    pub weights: Vec<f64>,
    /// Aggregate the server applied; `None` for the in-progress round.
    pub global_delta: Option<Array1<f64>>,
    /// Whether the server's rule was weighted FedAvg over all submissions.
    pub fedavg_aggregation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    /// Node-feature matrices, oldest first; the last one is the crafting graph.
    pub matrices: Vec<Array2<f64>>,
    /// False if any reconstruction relied on a non-FedAvg aggregate.
    pub exact: bool,
}

/// Benign mean implied by a FedAvg aggregate once the attacker's own
/// weighted contributions are removed.
pub fn reconstruct_benign_mean(
    global_delta: &Array1<f64>,
    own: &Array2<f64>,
    weights: &[f64],
) -> Result<Array1<f64>> {
    let n_own = own.nrows();
    if weights.len() < n_own {
        return Err(Error::InvalidInput("fewer weights than own updates".into()));
    }
    let total: f64 = weights.iter().sum();
    let own_w = &weights[weights.len() - n_own..];
    let own_total: f64 = own_w.iter().sum();
    let benign_total = total - own_total;
    if benign_total <= 0.0 {
        return Err(Error::InvalidInput(
            "no benign weight to reconstruct".into(),
        ));
    }
    let mut sum = global_delta * total;
    for (row, &w) in own.rows().into_iter().zip(own_w) {
        sum.scaled_add(-w, &row);
    }
    Ok(sum / benign_total)
}

pub fn collect_benign_observations(
    history: &[RoundObservation],
    knowledge: Knowledge,
    window: usize,
) -> Result<Observations> {
    let current = history
        .last()
        .ok_or_else(|| Error::InvalidInput("no observation history".into()))?;
    let start = history.len().saturating_sub(window.max(1));
    let recent = &history[start..];
    match knowledge {
        Knowledge::Full => Ok(Observations {
            matrices: recent.iter().map(|o| o.benign.clone()).collect(),
            exact: true,
        }),
        Knowledge::OwnPlusGlobal => {
            let mut estimates = Vec::new();
            let mut exact = true;
            for o in history[..history.len() - 1]
                .iter()
                .rev()
                .take(window.max(1))
                .rev()
            {
                if let Some(delta) = &o.global_delta {
                    estimates.push(reconstruct_benign_mean(delta, &o.own, &o.weights)?);
                    exact &= o.fedavg_aggregation;
                }
            }
            let rows = estimates.len() + current.own_clean.nrows();
            let d = current.own_clean.ncols();
            let mut m = Array2::zeros((rows, d));
            for (i, e) in estimates.iter().enumerate() {
                m.row_mut(i).assign(e);
            }
            m.slice_mut(s![estimates.len().., ..])
                .assign(&current.own_clean);
            if m.nrows() < 2 {
                return Err(Error::InvalidInput(
                    "own_plus_global needs a completed round or two attackers".into(),
                ));
            }
            // every matrix shares the pseudo-benign rows; one graph suffices
            Ok(Observations {
                matrices: vec![m],
                exact,
            })
        }
    }
}

/// Attacker-side estimate of the filter threshold: the dynamic rule applied
/// to the observed rows' cosines against the reference.
pub fn estimate_threshold(observed: &Array2<f64>, reference: ArrayView1<f64>, lambda: f64) -> f64 {
    let scores: Vec<f64> = observed
        .axis_iter(Axis(0))
        .map(|u| crate::linalg::cosine_or_neg(u, reference))
        .collect();
    crate::defense::dynamic_threshold(&scores, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn projection_reaches_floor_minimally() {
        let v = array![0.0, 1.0];
        let r = array![1.0, 0.0];
        let out = project_to_stealth_cone(&v, r.view(), 0.6, 10.0);
        let c = cosine(out.view(), r.view()).unwrap();
        assert!((c - 0.6).abs() < 1e-12);
        // only the reference component changed
        assert_eq!(out[1], 1.0);
    }

    #[test]
    fn projection_leaves_feasible_vectors_alone() {
        let v = array![2.0, 1.0];
        let r = array![1.0, 0.0];
        assert_eq!(project_to_stealth_cone(&v, r.view(), 0.5, 10.0), v);
    }

    #[test]
    fn projection_clips_norm_after_cosine() {
        let v = array![-3.0, 4.0];
        let r = array![1.0, 1.0];
        let out = project_to_stealth_cone(&v, r.view(), 0.8, 1.0);
        assert!(norm(out.view()) <= 1.0 + 1e-12);
        assert!(cosine(out.view(), r.view()).unwrap() >= 0.8 - 1e-12);
    }

    #[test]
    fn projection_negative_floor() {
        let v = array![-1.0, 0.0];
        let r = array![1.0, 0.0];
        let out = project_to_stealth_cone(&v, r.view(), -0.5, 5.0);
        // v is antiparallel with no perpendicular part: snaps to the reference
        assert!(cosine(out.view(), r.view()).unwrap() >= -0.5);
        let v = array![-1.0, 1.0];
        let out = project_to_stealth_cone(&v, r.view(), -0.5, 5.0);
        assert!((cosine(out.view(), r.view()).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn benign_mean_reconstruction_is_exact_under_fedavg() {
        let benign = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let own = array![[10.0, 10.0]];
        let weights = vec![1.0, 2.0, 3.0, 4.0];
        let all = ndarray::concatenate![Axis(0), benign, own];
        let delta = crate::defense::fedavg(&all, &weights).unwrap();
        let est = reconstruct_benign_mean(&delta, &own, &weights).unwrap();
        let truth = crate::defense::fedavg(&benign, &weights[..3]).unwrap();
        for (a, b) in est.iter().zip(truth.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_knowledge_passes_through() {
        let obs: Vec<RoundObservation> = (0..3)
            .map(|r| RoundObservation {
                round: r + 1,
                benign: Array2::from_elem((4, 2), r as f64),
                own: Array2::zeros((2, 2)),
                own_clean: Array2::zeros((2, 2)),
                weights: vec![1.0; 6],
                global_delta: None,
                fedavg_aggregation: true,
            })
            .collect();
        let o = collect_benign_observations(&obs, Knowledge::Full, 10).unwrap();
        assert_eq!(o.matrices.len(), 3);
        assert!(o.matrices.iter().all(|m| m.nrows() == 4));
        assert!(collect_benign_observations(&[], Knowledge::Full, 10).is_err());
    }

    #[test]
    fn knowledge_names() {
        assert_eq!(
            Knowledge::parse("own_plus_global"),
            Some(Knowledge::OwnPlusGlobal)
        );
        assert_eq!(Knowledge::parse("full"), Some(Knowledge::Full));
        assert_eq!(Knowledge::parse("none"), None);
    }
}
