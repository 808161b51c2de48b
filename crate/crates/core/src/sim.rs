//! The federated round loop: local training, attacker behaviour, server-side
//! defense, and per-round metrics.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AttackKind, DataSource, ExperimentConfig};
use crate::data::{
    asr_eval_subset, auxiliary_poison_pool, flip_labels, load_agnews_csv, partition_noniid,
    read_jsonl, synth_corpus, trigger_set, Corpus, Example,
};
use crate::defense::{AggregationReport, DefenseKind};
use crate::error::{Error, Result};
use crate::grmp::{
    build_update_graph, collect_benign_observations, craft_malicious_update, estimate_threshold,
    fit_vgae_projected, AttackTrace, Knowledge, RoundObservation,
};
use crate::linalg::{cosine_or_neg, mean_rows, norm};
use crate::model::{
    evaluate_accuracy, evaluate_asr, featurize_all, init_params, local_train, ParamVector, Sample,
    TrainConfig,
};
use crate::rng::{derive_seed, rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stealth,
    Exploit,
}

/// Metrics and server decisions for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub phase: Phase,
    pub accuracy: f64,
    /// Accuracy on test examples outside the ASR subset.
    pub clean_accuracy: f64,
    pub asr: f64,
    /// Cosine of each submission to the server's reference direction.
    pub per_client_cosine: Vec<f64>,
    pub threshold: Option<f64>,
    pub accepted: Vec<bool>,
    /// Rule-specific per-client scores (cosine or distance).
    pub scores: Vec<f64>,
    pub aggregate_norm: f64,
    /// The defense rejected everything (or errored) and the global model
    /// was left unchanged.
    pub skipped: bool,
    pub error: Option<String>,
    pub note: Option<String>,
    /// Cosine of each attacker's counterfactual naive label-flip update to
    /// this round's reference. Empty unless GRMP crafted this round.
    pub naive_cosine: Vec<f64>,
}

impl RoundRecord {
    /// Whether each attacker's counterfactual naive update falls below the
    /// threshold the server used this round.
    pub fn naive_rejected(&self) -> Vec<bool> {
        match self.threshold {
            Some(t) => self.naive_cosine.iter().map(|&c| c < t).collect(),
            None => Vec::new(),
        }
    }
}

/// Everything derived from the config once per experiment.
pub struct Environment {
    pub clients: Vec<Vec<Sample>>,
    /// Attacker's poisoning set: its own trigger-bearing source examples plus
    /// the auxiliary pool, labels intact, one entry per attacker.
    pub poison_clean: Vec<Vec<Sample>>,
    /// `poison_clean` with trigger-bearing source examples relabelled.
    pub flipped: Vec<Vec<Sample>>,
    pub test: Vec<Sample>,
    /// Test examples that are not attack targets.
    pub clean_test: Vec<Sample>,
    pub asr_subset: Vec<Sample>,
    pub weights: Vec<f64>,
    pub hash_dim: usize,
    pub class_count: usize,
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.data.source()? {
        DataSource::Synth => synth_corpus(&cfg.data.synth, cfg.seed),
        DataSource::Agnews { train, test } => load_agnews_csv(train, test),
        DataSource::Jsonl { train, test } => Corpus::new(read_jsonl(train)?, read_jsonl(test)?),
    }
}

impl Environment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let corpus = load_corpus(cfg)?;
        Self::from_corpus(cfg, &corpus)
    }

    pub fn from_corpus(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Self> {
        let d = &cfg.data;
        let triggers = trigger_set(&d.triggers);
        let plan = partition_noniid(corpus, cfg.n_clients, d.alpha, cfg.seed)?;
        let featurize = |examples: &[Example]| featurize_all(examples, d.hash_dim, d.hash_seed);

        let local: Vec<Vec<Example>> = plan
            .client_indices
            .iter()
            .map(|idx| idx.iter().map(|&i| corpus.train[i].clone()).collect())
            .collect();
        let clients = local
            .iter()
            .map(|ex| featurize(ex))
            .collect::<Result<Vec<_>>>()?;
        let aux = auxiliary_poison_pool(corpus, &triggers, d.src_class, cfg.aux_examples, cfg.seed);
        let mut poison_clean = Vec::with_capacity(cfg.n_attackers);
        let mut flipped = Vec::with_capacity(cfg.n_attackers);
        for own in &local[cfg.first_attacker()..] {
            let mut ex: Vec<Example> = own
                .iter()
                .filter(|e| e.label == d.src_class && e.contains_any(&triggers))
                .cloned()
                .collect();
            ex.extend(aux.iter().cloned());
            if ex.is_empty() {
                return Err(Error::InvalidInput(
                    "attacker has no trigger-bearing source examples; raise attack.aux_examples"
                        .into(),
                ));
            }
            flipped.push(featurize(&flip_labels(
                &ex,
                &triggers,
                d.src_class,
                d.dst_class,
            )?)?);
            poison_clean.push(featurize(&ex)?);
        }
        let test = featurize(&corpus.test)?;
        let clean_test = corpus
            .test
            .iter()
            .zip(&test)
            .filter(|(e, _)| !(e.label == d.src_class && e.contains_any(&triggers)))
            .map(|(_, s)| s.clone())
            .collect();
        let asr_subset = featurize(&asr_eval_subset(corpus, &triggers, d.src_class)?)?;
        let weights = local.iter().map(|c| c.len() as f64).collect();
        Ok(Self {
            clients,
            poison_clean,
            flipped,
            test,
            clean_test,
            asr_subset,
            weights,
            hash_dim: d.hash_dim,
            class_count: corpus.class_count,
        })
    }
}

/// Mutable state carried across rounds.
pub struct SimState {
    pub global: ParamVector,
    /// Last aggregate actually applied; the cosine filter's reference.
    pub prev_aggregate: Option<Array1<f64>>,
    pub observations: Vec<RoundObservation>,
}

impl SimState {
    pub fn new(env: &Environment, seed: u64) -> Self {
        Self {
            global: init_params(env.hash_dim, env.class_count, seed),
            prev_aggregate: None,
            observations: Vec::new(),
        }
    }
}

pub struct RoundOutcome {
    pub record: RoundRecord,
    pub trace: Option<AttackTrace>,
}

fn train_cfg(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.local_epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        weight_decay: cfg.weight_decay,
    }
}

/// Seed of a client's clean local training in a round. Attackers use the
/// same stream while behaving honestly, so their stealth-phase submissions
/// match what a benign client with the same data would send.
pub fn clean_seed(cfg: &ExperimentConfig, client: usize, round: usize) -> u64 {
    derive_seed(
        cfg.seed,
        &[stream::CLEAN_TRAIN, client as u64, round as u64],
    )
}

fn stack(rows: &[Array1<f64>], d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

pub fn phase_of(cfg: &ExperimentConfig, round: usize) -> Phase {
    if round < cfg.phase_switch_round {
        Phase::Stealth
    } else {
        Phase::Exploit
    }
}

struct AttackerOutput {
    submissions: Vec<Array1<f64>>,
    own_clean: Vec<Array1<f64>>,
    naive: Vec<Array1<f64>>,
    trace: Option<AttackTrace>,
}

/// Attacker submissions for one round (one per attacker, in client order).
#[allow(clippy::too_many_arguments)]
fn attacker_step(
    env: &Environment,
    state: &mut SimState,
    cfg: &ExperimentConfig,
    round: usize,
    benign: &Array2<f64>,
    benign_weights: &[f64],
) -> Result<AttackerOutput> {
    let tc = train_cfg(cfg);
    let first = cfg.first_attacker();
    let own_clean: Vec<Array1<f64>> = (first..cfg.n_clients)
        .into_par_iter()
        .map(|c| {
            local_train(
                &state.global,
                &env.clients[c],
                &tc,
                clean_seed(cfg, c, round),
            )
        })
        .collect::<Result<_>>()?;
    let phase = phase_of(cfg, round);
    if cfg.attack == AttackKind::None || phase == Phase::Stealth {
        if cfg.attack == AttackKind::Grmp {
            record_observation(state, cfg, round, benign, &own_clean, benign_weights, env);
        }
        return Ok(AttackerOutput {
            submissions: own_clean.clone(),
            own_clean,
            naive: Vec::new(),
            trace: None,
        });
    }

    let flipped: Vec<Array1<f64>> = (first..cfg.n_clients)
        .into_par_iter()
        .map(|c| {
            local_train(
                &state.global,
                &env.flipped[c - first],
                &tc,
                clean_seed(cfg, c, round),
            )
        })
        .collect::<Result<_>>()?;
    let naive: Vec<Array1<f64>> = flipped.iter().map(|f| f * cfg.naive_boost).collect();
    if cfg.attack == AttackKind::NaiveFlip {
        return Ok(AttackerOutput {
            submissions: naive,
            own_clean,
            naive: Vec::new(),
            trace: None,
        });
    }

    // GRMP
    let unflipped: Vec<Array1<f64>> = (first..cfg.n_clients)
        .into_par_iter()
        .map(|c| {
            local_train(
                &state.global,
                &env.poison_clean[c - first],
                &tc,
                clean_seed(cfg, c, round),
            )
        })
        .collect::<Result<_>>()?;

    record_observation(state, cfg, round, benign, &own_clean, benign_weights, env);
    let d = benign.ncols();
    let raw_poison = mean_rows(&stack(
        &flipped
            .iter()
            .zip(&unflipped)
            .map(|(f, c)| f - c)
            .collect::<Vec<_>>(),
        d,
    ));
    let mut obs =
        collect_benign_observations(&state.observations, cfg.grmp.knowledge, cfg.grmp.history)?;
    if cfg.grmp.knowledge == Knowledge::Full {
        // the attacker's own clean deltas are benign traffic it sees too
        let recent = &state.observations[state.observations.len() - obs.matrices.len()..];
        for (m, o) in obs.matrices.iter_mut().zip(recent) {
            *m = concatenate![Axis(0), m.view(), o.own_clean.view()];
        }
    }
    let current = obs.matrices.last().expect("at least one matrix");
    let reference = match &state.prev_aggregate {
        Some(r) if norm(r.view()) > 0.0 => r.clone(),
        _ => mean_rows(current),
    };
    let stealth_floor = match cfg.grmp.stealth_floor {
        Some(f) => f,
        None => (estimate_threshold(current, reference.view(), cfg.defense.lambda)
            + cfg.grmp.margin)
            .clamp(-1.0, 1.0),
    };

    let graphs = obs
        .matrices
        .iter()
        .map(|m| {
            let scale = mean_row_norm(m);
            build_update_graph(&(m / scale), cfg.grmp.tau_edge)
        })
        .collect::<Result<Vec<_>>>()?;
    let g = &cfg.grmp;
    let params = fit_vgae_projected(
        &graphs,
        g.hidden,
        g.latent,
        g.projection_dim,
        g.vgae_epochs,
        g.vgae_lr,
        derive_seed(cfg.seed, &[stream::VGAE, round as u64]),
    )?;
    let crafted = craft_malicious_update(
        current,
        &raw_poison,
        reference.view(),
        stealth_floor,
        g,
        &params,
    )?;

    let mut rng = rng_from(cfg.seed, &[stream::ATTACK_NOISE, round as u64]);
    let base_norm = norm(crafted.update.view());
    let submissions = (first..cfg.n_clients)
        .map(|_| {
            let noise = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
            let nn = norm(noise.view());
            let mut u = crafted.update.clone();
            if nn > 0.0 && base_norm > 0.0 {
                u.scaled_add(cfg.attack_noise * base_norm / nn, &noise);
            }
            u
        })
        .collect();
    let trace = AttackTrace {
        round,
        recon_bce_initial: crafted.dual.recon_initial,
        recon_bce_final: crafted.dual.recon_final,
        lambda_dual: crafted.dual.lambda_dual,
        stealth_cosine: crafted.dual.stealth_cosine,
        edges_flipped: crafted.edges_flipped,
        stealth_floor,
        final_cosine: cosine_or_neg(crafted.update.view(), reference.view()),
        final_norm: base_norm,
        knowledge: g.knowledge,
        observation_exact: obs.exact,
    };
    Ok(AttackerOutput {
        submissions,
        own_clean,
        naive,
        trace: Some(trace),
    })
}

fn mean_row_norm(m: &Array2<f64>) -> f64 {
    let s = m.axis_iter(Axis(0)).map(norm).sum::<f64>() / m.nrows().max(1) as f64;
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

fn record_observation(
    state: &mut SimState,
    cfg: &ExperimentConfig,
    round: usize,
    benign: &Array2<f64>,
    own_clean: &[Array1<f64>],
    benign_weights: &[f64],
    env: &Environment,
) {
    let d = benign.ncols();
    let mut weights = benign_weights.to_vec();
    weights.extend_from_slice(&env.weights[cfg.first_attacker()..]);
    state.observations.push(RoundObservation {
        round,
        benign: benign.clone(),
        own: stack(own_clean, d),
        own_clean: stack(own_clean, d),
        weights,
        global_delta: None,
        fedavg_aggregation: cfg.defense.kind == DefenseKind::Fedavg,
    });
    let keep = cfg.grmp.history + 1;
    if state.observations.len() > keep {
        let excess = state.observations.len() - keep;
        state.observations.drain(..excess);
    }
}

/// One federated round.
pub fn run_round(
    env: &Environment,
    state: &mut SimState,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<RoundOutcome> {
    let tc = train_cfg(cfg);
    let first = cfg.first_attacker();
    let d = state.global.dim();

    let benign_rows: Vec<Array1<f64>> = (0..first)
        .into_par_iter()
        .map(|c| {
            local_train(
                &state.global,
                &env.clients[c],
                &tc,
                clean_seed(cfg, c, round),
            )
        })
        .collect::<Result<_>>()?;
    let benign = stack(&benign_rows, d);

    let attack = if cfg.n_attackers > 0 {
        attacker_step(env, state, cfg, round, &benign, &env.weights[..first])?
    } else {
        AttackerOutput {
            submissions: Vec::new(),
            own_clean: Vec::new(),
            naive: Vec::new(),
            trace: None,
        }
    };

    let mut rows = benign_rows;
    rows.extend(attack.submissions.iter().cloned());
    let updates = stack(&rows, d);

    let reference = match &state.prev_aggregate {
        Some(r) if norm(r.view()) > 0.0 => r.clone(),
        _ => mean_rows(&updates),
    };
    let per_client_cosine: Vec<f64> = updates
        .axis_iter(Axis(0))
        .map(|u| cosine_or_neg(u, reference.view()))
        .collect();

    let naive_cosine: Vec<f64> = attack
        .naive
        .iter()
        .map(|u| cosine_or_neg(u.view(), reference.view()))
        .collect();
    let (report, error) = match cfg.defense.apply(&updates, &env.weights, reference.view()) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let skipped = report.is_none();
    let AggregationReport {
        aggregate,
        accepted,
        scores,
        threshold,
        note,
    } = report.unwrap_or_else(|| AggregationReport {
        aggregate: Array1::zeros(d),
        accepted: vec![false; cfg.n_clients],
        scores: vec![f64::NAN; cfg.n_clients],
        threshold: None,
        note: None,
    });

    if !skipped {
        state.global.apply(&aggregate)?;
        state.prev_aggregate = Some(aggregate.clone());
    }
    if cfg.attack == AttackKind::Grmp && cfg.n_attackers > 0 {
        if let Some(obs) = state.observations.last_mut().filter(|o| o.round == round) {
            obs.own = stack(&attack.submissions, d);
            obs.own_clean = stack(&attack.own_clean, d);
            obs.global_delta = (!skipped).then(|| aggregate.clone());
        }
    }

    let record = RoundRecord {
        round,
        phase: phase_of(cfg, round),
        accuracy: evaluate_accuracy(&state.global, &env.test)?,
        clean_accuracy: evaluate_accuracy(&state.global, &env.clean_test)?,
        asr: evaluate_asr(&state.global, &env.asr_subset, cfg.data.dst_class)?,
        per_client_cosine,
        threshold,
        accepted,
        scores,
        aggregate_norm: norm(aggregate.view()),
        skipped,
        error,
        note,
        naive_cosine,
    };
    Ok(RoundOutcome {
        record,
        trace: attack.trace,
    })
}

pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub traces: Vec<AttackTrace>,
    pub final_model: ParamVector,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let env = Environment::build(cfg)?;
    run_experiment_in(&env, cfg)
}

/// Runs all rounds against a prepared environment.
pub fn run_experiment_in(env: &Environment, cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut state = SimState::new(env, cfg.seed);
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut traces = Vec::new();
    for round in 1..=cfg.rounds {
        let out = run_round(env, &mut state, cfg, round).map_err(|e| e.in_round(round))?;
        records.push(out.record);
        traces.extend(out.trace);
    }
    Ok(RunOutput {
        records,
        traces,
        final_model: state.global,
    })
}

/// Convenience for knowledge-mode reporting.
pub fn knowledge_label(cfg: &ExperimentConfig) -> &'static str {
    match cfg.attack {
        AttackKind::Grmp => cfg.grmp.knowledge.name(),
        _ => "n/a",
    }
}
