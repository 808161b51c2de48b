//! Named experiment presets.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::defense::DefenseKind;
use crate::error::{Error, Result};
use crate::output::write_run_dir;
use crate::sim::run_experiment;

pub const SCENARIOS: [&str; 6] = [
    "baseline_clean",
    "naive_vs_each_defense",
    "grmp_vs_cosine",
    "grmp_vs_krum",
    "sweep_lambda",
    "sweep_alpha",
];

pub const SWEEP_LAMBDAS: [&str; 4] = ["0.5", "1.0", "1.5", "2.0"];
pub const SWEEP_ALPHAS: [&str; 4] = ["0.1", "0.5", "1.0", "10.0"];

/// One run of a scenario: an optional subdirectory and the overrides that
/// distinguish it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub subdir: Option<String>,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub runs: Vec<ScenarioRun>,
}

fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn single(pairs: &[(&str, &str)]) -> Vec<ScenarioRun> {
    vec![ScenarioRun {
        subdir: None,
        overrides: kv(pairs),
    }]
}

impl Scenario {
    pub fn named(name: &str) -> Result<Self> {
        let runs = match name {
            "baseline_clean" => single(&[("attack", "none"), ("defense", "cosine_filter")]),
            "grmp_vs_cosine" => single(&[("attack", "grmp"), ("defense", "cosine_filter")]),
            "grmp_vs_krum" => single(&[("attack", "grmp"), ("defense", "krum")]),
            "naive_vs_each_defense" => DefenseKind::ALL
                .iter()
                .map(|d| ScenarioRun {
                    subdir: Some(d.name().to_string()),
                    overrides: kv(&[("attack", "naive_flip"), ("defense", d.name())]),
                })
                .collect(),
            "sweep_lambda" => SWEEP_LAMBDAS
                .iter()
                .map(|l| ScenarioRun {
                    subdir: Some(format!("lambda_{l}")),
                    overrides: kv(&[
                        ("attack", "grmp"),
                        ("defense", "cosine_filter"),
                        ("defense.lambda", l),
                    ]),
                })
                .collect(),
            "sweep_alpha" => SWEEP_ALPHAS
                .iter()
                .map(|a| ScenarioRun {
                    subdir: Some(format!("alpha_{a}")),
                    overrides: kv(&[
                        ("attack", "grmp"),
                        ("defense", "cosine_filter"),
                        ("data.alpha", a),
                    ]),
                })
                .collect(),
            _ => {
                return Err(Error::Config(format!(
                    "unknown scenario `{name}` (expected one of {})",
                    SCENARIOS.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            runs,
        })
    }

    /// Resolved configs, one per run: defaults, then `base` overrides, then
    /// the scenario's own overrides.
    pub fn configs(
        &self,
        base: &[(String, String)],
    ) -> Result<Vec<(Option<String>, ExperimentConfig)>> {
        self.runs
            .iter()
            .map(|run| {
                let mut cfg = ExperimentConfig::default();
                cfg.apply_pairs(base.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
                cfg.apply_pairs(run.overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
                cfg.validate()?;
                Ok((run.subdir.clone(), cfg))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub final_accuracy: f64,
    pub final_asr: f64,
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: final accuracy {:.4}, final ASR {:.4}",
            self.dir.display(),
            self.final_accuracy,
            self.final_asr
        )
    }
}

/// Runs one resolved config and writes its run directory.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    let out = run_experiment(cfg)?;
    write_run_dir(dir, cfg, &out)?;
    let last = out.records.last().expect("rounds >= 1");
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        final_accuracy: last.accuracy,
        final_asr: last.asr,
    })
}

/// Runs every configuration of a scenario, in parallel across runs.
pub fn run_scenario(
    scenario: &Scenario,
    out_dir: &Path,
    base: &[(String, String)],
) -> Result<Vec<RunSummary>> {
    let configs = scenario.configs(base)?;
    configs
        .par_iter()
        .map(|(subdir, cfg)| {
            let dir = match subdir {
                Some(s) => out_dir.join(s),
                None => out_dir.to_path_buf(),
            };
            run_to_dir(cfg, &dir)
        })
        .collect()
}
