//! Run directory layout and plot-data emission.
//!
//! A run directory holds:
//! - `config.txt`: resolved config in the `key=value` format (re-runnable)
//! - `config.json`: the same config as JSON
//! - `rounds.csv`: one row per round
//! - `aggregation.csv`: one row per (round, client) server decision
//! - `attack_trace.jsonl`: one line per crafted round
//! - `model.bin`: final global parameters

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::sim::{Phase, RoundRecord, RunOutput};

pub const CONFIG_TEXT: &str = "config.txt";
pub const CONFIG_JSON: &str = "config.json";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const AGGREGATION_CSV: &str = "aggregation.csv";
pub const TRACE_JSONL: &str = "attack_trace.jsonl";
pub const MODEL_BIN: &str = "model.bin";
pub const FIG4_CSV: &str = "fig4_data.csv";
pub const FIG5_CSV: &str = "fig5_data.csv";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Stealth => "stealth",
        Phase::Exploit => "exploit",
    }
}

pub fn rounds_header(n_clients: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "round",
        "phase",
        "accuracy",
        "clean_accuracy",
        "asr",
        "threshold",
        "aggregate_norm",
        "skipped",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..n_clients).map(|i| format!("cos_{i}")));
    h.extend((0..n_clients).map(|i| format!("accepted_{i}")));
    h
}

/// Writes `rounds.csv` for the given records.
pub fn write_rounds_csv(path: &Path, records: &[RoundRecord], n_clients: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(rounds_header(n_clients))
        .map_err(|e| csv_err(path, e))?;
    for r in records {
        let mut row = vec![
            r.round.to_string(),
            phase_name(r.phase).to_string(),
            r.accuracy.to_string(),
            r.clean_accuracy.to_string(),
            r.asr.to_string(),
            opt(r.threshold),
            r.aggregate_norm.to_string(),
            bit(r.skipped).to_string(),
        ];
        row.extend(r.per_client_cosine.iter().map(|c| c.to_string()));
        row.extend(r.accepted.iter().map(|&a| bit(a).to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_aggregation_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "round",
        "client_id",
        "score",
        "cosine",
        "threshold",
        "accepted",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in records {
        for (i, &acc) in r.accepted.iter().enumerate() {
            w.write_record([
                r.round.to_string(),
                i.to_string(),
                r.scores.get(i).map(|s| s.to_string()).unwrap_or_default(),
                r.per_client_cosine[i].to_string(),
                opt(r.threshold),
                bit(acc).to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the full run directory, creating it if needed.
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let p = dir.join(CONFIG_TEXT);
    fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
    let p = dir.join(CONFIG_JSON);
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::io(&p, e.into()))?;
    fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;

    write_rounds_csv(&dir.join(ROUNDS_CSV), &out.records, cfg.n_clients)?;
    write_aggregation_csv(&dir.join(AGGREGATION_CSV), &out.records)?;

    let p = dir.join(TRACE_JSONL);
    let mut w = create(&p)?;
    for t in &out.traces {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::io(&p, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    out.final_model.save(&dir.join(MODEL_BIN))
}

/// One parsed `rounds.csv` row, as much as the plot files need.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundsRow {
    pub round: usize,
    pub phase: String,
    pub accuracy: f64,
    pub asr: f64,
    pub threshold: Option<f64>,
    pub cosine: Vec<f64>,
    pub accepted: Vec<bool>,
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundsRow>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "rounds.csv not found"),
        ));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::Ingest {
            path: path.to_path_buf(),
            row: 1,
            message: format!("missing column {name}"),
        })
    };
    let (c_round, c_phase, c_acc, c_asr, c_thr) = (
        need("round")?,
        need("phase")?,
        need("accuracy")?,
        need("asr")?,
        need("threshold")?,
    );
    let cos_cols: Vec<usize> = (0..).map_while(|i| col(&format!("cos_{i}"))).collect();
    let acc_cols: Vec<usize> = (0..).map_while(|i| col(&format!("accepted_{i}"))).collect();

    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row_no = i + 2;
        let bad = |what: &str| Error::Ingest {
            path: path.to_path_buf(),
            row: row_no,
            message: format!("bad {what}"),
        };
        let num = |c: usize, what: &str| -> Result<f64> { rec[c].parse().map_err(|_| bad(what)) };
        rows.push(RoundsRow {
            round: rec[c_round].parse().map_err(|_| bad("round"))?,
            phase: rec[c_phase].to_string(),
            accuracy: num(c_acc, "accuracy")?,
            asr: num(c_asr, "asr")?,
            threshold: if rec[c_thr].is_empty() {
                None
            } else {
                Some(num(c_thr, "threshold")?)
            },
            cosine: cos_cols
                .iter()
                .map(|&c| num(c, "cosine"))
                .collect::<Result<_>>()?,
            accepted: acc_cols.iter().map(|&c| &rec[c] == "1").collect(),
        });
    }
    Ok(rows)
}

/// Writes `fig4_data.csv` (accuracy and ASR per round) and `fig5_data.csv`
/// (per-client cosine and threshold per round) next to `rounds.csv`.
pub fn emit_plotdata(run_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let rows = read_rounds_csv(&run_dir.join(ROUNDS_CSV))?;

    let fig4 = run_dir.join(FIG4_CSV);
    let mut w = csv::Writer::from_writer(create(&fig4)?);
    w.write_record(["round", "accuracy", "asr"])
        .map_err(|e| csv_err(&fig4, e))?;
    for r in &rows {
        w.write_record([
            r.round.to_string(),
            r.accuracy.to_string(),
            r.asr.to_string(),
        ])
        .map_err(|e| csv_err(&fig4, e))?;
    }
    w.flush().map_err(|e| Error::io(&fig4, e))?;

    let fig5 = run_dir.join(FIG5_CSV);
    let n = rows.first().map_or(0, |r| r.cosine.len());
    let mut w = csv::Writer::from_writer(create(&fig5)?);
    let mut header = vec!["round".to_string()];
    header.extend((0..n).map(|i| format!("client_{i}")));
    header.push("threshold".into());
    w.write_record(&header).map_err(|e| csv_err(&fig5, e))?;
    for r in &rows {
        let mut rec = vec![r.round.to_string()];
        rec.extend(r.cosine.iter().map(|c| c.to_string()));
        rec.push(opt(r.threshold));
        w.write_record(&rec).map_err(|e| csv_err(&fig5, e))?;
    }
    w.flush().map_err(|e| Error::io(&fig5, e))?;
    Ok((fig4, fig5))
}
