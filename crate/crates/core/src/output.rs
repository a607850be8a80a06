//! Results bundle files: `rounds.jsonl`, `summary.csv`, `ledger.csv` and the
//! resolved `config.toml`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::accounting::Direction;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::server::{ClientMetrics, ResultsBundle, RoundRecord};

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const CONFIG_FILE: &str = "config.toml";

pub const BUNDLE_FILES: [&str; 4] = [ROUNDS_FILE, SUMMARY_FILE, LEDGER_FILE, CONFIG_FILE];

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn rounds_jsonl(bundle: &ResultsBundle) -> String {
    let mut out = String::new();
    for rec in &bundle.rounds {
        out.push_str(&serde_json::to_string(rec).expect("round record serializes"));
        out.push('\n');
    }
    out
}

fn summary_row(w: &mut csv::Writer<impl Write>, label: &str, round: usize, m: &ClientMetrics) -> Result<()> {
    w.write_record([
        label.to_string(),
        round.to_string(),
        m.client_id.to_string(),
        m.cluster.to_string(),
        m.participated.to_string(),
        m.metrics.neutral_test_mse.to_string(),
        m.metrics.expressive_test_mse.to_string(),
        m.metrics.identity_error.to_string(),
        m.metrics.style_error.to_string(),
    ])
    .map_err(csv_err)
}

pub fn write_bundle(bundle: &ResultsBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(ROUNDS_FILE), rounds_jsonl(bundle))?;

    let label = bundle.config.strategy.label();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(SUMMARY_FILE))?));
    w.write_record([
        "strategy",
        "round",
        "client_id",
        "cluster",
        "participated",
        "neutral_test_mse",
        "expressive_test_mse",
        "identity_error",
        "style_error",
    ])
    .map_err(csv_err)?;
    for m in &bundle.initial {
        summary_row(&mut w, label, 0, m)?;
    }
    for rec in &bundle.rounds {
        for m in &rec.metrics {
            summary_row(&mut w, label, rec.round, m)?;
        }
    }
    w.flush()?;

    let bpp = bundle.ledger.bytes_per_param();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join(LEDGER_FILE))?));
    w.write_record(["round", "client_id", "direction", "param_count", "bytes"]).map_err(csv_err)?;
    for e in bundle.ledger.entries() {
        let dir = match e.direction {
            Direction::Upload => "upload",
            Direction::Download => "download",
        };
        w.write_record([
            e.round.to_string(),
            e.client_id.to_string(),
            dir.to_string(),
            e.param_count.to_string(),
            (e.param_count * bpp).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    fs::write(dir.join(CONFIG_FILE), bundle.config.to_toml_string())?;
    Ok(())
}

pub fn read_rounds(dir: &Path) -> Result<Vec<RoundRecord>> {
    let file = File::open(dir.join(ROUNDS_FILE))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.is_empty()).unwrap_or(true))
        .map(|line| {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| Error::Decode(format!("{ROUNDS_FILE}: {e}")))
        })
        .collect()
}

pub fn read_config(dir: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(dir.join(CONFIG_FILE))?;
    ExperimentConfig::from_toml_str(&text)
}
