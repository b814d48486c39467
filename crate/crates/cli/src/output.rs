//! Result rows, the configuration hash and machine-readable error records.

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::Path;

use letf::harness::ScoreReport;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, Settings};

pub const COLUMNS: [&str; 18] = [
    "config_hash",
    "model",
    "pipeline",
    "M",
    "alpha",
    "lambda",
    "beta",
    "K",
    "burn_in",
    "seed_truth",
    "seed_obs",
    "seed_init",
    "seed_rejuv",
    "seed_rot",
    "rmse",
    "crps",
    "wall_time_s",
    "error",
];

/// SHA-256 of the canonical JSON of the settings (object keys sorted).
pub fn config_hash(settings: &Settings) -> String {
    let value = serde_json::to_value(settings).expect("settings serialize to JSON");
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn optional(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One CSV record; failed experiments leave the scores empty and fill
/// `error`.
pub fn row(settings: &Settings, outcome: &Result<ScoreReport, String>) -> Vec<String> {
    let s = settings;
    let (rmse, crps, wall, error) = match outcome {
        Ok(r) => (r.rmse.to_string(), r.crps.to_string(), format!("{:.6}", r.wall_time_s), String::new()),
        Err(e) => (String::new(), String::new(), String::new(), e.clone()),
    };
    vec![
        config_hash(s),
        s.model.clone(),
        s.pipeline.label(),
        s.members.to_string(),
        optional(s.pipeline.alpha),
        optional(s.pipeline.lambda),
        s.beta.to_string(),
        s.cycles.to_string(),
        s.burn_in.to_string(),
        s.seeds.truth.to_string(),
        s.seeds.obs_noise.to_string(),
        s.seeds.init_ensemble.to_string(),
        s.seeds.rejuvenation.to_string(),
        s.seeds.random_rotations.to_string(),
        rmse,
        crps,
        wall,
        error,
    ]
}

/// CSV sink. Files are opened for appending and receive the header only
/// when empty; standard output always gets a header.
pub fn open_sink(out: Option<&Path>) -> io::Result<csv::Writer<Box<dyn Write + Send>>> {
    let (sink, header): (Box<dyn Write + Send>, bool) = match out {
        None => (Box::new(io::stdout()), true),
        Some(path) => {
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            let empty = file.metadata()?.len() == 0;
            (Box::new(file), empty)
        }
    };
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    if header {
        writer.write_record(COLUMNS)?;
        writer.flush()?;
    }
    Ok(writer)
}

pub fn report_config_error(err: &ConfigError) {
    let record = json!({ "kind": "config_error", "problems": err.problems });
    eprintln!("{record}");
}

pub fn report_cell_failure(index: usize, hash: &str, message: &str) {
    let record = json!({ "kind": "experiment_failed", "cell": index, "config_hash": hash, "error": message });
    eprintln!("{record}");
}

pub fn report_io_error(context: &str, err: &dyn std::fmt::Display) {
    let record = json!({ "kind": "io_error", "context": context, "error": err.to_string() });
    eprintln!("{record}");
}
