//! Metrics CSV: one row per evaluation point.

use std::path::Path;

use crate::error::{Error, Result};

use super::run::EvalRecord;

pub const METRICS_HEADER: [&str; 7] = [
    "seed",
    "phase",
    "episode",
    "mean_return",
    "actor_loss",
    "critic_loss",
    "wall_clock_s",
];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes `records` with shortest round-trip float formatting.
pub fn write_metrics(records: &[EvalRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::State("no evaluation records to write".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record([
            r.seed.to_string(),
            r.phase.to_string(),
            r.episode.to_string(),
            r.mean_return.to_string(),
            r.actor_loss.to_string(),
            r.critic_loss.to_string(),
            r.wall_clock_s.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Config(format!("{} does not have the metrics header", path.display())));
    }
    let bad = |field: &str| Error::Config(format!("{}: malformed `{field}`", path.display()));
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let get = |i: usize| row.get(i).ok_or_else(|| bad(METRICS_HEADER[i]));
        let float = |i: usize| get(i)?.parse::<f64>().map_err(|_| bad(METRICS_HEADER[i]));
        out.push(EvalRecord {
            seed: get(0)?.parse().map_err(|_| bad("seed"))?,
            phase: get(1)?.parse().map_err(|_| bad("phase"))?,
            episode: get(2)?.parse().map_err(|_| bad("episode"))?,
            mean_return: float(3)?,
            actor_loss: float(4)?,
            critic_loss: float(5)?,
            wall_clock_s: float(6)?,
        });
    }
    Ok(out)
}
