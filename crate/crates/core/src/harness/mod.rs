//! Experiment runner: configuration, the phased training protocol, and the
//! files it emits.

pub mod config;
pub mod grid;
pub mod metrics;
pub mod run;
pub mod snapshot;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use config::{seed_offset_from_env, Condition, ExperimentConfig, SEED_OFFSET_VAR};
pub use grid::{dump_policy_grid, write_grid, GridCell, GridLayout};
pub use metrics::{read_metrics, write_metrics, METRICS_HEADER};
pub use run::{
    episode_returns, eval_rng, evaluate_policy, phase_env, run_experiment, run_first_phase, run_second_phase, run_seed, second_phase,
    EvalRecord, FirstPhase, SeedRun, Team,
};
pub use snapshot::{SavedTeam, Snapshot};

/// Files written by [`write_outputs`].
#[derive(Clone, Debug)]
pub struct OutputFiles {
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub snapshots: Vec<PathBuf>,
}

/// Writes `config.txt`, `metrics.csv` and one `snapshot_seed{s}.bin` per run
/// into `dir`, creating it if needed.
pub fn write_outputs(cfg: &ExperimentConfig, runs: &[SeedRun], dir: &Path) -> Result<OutputFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = dir.join("config.txt");
    fs::write(&config, cfg.to_text()).map_err(|e| Error::io(&config, e))?;
    let records: Vec<EvalRecord> = runs.iter().flat_map(|r| r.records.iter().cloned()).collect();
    let metrics = dir.join("metrics.csv");
    write_metrics(&records, &metrics)?;
    let phase = second_phase(cfg.domain);
    let snapshots = runs
        .iter()
        .map(|r| {
            let run_cfg = ExperimentConfig {
                condition: r.condition,
                seeds: vec![r.seed],
                out_dir: None,
                ..cfg.clone()
            };
            let path = dir.join(format!("snapshot_seed{}.bin", r.seed));
            Snapshot::from_team(&run_cfg, phase, r.seed, &r.final_bundles).write(&path)?;
            Ok(path)
        })
        .collect::<Result<_>>()?;
    Ok(OutputFiles {
        config,
        metrics,
        snapshots,
    })
}
