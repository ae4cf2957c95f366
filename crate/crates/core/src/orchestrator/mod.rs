//! Drives training end to end: setup (mapping and split), the outer loop
//! over the join, inner consensus rounds over unions, privacy, metrics and
//! communication accounting.

mod config;
mod data;
mod metrics;
mod synth;
mod train;

pub use config::{Algorithm, Coordinator, NetConfig, OutConfig, RunConfig, TableConfig, TrainConfig};
pub use data::{map_stats, setup, single_partition, Dataset, MapStats, Setup, TableStats};
pub use metrics::{evaluate, test_metric, write_metrics, EpochMetrics, METRICS_HEADER};
pub use synth::{synth, GroundTruth, SynthOutput, SynthSpec, SynthTable};
pub use train::{train, RunOutput};

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::write_checkpoint;
use crate::netsim::LedgerFile;

/// Loads the data named in `cfg`, trains, and writes the metrics CSV, the
/// ledger and per-organization checkpoints. `metrics_out` overrides the
/// configured metrics path.
pub fn run(cfg: &RunConfig, metrics_out: Option<&Path>) -> Result<RunOutput> {
    let ds = Dataset::load(cfg)?;
    let out = train(&ds, &cfg.train)?;
    let metrics_path = match metrics_out {
        Some(p) => p.to_path_buf(),
        None => cfg.resolve(&cfg.out.metrics),
    };
    write_metrics(&metrics_path, &out.metrics)?;
    if let Some(p) = &cfg.out.ledger {
        LedgerFile::new(&out.ledger, out.meta.clone()).write(cfg.resolve(p))?;
    }
    if let Some(dir) = &cfg.out.checkpoints {
        let dir = cfg.resolve(dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, m) in out.models.iter().enumerate() {
            write_checkpoint(dir.join(format!("org{i}.rflm")), m)?;
        }
    }
    Ok(out)
}
