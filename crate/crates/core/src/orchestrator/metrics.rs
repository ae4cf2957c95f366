use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::model::{BlockModel, LocalModel, LossKind, LossSpec};

/// One row of the metrics file. Communication and privacy columns are
/// cumulative.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy for classification, RMSE for regression; NaN without a test
    /// split.
    pub test_metric: f64,
    pub comm_rounds: u64,
    pub comm_bytes: u64,
    pub sim_time_s: f64,
    pub eps_label: Option<f64>,
    pub eps_feature: Option<f64>,
}

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "train_loss",
    "test_metric",
    "comm_rounds",
    "comm_bytes",
    "sim_time_s",
    "eps_label",
    "eps_feature",
];

fn eps_cell(e: Option<f64>) -> String {
    e.map_or_else(|| "off".to_string(), |v| v.to_string())
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for m in rows {
        w.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.test_metric.to_string(),
            m.comm_rounds.to_string(),
            m.comm_bytes.to_string(),
            m.sim_time_s.to_string(),
            eps_cell(m.eps_label),
            eps_cell(m.eps_feature),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Accuracy of summed predictions for classification losses, RMSE for
/// squared loss. NaN on an empty set.
pub fn test_metric(z: ArrayView2<f64>, y: &[f64], loss: &LossSpec) -> f64 {
    if y.is_empty() {
        return f64::NAN;
    }
    let n = y.len() as f64;
    match loss.kind {
        LossKind::Squared => {
            let sse: f64 = z.column(0).iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
            (sse / n).sqrt()
        }
        LossKind::Logistic => {
            let hits = z
                .column(0)
                .iter()
                .zip(y)
                .filter(|(p, &t)| (**p > 0.0) == (t == 1.0))
                .count();
            hits as f64 / n
        }
        LossKind::SoftmaxCrossEntropy => {
            let hits = z
                .rows()
                .into_iter()
                .zip(y)
                .filter(|(row, &t)| {
                    let mut best = 0;
                    for c in 1..row.len() {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    best == t as usize
                })
                .count();
            hits as f64 / n
        }
    }
}

/// Sums the organizations' predictions on materialized test rows and
/// scores them.
pub fn evaluate(models: &[LocalModel], xs: &[Array2<f64>], y: &[f64], loss: &LossSpec) -> Result<f64> {
    if y.is_empty() {
        return Ok(f64::NAN);
    }
    let views: Vec<ArrayView2<f64>> = xs.iter().map(|x| x.view()).collect();
    let z = BlockModel::new(models.to_vec()).predict(&views)?;
    Ok(test_metric(z.view(), y, loss))
}
