use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::lou::WPenalty;
use crate::model::{LossSpec, ModelKind};
use crate::netsim::{NetProfile, TimeMode};
use crate::privacy::DpConfig;
use crate::relational::{JoinPredicate, QuerySpec, TableSchema};

/// Training algorithm variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Mini-batch SGD on the materialized join.
    Centralized,
    /// Vertical FL SGD over the materialized join, per-joined-row messages.
    VflSgd,
    /// Vertical FL sharing ADMM over the materialized join.
    VflAdmm,
    /// SGD pushed through the join, one client per organization.
    RflSgdV,
    /// Sharing ADMM pushed through the join, one client per organization.
    RflAdmmV,
    /// SGD pushed through join and union.
    RflSgd,
    /// Sharing ADMM through the join, consensus ADMM through the union.
    RflAdmm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Centralized,
        Algorithm::VflSgd,
        Algorithm::VflAdmm,
        Algorithm::RflSgdV,
        Algorithm::RflAdmmV,
        Algorithm::RflSgd,
        Algorithm::RflAdmm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Centralized => "centralized",
            Algorithm::VflSgd => "vfl-sgd",
            Algorithm::VflAdmm => "vfl-admm",
            Algorithm::RflSgdV => "rfl-sgd-v",
            Algorithm::RflAdmmV => "rfl-admm-v",
            Algorithm::RflSgd => "rfl-sgd",
            Algorithm::RflAdmm => "rfl-admm",
        }
    }

    pub fn is_sgd(&self) -> bool {
        matches!(
            self,
            Algorithm::Centralized | Algorithm::VflSgd | Algorithm::RflSgdV | Algorithm::RflSgd
        )
    }

    pub fn is_admm(&self) -> bool {
        matches!(self, Algorithm::VflAdmm | Algorithm::RflAdmmV | Algorithm::RflAdmm)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

/// Where inner-round (union) traffic terminates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinator {
    /// The server aggregates partitions of every organization.
    #[default]
    Server,
    /// Each organization runs its own coordinator.
    PerOrg,
}

/// Network profile: a named preset, explicit numbers, or both (explicit
/// numbers override the preset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub preset: Option<String>,
    pub latency_s: Option<f64>,
    pub bandwidth_bps: Option<f64>,
    pub mode: TimeMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            preset: Some("us-uk".into()),
            latency_s: None,
            bandwidth_bps: None,
            mode: TimeMode::SyncMax,
        }
    }
}

impl NetConfig {
    pub fn profile(&self) -> Result<NetProfile, Error> {
        let base = match &self.preset {
            Some(name) => NetProfile::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown network preset `{name}`")))?,
            None => match (self.latency_s, self.bandwidth_bps) {
                (Some(_), Some(_)) => NetProfile::us_uk(),
                _ => {
                    return Err(Error::Config(
                        "net needs a preset or both latency_s and bandwidth_bps".into(),
                    ))
                }
            },
        };
        let p = NetProfile {
            latency_s: self.latency_s.unwrap_or(base.latency_s),
            bandwidth_bps: self.bandwidth_bps.unwrap_or(base.bandwidth_bps),
            mode: self.mode,
        };
        p.validate()?;
        Ok(p)
    }
}

fn d_epochs() -> usize {
    10
}
fn d_lr() -> f64 {
    0.1
}
fn d_rho() -> f64 {
    1.0
}
fn d_inner() -> usize {
    10
}
fn d_steps() -> usize {
    20
}
fn d_test() -> f64 {
    0.15
}
fn d_true() -> bool {
    true
}

/// Everything that shapes training, independent of where data lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algo: Algorithm,
    #[serde(default)]
    pub model: ModelKind,
    /// Table whose model carries the output bias; defaults to the label
    /// table.
    #[serde(default)]
    pub bias_table: Option<String>,
    pub loss: LossSpec,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// SGD batch size; defaults to `min(10000, N/10)`.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_rho")]
    pub rho: f64,
    /// Consensus penalty; defaults to `rho`.
    #[serde(default)]
    pub rho_h: Option<f64>,
    #[serde(default = "d_inner")]
    pub inner_rounds: usize,
    #[serde(default = "d_steps")]
    pub local_steps: usize,
    #[serde(default = "d_lr")]
    pub local_lr: f64,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_test")]
    pub test_fraction: f64,
    #[serde(default)]
    pub hash_keys: bool,
    #[serde(default)]
    pub w_penalty: WPenalty,
    #[serde(default)]
    pub coordinator: Coordinator,
    /// Run client updates on a thread pool. Results do not depend on it.
    #[serde(default = "d_true")]
    pub parallel: bool,
    /// Record every client model after every SGD step.
    #[serde(default)]
    pub trace_steps: bool,
}

impl TrainConfig {
    pub fn new(algo: Algorithm, loss: LossSpec) -> Self {
        Self {
            algo,
            model: ModelKind::default(),
            bias_table: None,
            loss,
            epochs: d_epochs(),
            batch_size: None,
            lr: d_lr(),
            rho: d_rho(),
            rho_h: None,
            inner_rounds: d_inner(),
            local_steps: d_steps(),
            local_lr: d_lr(),
            dp: DpConfig::default(),
            net: NetConfig::default(),
            seed: 0,
            test_fraction: d_test(),
            hash_keys: false,
            w_penalty: WPenalty::default(),
            coordinator: Coordinator::default(),
            parallel: true,
            trace_steps: false,
        }
    }

    pub fn rho_h(&self) -> f64 {
        self.rho_h.unwrap_or(self.rho)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        pos(self.rho, "rho")?;
        pos(self.rho_h(), "rho_h")?;
        pos(self.local_lr, "local_lr")?;
        if self.inner_rounds == 0 || self.local_steps == 0 {
            return Err(Error::Config("inner_rounds and local_steps must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if !(self.loss.beta >= 0.0 && self.loss.beta.is_finite()) {
            return Err(Error::Config("loss.beta must be >= 0".into()));
        }
        self.dp.validate()?;
        if self.algo == Algorithm::Centralized && self.dp.feature_dp() {
            return Err(Error::Config(
                "feature DP protects client updates; it does not apply to centralized training".into(),
            ));
        }
        self.net.profile()?;
        Ok(())
    }
}

/// One table of the query: its schema and the CSV file of each horizontal
/// partition, in partition order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    #[serde(flatten)]
    pub schema: TableSchema,
    pub partitions: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutConfig {
    pub metrics: PathBuf,
    pub ledger: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

impl Default for OutConfig {
    fn default() -> Self {
        Self {
            metrics: "metrics.csv".into(),
            ledger: Some("ledger.json".into()),
            checkpoints: Some("checkpoints".into()),
        }
    }
}

/// A complete run description as stored in a JSON config file. Relative
/// paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tables: Vec<TableConfig>,
    pub predicates: Vec<JoinPredicate>,
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default)]
    pub out: OutConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn query(&self) -> QuerySpec {
        QuerySpec::new(
            self.tables.iter().map(|t| t.schema.clone()).collect(),
            self.predicates.clone(),
        )
    }
}
