//! Communication accounting.
//!
//! Every message exchanged between the server and clients is charged to a
//! [`NetLedger`] with its exact payload size. A round is one synchronization
//! barrier; its simulated duration is `latency + transfer time`, where the
//! transfer time is the slowest link (`sync_max`) or the sum of all
//! transfers (`sum`). Computation time is not simulated.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::Algorithm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Node {
    Server,
    Client { org: usize, part: usize },
    /// Per-organization coordinator, when the server does not play that role.
    Coordinator { org: usize },
}

impl Node {
    pub fn client(org: usize, part: usize) -> Self {
        Node::Client { org, part }
    }

    pub fn org(&self) -> Option<usize> {
        match *self {
            Node::Server => None,
            Node::Client { org, .. } | Node::Coordinator { org } => Some(org),
        }
    }

    pub fn is_client(&self) -> bool {
        matches!(self, Node::Client { .. })
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Server => write!(f, "server"),
            Node::Client { org, part } => write!(f, "c{org}.{part}"),
            Node::Coordinator { org } => write!(f, "coord{org}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    #[default]
    SyncMax,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetProfile {
    pub latency_s: f64,
    pub bandwidth_bps: f64,
    #[serde(default)]
    pub mode: TimeMode,
}

impl NetProfile {
    /// Oregon ↔ London.
    pub fn us_uk() -> Self {
        Self {
            latency_s: 0.136,
            bandwidth_bps: 0.42e9,
            mode: TimeMode::SyncMax,
        }
    }

    /// Oregon ↔ Virginia.
    pub fn us_us() -> Self {
        Self {
            latency_s: 0.067,
            bandwidth_bps: 1.15e9,
            mode: TimeMode::SyncMax,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "us-uk" => Some(Self::us_uk()),
            "us-us" => Some(Self::us_us()),
            _ => None,
        }
    }

    pub fn with_mode(mut self, mode: TimeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(Error::Config("latency must be finite and >= 0".into()));
        }
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(Error::Config("bandwidth must be finite and > 0".into()));
        }
        Ok(())
    }

    /// Duration of one round carrying transfers of the given sizes.
    pub fn round_time(&self, sizes: impl IntoIterator<Item = u64>) -> f64 {
        let secs = sizes.into_iter().map(|b| b as f64 * 8.0 / self.bandwidth_bps);
        let transfer = match self.mode {
            TimeMode::SyncMax => secs.fold(0.0, f64::max),
            TimeMode::Sum => secs.sum(),
        };
        self.latency_s + transfer
    }
}

/// What a payload carries. Client-originated kinds are the only things that
/// ever leave a client; none of them holds raw features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadKind {
    JoinKeys,
    /// Source row ids a client must predict for in the current batch.
    BatchRequest,
    Labels { perturbed: bool },
    Predictions,
    /// SGD scatter of `(source_row, count, ∂ℓ/∂h)` entries.
    PartialDerivatives,
    /// ADMM scatter of `Y_i` (and `G_i` on the first epoch).
    AuxVariables,
    PartialGradient { privatized: bool },
    AggregatedGradient,
    Parameters { privatized: bool },
    /// Consensus `w_i` and `u_i^q` sent back to a client.
    ConsensusVariables,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub src: Node,
    pub dst: Node,
    pub bytes: u64,
    pub kind: PayloadKind,
    /// Number of row entries in the payload, when it is row-indexed.
    #[serde(default)]
    pub rows: u64,
}

impl Transfer {
    pub fn new(src: Node, dst: Node, bytes: u64, kind: PayloadKind) -> Self {
        Self {
            src,
            dst,
            bytes,
            kind,
            rows: 0,
        }
    }

    pub fn with_rows(mut self, rows: u64) -> Self {
        self.rows = rows;
        self
    }
}

/// Cumulative counters captured at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub rounds: u64,
    pub bytes: u64,
    pub sim_time_s: f64,
    /// Rows of partial derivatives scattered to each organization.
    pub scattered_rows: BTreeMap<usize, u64>,
    pub scatter_bytes: BTreeMap<usize, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBytes {
    pub src: Node,
    pub dst: Node,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetLedger {
    rounds: u64,
    bytes_by_link: BTreeMap<(Node, Node), u64>,
    sim_time_s: f64,
    declared_bytes: u64,
    scattered_rows: BTreeMap<usize, u64>,
    scatter_bytes: BTreeMap<usize, u64>,
    snapshots: Vec<Snapshot>,
    trace: Option<Vec<(u64, Transfer)>>,
}

impl NetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps every transfer for later inspection.
    pub fn with_trace() -> Self {
        Self {
            trace: Some(Vec::new()),
            ..Self::default()
        }
    }

    /// Charges one synchronous round and returns its simulated duration.
    pub fn record_round(&mut self, payloads: &[Transfer], profile: &NetProfile) -> f64 {
        self.rounds += 1;
        let t = profile.round_time(payloads.iter().map(|p| p.bytes));
        self.sim_time_s += t;
        for p in payloads {
            *self.bytes_by_link.entry((p.src, p.dst)).or_default() += p.bytes;
            self.declared_bytes += p.bytes;
            if p.src == Node::Server {
                if let Some(org) = p.dst.org() {
                    if matches!(p.kind, PayloadKind::PartialDerivatives | PayloadKind::AuxVariables) {
                        *self.scatter_bytes.entry(org).or_default() += p.bytes;
                    }
                    if p.kind == PayloadKind::PartialDerivatives {
                        *self.scattered_rows.entry(org).or_default() += p.rows;
                    }
                }
            }
            if let Some(trace) = self.trace.as_mut() {
                trace.push((self.rounds, *p));
            }
        }
        t
    }

    pub fn snapshot(&mut self, epoch: usize) {
        self.snapshots.push(Snapshot {
            epoch,
            rounds: self.rounds,
            bytes: self.total_bytes(),
            sim_time_s: self.sim_time_s,
            scattered_rows: self.scattered_rows.clone(),
            scatter_bytes: self.scatter_bytes.clone(),
        });
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn sim_time_s(&self) -> f64 {
        self.sim_time_s
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_by_link.values().sum()
    }

    /// Sum of every declared payload size; always equals [`Self::total_bytes`].
    pub fn declared_bytes(&self) -> u64 {
        self.declared_bytes
    }

    pub fn link_bytes(&self, src: Node, dst: Node) -> u64 {
        self.bytes_by_link.get(&(src, dst)).copied().unwrap_or(0)
    }

    pub fn links(&self) -> Vec<LinkBytes> {
        self.bytes_by_link
            .iter()
            .map(|(&(src, dst), &bytes)| LinkBytes { src, dst, bytes })
            .collect()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn trace(&self) -> Option<&[(u64, Transfer)]> {
        self.trace.as_deref()
    }

    /// Per-epoch differences of consecutive snapshots. The first snapshot is
    /// taken against the ledger state before any epoch, which is expected to
    /// be the first entry (epoch 0 = setup).
    pub fn epoch_deltas(&self) -> Vec<EpochDelta> {
        self.snapshots
            .windows(2)
            .map(|w| EpochDelta::between(&w[0], &w[1]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochDelta {
    pub epoch: usize,
    pub rounds: u64,
    pub bytes: u64,
    pub sim_time_s: f64,
    pub scattered_rows: BTreeMap<usize, u64>,
    pub scatter_bytes: BTreeMap<usize, u64>,
}

impl EpochDelta {
    fn between(a: &Snapshot, b: &Snapshot) -> Self {
        let diff = |x: &BTreeMap<usize, u64>, y: &BTreeMap<usize, u64>| {
            y.iter()
                .map(|(k, v)| (*k, v - x.get(k).copied().unwrap_or(0)))
                .collect()
        };
        Self {
            epoch: b.epoch,
            rounds: b.rounds - a.rounds,
            bytes: b.bytes - a.bytes,
            sim_time_s: b.sim_time_s - a.sim_time_s,
            scattered_rows: diff(&a.scattered_rows, &b.scattered_rows),
            scatter_bytes: diff(&a.scatter_bytes, &b.scatter_bytes),
        }
    }
}

/// Sizes needed to predict communication complexity for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub algo: Algorithm,
    pub epochs: usize,
    /// Joined training rows `N`.
    pub joined_rows: usize,
    pub batch_size: usize,
    /// `n_i` per organization.
    pub table_rows: Vec<usize>,
    /// `Q_i` per organization.
    pub partitions: Vec<usize>,
    pub inner_rounds: usize,
    pub output_dim: usize,
    /// Parameter count per organization's model.
    pub param_counts: Vec<usize>,
}

impl RunMeta {
    pub fn batches_per_epoch(&self) -> u64 {
        self.joined_rows.div_ceil(self.batch_size.max(1)) as u64
    }

    fn any_union(&self) -> bool {
        self.partitions.iter().any(|&q| q > 1)
    }

    /// Exact communication rounds per epoch for the algorithm.
    pub fn predicted_rounds_per_epoch(&self) -> u64 {
        match self.algo {
            Algorithm::Centralized => 0,
            Algorithm::VflSgd | Algorithm::RflSgdV => self.batches_per_epoch(),
            Algorithm::RflSgd => {
                self.batches_per_epoch() * if self.any_union() { 3 } else { 1 }
            }
            Algorithm::VflAdmm | Algorithm::RflAdmmV => 2,
            Algorithm::RflAdmm => {
                2 + if self.any_union() {
                    2 * self.inner_rounds as u64
                } else {
                    0
                }
            }
        }
    }

    /// Asymptotic server↔client cost per epoch.
    pub fn predicted_cost_order(&self) -> &'static str {
        match self.algo {
            Algorithm::Centralized => "0",
            Algorithm::VflSgd | Algorithm::VflAdmm => "O(MN)",
            Algorithm::RflSgdV => "O(sum alpha_i)",
            Algorithm::RflAdmmV => "O(sum n_i)",
            Algorithm::RflSgd => "O(sum alpha_i) + O(QN/B)",
            Algorithm::RflAdmm => "O(sum n_i + T'Q)",
        }
    }

    pub fn predicted_rounds_order(&self) -> &'static str {
        match self.algo {
            Algorithm::Centralized => "0",
            Algorithm::VflSgd | Algorithm::RflSgdV | Algorithm::RflSgd => "O(N/B)",
            Algorithm::VflAdmm | Algorithm::RflAdmmV => "O(1)",
            Algorithm::RflAdmm => "O(T')",
        }
    }
}

/// Ledger plus run metadata, as written next to the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerFile {
    pub meta: RunMeta,
    pub rounds: u64,
    pub bytes: u64,
    pub sim_time_s: f64,
    pub links: Vec<LinkBytes>,
    pub snapshots: Vec<Snapshot>,
}

impl LedgerFile {
    pub fn new(ledger: &NetLedger, meta: RunMeta) -> Self {
        Self {
            meta,
            rounds: ledger.rounds(),
            bytes: ledger.total_bytes(),
            sim_time_s: ledger.sim_time_s(),
            links: ledger.links(),
            snapshots: ledger.snapshots().to_vec(),
        }
    }

    pub fn to_ledger(&self) -> NetLedger {
        NetLedger {
            rounds: self.rounds,
            bytes_by_link: self
                .links
                .iter()
                .map(|l| ((l.src, l.dst), l.bytes))
                .collect(),
            sim_time_s: self.sim_time_s,
            declared_bytes: self.bytes,
            scattered_rows: self
                .snapshots
                .last()
                .map(|s| s.scattered_rows.clone())
                .unwrap_or_default(),
            scatter_bytes: self
                .snapshots
                .last()
                .map(|s| s.scatter_bytes.clone())
                .unwrap_or_default(),
            snapshots: self.snapshots.clone(),
            trace: None,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub algo: Algorithm,
    pub epochs: usize,
    pub measured_rounds_per_epoch: Vec<u64>,
    pub predicted_rounds_per_epoch: u64,
    pub bytes_per_epoch: Vec<u64>,
    pub sim_time_per_epoch: Vec<f64>,
    /// Mean rows of partial derivatives scattered to each organization per
    /// epoch (SGD variants only).
    pub alpha: Vec<f64>,
    pub table_rows: Vec<usize>,
    pub joined_rows: usize,
    pub rounds_order: &'static str,
    pub cost_order: &'static str,
}

impl ComplexityReport {
    pub fn rounds_match(&self) -> bool {
        self.measured_rounds_per_epoch
            .iter()
            .all(|&r| r == self.predicted_rounds_per_epoch)
    }
}

/// Compares what a run actually sent with the predicted complexity.
pub fn complexity_report(ledger: &NetLedger, meta: &RunMeta) -> ComplexityReport {
    let deltas = ledger.epoch_deltas();
    let m = meta.table_rows.len();
    let mut alpha = vec![0.0; m];
    if !deltas.is_empty() {
        for d in &deltas {
            for (org, rows) in &d.scattered_rows {
                if *org < m {
                    alpha[*org] += *rows as f64;
                }
            }
        }
        for a in &mut alpha {
            *a /= deltas.len() as f64;
        }
    }
    ComplexityReport {
        algo: meta.algo,
        epochs: meta.epochs,
        measured_rounds_per_epoch: deltas.iter().map(|d| d.rounds).collect(),
        predicted_rounds_per_epoch: meta.predicted_rounds_per_epoch(),
        bytes_per_epoch: deltas.iter().map(|d| d.bytes).collect(),
        sim_time_per_epoch: deltas.iter().map(|d| d.sim_time_s).collect(),
        alpha,
        table_rows: meta.table_rows.clone(),
        joined_rows: meta.joined_rows,
        rounds_order: meta.predicted_rounds_order(),
        cost_order: meta.predicted_cost_order(),
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "algorithm            {}", self.algo)?;
        writeln!(f, "joined rows N        {}", self.joined_rows)?;
        writeln!(f, "table rows n_i       {:?}", self.table_rows)?;
        writeln!(
            f,
            "rounds/epoch         predicted {} ({}), measured {:?}{}",
            self.predicted_rounds_per_epoch,
            self.rounds_order,
            self.measured_rounds_per_epoch,
            if self.rounds_match() { "" } else { "  MISMATCH" }
        )?;
        writeln!(
            f,
            "bytes/epoch          {:?}  (order {})",
            self.bytes_per_epoch, self.cost_order
        )?;
        let times: Vec<String> = self
            .sim_time_per_epoch
            .iter()
            .map(|t| format!("{t:.4}"))
            .collect();
        writeln!(f, "sim seconds/epoch    [{}]", times.join(", "))?;
        if self.alpha.iter().any(|&a| a > 0.0) {
            let a: Vec<String> = self.alpha.iter().map(|v| format!("{v:.1}")).collect();
            writeln!(f, "alpha_i (rows/epoch) [{}]", a.join(", "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(src: Node, dst: Node, bytes: u64) -> Transfer {
        Transfer::new(src, dst, bytes, PayloadKind::Predictions)
    }

    #[test]
    fn empty_round_costs_latency() {
        let mut l = NetLedger::new();
        let p = NetProfile::us_uk();
        assert_eq!(l.record_round(&[], &p), 0.136);
        assert_eq!(l.rounds(), 1);
    }

    #[test]
    fn one_megabyte_us_uk() {
        let p = NetProfile::us_uk();
        let secs = p.round_time([1_000_000]);
        assert!((secs - (0.136 + 8e6 / 0.42e9)).abs() < 1e-15);
        assert!((secs - 0.1550).abs() < 1e-4);
    }

    #[test]
    fn parallel_transfers_by_mode() {
        let sync = NetProfile::us_uk();
        let sum = NetProfile::us_uk().with_mode(TimeMode::Sum);
        let mut a = NetLedger::new();
        let mut b = NetLedger::new();
        let round = [
            t(Node::client(0, 0), Node::Server, 1_000_000),
            t(Node::client(1, 0), Node::Server, 1_000_000),
        ];
        let ta = a.record_round(&round, &sync);
        let tb = b.record_round(&round, &sum);
        assert!((ta - 0.155048).abs() < 1e-6);
        assert!((tb - 0.174095).abs() < 1e-6);
        assert!((tb - 0.1741).abs() < 1e-4);
        assert_eq!(a.total_bytes(), 2_000_000);
        assert_eq!(a.link_bytes(Node::client(1, 0), Node::Server), 1_000_000);
    }

    #[test]
    fn sim_time_ignores_payload_order() {
        let p = NetProfile::us_us().with_mode(TimeMode::Sum);
        let xs = [
            t(Node::Server, Node::client(0, 0), 123),
            t(Node::Server, Node::client(0, 1), 98_765),
            t(Node::Server, Node::client(1, 0), 5),
        ];
        let mut rev = xs;
        rev.reverse();
        assert_eq!(p.round_time(xs.iter().map(|x| x.bytes)), p.round_time(rev.iter().map(|x| x.bytes)));
    }

    #[test]
    fn byte_conservation() {
        let mut l = NetLedger::new();
        let p = NetProfile::us_us();
        l.record_round(&[t(Node::client(0, 0), Node::Server, 10), t(Node::client(0, 0), Node::Server, 7)], &p);
        l.record_round(&[t(Node::Server, Node::client(0, 0), 3)], &p);
        assert_eq!(l.total_bytes(), 20);
        assert_eq!(l.declared_bytes(), 20);
    }
}
