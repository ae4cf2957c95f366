use std::collections::HashMap;

use ndarray::Array2;

use super::{KeyMessage, QuerySpec, VerticalTable};
use crate::error::{Error, Result};

/// Joined row `j` of the logical table `X` comes from row `p[i][j]` of
/// vertical table `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMapping {
    pub p: Vec<Vec<usize>>,
    /// Label per joined row, copied from the label owner's table.
    pub y: Option<Vec<f64>>,
}

impl IndexMapping {
    pub fn num_rows(&self) -> usize {
        self.p.first().map_or(0, Vec::len)
    }

    pub fn num_tables(&self) -> usize {
        self.p.len()
    }

    /// Restricts the mapping to the given joined rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> IndexMapping {
        IndexMapping {
            p: self
                .p
                .iter()
                .map(|pi| rows.iter().map(|&j| pi[j]).collect())
                .collect(),
            y: self.y.as_ref().map(|y| rows.iter().map(|&j| y[j]).collect()),
        }
    }

    /// Materializes `X_i` by gathering rows of `table` through `p_i`.
    ///
    /// Only baselines and test oracles use this.
    pub fn gather_features(&self, i: usize, table: &VerticalTable) -> Array2<f64> {
        table.gather(&self.p[i])
    }

    /// Expands per-source-row values of table `i` to joined rows.
    pub fn gather_rows(&self, i: usize, values: &Array2<f64>) -> Array2<f64> {
        values.select(ndarray::Axis(0), &self.p[i])
    }

    pub fn labels(&self) -> Result<&[f64]> {
        self.y
            .as_deref()
            .ok_or_else(|| Error::Config("query has no label column".into()))
    }
}

/// Inverse of [`IndexMapping`]: for every source row `r` of table `i`, the
/// joined rows `G_i(r)` it contributes to.
///
/// Stored per table in compressed form (`starts` has `n_i + 1` entries).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReverseMapping {
    starts: Vec<Vec<usize>>,
    members: Vec<Vec<usize>>,
}

impl ReverseMapping {
    /// Groups the joined rows of `mapping` by source row; `table_rows[i]` is
    /// `n_i`. Rows that never join get empty groups.
    pub fn from_mapping(mapping: &IndexMapping, table_rows: &[usize]) -> Self {
        let mut starts = Vec::with_capacity(table_rows.len());
        let mut members = Vec::with_capacity(table_rows.len());
        for (pi, &n) in mapping.p.iter().zip(table_rows) {
            let mut count = vec![0usize; n + 1];
            for &r in pi {
                count[r + 1] += 1;
            }
            for r in 0..n {
                count[r + 1] += count[r];
            }
            let mut fill = count.clone();
            let mut m = vec![0usize; pi.len()];
            for (j, &r) in pi.iter().enumerate() {
                m[fill[r]] = j;
                fill[r] += 1;
            }
            starts.push(count);
            members.push(m);
        }
        Self { starts, members }
    }

    pub fn num_tables(&self) -> usize {
        self.starts.len()
    }

    pub fn num_source_rows(&self, i: usize) -> usize {
        self.starts[i].len() - 1
    }

    /// `G_i(r)`, ascending.
    pub fn group(&self, i: usize, r: usize) -> &[usize] {
        &self.members[i][self.starts[i][r]..self.starts[i][r + 1]]
    }

    /// `G_{i,r} = |G_i(r)|`.
    pub fn count(&self, i: usize, r: usize) -> usize {
        self.starts[i][r + 1] - self.starts[i][r]
    }

    pub fn counts(&self, i: usize) -> Vec<usize> {
        self.starts[i].windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Joins the key columns sent by all clients and returns the mapping and its
/// reverse.
///
/// Messages of one organization are concatenated in partition order to form
/// vertical row ids. The join is a left-deep hash-join pipeline over the join
/// graph, and the result is sorted lexicographically by `(p_1(j), …, p_M(j))`.
pub fn build_mapping(spec: &QuerySpec, messages: &[KeyMessage]) -> Result<(IndexMapping, ReverseMapping)> {
    spec.validate()?;
    let m = spec.num_tables();
    let preds = spec.resolve()?;

    let mut per_org: Vec<Vec<&KeyMessage>> = vec![Vec::new(); m];
    for msg in messages {
        let i = spec.table_index(&msg.table).ok_or_else(|| {
            Error::Protocol(format!("key message for unknown table `{}`", msg.table))
        })?;
        if msg.owner.org != i {
            return Err(Error::Protocol(format!(
                "client {} sent keys for table `{}` (organization {i})",
                msg.owner, msg.table
            )));
        }
        if msg.keys.len() != msg.row_ids.len() {
            return Err(Error::Protocol(format!(
                "client {}: {} keys but {} row ids",
                msg.owner,
                msg.keys.len(),
                msg.row_ids.len()
            )));
        }
        per_org[i].push(msg);
    }

    // Merge horizontal messages into vertical key columns.
    let mut vkeys: Vec<Vec<&[String]>> = Vec::with_capacity(m);
    let mut hashed = Vec::with_capacity(m);
    let mut labels: Option<Vec<f64>> = None;
    let label_table = spec.label_table();
    for (i, msgs) in per_org.iter_mut().enumerate() {
        msgs.sort_by_key(|msg| msg.owner.part);
        if msgs.is_empty() {
            return Err(Error::Protocol(format!(
                "no key message from organization {i} (`{}`)",
                spec.tables[i].table_name
            )));
        }
        for (q, msg) in msgs.iter().enumerate() {
            if msg.owner.part != q {
                return Err(Error::Protocol(format!(
                    "organization {i}: expected a message from partition {q}, got {}",
                    msg.owner
                )));
            }
        }
        let h = msgs[0].hashed;
        if msgs.iter().any(|msg| msg.hashed != h) {
            return Err(Error::Schema(format!(
                "organization {i} mixes hashed and raw join keys"
            )));
        }
        hashed.push(h);
        let width = spec.tables[i].join_key_cols.len();
        let mut rows: Vec<&[String]> = Vec::new();
        let mut ys = Vec::new();
        for msg in msgs.iter() {
            let base = rows.len();
            let mut local: Vec<&[String]> = vec![&[]; msg.num_rows()];
            for (k, r) in msg.pairs() {
                if k.len() != width {
                    return Err(Error::Schema(format!(
                        "client {} sent {} key values per row, `{}` declares {width}",
                        msg.owner,
                        k.len(),
                        spec.tables[i].table_name
                    )));
                }
                if r >= local.len() {
                    return Err(Error::Protocol(format!(
                        "client {} sent row id {r} out of range",
                        msg.owner
                    )));
                }
                local[r] = k;
            }
            rows.extend(local);
            if Some(i) == label_table {
                let y = msg.labels.as_ref().ok_or_else(|| {
                    Error::Protocol(format!("label owner {} sent no labels", msg.owner))
                })?;
                if y.len() != msg.num_rows() {
                    return Err(Error::Protocol(format!(
                        "client {}: {} labels for {} rows",
                        msg.owner,
                        y.len(),
                        msg.num_rows()
                    )));
                }
                let mut by_row = vec![0.0; y.len()];
                for (&r, &v) in msg.row_ids.iter().zip(y) {
                    by_row[r] = v;
                }
                ys.extend(by_row);
            }
            debug_assert_eq!(rows.len(), base + msg.num_rows());
        }
        if Some(i) == label_table {
            labels = Some(ys);
        }
        vkeys.push(rows);
    }
    for p in &preds {
        if hashed[p.a.0] != hashed[p.b.0] {
            return Err(Error::Schema(format!(
                "predicate between `{}` and `{}` compares hashed with raw keys",
                spec.tables[p.a.0].table_name, spec.tables[p.b.0].table_name
            )));
        }
    }

    // Left-deep hash-join pipeline. Tuples hold a source row per table, in
    // table index order; unjoined slots are `usize::MAX`.
    const UNSET: usize = usize::MAX;
    let mut joined = vec![false; m];
    joined[0] = true;
    let mut tuples: Vec<Vec<usize>> = (0..vkeys[0].len())
        .map(|r| {
            let mut t = vec![UNSET; m];
            t[0] = r;
            t
        })
        .collect();
    for _ in 1..m {
        let next = preds
            .iter()
            .find_map(|p| match (joined[p.a.0], joined[p.b.0]) {
                (true, false) => Some(p.b.0),
                (false, true) => Some(p.a.0),
                _ => None,
            })
            .expect("validated join graph is connected");
        // (column in `next`, (table, column) already joined)
        let edges: Vec<(usize, (usize, usize))> = preds
            .iter()
            .filter_map(|p| {
                if p.a.0 == next && joined[p.b.0] {
                    Some((p.a.1, p.b))
                } else if p.b.0 == next && joined[p.a.0] {
                    Some((p.b.1, p.a))
                } else {
                    None
                }
            })
            .collect();
        let mut table: HashMap<Vec<&str>, Vec<usize>> = HashMap::new();
        for (r, keys) in vkeys[next].iter().enumerate() {
            let probe: Vec<&str> = edges.iter().map(|(c, _)| keys[*c].as_str()).collect();
            if probe.iter().any(|k| k.is_empty()) {
                continue;
            }
            table.entry(probe).or_default().push(r);
        }
        let mut out = Vec::new();
        for t in &tuples {
            let probe: Vec<&str> = edges
                .iter()
                .map(|(_, (ot, oc))| vkeys[*ot][t[*ot]][*oc].as_str())
                .collect();
            if probe.iter().any(|k| k.is_empty()) {
                continue;
            }
            if let Some(rows) = table.get(&probe) {
                for &r in rows {
                    let mut ext = t.clone();
                    ext[next] = r;
                    out.push(ext);
                }
            }
        }
        tuples = out;
        joined[next] = true;
    }
    tuples.sort_unstable();

    let n = tuples.len();
    let mut p = vec![Vec::with_capacity(n); m];
    for t in &tuples {
        for (i, &r) in t.iter().enumerate() {
            p[i].push(r);
        }
    }
    let y = match (label_table, labels) {
        (Some(lt), Some(ys)) => Some(p[lt].iter().map(|&r| ys[r]).collect()),
        _ => None,
    };
    let mapping = IndexMapping { p, y };
    let sizes: Vec<usize> = vkeys.iter().map(Vec::len).collect();
    let reverse = ReverseMapping::from_mapping(&mapping, &sizes);
    Ok((mapping, reverse))
}
