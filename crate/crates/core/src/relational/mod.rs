//! Tables, partitions and the join mapping.
//!
//! An organization owns one *vertical* table (its own feature columns), which
//! is the union of *horizontal* partitions held by individual clients. The
//! server joins only the key columns and keeps, for every joined row `j`, the
//! source row `p_i(j)` in each vertical table.

mod csv_io;
mod keys;
mod mapping;

use std::collections::HashSet;
use std::ops::Range;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{load_csv, write_csv};
pub use keys::{extract_key_columns, KeyHasher, KeyMessage, Sha256KeyHasher};
pub use mapping::{build_mapping, IndexMapping, ReverseMapping};

/// Identifies a client: organization `org` (the vertical table index) and
/// partition `part` within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClientId {
    pub org: usize,
    pub part: usize,
}

impl ClientId {
    pub fn new(org: usize, part: usize) -> Self {
        Self { org, part }
    }
}

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "c{}.{}", self.org, self.part)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub table_name: String,
    pub join_key_cols: Vec<String>,
    pub feature_cols: Vec<String>,
    #[serde(default)]
    pub label_col: Option<String>,
    /// Number of label classes; 1 for regression.
    #[serde(default = "one")]
    pub class_count: usize,
}

fn one() -> usize {
    1
}

impl TableSchema {
    pub fn validate(&self) -> Result<()> {
        if self.feature_cols.is_empty() {
            return Err(Error::Schema(format!(
                "table `{}` declares no feature columns",
                self.table_name
            )));
        }
        if self.class_count == 0 {
            return Err(Error::Schema(format!(
                "table `{}` has class_count 0",
                self.table_name
            )));
        }
        let mut seen = HashSet::new();
        let all = self
            .join_key_cols
            .iter()
            .chain(&self.feature_cols)
            .chain(self.label_col.iter());
        for col in all {
            if !seen.insert(col.as_str()) {
                return Err(Error::Schema(format!(
                    "column `{col}` appears more than once in table `{}`",
                    self.table_name
                )));
            }
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.feature_cols.len()
    }

    pub fn key_index(&self, column: &str) -> Option<usize> {
        self.join_key_cols.iter().position(|c| c == column)
    }
}

/// Rows of a vertical table held by a single client.
#[derive(Debug, Clone)]
pub struct HorizontalPartition {
    pub owner: ClientId,
    pub schema: TableSchema,
    /// One entry per row, each with `join_key_cols.len()` values.
    pub keys: Vec<Vec<String>>,
    pub features: Array2<f64>,
    pub labels: Option<Vec<f64>>,
}

impl HorizontalPartition {
    pub fn new(
        owner: ClientId,
        schema: TableSchema,
        keys: Vec<Vec<String>>,
        features: Array2<f64>,
        labels: Option<Vec<f64>>,
    ) -> Result<Self> {
        schema.validate()?;
        let n = keys.len();
        if features.nrows() != n {
            return Err(Error::Shape(format!(
                "partition {owner}: {n} key rows but {} feature rows",
                features.nrows()
            )));
        }
        if features.ncols() != schema.num_features() {
            return Err(Error::Shape(format!(
                "partition {owner}: schema has {} features, matrix has {}",
                schema.num_features(),
                features.ncols()
            )));
        }
        if let Some(bad) = keys.iter().find(|k| k.len() != schema.join_key_cols.len()) {
            return Err(Error::Shape(format!(
                "partition {owner}: key row has {} values, expected {}",
                bad.len(),
                schema.join_key_cols.len()
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::Schema(format!(
                "partition {owner}: non-finite feature value"
            )));
        }
        match (&schema.label_col, &labels) {
            (Some(_), None) => {
                return Err(Error::Schema(format!(
                    "partition {owner}: schema declares a label column but no labels were given"
                )))
            }
            (None, Some(_)) => {
                return Err(Error::Schema(format!(
                    "partition {owner}: labels given but schema declares no label column"
                )))
            }
            (Some(_), Some(y)) => {
                if y.len() != n {
                    return Err(Error::Shape(format!(
                        "partition {owner}: {n} rows but {} labels",
                        y.len()
                    )));
                }
                check_labels(y, schema.class_count)?;
            }
            (None, None) => {}
        }
        Ok(Self {
            owner,
            schema,
            keys,
            features,
            labels,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.keys.len()
    }
}

/// Class labels must be integers in `[0, class_count)`; regression labels
/// (`class_count == 1`) must be finite.
pub(crate) fn check_labels(y: &[f64], class_count: usize) -> Result<()> {
    for (row, &v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Schema(format!("label at row {row} is not finite")));
        }
        if class_count > 1 && (v < 0.0 || v.fract() != 0.0 || v >= class_count as f64) {
            return Err(Error::Schema(format!(
                "label {v} at row {row} is not a class in 0..{class_count}"
            )));
        }
    }
    Ok(())
}

/// Union of the horizontal partitions of one organization.
#[derive(Debug, Clone)]
pub struct VerticalTable {
    partitions: Vec<HorizontalPartition>,
    offsets: Vec<usize>,
}

impl VerticalTable {
    pub fn new(partitions: Vec<HorizontalPartition>) -> Result<Self> {
        let first = partitions
            .first()
            .ok_or_else(|| Error::Schema("vertical table needs at least one partition".into()))?;
        let schema = &first.schema;
        let org = first.owner.org;
        let mut offsets = Vec::with_capacity(partitions.len() + 1);
        offsets.push(0);
        for (q, part) in partitions.iter().enumerate() {
            if &part.schema != schema {
                return Err(Error::Schema(format!(
                    "partition {} of `{}` has a different schema",
                    q, schema.table_name
                )));
            }
            if part.owner != ClientId::new(org, q) {
                return Err(Error::Schema(format!(
                    "partition {q} of `{}` is owned by {}, expected {}",
                    schema.table_name,
                    part.owner,
                    ClientId::new(org, q)
                )));
            }
            offsets.push(offsets[q] + part.num_rows());
        }
        Ok(Self {
            partitions,
            offsets,
        })
    }

    pub fn schema(&self) -> &TableSchema {
        &self.partitions[0].schema
    }

    pub fn org(&self) -> usize {
        self.partitions[0].owner.org
    }

    pub fn partitions(&self) -> &[HorizontalPartition] {
        &self.partitions
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn num_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Prefix sums of partition sizes (length `Q + 1`).
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Vertical row ids covered by partition `q`.
    pub fn partition_range(&self, q: usize) -> Range<usize> {
        self.offsets[q]..self.offsets[q + 1]
    }

    /// Maps a vertical row id to `(partition, local row)`.
    pub fn locate(&self, row: usize) -> Option<(usize, usize)> {
        if row >= self.num_rows() {
            return None;
        }
        let q = self.offsets.partition_point(|&o| o <= row) - 1;
        Some((q, row - self.offsets[q]))
    }

    /// Features of all partitions stacked in partition order.
    pub fn features(&self) -> Array2<f64> {
        let views: Vec<_> = self.partitions.iter().map(|p| p.features.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("partitions share a column count")
    }

    /// Rows `rows` (vertical ids) of the stacked feature matrix.
    pub fn gather(&self, rows: &[usize]) -> Array2<f64> {
        let d = self.schema().num_features();
        let mut out = Array2::zeros((rows.len(), d));
        for (k, &r) in rows.iter().enumerate() {
            let (q, local) = self.locate(r).expect("row in range");
            out.row_mut(k)
                .assign(&self.partitions[q].features.row(local));
        }
        out
    }
}

/// Reference to a join-key column of a named table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        Self {
            table: table.into(),
            column: column.into(),
        }
    }
}

/// Equi-join edge `left.table.left.column = right.table.right.column`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinPredicate {
    pub left: ColumnRef,
    pub right: ColumnRef,
}

impl JoinPredicate {
    pub fn new(left: ColumnRef, right: ColumnRef) -> Self {
        Self { left, right }
    }
}

/// The conjunctive query: M tables and their equi-join predicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub tables: Vec<TableSchema>,
    #[serde(default)]
    pub predicates: Vec<JoinPredicate>,
}

/// A predicate resolved to table and key-column indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ResolvedPredicate {
    pub a: (usize, usize),
    pub b: (usize, usize),
}

impl QuerySpec {
    pub fn new(tables: Vec<TableSchema>, predicates: Vec<JoinPredicate>) -> Self {
        Self { tables, predicates }
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.table_name == name)
    }

    /// Index of the single table that carries the label column.
    pub fn label_table(&self) -> Option<usize> {
        self.tables.iter().position(|t| t.label_col.is_some())
    }

    pub fn class_count(&self) -> usize {
        self.label_table()
            .map(|i| self.tables[i].class_count)
            .unwrap_or(1)
    }

    pub(crate) fn resolve(&self) -> Result<Vec<ResolvedPredicate>> {
        self.predicates
            .iter()
            .map(|p| {
                let side = |c: &ColumnRef| -> Result<(usize, usize)> {
                    let t = self.table_index(&c.table).ok_or_else(|| {
                        Error::Config(format!("predicate names unknown table `{}`", c.table))
                    })?;
                    let k = self.tables[t].key_index(&c.column).ok_or_else(|| {
                        Error::Config(format!(
                            "predicate column `{}.{}` is not a join key",
                            c.table, c.column
                        ))
                    })?;
                    Ok((t, k))
                };
                let (a, b) = (side(&p.left)?, side(&p.right)?);
                if a.0 == b.0 {
                    return Err(Error::Config(format!(
                        "predicate joins table `{}` with itself",
                        p.left.table
                    )));
                }
                Ok(ResolvedPredicate { a, b })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tables.is_empty() {
            return Err(Error::Config("query has no tables".into()));
        }
        let mut names = HashSet::new();
        for t in &self.tables {
            t.validate()?;
            if !names.insert(t.table_name.as_str()) {
                return Err(Error::Config(format!(
                    "table `{}` listed twice",
                    t.table_name
                )));
            }
        }
        let labelled = self.tables.iter().filter(|t| t.label_col.is_some()).count();
        if labelled > 1 {
            return Err(Error::Config(
                "more than one table declares a label column".into(),
            ));
        }
        let preds = self.resolve()?;
        // connectivity by union-find
        let m = self.tables.len();
        let mut parent: Vec<usize> = (0..m).collect();
        fn find(parent: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while parent[r] != r {
                r = parent[r];
            }
            parent[x] = r;
            r
        }
        for p in &preds {
            let (ra, rb) = (find(&mut parent, p.a.0), find(&mut parent, p.b.0));
            parent[ra] = rb;
        }
        let root = find(&mut parent, 0);
        for t in 1..m {
            if find(&mut parent, t) != root {
                return Err(Error::Config(format!(
                    "join graph is disconnected: `{}` is not reachable from `{}`",
                    self.tables[t].table_name, self.tables[0].table_name
                )));
            }
        }
        Ok(())
    }
}
