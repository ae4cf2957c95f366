use ndarray::Array2;
use rand::seq::SliceRandom;

use super::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::privacy::perturb_labels;
use crate::relational::{
    build_mapping, extract_key_columns, load_csv, ClientId, HorizontalPartition, IndexMapping,
    KeyHasher, KeyMessage, QuerySpec, ReverseMapping, Sha256KeyHasher, VerticalTable,
};
use crate::rng::{self, Purpose};

/// The tables of a query, one vertical table per organization. Organization
/// `i` owns `query.tables[i]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub query: QuerySpec,
    pub tables: Vec<VerticalTable>,
}

impl Dataset {
    pub fn new(query: QuerySpec, tables: Vec<VerticalTable>) -> Result<Self> {
        query.validate()?;
        if tables.len() != query.num_tables() {
            return Err(Error::Config(format!(
                "query has {} tables but {} were supplied",
                query.num_tables(),
                tables.len()
            )));
        }
        for (i, (t, s)) in tables.iter().zip(&query.tables).enumerate() {
            if t.schema() != s {
                return Err(Error::Schema(format!(
                    "table {i} does not match the query schema of `{}`",
                    s.table_name
                )));
            }
            if t.org() != i {
                return Err(Error::Config(format!(
                    "table `{}` is owned by organization {} but sits at position {i}",
                    s.table_name,
                    t.org()
                )));
            }
        }
        let ds = Self { query, tables };
        ds.label_org()?;
        Ok(ds)
    }

    /// Reads every partition CSV named in the config.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let query = cfg.query();
        let mut tables = Vec::with_capacity(cfg.tables.len());
        for (i, t) in cfg.tables.iter().enumerate() {
            if t.partitions.is_empty() {
                return Err(Error::Config(format!(
                    "table `{}` lists no partitions",
                    t.schema.table_name
                )));
            }
            let parts = t
                .partitions
                .iter()
                .enumerate()
                .map(|(q, p)| load_csv(cfg.resolve(p), &t.schema, ClientId::new(i, q)))
                .collect::<Result<Vec<_>>>()?;
            tables.push(VerticalTable::new(parts)?);
        }
        Self::new(query, tables)
    }

    pub fn num_orgs(&self) -> usize {
        self.tables.len()
    }

    pub fn table_rows(&self) -> Vec<usize> {
        self.tables.iter().map(VerticalTable::num_rows).collect()
    }

    pub fn partitions(&self) -> Vec<usize> {
        self.tables.iter().map(VerticalTable::num_partitions).collect()
    }

    pub fn class_count(&self) -> usize {
        self.query.class_count()
    }

    pub fn label_org(&self) -> Result<usize> {
        self.query
            .label_table()
            .ok_or_else(|| Error::Config("no table declares a label column".into()))
    }

    /// Concatenated features of every organization.
    pub fn features(&self) -> Vec<Array2<f64>> {
        self.tables.iter().map(VerticalTable::features).collect()
    }

    /// Concatenated source-row labels of the label table.
    pub fn source_labels(&self) -> Result<Vec<f64>> {
        let t = &self.tables[self.label_org()?];
        let mut y = Vec::with_capacity(t.num_rows());
        for p in t.partitions() {
            y.extend_from_slice(p.labels.as_deref().unwrap_or(&[]));
        }
        Ok(y)
    }
}

/// Server-side state after the setup round.
#[derive(Debug, Clone)]
pub struct Setup {
    /// Training rows of the join; labels are the ones the server received.
    pub train: IndexMapping,
    pub reverse: ReverseMapping,
    /// Held-out rows with clean labels, used only for evaluation.
    pub test: IndexMapping,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    /// All key messages sent during setup, for byte accounting.
    pub messages: Vec<KeyMessage>,
    pub eps_label: Option<f64>,
}

impl Setup {
    pub fn train_labels(&self) -> &[f64] {
        self.train.y.as_deref().unwrap_or(&[])
    }

    pub fn test_labels(&self) -> &[f64] {
        self.test.y.as_deref().unwrap_or(&[])
    }
}

/// Builds the mapping from (optionally hashed) keys, perturbing labels on
/// the client before they are sent, and splits joined rows into train and
/// test sets.
pub fn setup(ds: &Dataset, cfg: &TrainConfig) -> Result<Setup> {
    let hasher = Sha256KeyHasher;
    let hasher: Option<&dyn KeyHasher> = cfg.hash_keys.then_some(&hasher as &dyn KeyHasher);
    let label_org = ds.label_org()?;
    let mut eps_label = None;
    let mut messages = Vec::new();
    for t in &ds.tables {
        for part in t.partitions() {
            let mut msg = extract_key_columns(part, hasher);
            if t.org() == label_org && cfg.dp.label_dp() {
                let mut rng = rng::stream(
                    cfg.seed,
                    Purpose::LabelNoise,
                    &[part.owner.org as u64, part.owner.part as u64],
                );
                let clean = part.labels.as_deref().unwrap_or(&[]);
                let (noisy, eps) =
                    perturb_labels(clean, part.schema.class_count, cfg.dp.label_lambda, &mut rng)?;
                msg.labels = Some(noisy);
                eps_label = eps;
            }
            messages.push(msg);
        }
    }
    let (full, _) = build_mapping(&ds.query, &messages)?;
    let n = full.num_rows();
    if n == 0 {
        return Err(Error::Config("the join produced no rows".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, Purpose::Split, &[]));
    let n_test = (cfg.test_fraction * n as f64).round() as usize;
    if n_test >= n {
        return Err(Error::Config(format!(
            "test_fraction {} leaves no training rows out of {n}",
            cfg.test_fraction
        )));
    }
    let mut test_rows = order[..n_test].to_vec();
    let mut train_rows = order[n_test..].to_vec();
    test_rows.sort_unstable();
    train_rows.sort_unstable();

    let train = full.subset(&train_rows);
    let reverse = ReverseMapping::from_mapping(&train, &ds.table_rows());
    let mut test = full.subset(&test_rows);
    let clean = ds.source_labels()?;
    test.y = Some(test.p[label_org].iter().map(|&r| clean[r]).collect());
    Ok(Setup {
        train,
        reverse,
        test,
        train_rows,
        test_rows,
        messages,
        eps_label,
    })
}

/// Join statistics printed by `rfl map`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MapStats {
    pub joined_rows: usize,
    pub tables: Vec<TableStats>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TableStats {
    pub name: String,
    pub rows: usize,
    pub partitions: usize,
    /// Source rows that appear in no joined row.
    pub unmatched: usize,
    pub max_count: usize,
    /// `N / n_i`.
    pub duplication: f64,
}

pub fn map_stats(ds: &Dataset, hash_keys: bool) -> Result<MapStats> {
    let hasher = Sha256KeyHasher;
    let hasher: Option<&dyn KeyHasher> = hash_keys.then_some(&hasher as &dyn KeyHasher);
    let messages: Vec<KeyMessage> = ds
        .tables
        .iter()
        .flat_map(|t| t.partitions().iter())
        .map(|p| extract_key_columns(p, hasher))
        .collect();
    let (mapping, reverse) = build_mapping(&ds.query, &messages)?;
    let n = mapping.num_rows();
    let tables = ds
        .tables
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let counts = reverse.counts(i);
            TableStats {
                name: t.schema().table_name.clone(),
                rows: t.num_rows(),
                partitions: t.num_partitions(),
                unmatched: counts.iter().filter(|&&c| c == 0).count(),
                max_count: counts.iter().copied().max().unwrap_or(0),
                duplication: if t.num_rows() == 0 { 0.0 } else { n as f64 / t.num_rows() as f64 },
            }
        })
        .collect();
    Ok(MapStats { joined_rows: n, tables })
}

impl std::fmt::Display for MapStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "joined rows N = {}", self.joined_rows)?;
        writeln!(
            f,
            "{:<16} {:>8} {:>6} {:>10} {:>10} {:>8}",
            "table", "n_i", "Q_i", "unmatched", "max G", "N/n_i"
        )?;
        for t in &self.tables {
            writeln!(
                f,
                "{:<16} {:>8} {:>6} {:>10} {:>10} {:>8.3}",
                t.name, t.rows, t.partitions, t.unmatched, t.max_count, t.duplication
            )?;
        }
        Ok(())
    }
}

/// Helper for in-memory construction: wraps feature blocks into single-
/// partition tables.
pub fn single_partition(
    org: usize,
    schema: crate::relational::TableSchema,
    keys: Vec<Vec<String>>,
    features: Array2<f64>,
    labels: Option<Vec<f64>>,
) -> Result<VerticalTable> {
    VerticalTable::new(vec![HorizontalPartition::new(
        ClientId::new(org, 0),
        schema,
        keys,
        features,
        labels,
    )?])
}
