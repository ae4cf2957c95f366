use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{Algorithm, OutConfig, RunConfig, TableConfig, TrainConfig};
use super::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LossKind, LossSpec, Regularizer};
use crate::relational::{
    write_csv, ClientId, ColumnRef, HorizontalPartition, JoinPredicate, QuerySpec, TableSchema,
    VerticalTable,
};
use crate::rng::{self, Purpose};

fn one() -> usize {
    1
}

/// One table of a synthetic star schema. The first table of a spec is the
/// fact table; the others are dimension tables referenced by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTable {
    pub name: String,
    pub rows: usize,
    pub features: usize,
    #[serde(default = "one")]
    pub partitions: usize,
    /// Fact rows referencing each key of a dimension table. Defaults to
    /// `fact rows / keys`, which must divide evenly.
    #[serde(default)]
    pub duplication: Option<usize>,
    /// Dimension rows sharing one key (`> 1` makes the join one-to-many).
    #[serde(default = "one")]
    pub rows_per_key: usize,
}

impl SynthTable {
    pub fn new(name: &str, rows: usize, features: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            features,
            partitions: 1,
            duplication: None,
            rows_per_key: 1,
        }
    }

    pub fn partitions(mut self, q: usize) -> Self {
        self.partitions = q;
        self
    }

    pub fn duplication(mut self, d: usize) -> Self {
        self.duplication = Some(d);
        self
    }

    pub fn rows_per_key(mut self, r: usize) -> Self {
        self.rows_per_key = r;
        self
    }

    fn keys(&self) -> usize {
        self.rows / self.rows_per_key
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub tables: Vec<SynthTable>,
    /// 1 for regression, otherwise the number of label classes.
    #[serde(default = "one")]
    pub class_count: usize,
    /// Standard deviation of the Gaussian noise added to the scores.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    /// A ratings-like schema: 500 fact rows, 100 users each rated 5 times,
    /// and 25 movies with 4 rows each. The join has 2000 rows built from 700
    /// source rows and 30 features. Tables are split into 2, 3 and 2
    /// horizontal partitions.
    pub fn ridge_benchmark(seed: u64) -> Self {
        Self {
            tables: vec![
                SynthTable::new("ratings", 500, 10).partitions(2),
                SynthTable::new("users", 100, 10).duplication(5).partitions(3),
                SynthTable::new("movies", 100, 10).rows_per_key(4).partitions(2),
            ],
            class_count: 1,
            noise: 0.1,
            seed,
        }
    }

    /// Three-way star schema with a 4-class label.
    pub fn classification_benchmark(seed: u64) -> Self {
        Self {
            tables: vec![
                SynthTable::new("events", 1200, 6),
                SynthTable::new("patients", 300, 6).duplication(4),
                SynthTable::new("sites", 40, 4),
            ],
            class_count: 4,
            noise: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fact = self
            .tables
            .first()
            .ok_or_else(|| Error::Config("synth spec needs at least one table".into()))?;
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be at least 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if fact.duplication.is_some() || fact.rows_per_key != 1 {
            return Err(Error::Config(
                "the fact table takes no duplication or rows_per_key".into(),
            ));
        }
        for t in &self.tables {
            if t.rows == 0 || t.features == 0 || t.partitions == 0 || t.rows_per_key == 0 {
                return Err(Error::Config(format!(
                    "table `{}`: rows, features, partitions and rows_per_key must be positive",
                    t.name
                )));
            }
            if t.partitions > t.rows {
                return Err(Error::Config(format!(
                    "table `{}` has more partitions than rows",
                    t.name
                )));
            }
        }
        for t in &self.tables[1..] {
            if t.rows % t.rows_per_key != 0 {
                return Err(Error::Config(format!(
                    "table `{}`: {} rows do not split into groups of {}",
                    t.name, t.rows, t.rows_per_key
                )));
            }
            let keys = t.keys();
            let dup = t.duplication.unwrap_or(fact.rows / keys);
            if dup == 0 || keys * dup != fact.rows {
                return Err(Error::Config(format!(
                    "infeasible duplication for `{}`: {keys} keys x {dup} != {} fact rows",
                    t.name, fact.rows
                )));
            }
        }
        Ok(())
    }

    /// Rows of the full join.
    pub fn joined_rows(&self) -> usize {
        self.tables[0].rows * self.tables[1..].iter().map(|t| t.rows_per_key).product::<usize>()
    }
}

/// The linear model that produced the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Per table, `features x d_c` weights in row-major order.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub output_dim: usize,
    pub noise: f64,
    pub joined_rows: usize,
}

impl GroundTruth {
    pub fn weight_matrix(&self, table: usize) -> Array2<f64> {
        let w = &self.weights[table];
        Array2::from_shape_vec((w.len() / self.output_dim, self.output_dim), w.clone())
            .expect("stored weights are rectangular")
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub spec: SynthSpec,
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

fn normal_matrix(rng: &mut rng::StreamRng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
}

fn split_sizes(n: usize, q: usize) -> Vec<usize> {
    (0..q).map(|p| n / q + usize::from(p < n % q)).collect()
}

/// Generates a star schema whose label is a linear function of the joined
/// features. One-to-many dimensions contribute the mean of their matching
/// rows, since a fact row carries one label.
pub fn synth(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let fact = &spec.tables[0];
    let d_c = spec.class_count;
    let dims = &spec.tables[1..];
    let mut rng = rng::stream(spec.seed, Purpose::Synth, &[0]);

    let weights: Vec<Array2<f64>> = spec
        .tables
        .iter()
        .map(|t| normal_matrix(&mut rng, t.features, d_c) / (t.features as f64).sqrt())
        .collect();
    let bias: Array1<f64> = (0..d_c).map(|_| StandardNormal.sample(&mut rng)).collect();

    let fact_x = normal_matrix(&mut rng, fact.rows, fact.features);
    let mut scores = fact_x.dot(&weights[0]) + &bias;
    let mut fact_keys: Vec<Vec<String>> = vec![Vec::with_capacity(dims.len()); fact.rows];
    let mut dim_data = Vec::with_capacity(dims.len());
    for (t, dim) in dims.iter().enumerate() {
        let mut trng = rng::stream(spec.seed, Purpose::Synth, &[t as u64 + 1]);
        let keys = dim.keys();
        let dup = fact.rows / keys;
        let x = normal_matrix(&mut trng, dim.rows, dim.features);
        // Row r of `x` belongs to key r / rows_per_key.
        let key_scores = x.dot(&weights[t + 1]);
        let mut per_key = Array2::<f64>::zeros((keys, d_c));
        for (r, s) in key_scores.axis_iter(Axis(0)).enumerate() {
            let mut row = per_key.row_mut(r / dim.rows_per_key);
            row.scaled_add(1.0 / dim.rows_per_key as f64, &s);
        }
        let mut assign: Vec<usize> = (0..keys).flat_map(|k| std::iter::repeat_n(k, dup)).collect();
        assign.shuffle(&mut trng);
        for (j, &k) in assign.iter().enumerate() {
            fact_keys[j].push(format!("{}{k}", dim.name));
            let mut row = scores.row_mut(j);
            row += &per_key.row(k);
        }
        let mut order: Vec<usize> = (0..dim.rows).collect();
        order.shuffle(&mut trng);
        let x = x.select(Axis(0), &order);
        let keys: Vec<Vec<String>> = order
            .iter()
            .map(|&r| vec![format!("{}{}", dim.name, r / dim.rows_per_key)])
            .collect();
        dim_data.push((x, keys));
    }
    if spec.noise > 0.0 {
        let mut nrng = rng::stream(spec.seed, Purpose::Synth, &[u64::MAX]);
        scores.mapv_inplace(|v| {
            let e: f64 = StandardNormal.sample(&mut nrng);
            v + spec.noise * e
        });
    }
    let labels: Vec<f64> = if d_c == 1 {
        scores.column(0).to_vec()
    } else {
        scores
            .axis_iter(Axis(0))
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0 as f64
            })
            .collect()
    };

    let key_col = |t: &SynthTable| format!("{}_id", t.name);
    let feat_cols = |t: &SynthTable| (0..t.features).map(|f| format!("{}_x{f}", t.name)).collect();
    let mut schemas = vec![TableSchema {
        table_name: fact.name.clone(),
        join_key_cols: dims.iter().map(key_col).collect(),
        feature_cols: feat_cols(fact),
        label_col: Some("y".into()),
        class_count: d_c,
    }];
    let mut predicates = Vec::new();
    for dim in dims {
        schemas.push(TableSchema {
            table_name: dim.name.clone(),
            join_key_cols: vec![key_col(dim)],
            feature_cols: feat_cols(dim),
            label_col: None,
            class_count: d_c,
        });
        predicates.push(JoinPredicate::new(
            ColumnRef::new(&fact.name, key_col(dim)),
            ColumnRef::new(&dim.name, key_col(dim)),
        ));
    }

    let mut tables = Vec::with_capacity(spec.tables.len());
    let split = |org: usize,
                 t: &SynthTable,
                 x: &Array2<f64>,
                 keys: &[Vec<String>],
                 y: Option<&[f64]>|
     -> Result<VerticalTable> {
        let mut start = 0;
        let mut parts = Vec::with_capacity(t.partitions);
        for (q, size) in split_sizes(t.rows, t.partitions).into_iter().enumerate() {
            let r = start..start + size;
            start += size;
            parts.push(HorizontalPartition::new(
                ClientId::new(org, q),
                schemas[org].clone(),
                keys[r.clone()].to_vec(),
                x.slice(ndarray::s![r.clone(), ..]).to_owned(),
                y.map(|y| y[r].to_vec()),
            )?);
        }
        VerticalTable::new(parts)
    };
    tables.push(split(0, fact, &fact_x, &fact_keys, Some(&labels))?);
    for (t, (dim, (x, keys))) in dims.iter().zip(&dim_data).enumerate() {
        tables.push(split(t + 1, dim, x, keys, None)?);
    }
    let dataset = Dataset::new(QuerySpec::new(schemas, predicates), tables)?;
    let truth = GroundTruth {
        weights: weights.iter().map(|w| w.iter().copied().collect()).collect(),
        bias: bias.to_vec(),
        output_dim: d_c,
        noise: spec.noise,
        joined_rows: spec.joined_rows(),
    };
    Ok(SynthOutput {
        spec: spec.clone(),
        dataset,
        truth,
    })
}

impl SynthOutput {
    /// A config that trains on the generated files with default settings.
    pub fn default_config(&self, dir: &Path) -> RunConfig {
        let loss = match self.spec.class_count {
            1 => LossSpec::new(LossKind::Squared, Regularizer::L2, 0.01),
            _ => LossSpec::new(LossKind::SoftmaxCrossEntropy, Regularizer::L2, 0.001),
        };
        let mut train = TrainConfig::new(Algorithm::RflAdmm, loss);
        train.seed = self.spec.seed;
        RunConfig {
            tables: self
                .dataset
                .tables
                .iter()
                .zip(&self.spec.tables)
                .map(|(vt, st)| TableConfig {
                    schema: vt.schema().clone(),
                    partitions: (0..st.partitions)
                        .map(|q| PathBuf::from(format!("{}_p{q}.csv", st.name)))
                        .collect(),
                })
                .collect(),
            predicates: self.dataset.query.predicates.clone(),
            train,
            out: OutConfig::default(),
            base_dir: dir.to_path_buf(),
        }
    }

    /// Writes one CSV per partition, `ground_truth.json` and `config.json`
    /// into `dir`. Returns the config path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (vt, st) in self.dataset.tables.iter().zip(&self.spec.tables) {
            for (q, part) in vt.partitions().iter().enumerate() {
                write_csv(dir.join(format!("{}_p{q}.csv", st.name)), part)?;
            }
        }
        let truth = dir.join("ground_truth.json");
        std::fs::write(&truth, serde_json::to_string_pretty(&self.truth)?)
            .map_err(|e| Error::io(&truth, e))?;
        let cfg = dir.join("config.json");
        std::fs::write(&cfg, self.default_config(dir).to_json()?).map_err(|e| Error::io(&cfg, e))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relational::ReverseMapping;

    fn mapping(out: &SynthOutput) -> crate::relational::IndexMapping {
        let msgs: Vec<_> = out
            .dataset
            .tables
            .iter()
            .flat_map(|t| t.partitions().iter())
            .map(|p| crate::relational::extract_key_columns(p, None))
            .collect();
        crate::relational::build_mapping(&out.dataset.query, &msgs).unwrap().0
    }

    #[test]
    fn no_duplication_gives_unit_counts() {
        let spec = SynthSpec {
            tables: vec![SynthTable::new("f", 60, 3), SynthTable::new("d", 60, 2)],
            class_count: 1,
            noise: 0.0,
            seed: 1,
        };
        let out = synth(&spec).unwrap();
        let m = mapping(&out);
        assert_eq!(m.num_rows(), 60);
        for i in 0..2 {
            let rev = ReverseMapping::from_mapping(&m, &[60, 60]);
            assert!(rev.counts(i).iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn duplication_four_over_250_rows() {
        let spec = SynthSpec {
            tables: vec![SynthTable::new("f", 1000, 2), SynthTable::new("d", 250, 2).duplication(4)],
            class_count: 1,
            noise: 0.1,
            seed: 2,
        };
        let out = synth(&spec).unwrap();
        let m = mapping(&out);
        let rev = ReverseMapping::from_mapping(&m, &[1000, 250]);
        assert_eq!(rev.counts(1).iter().sum::<usize>(), 1000);
        assert!(rev.counts(1).iter().all(|&c| c == 4));
    }

    #[test]
    fn infeasible_duplication_is_rejected() {
        let spec = SynthSpec {
            tables: vec![SynthTable::new("f", 1000, 2), SynthTable::new("d", 250, 2).duplication(3)],
            class_count: 1,
            noise: 0.0,
            seed: 0,
        };
        assert!(matches!(synth(&spec), Err(Error::Config(_))));
        let spec = SynthSpec {
            tables: vec![SynthTable::new("f", 1000, 2), SynthTable::new("d", 300, 2)],
            class_count: 1,
            noise: 0.0,
            seed: 0,
        };
        assert!(synth(&spec).is_err());
    }

    #[test]
    fn ridge_benchmark_shape() {
        let spec = SynthSpec::ridge_benchmark(0);
        let out = synth(&spec).unwrap();
        assert_eq!(mapping(&out).num_rows(), 2000);
        assert_eq!(out.dataset.table_rows().iter().sum::<usize>(), 700);
        let d: usize = out.dataset.tables.iter().map(|t| t.schema().num_features()).sum();
        assert_eq!(d, 30);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth(&SynthSpec::classification_benchmark(5)).unwrap();
        let b = synth(&SynthSpec::classification_benchmark(5)).unwrap();
        let c = synth(&SynthSpec::classification_benchmark(6)).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.dataset.features(), b.dataset.features());
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            tables: vec![
                SynthTable::new("f", 40, 2).partitions(2),
                SynthTable::new("d", 10, 3).duplication(4).partitions(3),
            ],
            class_count: 3,
            noise: 0.0,
            seed: 4,
        };
        let out = synth(&spec).unwrap();
        let cfg_path = out.write(dir.path()).unwrap();
        let cfg = RunConfig::from_file(&cfg_path).unwrap();
        let ds = Dataset::load(&cfg).unwrap();
        assert_eq!(ds.partitions(), vec![2, 3]);
        assert_eq!(ds.features(), out.dataset.features());
        assert_eq!(ds.source_labels().unwrap(), out.dataset.source_labels().unwrap());
    }
}
