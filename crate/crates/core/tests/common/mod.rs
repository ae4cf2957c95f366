//! Independent oracles shared by the integration tests. Nothing here calls
//! into the crate's mapping, aggregation or training code.
#![allow(dead_code)]

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use relfed::orchestrator::Dataset;

/// Joined rows as one source row index per table, by nested loops over the
/// tables in query order.
pub fn nested_loop_join(ds: &Dataset) -> Vec<Vec<usize>> {
    let m = ds.num_orgs();
    let keys: Vec<Vec<Vec<String>>> = ds
        .tables
        .iter()
        .map(|t| t.partitions().iter().flat_map(|p| p.keys.iter().cloned()).collect())
        .collect();
    let col = |t: usize, name: &str| {
        ds.query.tables[t]
            .join_key_cols
            .iter()
            .position(|c| c == name)
            .expect("predicate column exists")
    };
    let preds: Vec<(usize, usize, usize, usize)> = ds
        .query
        .predicates
        .iter()
        .map(|p| {
            let a = ds.query.table_index(&p.left.table).unwrap();
            let b = ds.query.table_index(&p.right.table).unwrap();
            (a, col(a, &p.left.column), b, col(b, &p.right.column))
        })
        .collect();
    let mut partial: Vec<Vec<usize>> = vec![vec![]];
    for t in 0..m {
        let mut next = Vec::new();
        for tuple in &partial {
            for r in 0..keys[t].len() {
                let row = |u: usize| match u.cmp(&t) {
                    std::cmp::Ordering::Equal => Some(r),
                    std::cmp::Ordering::Less => Some(tuple[u]),
                    std::cmp::Ordering::Greater => None,
                };
                let ok = preds.iter().all(|&(a, ca, b, cb)| {
                    if a != t && b != t {
                        return true;
                    }
                    match (row(a), row(b)) {
                        (Some(ra), Some(rb)) => keys[a][ra][ca] == keys[b][rb][cb],
                        _ => true,
                    }
                });
                if ok {
                    let mut tu = tuple.clone();
                    tu.push(r);
                    next.push(tu);
                }
            }
        }
        partial = next;
    }
    partial
}

/// Materialized feature blocks and labels for the given joined tuples.
pub fn materialize(ds: &Dataset, tuples: &[Vec<usize>]) -> (Vec<Array2<f64>>, Vec<f64>) {
    let feats = ds.features();
    let label_org = ds.label_org().unwrap();
    let labels = ds.source_labels().unwrap();
    let blocks = (0..ds.num_orgs())
        .map(|i| {
            Array2::from_shape_fn((tuples.len(), feats[i].ncols()), |(j, c)| feats[i][[tuples[j][i], c]])
        })
        .collect();
    let y = tuples.iter().map(|t| labels[t[label_org]]).collect();
    (blocks, y)
}

/// Tuples of the library's training mapping, for set comparisons.
pub fn tuples_of(p: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = p[0].len();
    (0..n).map(|j| p.iter().map(|pi| pi[j]).collect()).collect()
}

/// Keeps the oracle tuples that appear in `subset`, with multiplicity.
pub fn restrict(all: &[Vec<usize>], subset: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut want: HashMap<&Vec<usize>, usize> = HashMap::new();
    for t in subset {
        *want.entry(t).or_default() += 1;
    }
    all.iter()
        .filter(|t| match want.get_mut(t) {
            Some(c) if *c > 0 => {
                *c -= 1;
                true
            }
            _ => false,
        })
        .cloned()
        .collect()
}

/// Scalar ridge with the bias on org `bias_org`:
/// `argmin (1/2N)‖Σ X_i w_i + b − y‖² + β Σ ‖w_i‖²`, solved by the normal
/// equations. Returns per-org parameters laid out as `w` then `b`.
pub fn ridge_closed_form(blocks: &[Array2<f64>], y: &[f64], beta: f64, bias_org: usize) -> Vec<Array1<f64>> {
    let n = y.len();
    let dims: Vec<usize> = blocks.iter().map(|b| b.ncols()).collect();
    let d: usize = dims.iter().sum::<usize>() + 1;
    let mut x = DMatrix::<f64>::zeros(n, d);
    let mut off = 0;
    for b in blocks {
        for j in 0..n {
            for c in 0..b.ncols() {
                x[(j, off + c)] = b[[j, c]];
            }
        }
        off += b.ncols();
    }
    for j in 0..n {
        x[(j, d - 1)] = 1.0;
    }
    let yv = DVector::from_column_slice(y);
    let mut a = x.transpose() * &x / n as f64;
    for k in 0..d - 1 {
        a[(k, k)] += 2.0 * beta;
    }
    let rhs = x.transpose() * yv / n as f64;
    let theta = a.lu().solve(&rhs).expect("ridge system is nonsingular");
    let mut out = Vec::new();
    let mut off = 0;
    for (i, &di) in dims.iter().enumerate() {
        let mut p: Vec<f64> = (0..di).map(|c| theta[off + c]).collect();
        if i == bias_org {
            p.push(theta[d - 1]);
        }
        out.push(Array1::from(p));
        off += di;
    }
    out
}

/// Full-batch gradient descent for linear blocks with squared or softmax
/// loss, coded from the chain rule on the materialized join.
pub struct OracleSgd {
    pub blocks: Vec<Array2<f64>>,
    pub y: Vec<f64>,
    pub d_c: usize,
    pub softmax: bool,
    pub beta: f64,
    pub bias_org: usize,
}

impl OracleSgd {
    fn split(&self, params: &[Array1<f64>], i: usize) -> (Array2<f64>, Option<Array1<f64>>) {
        let d = self.blocks[i].ncols();
        let w = Array2::from_shape_vec((d, self.d_c), params[i].as_slice().unwrap()[..d * self.d_c].to_vec()).unwrap();
        let b = (i == self.bias_org).then(|| Array1::from(params[i].as_slice().unwrap()[d * self.d_c..].to_vec()));
        (w, b)
    }

    pub fn predict(&self, params: &[Array1<f64>], rows: &[usize]) -> Array2<f64> {
        let mut z = Array2::zeros((rows.len(), self.d_c));
        for i in 0..self.blocks.len() {
            let (w, b) = self.split(params, i);
            for (k, &j) in rows.iter().enumerate() {
                for c in 0..self.d_c {
                    let mut v = b.as_ref().map_or(0.0, |b| b[c]);
                    for f in 0..w.nrows() {
                        v += self.blocks[i][[j, f]] * w[[f, c]];
                    }
                    z[[k, c]] += v;
                }
            }
        }
        z
    }

    /// One step of size `lr` on the rows in `batch`.
    pub fn step(&self, params: &[Array1<f64>], batch: &[usize], lr: f64) -> Vec<Array1<f64>> {
        let z = self.predict(params, batch);
        let mut v = z.clone();
        for (k, &j) in batch.iter().enumerate() {
            if self.softmax {
                let mx = z.row(k).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let s: f64 = z.row(k).iter().map(|t| (t - mx).exp()).sum();
                for c in 0..self.d_c {
                    v[[k, c]] = (z[[k, c]] - mx).exp() / s - if c == self.y[j] as usize { 1.0 } else { 0.0 };
                }
            } else {
                v[[k, 0]] = z[[k, 0]] - self.y[j];
            }
        }
        let b = batch.len() as f64;
        (0..self.blocks.len())
            .map(|i| {
                let (w, bias) = self.split(params, i);
                let mut gw = Array2::<f64>::zeros(w.raw_dim());
                let mut gb = Array1::<f64>::zeros(self.d_c);
                for (k, &j) in batch.iter().enumerate() {
                    for c in 0..self.d_c {
                        for f in 0..w.nrows() {
                            gw[[f, c]] += self.blocks[i][[j, f]] * v[[k, c]];
                        }
                        gb[c] += v[[k, c]];
                    }
                }
                let mut out: Vec<f64> = w
                    .iter()
                    .zip(gw.iter())
                    .map(|(wv, g)| wv - lr * (g / b + 2.0 * self.beta * wv))
                    .collect();
                if let Some(bias) = bias {
                    out.extend(bias.iter().zip(gb.iter()).map(|(bv, g)| bv - lr * g / b));
                }
                Array1::from(out)
            })
            .collect()
    }
}

pub fn max_abs_diff(a: &[Array1<f64>], b: &[Array1<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

/// Euclidean distance over all organizations' parameters.
pub fn param_distance(a: &[Array1<f64>], b: &[Array1<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(u, v)| (u - v).powi(2)))
        .sum::<f64>()
        .sqrt()
}
