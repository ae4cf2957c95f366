//! Server side of learning over a join.
//!
//! The server never sees features. It holds, per organization `i`, the
//! predictions `H_i` mapped onto joined rows through `p_i`, and it sends back
//! aggregates keyed by source row: every joined row `g` that maps to source
//! row `r` contributes to `Y_{i,r}`, and `G_{i,r}` counts them. Clients then
//! need one backward pass per source row instead of one per joined row.
//!
//! Client-side helpers for the two local objectives live here too:
//! the SGD partial gradient and the ADMM θ-subproblem.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{loss_and_grad, LocalModel, LossKind, LossSpec, RowLoss};
use crate::relational::{IndexMapping, ReverseMapping};

/// Dense predictions of organization `org` for all of its source rows, in
/// partition offset order.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub org: usize,
    pub values: Array2<f64>,
}

impl Predictions {
    pub fn wire_bytes(&self) -> u64 {
        (self.values.len() * 8) as u64
    }
}

/// Predictions for a sorted subset of source rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePredictions {
    pub org: usize,
    pub rows: Vec<usize>,
    pub values: Array2<f64>,
}

impl SparsePredictions {
    pub fn wire_bytes(&self) -> u64 {
        (self.values.len() * 8) as u64
    }
}

/// Batch aggregate for one organization: `(source_row, count, Y_row)` for
/// every source row the batch touches, sorted by source row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAggregate {
    pub org: usize,
    pub rows: Vec<usize>,
    pub counts: Vec<usize>,
    pub y: Array2<f64>,
}

impl SparseAggregate {
    /// `u32` count and `d_c` reals per entry. Row ids are not resent: entries
    /// follow the order of the batch request that preceded them.
    pub fn wire_bytes(&self) -> u64 {
        (self.rows.len() * (4 + 8 * self.y.ncols())) as u64
    }

    /// Keeps the entries whose source row lies in `range`, re-indexed to
    /// start at zero.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SparseAggregate {
        let lo = self.rows.partition_point(|&r| r < range.start);
        let hi = self.rows.partition_point(|&r| r < range.end);
        SparseAggregate {
            org: self.org,
            rows: self.rows[lo..hi].iter().map(|r| r - range.start).collect(),
            counts: self.counts[lo..hi].to_vec(),
            y: self.y.slice(ndarray::s![lo..hi, ..]).to_owned(),
        }
    }
}

/// Dense aggregate for one organization: `Y_i` (`n_i × d_c`) and `G_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedVars {
    pub org: usize,
    pub y: Array2<f64>,
    pub counts: Vec<usize>,
}

impl AggregatedVars {
    /// `Y_i` always; `G_i` only when the client does not have it cached yet.
    pub fn wire_bytes(&self, with_counts: bool) -> u64 {
        let counts = if with_counts { self.counts.len() * 8 } else { 0 };
        (self.y.len() * 8 + counts) as u64
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> AggregatedVars {
        AggregatedVars {
            org: self.org,
            y: self.y.slice(ndarray::s![range.clone(), ..]).to_owned(),
            counts: self.counts[range].to_vec(),
        }
    }
}

/// Sorted distinct source rows of table `i` touched by `batch`.
pub fn touched_rows(mapping: &IndexMapping, i: usize, batch: &[usize]) -> Vec<usize> {
    let mut rows: Vec<usize> = batch.iter().map(|&j| mapping.p[i][j]).collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

fn check_batch(batch: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &j in batch {
        if j >= n {
            return Err(Error::InvalidArgument(format!(
                "batch index {j} out of range for {n} joined rows"
            )));
        }
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::InvalidArgument(format!("batch index {j} repeated")));
        }
    }
    Ok(())
}

fn new_h(m: usize, n: usize, d_c: usize) -> Vec<Array2<f64>> {
    (0..m).map(|_| Array2::zeros((n, d_c))).collect()
}

/// Writes `H_i[j] = pred_i[p_i(j)]` for every joined row.
fn gather_dense(
    h: &mut [Array2<f64>],
    msgs: &[Predictions],
    mapping: &IndexMapping,
    table_rows: &[usize],
) -> Result<()> {
    let m = h.len();
    let mut seen = vec![false; m];
    for msg in msgs {
        let i = msg.org;
        if i >= m {
            return Err(Error::Protocol(format!("predictions from unknown organization {i}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Protocol(format!("duplicate predictions from organization {i}")));
        }
        let d_c = h[i].ncols();
        if msg.values.dim() != (table_rows[i], d_c) {
            return Err(Error::Protocol(format!(
                "organization {i} sent {:?} predictions, expected ({}, {d_c})",
                msg.values.dim(),
                table_rows[i]
            )));
        }
        for (j, &r) in mapping.p[i].iter().enumerate() {
            h[i].row_mut(j).assign(&msg.values.row(r));
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Protocol(format!("missing predictions from organization {i}")));
    }
    Ok(())
}

/// Server state for SGD over a join.
#[derive(Debug, Clone)]
pub struct SgdServerState {
    h: Vec<Array2<f64>>,
    batch: Vec<usize>,
}

impl SgdServerState {
    pub fn new(num_orgs: usize, joined_rows: usize, d_c: usize) -> Self {
        Self {
            h: new_h(num_orgs, joined_rows, d_c),
            batch: Vec::new(),
        }
    }

    pub fn h(&self, i: usize) -> &Array2<f64> {
        &self.h[i]
    }

    pub fn batch(&self) -> &[usize] {
        &self.batch
    }

    /// Full gather: every organization sends predictions for all its rows.
    pub fn gather_predictions(
        &mut self,
        msgs: &[Predictions],
        mapping: &IndexMapping,
        table_rows: &[usize],
    ) -> Result<()> {
        gather_dense(&mut self.h, msgs, mapping, table_rows)?;
        self.batch = (0..mapping.num_rows()).collect();
        Ok(())
    }

    /// Batch gather: each message covers exactly the source rows touched by
    /// `batch` (see [`touched_rows`]).
    pub fn gather_batch(
        &mut self,
        msgs: &[SparsePredictions],
        mapping: &IndexMapping,
        batch: &[usize],
    ) -> Result<()> {
        check_batch(batch, mapping.num_rows())?;
        let m = self.h.len();
        let mut seen = vec![false; m];
        for msg in msgs {
            let i = msg.org;
            if i >= m {
                return Err(Error::Protocol(format!("predictions from unknown organization {i}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Protocol(format!("duplicate predictions from organization {i}")));
            }
            if msg.values.dim() != (msg.rows.len(), self.h[i].ncols()) {
                return Err(Error::Protocol(format!(
                    "organization {i} sent {:?} predictions for {} rows",
                    msg.values.dim(),
                    msg.rows.len()
                )));
            }
            for &j in batch {
                let r = mapping.p[i][j];
                let k = msg.rows.binary_search(&r).map_err(|_| {
                    Error::Protocol(format!("organization {i} omitted source row {r}"))
                })?;
                self.h[i].row_mut(j).assign(&msg.values.row(k));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Protocol(format!("missing predictions from organization {i}")));
        }
        self.batch = batch.to_vec();
        Ok(())
    }

    /// `z_j = Σ_i H_{i,j}` for the rows in `rows`.
    pub fn joined_predictions(&self, rows: &[usize]) -> Array2<f64> {
        let mut z = self.h[0].select(Axis(0), rows);
        for h in &self.h[1..] {
            z += &h.select(Axis(0), rows);
        }
        z
    }

    /// Computes `∂ℓ_j/∂z_j` for the current batch and folds it into sparse
    /// per-organization aggregates. Returns the mean batch loss as well.
    pub fn step(
        &self,
        loss: &LossSpec,
        y: &[f64],
        mapping: &IndexMapping,
    ) -> Result<(f64, Vec<SparseAggregate>)> {
        let batch = &self.batch;
        check_batch(batch, mapping.num_rows())?;
        let z = self.joined_predictions(batch);
        let labels: Vec<f64> = batch.iter().map(|&j| y[j]).collect();
        let (mean, v) = loss_and_grad(loss, z.view(), &labels)?;
        let aggs = (0..self.h.len())
            .map(|i| sparse_aggregate(i, &mapping.p[i], batch, v.view()))
            .collect();
        Ok((mean, aggs))
    }
}

/// `Y_{i,r} = Σ_{g ∈ batch, p_i(g) = r} v_g` over the touched source rows.
pub fn sparse_aggregate(org: usize, p: &[usize], batch: &[usize], v: ArrayView2<f64>) -> SparseAggregate {
    let mut pairs: Vec<(usize, usize)> = batch.iter().enumerate().map(|(b, &j)| (p[j], b)).collect();
    pairs.sort_unstable();
    let mut rows = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut y = Array2::zeros((0, v.ncols()));
    for (r, b) in pairs {
        if rows.last() != Some(&r) {
            rows.push(r);
            counts.push(0);
            y.push_row(ndarray::Array1::zeros(v.ncols()).view())
                .expect("row width matches");
        }
        let k = rows.len() - 1;
        counts[k] += 1;
        let mut row = y.row_mut(k);
        row += &v.row(b);
    }
    SparseAggregate { org, rows, counts, y }
}

/// Server state for sharing ADMM over a join.
#[derive(Debug, Clone)]
pub struct AdmmServerState {
    pub z: Array2<f64>,
    pub lambda: Array2<f64>,
    h: Vec<Array2<f64>>,
    rho: f64,
}

impl AdmmServerState {
    pub fn new(num_orgs: usize, joined_rows: usize, d_c: usize, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {rho}")));
        }
        Ok(Self {
            z: Array2::zeros((joined_rows, d_c)),
            lambda: Array2::zeros((joined_rows, d_c)),
            h: new_h(num_orgs, joined_rows, d_c),
            rho,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn num_orgs(&self) -> usize {
        self.h.len()
    }

    pub fn h(&self, i: usize) -> &Array2<f64> {
        &self.h[i]
    }

    /// Gathers reduced predictions (one per source row) through the mapping.
    pub fn gather_predictions(
        &mut self,
        msgs: &[Predictions],
        mapping: &IndexMapping,
        table_rows: &[usize],
    ) -> Result<()> {
        gather_dense(&mut self.h, msgs, mapping, table_rows)
    }

    /// Stores predictions already laid out per joined row (materialized join).
    pub fn set_joined_predictions(&mut self, i: usize, values: Array2<f64>) -> Result<()> {
        if i >= self.h.len() {
            return Err(Error::Protocol(format!("predictions from unknown organization {i}")));
        }
        if values.dim() != self.h[i].dim() {
            return Err(Error::Protocol(format!(
                "organization {i} sent {:?} predictions, expected {:?}",
                values.dim(),
                self.h[i].dim()
            )));
        }
        self.h[i] = values;
        Ok(())
    }

    pub fn sum_h(&self) -> Array2<f64> {
        let mut s = self.h[0].clone();
        for h in &self.h[1..] {
            s += h;
        }
        s
    }

    /// Per row, `argmin_z ℓ(z; y_j) − λ_jᵀz + ρ/2 ‖Σ_i H_{i,j} − z‖²`.
    pub fn z_update(&mut self, loss: &LossSpec, y: &[f64]) -> Result<()> {
        let n = self.z.nrows();
        if y.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} joined rows", y.len())));
        }
        let s = self.sum_h();
        let row = loss.row();
        let rho = self.rho;
        let rows: Vec<Array1<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                row.check_label(y[j], s.ncols())?;
                z_row_update(
                    row,
                    y[j],
                    self.lambda.row(j).to_owned(),
                    s.row(j).to_owned(),
                    rho,
                    self.z.row(j).to_owned(),
                )
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("z-update row {j}: {msg}")),
                    other => other,
                })
            })
            .collect::<Result<_>>()?;
        for (j, r) in rows.into_iter().enumerate() {
            self.z.row_mut(j).assign(&r);
        }
        Ok(())
    }

    /// `λ_j += ρ (Σ_i H_{i,j} − z_j)`.
    pub fn lambda_update(&mut self) {
        let r = self.sum_h() - &self.z;
        self.lambda.scaled_add(self.rho, &r);
    }

    /// Mean over joined rows of `‖Σ_i H_{i,j} − z_j‖`.
    pub fn primal_residual(&self) -> f64 {
        let r = self.sum_h() - &self.z;
        let n = r.nrows();
        if n == 0 {
            return 0.0;
        }
        r.rows()
            .into_iter()
            .map(|row| row.dot(&row).sqrt())
            .sum::<f64>()
            / n as f64
    }

    /// `c_{i,j} = λ_j + ρ s_{i,j}` with `s_{i,j} = Σ_{k≠i} H_{k,j} − z_j`,
    /// one row per joined row.
    pub fn joined_aux(&self, i: usize) -> Array2<f64> {
        let mut c = self.sum_h() - &self.h[i] - &self.z;
        c *= self.rho;
        c += &self.lambda;
        c
    }

    /// `Y_{i,r} = Σ_{g ∈ G_i(r)} c_{i,g}` and `G_{i,r} = |G_i(r)|`.
    pub fn aggregate(&self, reverse: &ReverseMapping, i: usize) -> AggregatedVars {
        let c = self.joined_aux(i);
        let n_i = reverse.num_source_rows(i);
        let mut y = Array2::zeros((n_i, c.ncols()));
        for r in 0..n_i {
            let mut row = y.row_mut(r);
            for &g in reverse.group(i, r) {
                row += &c.row(g);
            }
        }
        AggregatedVars {
            org: i,
            y,
            counts: reverse.counts(i),
        }
    }

    /// Materialized-join variant: one aggregate row per joined row, counts 1.
    pub fn aggregate_unreduced(&self, i: usize) -> AggregatedVars {
        let y = self.joined_aux(i);
        let n = y.nrows();
        AggregatedVars {
            org: i,
            y,
            counts: vec![1; n],
        }
    }
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERS: usize = 50;

/// Solves one row of the z-subproblem starting from `z0`.
pub fn z_row_update(
    row: RowLoss,
    y: f64,
    lambda: Array1<f64>,
    s: Array1<f64>,
    rho: f64,
    z0: Array1<f64>,
) -> Result<Array1<f64>> {
    if row.0 == LossKind::Squared {
        return Ok((&lambda + &(rho * &s)).mapv(|v| (v + y) / (1.0 + rho)));
    }
    let phi = |z: &Array1<f64>| {
        let d = &s - z;
        row.value(z.view(), y) - lambda.dot(z) + 0.5 * rho * d.dot(&d)
    };
    let mut z = z0;
    let mut f = phi(&z);
    for _ in 0..NEWTON_MAX_ITERS {
        let g = row.grad(z.view(), y) - &lambda - rho * (&s - &z);
        if g.iter().all(|v| v.abs() < NEWTON_TOL) {
            return Ok(z);
        }
        let dir = newton_direction(row.0, &z, &g, rho);
        if dir.iter().all(|v| v.abs() < NEWTON_TOL) {
            return Ok(z);
        }
        let mut t = 1.0;
        loop {
            let cand = &z - &(t * &dir);
            let fc = phi(&cand);
            if fc <= f {
                z = cand;
                f = fc;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                // No further decrease is representable.
                return Ok(z);
            }
        }
    }
    let g = row.grad(z.view(), y) - &lambda - rho * (&s - &z);
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if gmax < 1e-6 {
        Ok(z)
    } else {
        Err(Error::Numerical(format!(
            "Newton did not converge in {NEWTON_MAX_ITERS} iterations (gradient {gmax:e})"
        )))
    }
}

/// Solves `(∇²ℓ(z) + ρI) d = g`. For softmax the Hessian is
/// `diag(p) − ppᵀ`, so Sherman-Morrison applies.
fn newton_direction(kind: LossKind, z: &Array1<f64>, g: &Array1<f64>, rho: f64) -> Array1<f64> {
    let h = RowLoss(kind).hessian(z.view(), 0.0);
    if z.len() == 1 {
        return g / (h[[0, 0]] + rho);
    }
    let p = z.mapv(|v| v - z.fold(f64::NEG_INFINITY, |a, &b| a.max(b))).mapv(f64::exp);
    let p = &p / p.sum();
    let dinv = p.mapv(|v| 1.0 / (v + rho));
    let dg = &dinv * g;
    let dp = &dinv * &p;
    let denom = 1.0 - p.dot(&dp);
    &dg + &(p.dot(&dg) / denom * &dp)
}

/// Unscaled SGD partial gradient of a client holding source rows `x`:
/// `Σ_r ∂f(x_r)/∂θ · Y_r + β (Σ_r G_r) ∂R(θ)`. Dividing by the batch size
/// gives the client's share of the full gradient.
pub fn sgd_partial_gradient(
    model: &LocalModel,
    x: ArrayView2<f64>,
    y_agg: ArrayView2<f64>,
    counts: &[usize],
    beta: f64,
) -> Result<Array1<f64>> {
    let mut g = model.backward(x, y_agg)?;
    if beta != 0.0 {
        let total: usize = counts.iter().sum();
        g.scaled_add(beta * total as f64, &model.l2_penalty_grad());
    }
    Ok(g)
}

/// Augmented term of the θ-subproblem without the `1/N` factor:
/// `Σ_r [Y_rᵀ f_r + ρ G_r / 2 ‖f_r‖²]`.
pub fn aux_objective(
    model: &LocalModel,
    x: ArrayView2<f64>,
    agg: &AggregatedVars,
    rho: f64,
) -> Result<f64> {
    let f = model.forward(x)?;
    let mut total = 0.0;
    for (r, fr) in f.rows().into_iter().enumerate() {
        total += agg.y.row(r).dot(&fr) + 0.5 * rho * agg.counts[r] as f64 * fr.dot(&fr);
    }
    Ok(total)
}

/// Upstream gradient of [`aux_objective`] with respect to the outputs:
/// `Y_r + ρ G_r f_r`.
pub fn aux_upstream(
    model: &LocalModel,
    x: ArrayView2<f64>,
    agg: &AggregatedVars,
    rho: f64,
) -> Result<Array2<f64>> {
    let mut up = model.forward(x)?;
    for (r, mut row) in up.rows_mut().into_iter().enumerate() {
        row *= rho * agg.counts[r] as f64;
        row += &agg.y.row(r);
    }
    Ok(up)
}

/// Gradient of [`aux_objective`] in θ.
pub fn aux_gradient(
    model: &LocalModel,
    x: ArrayView2<f64>,
    agg: &AggregatedVars,
    rho: f64,
) -> Result<Array1<f64>> {
    let up = aux_upstream(model, x, agg, rho)?;
    model.backward(x, up.view())
}

/// θ-subproblem for a client owning a whole vertical table:
/// `β R(θ) + (1/N) Σ_r [Y_rᵀ f_r + ρ G_r / 2 ‖f_r‖²]`.
#[derive(Debug, Clone, Copy)]
pub struct ThetaProblem<'a> {
    pub x: ArrayView2<'a, f64>,
    pub agg: &'a AggregatedVars,
    pub rho: f64,
    pub beta: f64,
    pub joined_rows: usize,
}

impl ThetaProblem<'_> {
    pub fn objective(&self, model: &LocalModel) -> Result<f64> {
        Ok(self.beta * model.l2_penalty()
            + aux_objective(model, self.x, self.agg, self.rho)? / self.joined_rows as f64)
    }

    pub fn gradient(&self, model: &LocalModel) -> Result<Array1<f64>> {
        let mut g = aux_gradient(model, self.x, self.agg, self.rho)?;
        g /= self.joined_rows as f64;
        if self.beta != 0.0 {
            g.scaled_add(self.beta, &model.l2_penalty_grad());
        }
        Ok(g)
    }

    /// `steps` fixed-size gradient steps, warm-started from `model`.
    pub fn solve(&self, model: &mut LocalModel, steps: usize, lr: f64) -> Result<()> {
        for _ in 0..steps {
            let g = self.gradient(model)?;
            model.descend(lr, &g);
        }
        if model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "θ-update produced non-finite parameters; lower the local step size".into(),
            ));
        }
        Ok(())
    }
}
