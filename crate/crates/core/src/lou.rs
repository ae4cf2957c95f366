//! Learning over a union: one organization's table split horizontally
//! across `Q` clients.
//!
//! SGD needs nothing new: each client computes its unscaled partial gradient
//! on its rows and the coordinator sums them. ADMM runs a consensus loop per
//! organization: clients solve a proximal local problem, the coordinator
//! averages into `w` and applies the regularizer, and each client keeps a
//! scaled dual `u^q`.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::loj::{aux_gradient, aux_objective, AggregatedVars};
use crate::model::LocalModel;

/// Sums the partial gradients of all `expected` clients and divides by the
/// batch size. Partials are `(partition, gradient)` pairs in any order.
pub fn sgd_aggregate(partials: &[(usize, Array1<f64>)], expected: usize, batch_size: usize) -> Result<Array1<f64>> {
    let mut seen = vec![false; expected];
    let mut total: Option<Array1<f64>> = None;
    for (q, g) in partials {
        if *q >= expected || std::mem::replace(&mut seen[*q], true) {
            return Err(Error::Protocol(format!("unexpected partial gradient from partition {q}")));
        }
        match total.as_mut() {
            None => total = Some(g.clone()),
            Some(t) if t.len() == g.len() => *t += g,
            Some(t) => {
                return Err(Error::Protocol(format!(
                    "partition {q} sent {} gradient entries, expected {}",
                    g.len(),
                    t.len()
                )))
            }
        }
    }
    if let Some(q) = seen.iter().position(|s| !s) {
        return Err(Error::Protocol(format!("missing partial gradient from partition {q}")));
    }
    let mut total = total.ok_or_else(|| Error::Protocol("no partitions".into()))?;
    total /= batch_size.max(1) as f64;
    Ok(total)
}

/// Coefficient multiplying `ρ_h/2 ‖w − θ̄ − ū‖²` in the w-update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WPenalty {
    /// Number of horizontal partitions `Q_i`.
    #[default]
    Partitions,
    /// Number of organizations `M`.
    Orgs,
}

/// `argmin_w β‖w_masked‖² + (K ρ_h / 2) ‖w − θ̄ − ū‖²`. Coordinates outside
/// `mask` (biases) are not regularized.
pub fn consensus_w_update(
    theta_bar: ArrayView1<f64>,
    u_bar: ArrayView1<f64>,
    mask: ArrayView1<f64>,
    beta: f64,
    k: f64,
    rho_h: f64,
) -> Array1<f64> {
    let shrink = k * rho_h / (2.0 * beta + k * rho_h);
    let mut w = &theta_bar + &u_bar;
    for (wv, &m) in w.iter_mut().zip(mask.iter()) {
        if m != 0.0 {
            *wv *= shrink;
        }
    }
    w
}

/// `u += θ − w`.
pub fn consensus_u_update(u: &mut Array1<f64>, theta: ArrayView1<f64>, w: ArrayView1<f64>) {
    *u += &(&theta - &w);
}

/// Per-organization consensus variables.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    pub w: Array1<f64>,
    pub u: Vec<Array1<f64>>,
    pub rho_h: f64,
    pub inner_rounds: usize,
    pub local_steps: usize,
    pub penalty: WPenalty,
    num_orgs: usize,
}

impl ConsensusState {
    pub fn new(
        init: Array1<f64>,
        partitions: usize,
        num_orgs: usize,
        rho_h: f64,
        inner_rounds: usize,
        local_steps: usize,
        penalty: WPenalty,
    ) -> Result<Self> {
        if !(rho_h > 0.0 && rho_h.is_finite()) {
            return Err(Error::Config(format!("rho_h must be positive, got {rho_h}")));
        }
        if inner_rounds == 0 || local_steps == 0 || partitions == 0 {
            return Err(Error::Config(
                "inner rounds, local steps and partitions must be at least 1".into(),
            ));
        }
        let p = init.len();
        Ok(Self {
            w: init,
            u: vec![Array1::zeros(p); partitions],
            rho_h,
            inner_rounds,
            local_steps,
            penalty,
            num_orgs,
        })
    }

    pub fn num_partitions(&self) -> usize {
        self.u.len()
    }

    fn coefficient(&self) -> f64 {
        match self.penalty {
            WPenalty::Partitions => self.u.len() as f64,
            WPenalty::Orgs => self.num_orgs as f64,
        }
    }

    /// Averages the uploaded `θ^q` and the current `u^q` into a new `w`.
    pub fn w_update(&mut self, thetas: &[Array1<f64>], mask: ArrayView1<f64>, beta: f64) -> Result<()> {
        if thetas.len() != self.u.len() {
            return Err(Error::Protocol(format!(
                "{} parameter uploads for {} partitions",
                thetas.len(),
                self.u.len()
            )));
        }
        let q = thetas.len() as f64;
        let mut theta_bar = Array1::zeros(self.w.len());
        let mut u_bar = Array1::zeros(self.w.len());
        for (t, u) in thetas.iter().zip(&self.u) {
            theta_bar += t;
            u_bar += u;
        }
        theta_bar /= q;
        u_bar /= q;
        self.w = consensus_w_update(
            theta_bar.view(),
            u_bar.view(),
            mask,
            beta,
            self.coefficient(),
            self.rho_h,
        );
        Ok(())
    }

    pub fn u_update(&mut self, thetas: &[Array1<f64>]) {
        for (u, t) in self.u.iter_mut().zip(thetas) {
            consensus_u_update(u, t.view(), self.w.view());
        }
    }

    /// Largest `‖θ^q − w‖∞` over partitions.
    pub fn max_disagreement(&self, thetas: &[Array1<f64>]) -> f64 {
        thetas
            .iter()
            .flat_map(|t| t.iter().zip(self.w.iter()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }
}

/// Proximal local problem of partition `q`:
/// `(1/N) l(θ; T^q) + ρ_h/2 ‖θ − w + u^q‖²`, where `l` is the augmented
/// join term on the partition's rows.
#[derive(Debug, Clone, Copy)]
pub struct ConsensusProblem<'a> {
    pub x: ArrayView2<'a, f64>,
    pub agg: &'a AggregatedVars,
    pub rho: f64,
    pub joined_rows: usize,
    pub w: ArrayView1<'a, f64>,
    pub u: ArrayView1<'a, f64>,
    pub rho_h: f64,
}

const MAX_INCREASES: usize = 5;

impl ConsensusProblem<'_> {
    /// `θ − w + u`.
    fn offset(&self, theta: &Array1<f64>) -> Array1<f64> {
        theta - &self.w + self.u
    }

    pub fn objective(&self, model: &LocalModel) -> Result<f64> {
        let d = self.offset(model.params());
        let data = if self.x.nrows() == 0 {
            0.0
        } else {
            aux_objective(model, self.x, self.agg, self.rho)? / self.joined_rows as f64
        };
        Ok(data + 0.5 * self.rho_h * d.dot(&d))
    }

    /// Gradient of the proximal term only.
    pub fn prox_gradient(&self, model: &LocalModel) -> Array1<f64> {
        self.rho_h * self.offset(model.params())
    }

    pub fn gradient(&self, model: &LocalModel) -> Result<Array1<f64>> {
        let mut g = self.prox_gradient(model);
        if self.x.nrows() > 0 {
            let data = aux_gradient(model, self.x, self.agg, self.rho)?;
            g.scaled_add(1.0 / self.joined_rows as f64, &data);
        }
        Ok(g)
    }

    /// `steps` fixed gradient steps from the current parameters. An empty
    /// partition jumps straight to `w − u`.
    pub fn solve(&self, model: &mut LocalModel, steps: usize, lr: f64) -> Result<()> {
        if self.x.nrows() == 0 {
            return model.set_params(&self.w - &self.u);
        }
        let mut prev = self.objective(model)?;
        let mut increases = 0;
        for _ in 0..steps {
            let g = self.gradient(model)?;
            model.descend(lr, &g);
            let cur = self.objective(model)?;
            if !cur.is_finite() {
                return Err(Error::Numerical(
                    "local objective is not finite; lower the local step size".into(),
                ));
            }
            // Rounding noise near the optimum does not count as an increase.
            let rose = cur - prev > 1e-12 * prev.abs().max(1.0);
            increases = if rose { increases + 1 } else { 0 };
            if increases >= MAX_INCREASES {
                return Err(Error::Numerical(format!(
                    "local objective increased {MAX_INCREASES} times in a row; lower the local step size (now {lr})"
                )));
            }
            prev = cur;
        }
        Ok(())
    }
}
