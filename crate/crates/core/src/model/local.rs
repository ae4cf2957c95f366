use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Linear,
    /// One tanh hidden layer of width `hidden`.
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
}

fn default_hidden() -> usize {
    16
}

/// Parameters of one organization's model, stored flat.
///
/// Linear layout: `W (d_in × d_out)` row-major, then `b (d_out)` when `bias`.
/// MLP layout: `W1 (d_in × h)`, `b1 (h)`, `W2 (h × d_out)`, then `b2 (d_out)`
/// when `bias`. The regularizer covers weight matrices only, never biases.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    kind: ModelKind,
    d_in: usize,
    d_out: usize,
    bias: bool,
    seed: u64,
    params: Array1<f64>,
}

impl LocalModel {
    /// Linear models start at zero; MLP weights are drawn from
    /// `U(±1/√fan_in)` using `seed`, biases start at zero.
    pub fn new(kind: ModelKind, d_in: usize, d_out: usize, bias: bool, seed: u64) -> Self {
        let n = Self::param_count(kind, d_in, d_out, bias);
        let mut params = Array1::zeros(n);
        if let ModelKind::Mlp { hidden } = kind {
            let mut rng = rng::stream(seed, Purpose::Init, &[]);
            let a1 = 1.0 / (d_in.max(1) as f64).sqrt();
            for v in params.slice_mut(s![..d_in * hidden]).iter_mut() {
                *v = rng.random_range(-a1..a1);
            }
            let w2 = d_in * hidden + hidden;
            let a2 = 1.0 / (hidden.max(1) as f64).sqrt();
            for v in params.slice_mut(s![w2..w2 + hidden * d_out]).iter_mut() {
                *v = rng.random_range(-a2..a2);
            }
        }
        Self {
            kind,
            d_in,
            d_out,
            bias,
            seed,
            params,
        }
    }

    pub fn from_params(
        kind: ModelKind,
        d_in: usize,
        d_out: usize,
        bias: bool,
        seed: u64,
        params: Array1<f64>,
    ) -> Result<Self> {
        let n = Self::param_count(kind, d_in, d_out, bias);
        if params.len() != n {
            return Err(Error::Shape(format!(
                "model expects {n} parameters, got {}",
                params.len()
            )));
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(Self {
            kind,
            d_in,
            d_out,
            bias,
            seed,
            params,
        })
    }

    pub fn param_count(kind: ModelKind, d_in: usize, d_out: usize, bias: bool) -> usize {
        let out_bias = if bias { d_out } else { 0 };
        match kind {
            ModelKind::Linear => d_in * d_out + out_bias,
            ModelKind::Mlp { hidden } => d_in * hidden + hidden + hidden * d_out + out_bias,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }
    pub fn d_in(&self) -> usize {
        self.d_in
    }
    pub fn d_out(&self) -> usize {
        self.d_out
    }
    pub fn has_bias(&self) -> bool {
        self.bias
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn num_params(&self) -> usize {
        self.params.len()
    }
    pub fn params(&self) -> &Array1<f64> {
        &self.params
    }

    pub fn set_params(&mut self, params: Array1<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "model expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// `θ ← θ − step · direction`.
    pub fn descend(&mut self, step: f64, direction: &Array1<f64>) {
        self.params.scaled_add(-step, direction);
    }

    /// 1 for regularized (weight) coordinates, 0 for biases.
    pub fn reg_mask(&self) -> Array1<f64> {
        let mut mask = Array1::zeros(self.params.len());
        match self.kind {
            ModelKind::Linear => mask.slice_mut(s![..self.d_in * self.d_out]).fill(1.0),
            ModelKind::Mlp { hidden } => {
                mask.slice_mut(s![..self.d_in * hidden]).fill(1.0);
                let w2 = self.d_in * hidden + hidden;
                mask.slice_mut(s![w2..w2 + hidden * self.d_out]).fill(1.0);
            }
        }
        mask
    }

    /// `R(θ) = ‖θ_w‖²` over weight coordinates.
    pub fn l2_penalty(&self) -> f64 {
        self.params
            .iter()
            .zip(self.reg_mask().iter())
            .map(|(v, m)| m * v * v)
            .sum()
    }

    /// `∂R/∂θ = 2 θ_w`.
    pub fn l2_penalty_grad(&self) -> Array1<f64> {
        2.0 * &self.params * &self.reg_mask()
    }

    fn check_rows(&self, rows: &ArrayView2<f64>) -> Result<()> {
        if rows.ncols() != self.d_in {
            return Err(Error::Shape(format!(
                "model takes {} features, rows have {}",
                self.d_in,
                rows.ncols()
            )));
        }
        Ok(())
    }

    fn check_upstream(&self, rows: &ArrayView2<f64>, upstream: &ArrayView2<f64>) -> Result<()> {
        self.check_rows(rows)?;
        if upstream.dim() != (rows.nrows(), self.d_out) {
            return Err(Error::Shape(format!(
                "upstream is {:?}, expected ({}, {})",
                upstream.dim(),
                rows.nrows(),
                self.d_out
            )));
        }
        Ok(())
    }

    fn linear_weights(&self) -> (ArrayView2<'_, f64>, Option<ArrayView1<'_, f64>>) {
        let nw = self.d_in * self.d_out;
        let w = self
            .params
            .slice(s![..nw])
            .into_shape_with_order((self.d_in, self.d_out))
            .expect("contiguous parameters");
        let b = self.bias.then(|| self.params.slice(s![nw..]));
        (w, b)
    }

    #[allow(clippy::type_complexity)]
    fn mlp_weights(
        &self,
        hidden: usize,
    ) -> (
        ArrayView2<'_, f64>,
        ArrayView1<'_, f64>,
        ArrayView2<'_, f64>,
        Option<ArrayView1<'_, f64>>,
    ) {
        let (d, h, c) = (self.d_in, hidden, self.d_out);
        let w1 = self
            .params
            .slice(s![..d * h])
            .into_shape_with_order((d, h))
            .expect("contiguous parameters");
        let b1 = self.params.slice(s![d * h..d * h + h]);
        let o = d * h + h;
        let w2 = self
            .params
            .slice(s![o..o + h * c])
            .into_shape_with_order((h, c))
            .expect("contiguous parameters");
        let b2 = self.bias.then(|| self.params.slice(s![o + h * c..]));
        (w1, b1, w2, b2)
    }

    /// Predictions `f(θ; rows)`, one row of `d_out` values per input row.
    pub fn forward(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_rows(&rows)?;
        let out = match self.kind {
            ModelKind::Linear => {
                let (w, b) = self.linear_weights();
                let mut out = rows.dot(&w);
                if let Some(b) = b {
                    out += &b;
                }
                out
            }
            ModelKind::Mlp { hidden } => {
                let (w1, b1, w2, b2) = self.mlp_weights(hidden);
                let act = (rows.dot(&w1) + b1).mapv(f64::tanh);
                let mut out = act.dot(&w2);
                if let Some(b2) = b2 {
                    out += &b2;
                }
                out
            }
        };
        Ok(out)
    }

    /// `Σ_k upstream_kᵀ · ∂f(θ; row_k)/∂θ`.
    pub fn backward(&self, rows: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_upstream(&rows, &upstream)?;
        let mut grad = Array1::zeros(self.params.len());
        match self.kind {
            ModelKind::Linear => {
                let nw = self.d_in * self.d_out;
                let gw = rows.t().dot(&upstream);
                grad.slice_mut(s![..nw])
                    .assign(&gw.into_shape_with_order(nw).expect("contiguous"));
                if self.bias {
                    grad.slice_mut(s![nw..]).assign(&upstream.sum_axis(Axis(0)));
                }
            }
            ModelKind::Mlp { hidden } => {
                let (d, h, c) = (self.d_in, hidden, self.d_out);
                let (w1, b1, w2, _) = self.mlp_weights(hidden);
                let act = (rows.dot(&w1) + b1).mapv(f64::tanh);
                let g_w2 = act.t().dot(&upstream);
                let d_act = upstream.dot(&w2.t());
                let d_pre = d_act * act.mapv(|a| 1.0 - a * a);
                let g_w1 = rows.t().dot(&d_pre);
                grad.slice_mut(s![..d * h])
                    .assign(&g_w1.into_shape_with_order(d * h).expect("contiguous"));
                grad.slice_mut(s![d * h..d * h + h])
                    .assign(&d_pre.sum_axis(Axis(0)));
                let o = d * h + h;
                grad.slice_mut(s![o..o + h * c])
                    .assign(&g_w2.into_shape_with_order(h * c).expect("contiguous"));
                if self.bias {
                    grad.slice_mut(s![o + h * c..])
                        .assign(&upstream.sum_axis(Axis(0)));
                }
            }
        }
        Ok(grad)
    }

    /// Unsummed gradients, one row per input row. Computed one row at a time.
    pub fn per_sample_gradients(
        &self,
        rows: ArrayView2<f64>,
        upstream: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_upstream(&rows, &upstream)?;
        let k = rows.nrows();
        let mut out = Array2::zeros((k, self.params.len()));
        match self.kind {
            ModelKind::Linear => {
                let nw = self.d_in * self.d_out;
                for r in 0..k {
                    let mut g = out.row_mut(r);
                    for a in 0..self.d_in {
                        let x = rows[[r, a]];
                        for c in 0..self.d_out {
                            g[a * self.d_out + c] = x * upstream[[r, c]];
                        }
                    }
                    if self.bias {
                        g.slice_mut(s![nw..]).assign(&upstream.row(r));
                    }
                }
            }
            ModelKind::Mlp { .. } => {
                for r in 0..k {
                    let g = self.backward(
                        rows.slice(s![r..r + 1, ..]),
                        upstream.slice(s![r..r + 1, ..]),
                    )?;
                    out.row_mut(r).assign(&g);
                }
            }
        }
        Ok(out)
    }
}
