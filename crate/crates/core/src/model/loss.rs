use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½‖z − y‖²` with a scalar target.
    Squared,
    /// `logsumexp(z) − z_y` with `y ∈ 0..d_c`.
    SoftmaxCrossEntropy,
    /// `log(1 + e^z) − y z` with `y ∈ {0, 1}` and a scalar score.
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub reg: Regularizer,
    #[serde(default)]
    pub beta: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, reg: Regularizer, beta: f64) -> Self {
        Self { kind, reg, beta }
    }

    pub fn squared() -> Self {
        Self::new(LossKind::Squared, Regularizer::None, 0.0)
    }

    /// Regularization weight actually applied (`0` when `reg` is `none`).
    pub fn effective_beta(&self) -> f64 {
        match self.reg {
            Regularizer::None => 0.0,
            Regularizer::L2 => self.beta,
        }
    }

    /// Width `d_c` of the aggregated prediction for a label with
    /// `class_count` classes.
    pub fn output_dim(&self, class_count: usize) -> usize {
        match self.kind {
            LossKind::Squared | LossKind::Logistic => 1,
            LossKind::SoftmaxCrossEntropy => class_count,
        }
    }

    /// Number of label classes seen by label perturbation (1 for regression).
    pub fn label_classes(&self, class_count: usize) -> usize {
        match self.kind {
            LossKind::Squared => 1,
            LossKind::Logistic => 2,
            LossKind::SoftmaxCrossEntropy => class_count,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self.kind, LossKind::Squared)
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        match self.kind {
            LossKind::Squared if class_count != 1 => Err(Error::Config(
                "squared loss needs a scalar regression label (class_count 1)".into(),
            )),
            LossKind::Logistic if class_count != 2 => Err(Error::Config(
                "logistic loss needs binary labels (class_count 2)".into(),
            )),
            LossKind::SoftmaxCrossEntropy if class_count < 2 => Err(Error::Config(
                "softmax cross-entropy needs class_count >= 2".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn row(&self) -> RowLoss {
        RowLoss(self.kind)
    }
}

/// Per-row loss `ℓ(z; y)` with its gradient and Hessian in `z`.
#[derive(Debug, Clone, Copy)]
pub struct RowLoss(pub LossKind);

fn log_sum_exp(z: ArrayView1<f64>) -> f64 {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(z);
    z.mapv(|v| (v - lse).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl RowLoss {
    pub fn check_label(&self, y: f64, d_c: usize) -> Result<()> {
        let ok = match self.0 {
            LossKind::Squared => y.is_finite() && d_c == 1,
            LossKind::Logistic => (y == 0.0 || y == 1.0) && d_c == 1,
            LossKind::SoftmaxCrossEntropy => y >= 0.0 && y.fract() == 0.0 && (y as usize) < d_c,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "label {y} is out of range for {:?} with {d_c} outputs",
                self.0
            )))
        }
    }

    pub fn value(&self, z: ArrayView1<f64>, y: f64) -> f64 {
        match self.0 {
            LossKind::Squared => 0.5 * (z[0] - y).powi(2),
            LossKind::Logistic => softplus(z[0]) - y * z[0],
            LossKind::SoftmaxCrossEntropy => log_sum_exp(z) - z[y as usize],
        }
    }

    pub fn grad(&self, z: ArrayView1<f64>, y: f64) -> Array1<f64> {
        match self.0 {
            LossKind::Squared => Array1::from_elem(1, z[0] - y),
            LossKind::Logistic => Array1::from_elem(1, sigmoid(z[0]) - y),
            LossKind::SoftmaxCrossEntropy => {
                let mut p = softmax(z);
                p[y as usize] -= 1.0;
                p
            }
        }
    }

    pub fn hessian(&self, z: ArrayView1<f64>, _y: f64) -> Array2<f64> {
        match self.0 {
            LossKind::Squared => Array2::from_elem((1, 1), 1.0),
            LossKind::Logistic => {
                let s = sigmoid(z[0]);
                Array2::from_elem((1, 1), s * (1.0 - s))
            }
            LossKind::SoftmaxCrossEntropy => {
                let p = softmax(z);
                let k = p.len();
                let mut h = Array2::zeros((k, k));
                for a in 0..k {
                    for b in 0..k {
                        h[[a, b]] = if a == b { p[a] * (1.0 - p[a]) } else { -p[a] * p[b] };
                    }
                }
                h
            }
        }
    }
}

/// Mean loss over the `k` rows of `z` and the per-row gradient `∂ℓ_j/∂z_j`
/// (not divided by `k`).
pub fn loss_and_grad(loss: &LossSpec, z: ArrayView2<f64>, y: &[f64]) -> Result<(f64, Array2<f64>)> {
    if z.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "{} prediction rows but {} labels",
            z.nrows(),
            y.len()
        )));
    }
    let row = loss.row();
    let mut grad = Array2::zeros(z.raw_dim());
    let mut total = 0.0;
    for (j, &yj) in y.iter().enumerate() {
        row.check_label(yj, z.ncols())?;
        let zj = z.row(j);
        total += row.value(zj, yj);
        grad.row_mut(j).assign(&row.grad(zj, yj));
    }
    let mean = if y.is_empty() { 0.0 } else { total / y.len() as f64 };
    Ok((mean, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn squared_at_target_is_zero() {
        let (l, g) = loss_and_grad(&LossSpec::squared(), array![[1.5], [-2.0]].view(), &[1.5, -2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, array![[0.0], [0.0]]);
    }

    #[test]
    fn softmax_symmetric_case() {
        let spec = LossSpec::new(LossKind::SoftmaxCrossEntropy, Regularizer::None, 0.0);
        let (l, g) = loss_and_grad(&spec, array![[0.0, 0.0]].view(), &[0.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!((g[[0, 0]] + 0.5).abs() < 1e-15 && (g[[0, 1]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let spec = LossSpec::new(LossKind::SoftmaxCrossEntropy, Regularizer::None, 0.0);
        assert!(loss_and_grad(&spec, array![[0.0, 0.0]].view(), &[2.0]).is_err());
        let spec = LossSpec::new(LossKind::Logistic, Regularizer::None, 0.0);
        assert!(loss_and_grad(&spec, array![[0.0]].view(), &[0.5]).is_err());
    }

    #[test]
    fn gradients_and_hessians_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for kind in [LossKind::Squared, LossKind::Logistic, LossKind::SoftmaxCrossEntropy] {
            let d = if kind == LossKind::SoftmaxCrossEntropy { 4 } else { 1 };
            let row = RowLoss(kind);
            for _ in 0..20 {
                let z: Array1<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let y = match kind {
                    LossKind::Squared => rng.random_range(-2.0..2.0),
                    LossKind::Logistic => rng.random_range(0..2) as f64,
                    LossKind::SoftmaxCrossEntropy => rng.random_range(0..d) as f64,
                };
                let g = row.grad(z.view(), y);
                let h = row.hessian(z.view(), y);
                let eps = 1e-5;
                for a in 0..d {
                    let mut zp = z.clone();
                    zp[a] += eps;
                    let mut zm = z.clone();
                    zm[a] -= eps;
                    let fd = (row.value(zp.view(), y) - row.value(zm.view(), y)) / (2.0 * eps);
                    assert!((fd - g[a]).abs() <= 1e-6 * g[a].abs().max(1.0), "{kind:?}");
                    let gp = row.grad(zp.view(), y);
                    let gm = row.grad(zm.view(), y);
                    for b in 0..d {
                        let fdh = (gp[b] - gm[b]) / (2.0 * eps);
                        assert!((fdh - h[[a, b]]).abs() < 1e-6, "{kind:?} hessian");
                    }
                }
                if kind == LossKind::SoftmaxCrossEntropy {
                    assert!(g.sum().abs() < 1e-12);
                }
            }
        }
    }
}
