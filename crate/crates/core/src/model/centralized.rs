use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use super::{loss_and_grad, LocalModel, LossSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// The global model `Θ = [θ_1, …, θ_M]`: block `i` reads the feature
/// columns of table `i` and the prediction is the sum of block outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockModel {
    pub blocks: Vec<LocalModel>,
}

impl BlockModel {
    pub fn new(blocks: Vec<LocalModel>) -> Self {
        Self { blocks }
    }

    /// `Σ_i f_i(θ_i; X_i)` for per-table feature blocks with equal row counts.
    pub fn predict(&self, xs: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
        if xs.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "{} feature blocks for {} models",
                xs.len(),
                self.blocks.len()
            )));
        }
        let mut total: Option<Array2<f64>> = None;
        for (m, x) in self.blocks.iter().zip(xs) {
            let h = m.forward(x.view())?;
            match total.as_mut() {
                Some(t) => *t += &h,
                None => total = Some(h),
            }
        }
        total.ok_or_else(|| Error::Shape("empty block model".into()))
    }

    /// Mean loss plus `β Σ_i R(θ_i)`.
    pub fn objective(&self, xs: &[ArrayView2<f64>], y: &[f64], loss: &LossSpec) -> Result<f64> {
        let z = self.predict(xs)?;
        let (mean, _) = loss_and_grad(loss, z.view(), y)?;
        let beta = loss.effective_beta();
        Ok(mean + beta * self.blocks.iter().map(LocalModel::l2_penalty).sum::<f64>())
    }
}

/// Shuffles `0..n` once per epoch (seeded by `(seed, epoch)`) and cuts it
/// into batches of `batch_size`; the last batch may be shorter.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, Purpose::Batch, &[epoch as u64]);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralizedConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
}

/// Mini-batch SGD on the materialized join.
pub struct CentralizedTrainer<'a> {
    xs: &'a [Array2<f64>],
    y: &'a [f64],
    loss: LossSpec,
    lr: f64,
    pub model: BlockModel,
}

impl<'a> CentralizedTrainer<'a> {
    pub fn new(xs: &'a [Array2<f64>], y: &'a [f64], model: BlockModel, loss: LossSpec, lr: f64) -> Result<Self> {
        if xs.iter().any(|x| x.nrows() != y.len()) {
            return Err(Error::Shape("feature blocks and labels differ in length".into()));
        }
        Ok(Self {
            xs,
            y,
            loss,
            lr,
            model,
        })
    }

    /// One SGD step on the joined rows in `batch`.
    pub fn step(&mut self, batch: &[usize]) -> Result<()> {
        let views: Vec<Array2<f64>> = self.xs.iter().map(|x| x.select(Axis(0), batch)).collect();
        let views: Vec<ArrayView2<f64>> = views.iter().map(|x| x.view()).collect();
        let ys: Vec<f64> = batch.iter().map(|&j| self.y[j]).collect();
        let z = self.model.predict(&views)?;
        let (_, v) = loss_and_grad(&self.loss, z.view(), &ys)?;
        let scale = 1.0 / batch.len() as f64;
        let beta = self.loss.effective_beta();
        for (m, x) in self.model.blocks.iter_mut().zip(&views) {
            let mut g = m.backward(x.view(), v.view())? * scale;
            if beta > 0.0 {
                g.scaled_add(beta, &m.l2_penalty_grad());
            }
            m.descend(self.lr, &g);
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, epoch: usize, batch_size: usize, seed: u64) -> Result<f64> {
        for batch in shuffled_batches(self.y.len(), batch_size, seed, epoch) {
            self.step(&batch)?;
        }
        self.train_loss()
    }

    pub fn train_loss(&self) -> Result<f64> {
        let views: Vec<ArrayView2<f64>> = self.xs.iter().map(|x| x.view()).collect();
        self.model.objective(&views, self.y, &self.loss)
    }
}

/// Trains `init` for `cfg.epochs` epochs and reports the objective after each.
pub fn centralized_train(
    xs: &[Array2<f64>],
    y: &[f64],
    init: BlockModel,
    loss: &LossSpec,
    cfg: &CentralizedConfig,
) -> Result<(BlockModel, Vec<EpochLoss>)> {
    let mut trainer = CentralizedTrainer::new(xs, y, init, *loss, cfg.lr)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let train_loss = trainer.run_epoch(epoch, cfg.batch_size, cfg.seed)?;
        history.push(EpochLoss { epoch, train_loss });
    }
    Ok((trainer.model, history))
}
