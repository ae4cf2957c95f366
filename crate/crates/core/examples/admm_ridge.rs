// Sharing ADMM over a join on a ratings-like star schema. Each epoch is
// two rounds: gather predictions per source row, scatter aggregated
// auxiliary variables per source row.

use relfed::model::{LossKind, LossSpec, Regularizer};
use relfed::orchestrator::{synth, train, Algorithm, SynthSpec, TrainConfig};

pub fn run_example() -> relfed::Result<()> {
    let ds = synth(&SynthSpec::ridge_benchmark(0))?.dataset;
    let mut cfg = TrainConfig::new(Algorithm::RflAdmmV, LossSpec::new(LossKind::Squared, Regularizer::L2, 0.01));
    cfg.epochs = 30;
    let out = train(&ds, &cfg)?;
    println!("N = {}, n_i = {:?}", out.meta.joined_rows, out.meta.table_rows);
    println!("{:>5} {:>14} {:>10} {:>12} {:>8}", "epoch", "objective", "rmse", "residual", "rounds");
    for (m, r) in out.metrics.iter().zip(&out.primal_residuals) {
        if m.epoch <= 5 || m.epoch % 5 == 0 {
            println!("{:>5} {:>14.8} {:>10.5} {:>12.3e} {:>8}", m.epoch, m.train_loss, m.test_metric, r, m.comm_rounds);
        }
    }
    let step: Vec<f64> = out
        .epoch_params
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    println!("parameter change in the last epoch: {:.2e}", step.last().copied().unwrap_or(0.0));
    Ok(())
}

#[allow(dead_code)]
fn main() -> relfed::Result<()> {
    run_example()
}
