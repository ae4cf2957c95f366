// SGD pushed through a join: clients predict once per source row and get
// back summed partial derivatives, yet the trajectory is the one of SGD on
// the materialized join.

use relfed::model::{LossKind, LossSpec, Regularizer};
use relfed::orchestrator::{synth, train, Algorithm, SynthSpec, SynthTable, TrainConfig};

pub fn run_example() -> relfed::Result<()> {
    let spec = SynthSpec {
        tables: vec![
            SynthTable::new("sales", 240, 3),
            SynthTable::new("stores", 30, 2).duplication(8),
            SynthTable::new("items", 120, 2).duplication(4).rows_per_key(2),
        ],
        class_count: 3,
        noise: 0.2,
        seed: 7,
    };
    let ds = synth(&spec)?.dataset;
    let loss = LossSpec::new(LossKind::SoftmaxCrossEntropy, Regularizer::L2, 0.001);

    let mut cfg = TrainConfig::new(Algorithm::Centralized, loss);
    cfg.epochs = 8;
    cfg.batch_size = Some(64);
    cfg.lr = 0.3;
    let central = train(&ds, &cfg)?;
    cfg.algo = Algorithm::RflSgdV;
    let pushed = train(&ds, &cfg)?;
    cfg.algo = Algorithm::VflSgd;
    let vfl = train(&ds, &cfg)?;

    println!("N = {} joined rows from n_i = {:?}", pushed.meta.joined_rows, pushed.meta.table_rows);
    println!("{:>5} {:>12} {:>12} {:>10} {:>12} {:>12}", "epoch", "loss", "accuracy", "rounds", "bytes rfl", "bytes vfl");
    for ((p, c), v) in pushed.metrics.iter().zip(&central.metrics).zip(&vfl.metrics) {
        assert!((p.train_loss - c.train_loss).abs() < 1e-9);
        println!(
            "{:>5} {:>12.6} {:>12.4} {:>10} {:>12} {:>12}",
            p.epoch, p.train_loss, p.test_metric, p.comm_rounds, p.comm_bytes, v.comm_bytes
        );
    }
    let gap = pushed
        .models
        .iter()
        .zip(&central.models)
        .flat_map(|(a, b)| a.params().iter().zip(b.params().iter()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    println!("max parameter gap to centralized SGD: {gap:.2e}");
    for (i, rows) in pushed.ledger.epoch_deltas()[0].scattered_rows.iter() {
        println!("org {i}: {rows} source rows scattered in epoch 1 (N = {})", pushed.meta.joined_rows);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> relfed::Result<()> {
    run_example()
}
