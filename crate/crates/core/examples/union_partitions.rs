// Tables split horizontally across clients. RFL-SGD sums per-partition
// gradients and matches the unsplit run; RFL-ADMM runs consensus rounds
// inside each organization between join-level epochs.

use relfed::model::{LossKind, LossSpec, Regularizer};
use relfed::orchestrator::{synth, train, Algorithm, Coordinator, SynthSpec, TrainConfig};

fn distance(a: &[ndarray::Array1<f64>], b: &[ndarray::Array1<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(u, v)| (u - v).powi(2)))
        .sum::<f64>()
        .sqrt()
}

pub fn run_example() -> relfed::Result<()> {
    let ds = synth(&SynthSpec::ridge_benchmark(1))?.dataset;
    println!("partitions per organization: {:?}", ds.partitions());
    let loss = LossSpec::new(LossKind::Squared, Regularizer::L2, 0.01);

    let mut cfg = TrainConfig::new(Algorithm::RflSgdV, loss);
    cfg.epochs = 3;
    cfg.lr = 0.05;
    let v = train(&ds, &cfg)?;
    cfg.algo = Algorithm::RflSgd;
    let u = train(&ds, &cfg)?;
    println!(
        "RFL-SGD vs RFL-SGD-V: parameter distance {:.2e}, rounds/epoch {} vs {}",
        distance(&u.epoch_params[2], &v.epoch_params[2]),
        u.ledger.epoch_deltas()[0].rounds,
        v.ledger.epoch_deltas()[0].rounds
    );

    let mut cfg = TrainConfig::new(Algorithm::RflAdmmV, loss);
    cfg.epochs = 20;
    let v = train(&ds, &cfg)?;
    for coordinator in [Coordinator::Server, Coordinator::PerOrg] {
        for t in [1, 5, 10] {
            let mut c = cfg.clone();
            c.algo = Algorithm::RflAdmm;
            c.inner_rounds = t;
            c.coordinator = coordinator;
            let u = train(&ds, &c)?;
            let d = u.ledger.epoch_deltas();
            println!(
                "RFL-ADMM {coordinator:?} T'={t:>2}: {:>3} rounds/epoch, {:>8} bytes/epoch, {:.3}s/epoch, distance to RFL-ADMM-V {:.2e}",
                d[1].rounds,
                d[1].bytes,
                d[1].sim_time_s,
                distance(&u.epoch_params[19], &v.epoch_params[19])
            );
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> relfed::Result<()> {
    run_example()
}
