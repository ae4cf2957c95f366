// Rounds, bytes and simulated wall time per epoch for every algorithm on
// the same join, under the US-UK and US-US link profiles.

use relfed::model::{LossKind, LossSpec, Regularizer};
use relfed::netsim::{complexity_report, TimeMode};
use relfed::orchestrator::{synth, train, Algorithm, SynthSpec, TrainConfig};

pub fn run_example() -> relfed::Result<()> {
    let ds = synth(&SynthSpec::ridge_benchmark(0))?.dataset;
    println!(
        "{:<12} {:<7} {:>7} {:>10} {:>10} {:>10}  cost order",
        "algorithm", "link", "rounds", "bytes", "sync s", "sum s"
    );
    for preset in ["us-uk", "us-us"] {
        for algo in Algorithm::ALL {
            let mut cfg = TrainConfig::new(algo, LossSpec::new(LossKind::Squared, Regularizer::L2, 0.01));
            cfg.epochs = 2;
            cfg.lr = 0.01;
            cfg.net.preset = Some(preset.into());
            let sync = train(&ds, &cfg)?;
            cfg.net.mode = TimeMode::Sum;
            let sum = train(&ds, &cfg)?;
            let report = complexity_report(&sync.ledger, &sync.meta);
            assert!(report.rounds_match());
            let d = &sync.ledger.epoch_deltas()[1];
            println!(
                "{:<12} {:<7} {:>7} {:>10} {:>10.3} {:>10.3}  {}",
                algo.name(),
                preset,
                d.rounds,
                d.bytes,
                d.sim_time_s,
                sum.ledger.epoch_deltas()[1].sim_time_s,
                report.cost_order
            );
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> relfed::Result<()> {
    run_example()
}
