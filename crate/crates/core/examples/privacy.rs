// Label perturbation and gradient noise: budgets from the accountant,
// noise calibration to a target ε, and the accuracy cost on a
// classification join.

use relfed::model::{LossKind, LossSpec, Regularizer};
use relfed::orchestrator::{synth, train, Algorithm, SynthSpec, TrainConfig};
use relfed::privacy::{account, calibrate_sigma, label_epsilon};

pub fn run_example() -> relfed::Result<()> {
    for lambda in [0.25, 0.5, 1.0, 2.0] {
        println!("label noise λ = {lambda:<4}  ε_label = {:.3}", label_epsilon(lambda).unwrap());
    }
    for steps in [10u64, 100, 1000, 10_000] {
        println!("σ = 1, q = 0.01, τ = {steps:>5}: ε = {:.4} at δ = 1e-5", account(steps, 0.01, 1.0, 1e-5)?);
    }
    let sigma = calibrate_sigma(1.0, 1000, 0.01, 1e-5)?;
    println!("σ for ε = 1 after 1000 steps at q = 0.01: {sigma:.4}");

    let ds = synth(&SynthSpec::classification_benchmark(0))?.dataset;
    let mut cfg = TrainConfig::new(
        Algorithm::RflSgdV,
        LossSpec::new(LossKind::SoftmaxCrossEntropy, Regularizer::L2, 0.001),
    );
    cfg.epochs = 10;
    cfg.lr = 0.5;
    let base = train(&ds, &cfg)?;
    println!("no DP:                accuracy {:.4}", base.metrics.last().unwrap().test_metric);
    for (lambda, target) in [(0.5, None), (0.0, Some(4.0)), (0.5, Some(4.0)), (1.0, Some(1.0))] {
        let mut c = cfg.clone();
        c.dp.label_lambda = lambda;
        c.dp.target_epsilon = target;
        let out = train(&ds, &c)?;
        let m = out.metrics.last().unwrap();
        println!(
            "λ = {lambda:<3} target {target:<9?}: accuracy {:.4}, ε_label {:<6} ε_feature {:<6} σ {}",
            m.test_metric,
            m.eps_label.map_or("off".into(), |e| format!("{e:.2}")),
            m.eps_feature.map_or("off".into(), |e| format!("{e:.2}")),
            out.sigma.map_or("-".into(), |s| format!("{s:.3}")),
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> relfed::Result<()> {
    run_example()
}
