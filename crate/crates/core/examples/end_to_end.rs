// The file-based workflow behind the `rfl` binary: generate CSV tables and
// a config, train from it, then read back metrics and the ledger.

use relfed::netsim::{complexity_report, LedgerFile};
use relfed::orchestrator::{run, synth, Algorithm, RunConfig, SynthSpec, SynthTable};

pub fn run_example() -> relfed::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| relfed::Error::io(std::env::temp_dir(), e))?;
    let spec = SynthSpec {
        tables: vec![
            SynthTable::new("claims", 300, 4).partitions(2),
            SynthTable::new("members", 100, 3).duplication(3).partitions(3),
        ],
        class_count: 1,
        noise: 0.1,
        seed: 11,
    };
    let config_path = synth(&spec)?.write(dir.path())?;
    println!("{}", std::fs::read_to_string(&config_path).unwrap_or_default().lines().take(12).collect::<Vec<_>>().join("\n"));

    let mut cfg = RunConfig::from_file(&config_path)?;
    cfg.train.epochs = 5;
    for algo in [Algorithm::RflAdmm, Algorithm::RflSgd] {
        cfg.train.algo = algo;
        let metrics = dir.path().join(format!("{algo}.csv"));
        run(&cfg, Some(&metrics))?;
        println!("--- {algo}\n{}", std::fs::read_to_string(&metrics).unwrap_or_default());
        let ledger = LedgerFile::read(dir.path().join("ledger.json"))?;
        print!("{}", complexity_report(&ledger.to_ledger(), &ledger.meta));
    }
    let ckpt = relfed::model::read_checkpoint(dir.path().join("checkpoints/org0.rflm"))?;
    println!("checkpoint org0: {} parameters", ckpt.num_params());
    Ok(())
}

#[allow(dead_code)]
fn main() -> relfed::Result<()> {
    run_example()
}
