//! Paired runs of the block-community benchmark at latent depths 0 and 2,
//! used to pick and document the training knobs behind the convergence
//! check in tests/acceptance.rs.
//!
//!     cargo run --release --example calibrate -- <rate> <plain|adaptive> <seed>
//!
//! Prints the metric trajectory every 250 epochs for both depths.

use fedrec::client::OptimizerKind;
use fedrec::protocol::{run_experiment, ExperimentConfig, SchemeSpec};
use std::time::Instant;

fn config(depth: usize, seed: u64, rate: f64, optimizer: OptimizerKind) -> ExperimentConfig {
    ExperimentConfig {
        epochs: 2000,
        users_per_epoch: 50,
        local_iters: 10,
        latent_depth: depth,
        dim: 16,
        local_rate: rate,
        server_rate: None,
        reg_weight: 1e-4,
        init_scale: 0.1,
        neg_count: 32,
        scheme: SchemeSpec::Mean,
        optimizer,
        eval_every: 250,
        eval_cut: 20,
        frac_bits: 24,
        master_seed: seed,
    }
}

fn main() {
    let split = fedrec::dataset::synth_blocks(200, 300, 2, 0.2, 0.005, 0.2, 7).unwrap();
    let args: Vec<String> = std::env::args().collect();
    let rate: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.001);
    let optimizer = match args.get(2).map(String::as_str) {
        Some("plain") => OptimizerKind::Plain,
        _ => OptimizerKind::Adaptive,
    };
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);

    for depth in [0usize, 2] {
        let started = Instant::now();
        let mut last = None;
        println!("depth {depth} rate {rate} optimizer {optimizer:?} seed {seed}");
        run_experiment(&split, &config(depth, seed, rate, optimizer), |r| {
            if let Some(recall) = r.recall {
                println!(
                    "  epoch {:4}  loss {:8}  recall {:.4}  ndcg {:.4}  ({:.0}s)",
                    r.epoch,
                    r.loss.map(|l| format!("{l:.3}")).unwrap_or_default(),
                    recall,
                    r.ndcg.unwrap(),
                    started.elapsed().as_secs_f64(),
                );
                last = Some(recall);
            }
            Ok(())
        })
        .unwrap();
        println!(
            "depth {depth} final recall {:.4} in {:.0}s",
            last.unwrap(),
            started.elapsed().as_secs_f64()
        );
    }
}
