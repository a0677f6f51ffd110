//! Runs the planted-fact experiment end to end and prints the EM trajectory
//! and the target EM under each ablation wiring.
//!
//! `cargo run --release -p proxysteer --example planted_fact [fap_lr]`

use std::time::Instant;

use proxysteer::synth::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::default();
    if let Some(lr) = std::env::args().nth(1) {
        cfg.train.refine.sgd.learning_rate = lr.parse()?;
    }
    cfg.train.refine.eval_threads = 4;
    let report = run_experiment(&cfg, None)?;
    println!("initial EM {:.3}", report.initial_em);
    for r in &report.iterations {
        let ems: Vec<f64> = r.checkpoints.iter().map(|c| c.val_em).collect();
        println!(
            "k={} ems {ems:?} selected {} ({:.3})",
            r.iteration, r.selected, r.selected_em
        );
    }
    for v in &report.variants {
        println!("{:<14} target val EM {:.3}", v.variant, v.val_em);
    }
    for f in &report.flags {
        println!("FLAG {f}");
    }
    println!("total {:.1?}", t0.elapsed());
    Ok(())
}
