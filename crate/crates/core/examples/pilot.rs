//! Brute-force pilot for the heterogeneity margin.
//!
//! Runs FedPisa and FedAvg on the desk world for a handful of pilot seeds
//! (disjoint from the seeds the acceptance suite evaluates) and prints the
//! per-seed gap in final mean expressive MSE plus half the mean gap, which is
//! the threshold frozen into `tests/acceptance.rs`.
//!
//! ```text
//! cargo run --release -p fedpisa --example pilot -- [clusters] [first_seed] [count]
//! ```

use fedpisa::{run_experiment, ExperimentConfig, Strategy};

fn final_mse(cfg: &ExperimentConfig, strategy: Strategy) -> f64 {
    let mut c = cfg.clone();
    c.strategy = strategy;
    run_experiment(&c).expect("pilot run").final_mean_expressive_mse()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, default: u64| args.get(i).map(|s| s.parse().expect("integer argument")).unwrap_or(default);
    let clusters = arg(1, 3) as usize;
    let first = arg(2, 100);
    let count = arg(3, 3);

    let mut gaps = Vec::new();
    for seed in first..first + count {
        let mut cfg = ExperimentConfig::desk().with_seed(seed);
        cfg.world.num_style_clusters = clusters;
        let pisa = final_mse(&cfg, Strategy::FedPisa);
        let avg = final_mse(&cfg, Strategy::FedAvg);
        println!("seed {seed:>4}  fedpisa {pisa:.6}  fedavg {avg:.6}  gap {:.6}", avg - pisa);
        gaps.push(avg - pisa);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    println!("mean gap {mean:.6}  half {:.6}", mean / 2.0);
}
