//! Compares spatial-only, channel-only and combined attention matching on the
//! toy fixture, averaged over several distillation seeds, and reports the mean
//! per-step time of each mode.
//!
//! ```text
//! cargo run --release --example ablation -- [seeds] [iterations]
//! ```

use std::path::Path;

use atom_distill::attention::MatchMode;
use atom_distill::data::{load_dataset, DatasetSplits};
use atom_distill::distill::{distill, DistillConfig};
use atom_distill::eval::{evaluate, mean_std, EvalProtocol};

fn main() -> atom_distill::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let iterations = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let data: DatasetSplits<f32> = load_dataset("toy-fixture", Path::new("data"))?;

    for mode in [MatchMode::Spatial, MatchMode::Channel, MatchMode::Both, MatchMode::FeatureMap] {
        let mut accs = Vec::new();
        let mut ms = Vec::new();
        for seed in 0..seeds {
            let mut cfg = DistillConfig::new(1);
            cfg.iterations = iterations;
            cfg.seed = seed;
            cfg.batch_real = 32;
            cfg.atom.mode = mode;
            let out = distill(&cfg, &data.train)?;
            ms.extend(out.metrics.iter().map(|r| r.step_ms));
            let proto = EvalProtocol {
                seed,
                ..EvalProtocol::default()
            };
            accs.push(evaluate(&out.synthetic, &data.test, &proto)?.mean_acc);
        }
        let (m, s) = mean_std(&accs);
        let step = ms.iter().sum::<f64>() / ms.len() as f64;
        println!("{:<12} acc {m:6.2} ± {s:5.2}  step {step:6.2} ms  {accs:?}", mode.name());
    }
    Ok(())
}
