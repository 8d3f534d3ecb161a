//! Distills the built-in two-class toy fixture to one image per class and
//! compares it with a random real subset of the same size.
//!
//! ```text
//! cargo run --release --example distill_toy -- [iterations] [seed]
//! ```

use std::path::Path;
use std::time::Instant;

use atom_distill::data::{load_dataset, DatasetSplits};
use atom_distill::distill::{distill, moving_average, DistillConfig};
use atom_distill::eval::{evaluate, random_baseline, EvalProtocol};

fn main() -> atom_distill::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);

    let data: DatasetSplits<f32> = load_dataset("toy-fixture", Path::new("data"))?;
    let mut cfg = DistillConfig::new(1);
    cfg.iterations = iterations;
    cfg.seed = seed;
    cfg.batch_real = 32;

    let t = Instant::now();
    let out = distill(&cfg, &data.train)?;
    let ma = moving_average(&out.metrics, 100);
    println!(
        "distilled {iterations} iterations in {:.1}s; moving-average loss {:.5} -> {:.5}",
        t.elapsed().as_secs_f64(),
        ma.first().copied().unwrap_or(f64::NAN),
        ma.last().copied().unwrap_or(f64::NAN),
    );

    let proto = EvalProtocol {
        seed,
        ..EvalProtocol::default()
    };
    let t = Instant::now();
    let distilled = evaluate(&out.synthetic, &data.test, &proto)?;
    let random = evaluate(&random_baseline(&data.train, 1, seed)?, &data.test, &proto)?;
    println!("distilled: {}  per model {:?}", distilled.summary(), distilled.per_model);
    println!("random:    {}  per model {:?}", random.summary(), random.per_model);
    println!("margin {:+.2} points (evaluation {:.1}s)", distilled.mean_acc - random.mean_acc, t.elapsed().as_secs_f64());
    Ok(())
}
