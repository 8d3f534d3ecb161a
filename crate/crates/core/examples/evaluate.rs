//! Evaluates a stored synthetic set (or a random toy subset) with the standard
//! protocol and prints per-model accuracies.
//!
//! ```text
//! cargo run --release --example evaluate -- [synthetic.bin] [n_models] [epochs]
//! ```

use std::path::Path;

use atom_distill::data::{load_dataset, load_synthetic};
use atom_distill::eval::{evaluate, random_baseline, EvalProtocol};

fn main() -> atom_distill::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().filter(|a| a != "-");
    let n_models = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(300);
    let data = load_dataset::<f32>("toy-fixture", Path::new("data"))?;
    let syn = match path {
        Some(p) => load_synthetic::<f32>(Path::new(&p))?,
        None => random_baseline(&data.train, 1, 0)?,
    };
    let proto = EvalProtocol {
        n_models,
        epochs,
        ..EvalProtocol::default()
    };
    let report = evaluate(&syn, &data.test, &proto)?;
    for (i, (acc, secs)) in report.per_model.iter().zip(&report.runtime_s).enumerate() {
        println!("model {i}: {acc:6.2}%  ({secs:.2}s)");
    }
    println!("{} [{}] origin={}", report.summary(), report.spec, report.origin);
    Ok(())
}
