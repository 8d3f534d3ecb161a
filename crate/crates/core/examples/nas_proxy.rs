//! Ranks the small ConvNet grid by accuracy after training on a distilled toy
//! proxy and correlates that ranking with training on the full toy split.
//!
//! ```text
//! cargo run --release --example nas_proxy -- [epochs]
//! ```

use std::path::Path;

use atom_distill::data::load_dataset;
use atom_distill::distill::{distill, DistillConfig};
use atom_distill::eval::EvalProtocol;
use atom_distill::nas::{rank_on_proxy, reference_accuracies, SearchGrid};

fn main() -> atom_distill::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let data = load_dataset::<f32>("toy-fixture", Path::new("data"))?;
    let mut cfg = DistillConfig::new(4);
    cfg.iterations = 100;
    let proxy = distill(&cfg, &data.train)?.synthetic;

    let proto = EvalProtocol {
        n_models: 2,
        epochs,
        ..EvalProtocol::default()
    };
    let specs = SearchGrid::desk().specs(data.train.image_shape(), data.train.num_classes());
    let reference = reference_accuracies(&specs, &data.train, &data.test, &proto);
    let result = rank_on_proxy(&specs, &proxy, &data.test, &proto, Some(&reference))?;
    print!("{}", result.to_csv());
    Ok(())
}
