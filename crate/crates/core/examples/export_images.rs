//! Distills the toy fixture briefly and writes every synthetic image plus one
//! montage per class as PNG.
//!
//! ```text
//! cargo run --release --example export_images -- [out_dir] [ipc]
//! ```

use std::path::{Path, PathBuf};

use atom_distill::data::load_dataset;
use atom_distill::distill::{distill, DistillConfig};
use atom_distill::export::export_images;

fn main() -> atom_distill::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy_images".into()));
    let ipc = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    let data = load_dataset::<f32>("toy-fixture", Path::new("data"))?;
    let mut cfg = DistillConfig::new(ipc);
    cfg.iterations = 100;
    let syn = distill(&cfg, &data.train)?.synthetic;
    for p in export_images(&syn, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}
