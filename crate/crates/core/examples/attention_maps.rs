//! Prints the normalized spatial attention of a real toy image at every block
//! of a freshly initialized ConvNet, as ASCII heat maps, plus the channel
//! attention summary per block.
//!
//! ```text
//! cargo run --release --example attention_maps -- [power]
//! ```

use std::path::Path;

use atom_distill::attention::{channel_attention, normalize_rows, spatial_attention};
use atom_distill::data::load_dataset;
use atom_distill::model::{build_network, ConvNetSpec, Mode, TapPoint};

fn main() -> atom_distill::Result<()> {
    let p: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4.0);
    let data = load_dataset::<f64>("toy-fixture", Path::new("data"))?;
    let spec = ConvNetSpec::default_for(data.train.image_shape(), data.train.num_classes());
    let net = build_network::<f64>(&spec, 1)?;

    for class in 0..data.train.num_classes() {
        let x = data.train.select(&data.train.class_indices(class)[..1]);
        let feats = net.forward_features(&x, TapPoint::PostPool, Mode::Train)?;
        println!("class {class}");
        for (l, f) in feats.per_layer.iter().enumerate() {
            let (_, c, h, w) = f.dim();
            let s = normalize_rows(&spatial_attention(f, p)?.values, 1e-8);
            let peak = s.iter().copied().fold(0.0, f64::max);
            println!("  block {l}: {c} channels, {h}x{w} map");
            for y in 0..h {
                let row: String = (0..w)
                    .map(|x| {
                        let level = (s[[0, y * w + x]] / peak * 4.0).round() as usize;
                        [' ', '.', ':', '*', '#'][level.min(4)]
                    })
                    .collect();
                println!("    |{row}|");
            }
            let ch = normalize_rows(&channel_attention(f, p)?.values, 1e-8);
            let top = ch.row(0).iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            println!("    strongest channel {} ({:.3})", top.0, top.1);
        }
    }
    Ok(())
}
