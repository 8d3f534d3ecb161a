//! Fits standardization plus ZCA whitening on the toy fixture and reports how
//! close the whitened covariance is to identity, then inverts the transform.
//!
//! ```text
//! cargo run --release --example zca_whitening -- [eps]
//! ```

use atom_distill::data::{apply_preprocess, fit_mean_std, fit_zca, invert_preprocess, toy_fixture_raw};
use ndarray::Array2;

fn main() -> atom_distill::Result<()> {
    let eps: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0.1);
    let (images, _) = toy_fixture_raw::<f64>(256, 3);
    let n = images.shape()[0];

    let std_rec = fit_mean_std(&images)?;
    let standardized = apply_preprocess(&std_rec, &images)?;
    let rec = std_rec.with_whitening(fit_zca(&standardized, eps)?)?;
    let white = apply_preprocess(&rec, &images)?;

    let flat: Array2<f64> = white.clone().into_shape_with_order((n, rec.dim())).unwrap();
    let centered = &flat - &flat.mean_axis(ndarray::Axis(0)).unwrap();
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let diag = cov.diag().mean().unwrap();
    let off = cov.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, v)| v.abs()).fold(0.0, f64::max);
    println!("eps {eps}: {} dims, mean diagonal {diag:.4}, max off-diagonal {off:.2e}", rec.dim());

    let back = invert_preprocess(&rec, &white)?;
    let err = (&back - &images).iter().map(|v| v.abs()).fold(0.0, f64::max);
    println!("round-trip max error {err:.2e}");
    Ok(())
}
