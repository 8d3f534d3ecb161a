//! Draws one augmentation per call, applies the identical draw to a real and a
//! synthetic batch and checks that the backward pass is the adjoint.
//!
//! ```text
//! cargo run --release --example dsa_augment -- [draws] [seed]
//! ```

use atom_distill::augment::{apply_aug, apply_aug_backward, sample_aug, AugSettings};
use atom_distill::data::toy_fixture_raw;
use atom_distill::rng::{stream, Stream};
use ndarray::Array4;

fn main() -> atom_distill::Result<()> {
    let mut args = std::env::args().skip(1);
    let draws: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(12);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let (real, _) = toy_fixture_raw::<f64>(2, 1);
    let (syn, _) = toy_fixture_raw::<f64>(2, 2);
    let settings = AugSettings::default();
    let mut rng = stream(seed, Stream::Augment);

    for _ in 0..draws {
        let p = sample_aug(&mut rng, &settings, (8, 8), 1)?;
        let r = apply_aug(&real, &p)?;
        let s = apply_aug(&syn, &p)?;
        let lin = |x: &Array4<f64>| -> atom_distill::Result<Array4<f64>> {
            Ok(apply_aug(x, &p)? - apply_aug(&Array4::<f64>::zeros(x.raw_dim()), &p)?)
        };
        let lhs = (&lin(&real)? * &syn).sum();
        let rhs = (&real * &apply_aug_backward(&syn, &p)?).sum();
        println!(
            "{:<7} {:?}  real mean {:+.3}  syn mean {:+.3}  adjoint gap {:.1e}",
            p.op.name(),
            p.draws[0],
            r.mean().unwrap(),
            s.mean().unwrap(),
            (lhs - rhs).abs()
        );
    }
    Ok(())
}
