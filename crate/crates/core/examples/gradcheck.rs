//! Runs the finite-difference gradient suites and a corrupted negative control.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seed]
//! ```

use atom_distill::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> atom_distill::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let cfg = GradcheckConfig::default().with_seed(seed);
    let report = run_gradcheck(&cfg)?;
    for line in report.lines() {
        println!("{line}");
    }
    let bad = run_gradcheck(&cfg.corrupting("both"))?;
    println!("corrupted `both` suite flagged: {:?}", bad.failing());
    Ok(())
}
