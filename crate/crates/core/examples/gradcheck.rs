//! Finite-difference check of every parameter group on the desk-scale
//! fixture (D = 8, J = 2, L = 2, N = 32).
//!
//! `cargo run --release --example gradcheck -- [seed]`

use std::time::Instant;

use hcrl::model::{desk_fixture, gradcheck, GradcheckOptions, Variant};

fn main() -> hcrl::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for variant in [Variant::Hcrl1, Variant::Hcrl2, Variant::Vade, Variant::Vae] {
        let start = Instant::now();
        let (model, x) = desk_fixture(variant, seed)?;
        let report = gradcheck(&model, &x, seed, &GradcheckOptions::default())?;
        println!("{} ({:.2}s)", variant.name(), start.elapsed().as_secs_f64());
        print!("{}", report.to_text());
        println!();
    }
    Ok(())
}
