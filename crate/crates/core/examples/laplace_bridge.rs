//! Dirichlet parameters from a logistic-normal level-proportion posterior.
//!
//! `cargo run --example laplace_bridge -- [mu,...] [sigma2,...]`

use hcrl::variational::{expected_log_eta, laplace_alpha};

fn parse(s: Option<&String>, default: &[f64]) -> Vec<f64> {
    s.map(|s| s.split(',').map(|v| v.trim().parse().expect("number")).collect())
        .unwrap_or_else(|| default.to_vec())
}

fn main() -> hcrl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let cases = if args.len() > 2 {
        vec![(parse(args.get(1), &[]), parse(args.get(2), &[]))]
    } else {
        vec![
            (vec![0.0, 0.0], vec![1.0, 1.0]),
            (vec![0.0; 3], vec![1.0; 3]),
            (vec![2.0, 0.0, -1.0], vec![0.5, 0.5, 0.5]),
            (vec![0.0, 0.0], vec![1e-3, 1e-3]),
            (vec![8.0, -8.0], vec![1.0, 1.0]),
        ]
    };
    for (mu, s2) in cases {
        let alpha = laplace_alpha(&mu, &s2)?;
        let total: f64 = alpha.iter().sum();
        let mean: Vec<String> = alpha.iter().map(|a| format!("{:.3}", a / total)).collect();
        let elog: Vec<String> = expected_log_eta(&alpha).iter().map(|v| format!("{v:.3}")).collect();
        println!("mu {mu:?} sigma2 {s2:?}");
        println!("  alpha {alpha:.4?}  mean [{}]  E[log eta] [{}]", mean.join(", "), elog.join(", "));
    }
    Ok(())
}
