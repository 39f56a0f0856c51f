//! Density estimation on the bundled 10 000-digit MNIST subset: a plain VAE,
//! VaDE with ten components and a three-level HCRL2, compared by
//! importance-sampled test NLL.
//!
//! `cargo run --release --example mnist -- [seed] [key=value ...]`
//!
//! Overrides apply to all three models; `MODELS=vade,hcrl2` picks a subset. The images live in `data/mnist`,
//! produced by `scripts/mnist_json_to_idx.py`.

use std::path::Path;
use std::time::Instant;

use hcrl::data::load_idx;
use hcrl::metrics::{nll_estimate, reconstruction_error};
use hcrl::model::{fit, ModelConfig, Variant};
use hcrl::variational::Observation;

fn main() -> hcrl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let all = load_idx(&root.join("images-idx3-ubyte"), Some(&root.join("labels-idx1-ubyte")))?;
    let (train, test) = all.sample(all.len(), seed).split_at(8000);
    println!("train {}  test {}  dim {}", train.len(), test.len(), train.dim());

    let only = std::env::var("MODELS").unwrap_or_default();
    for (variant, depth) in [(Variant::Vae, 1), (Variant::Vade, 1), (Variant::Hcrl2, 3)] {
        if !only.is_empty() && !only.split(',').any(|m| m == variant.name()) {
            continue;
        }
        let mut c = ModelConfig::new(variant, train.dim(), 10, depth);
        c.observation = Observation::Bernoulli;
        c.hidden = vec![256];
        c.components = 10;
        c.batch_size = 100;
        c.epochs = 40;
        c.pretrain_epochs = 10;
        c.seed = seed;
        c.apply_overrides(&args[2.min(args.len())..])?;
        let start = Instant::now();
        let (model, _) = fit(&c, train.x.view())?;
        let nll = nll_estimate(&model, test.x.view(), 100, seed)?;
        println!(
            "{:<6} test NLL {:>8.3} ± {:.3}  RE {:>8.3}  clusters {}  {:.0}s",
            variant.name(),
            nll.nll,
            nll.std_error,
            reconstruction_error(&model, test.x.view())?,
            match (model.tree(), variant) {
                (Some(t), _) => t.num_full_paths().to_string(),
                (None, Variant::Vae) => "-".into(),
                (None, _) => c.components.to_string(),
            },
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
