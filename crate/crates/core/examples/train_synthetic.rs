//! Train HCRL2 on a synthetic two-level hierarchy and watch the tree grow.
//!
//! `cargo run --release --example train_synthetic -- [seed] [epochs] [key=value ...]`

use hcrl::data::{gen_synthetic, SyntheticSpec};
use hcrl::metrics::model_fscore;
use hcrl::model::{Model, ModelConfig, Variant};

fn main() -> hcrl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(104);

    let mut spec = SyntheticSpec::new(2, 3, 3000, 10, seed);
    spec.separation = 10.0;
    let (data, truth) = gen_synthetic(&spec)?;
    println!("{} leaves, {} instances", truth.leaves().count(), data.len());

    let mut cfg = ModelConfig::new(Variant::Hcrl2, data.dim(), 8, 2);
    cfg.hidden = vec![32];
    cfg.batch_size = 64;
    cfg.learning_rate = 2e-3;
    cfg.node_learning_rate = 3e-2;
    cfg.pretrain_epochs = 30;
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg.apply_overrides(&args[3.min(args.len())..])?;
    let mut model = Model::new(&cfg)?;
    let history = model.train(data.x.view())?;
    for r in &history.records {
        println!(
            "epoch {:>3}  elbo {:>10.4}  re {:>8.4}  paths {}  {}",
            r.epoch,
            r.elbo.total(),
            r.reconstruction_error,
            r.full_paths,
            r.op.map_or("", |o| o.name())
        );
    }
    let f = model_fscore(&model, data.x.view(), data.labels.as_ref().unwrap())?;
    println!("full paths {}  leaf F-score {:.4}", model.tree().unwrap().num_full_paths(), f.f);
    Ok(())
}
