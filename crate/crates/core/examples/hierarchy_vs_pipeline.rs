//! Joint hierarchy learning against a two-stage pipeline on the same
//! synthetic data: HCRL2 versus a flat VaDE whose clusters are split again
//! by recursive k-means in its latent space.
//!
//! `cargo run --release --example hierarchy_vs_pipeline -- [seed] [key=value ...]`
//!
//! Model overrides apply to both models; `data.decay=`, `data.separation=`
//! and `data.levels=w1,w2,w3` change the generated hierarchy.

use hcrl::baseline::pipeline_levels;
use hcrl::data::{gen_synthetic, SyntheticSpec};
use hcrl::metrics::{hierarchical_fscore, model_fscore};
use hcrl::model::{fit, ModelConfig, Variant};

fn main() -> hcrl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let (data_args, overrides): (Vec<&String>, Vec<&String>) =
        args[2.min(args.len())..].iter().partition(|a| a.starts_with("data."));

    let mut spec = SyntheticSpec::new(3, 3, 3000, 10, seed);
    spec.separation = 10.0;
    for a in data_args {
        match a.trim_start_matches("data.").split_once('=') {
            Some(("decay", v)) => spec.variance_decay = v.parse().expect("number"),
            Some(("separation", v)) => spec.separation = v.parse().expect("number"),
            Some(("levels", v)) => spec.level_weights = v.split(',').map(|w| w.parse().expect("number")).collect(),
            _ => panic!("unknown data override {a}"),
        }
    }
    let (data, truth) = gen_synthetic(&spec)?;
    let labels = data.labels.as_ref().unwrap();

    let mut hc = ModelConfig::new(Variant::Hcrl2, data.dim(), 8, 3);
    hc.hidden = vec![32];
    hc.batch_size = 64;
    hc.learning_rate = 2e-3;
    hc.node_learning_rate = 3e-2;
    hc.pretrain_epochs = 30;
    hc.epochs = 104;
    hc.seed = seed;
    hc.apply_overrides(&overrides)?;
    let (hcrl, _) = fit(&hc, data.x.view())?;
    let f_joint = model_fscore(&hcrl, data.x.view(), labels)?;

    let mut vc = hc.clone();
    vc.variant = Variant::Vade;
    vc.depth = 1;
    vc.alpha = Vec::new();
    vc.components = spec.branching[0];
    let (vade, _) = fit(&vc, data.x.view())?;
    let levels = pipeline_levels(&vade, data.x.view(), &spec.branching[1..], seed)?;
    let f_pipe = hierarchical_fscore(&levels, &labels[1..])?;

    println!(
        "{} true leaves; hcrl2 {} full paths  F {:.4}; vade+kmeans F {:.4}",
        truth.leaves().count(),
        hcrl.tree().unwrap().num_full_paths(),
        f_joint.f,
        f_pipe.f
    );
    let pred = hcrl.predict_levels(data.x.view())?;
    for l in 1..pred.len() {
        let j = hierarchical_fscore(&pred[l..=l], &labels[l..=l])?;
        let p = hierarchical_fscore(&levels[l - 1..l], &labels[l..=l])?;
        println!("  level {}: hcrl2 F {:.4}  pipeline F {:.4}", l + 1, j.f, p.f);
    }
    Ok(())
}
