//! Train a small tree model, save a checkpoint, reload it and write the
//! learned hierarchy as JSON and Graphviz DOT with per-node masses.
//!
//! `cargo run --release --example export_tree -- [out_dir]`

use std::path::PathBuf;

use hcrl::data::{gen_synthetic, SyntheticSpec};
use hcrl::metrics::{export_tree, TreeFormat};
use hcrl::model::{fit, Model, ModelConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/export_tree".into()));
    std::fs::create_dir_all(&dir)?;

    let (data, _) = gen_synthetic(&SyntheticSpec::new(3, 2, 800, 6, 1))?;
    let mut c = ModelConfig::new(Variant::Hcrl2, data.dim(), 4, 3);
    c.hidden = vec![32];
    c.batch_size = 50;
    c.epochs = 40;
    c.node_learning_rate = 3e-2;
    let (model, _) = fit(&c, data.x.view())?;

    let ckpt = dir.join("checkpoint.json");
    model.save(&ckpt)?;
    let back = Model::load(&ckpt)?;
    assert_eq!(back.to_json()?, model.to_json()?);

    for (format, name) in [(TreeFormat::Json, "tree.json"), (TreeFormat::Dot, "tree.dot")] {
        let text = export_tree(&back, Some(data.x.view()), format)?;
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        println!("wrote {}", path.display());
    }
    println!("{}", export_tree(&back, Some(data.x.view()), TreeFormat::Dot)?);
    Ok(())
}
