//! The three structure operations on a hand-built tree, with the masses
//! that drive them printed along the way.
//!
//! `cargo run --example tree_ops`

use std::collections::BTreeMap;

use hcrl::hierarchy::{grow, merge, posterior_similarity, prune, Hierarchy, PathId};
use hcrl::model::{stream_rng, Stream};

fn masses(tree: &Hierarchy, full: &[f64]) -> BTreeMap<PathId, f64> {
    let nm = tree.node_masses(full);
    (0..tree.len()).map(|i| (tree.path_of(i), nm[i])).collect()
}

fn show(label: &str, tree: &Hierarchy) {
    let paths: Vec<String> = tree.full_paths().iter().map(ToString::to_string).collect();
    println!("{label:<28} full paths [{}]", paths.join(", "));
}

fn main() -> hcrl::Result<()> {
    let mut rng = stream_rng(0, Stream::Structure, 0);
    let mut tree = Hierarchy::chain(3, 2, 1.0)?;
    show("initial chain", &tree);

    // all mass on the root: GROW must hang a fresh chain below it
    let mut m = masses(&tree, &[0.0]);
    m.insert(PathId::root(), 1.0);
    grow(&mut tree, &m, &mut rng)?;
    show("grow at the root", &tree);

    // mass on the full paths only: GROW is a no-op
    let m = masses(&tree, &[0.5, 0.5]);
    let changed = grow(&mut tree, &m, &mut rng)?;
    println!("{:<28} changed {changed}", "grow on full paths");

    let mut m = masses(&tree, &[0.0, 0.0]);
    m.insert(PathId(vec![1, 2]), 1.0);
    grow(&mut tree, &m, &mut rng)?;
    show("grow under 1.2", &tree);

    // one path holds 0.5% of the mass, below δ = 0.01
    let m = masses(&tree, &[0.6, 0.395, 0.005]);
    prune(&mut tree, &m, 0.01, &mut rng)?;
    show("prune with delta 0.01", &tree);

    // posterior columns (1,1,0) and (1,0,1) have cosine 0.5
    let q = vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    println!("{:<28} J = {}", "similarity", posterior_similarity(&[1.0, 1.0, 0.0], &[1.0, 0.0, 1.0]));
    let out = merge(&mut tree.clone(), &q, 0.6)?;
    println!("{:<28} changed {}", "merge at threshold 0.6", out.changed);
    let out = merge(&mut tree, &q, 0.5)?;
    println!("{:<28} changed {} pair {:?}", "merge at threshold 0.5", out.changed, out.pair);
    show("after merge", &tree);
    println!("\n{}", tree.to_dot(None));
    Ok(())
}
