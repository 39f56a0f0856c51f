//! Property checks for the stick-breaking prior and the tree operations.
//! Each check runs a fixed number of deterministic proptest cases and
//! returns the first counterexample as a message, so the same code backs
//! the property tests and the acceptance sweep.

use std::collections::{BTreeMap, BTreeSet};

use hcrl::hierarchy::{
    expected_log_path_prior, grow, merge, node_log_prior, posterior_similarity, prune, stick_weights, Hierarchy,
    NodeParams, PathId,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::digamma;

pub const CASES: u32 = 256;

pub type Check = fn() -> Result<(), String>;

/// Every structure property, by name.
pub fn suite() -> Vec<(&'static str, Check)> {
    vec![
        ("stick weights are a subprobability", stick_weights_subprobability),
        ("path prior is negative and additive", path_prior_negative_and_additive),
        ("grow never extends a full path", grow_never_extends_full_paths),
        ("grow follows path masses", grow_frequency_matches_masses),
        ("prune respects delta", prune_respects_delta),
        ("prune never empties the tree", prune_never_empties),
        ("merge similarity formula", merge_similarity_formula),
        ("merge fires iff similarity reaches threshold", merge_fires_iff_threshold),
        ("merge threshold is inclusive", merge_threshold_inclusive),
        ("merge averages by mass", merge_averages_by_mass),
        ("operation sequences keep the tree valid", op_sequences_keep_tree_valid),
    ]
}

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    let mut runner = TestRunner::new_with_rng(config, rng);
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

/// Node masses keyed by path, from masses of the full paths.
pub fn mass_map(tree: &Hierarchy, full: &[f64]) -> BTreeMap<PathId, f64> {
    let nm = tree.node_masses(full);
    (0..tree.len()).map(|i| (tree.path_of(i), nm[i])).collect()
}

fn random_params(rng: &mut ChaCha8Rng, tag: f64) -> NodeParams {
    NodeParams::new(
        vec![rng.random_range(-2.0..2.0), tag],
        vec![rng.random_range(0.2..3.0), rng.random_range(0.2..3.0)],
        rng.random_range(0.05..20.0),
        rng.random_range(0.05..20.0),
    )
    .unwrap()
}

/// A chain of `depth` nodes grown `grows` times under random masses. Node
/// parameters are then randomized, with `mu[1]` holding a distinct tag so a
/// node can be recognized after sibling renumbering.
pub fn random_tree(depth: usize, grows: usize, seed: u64) -> Hierarchy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Hierarchy::chain(depth, 2, 1.5).unwrap();
    for _ in 0..grows {
        let full: Vec<f64> = (0..t.num_full_paths()).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = mass_map(&t, &full);
        grow(&mut t, &m, &mut rng).unwrap();
    }
    for i in 0..t.len() {
        t.node_mut(i).params = random_params(&mut rng, i as f64);
    }
    t
}

fn leaf_tag(t: &Hierarchy, p: &PathId) -> u64 {
    t.node(t.find(p).unwrap()).params.mu[1] as u64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn random_q(rows: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let mut r: Vec<f64> = (0..k)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) })
                .collect();
            let s: f64 = r.iter().sum();
            if s > 0.0 {
                r.iter_mut().for_each(|v| *v /= s);
            }
            r
        })
        .collect()
}

fn tree_shape() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..5, 0usize..10, any::<u64>())
}

pub fn stick_weights_subprobability() -> Result<(), String> {
    run(proptest::collection::vec(0.0f64..=1.0, 0..30), |v| {
        let pi = stick_weights(&v).map_err(|e| fail(e.to_string()))?;
        let mut rest = 1.0;
        let mut cum = 0.0;
        for (i, (&p, &vi)) in pi.iter().zip(&v).enumerate() {
            prop_assert!(p >= 0.0, "weight {i} negative");
            prop_assert!((p - vi * rest).abs() <= 1e-12);
            rest *= 1.0 - vi;
            cum += p;
            prop_assert!(cum <= 1.0 + 1e-12, "cumulative weight {cum}");
        }
        Ok(())
    })
}

pub fn path_prior_negative_and_additive() -> Result<(), String> {
    run((2usize..5, 0usize..10, any::<u64>()), |(depth, grows, seed)| {
        let t = random_tree(depth, grows, seed);
        prop_assert_eq!(node_log_prior(&t, 0), 0.0);
        for i in 1..t.len() {
            // E[log v] of the node plus E[log(1 − v)] of each left sibling
            let parent = t.node(t.node(i).parent().unwrap());
            let mut want = 0.0;
            for &s in parent.children() {
                let p = &t.node(s).params;
                let psi_ab = digamma(p.a + p.b);
                if s == i {
                    want += digamma(p.a) - psi_ab;
                    break;
                }
                want += digamma(p.b) - psi_ab;
            }
            let got = node_log_prior(&t, i);
            prop_assert!((got - want).abs() < 1e-9, "node {i}: {got} vs {want}");
        }
        for path in t.full_paths() {
            let total = expected_log_path_prior(&t, &path).unwrap();
            prop_assert!(total < 0.0, "path {path} prior {total}");
            let seg: f64 = (1..=path.len())
                .map(|l| node_log_prior(&t, t.find(&PathId(path.0[..l].to_vec())).unwrap()))
                .sum();
            prop_assert!((total - seg).abs() < 1e-12);
        }
        Ok(())
    })
}

pub fn grow_never_extends_full_paths() -> Result<(), String> {
    run((tree_shape(), any::<u64>()), |((depth, grows, seed), op_seed)| {
        let original = random_tree(depth, grows, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(op_seed);
        let before = original.full_paths();
        let full: Vec<f64> = (0..before.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let masses = mass_map(&original, &full);

        let mut t = original.clone();
        let changed = grow(&mut t, &masses, &mut rng).unwrap();
        t.validate().map_err(|e| fail(e.to_string()))?;
        for p in &before {
            let i = t.find(p).ok_or_else(|| fail(format!("full path {p} vanished")))?;
            prop_assert!(t.node(i).children().is_empty(), "full path {} was extended", p);
        }
        prop_assert_eq!(t.num_full_paths(), before.len() + changed as usize);
        for p in t.full_paths() {
            prop_assert_eq!(p.len(), depth);
        }

        // all mass on full paths: nothing to grow
        let only_full: BTreeMap<PathId, f64> = masses
            .keys()
            .map(|k| (k.clone(), if before.contains(k) { 1.0 } else { 0.0 }))
            .collect();
        let mut t = original.clone();
        prop_assert!(!grow(&mut t, &only_full, &mut rng).unwrap());
        prop_assert_eq!(&t, &original);

        // all mass on one inner path: exactly one new full path below it
        let inner = original.inner_paths();
        if !inner.is_empty() {
            let pick = &inner[rng.random_range(0..inner.len())];
            let one: BTreeMap<PathId, f64> = masses
                .keys()
                .map(|k| (k.clone(), if k == pick { 1.0 } else { 0.0 }))
                .collect();
            let mut t = original.clone();
            prop_assert!(grow(&mut t, &one, &mut rng).unwrap());
            let new: Vec<PathId> = t.full_paths().into_iter().filter(|p| !before.contains(p)).collect();
            prop_assert_eq!(new.len(), 1);
            prop_assert!(new[0].0.starts_with(&pick.0));
        }
        Ok(())
    })
}

/// Over 10 000 draws the chosen path follows the mass proportions to 2%.
pub fn grow_frequency_matches_masses() -> Result<(), String> {
    // root -> A -> a1, root -> B -> b1
    let mut base = Hierarchy::chain(3, 1, 1.0).map_err(|e| e.to_string())?;
    let b = base.push_child(0, base.node(1).params.clone()).map_err(|e| e.to_string())?;
    base.push_child(b, base.node(2).params.clone()).map_err(|e| e.to_string())?;
    base.canonicalize();
    let masses: BTreeMap<PathId, f64> = [
        (vec![1], 0.10),
        (vec![1, 1], 0.30),
        (vec![1, 2], 0.20),
        (vec![1, 1, 1], 0.25),
        (vec![1, 2, 1], 0.15),
    ]
    .into_iter()
    .map(|(p, m)| (PathId(p), m))
    .collect();
    let before: BTreeSet<PathId> = base.full_paths().into_iter().collect();
    let trials = 10_000;
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for trial in 0..trials {
        let mut t = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let key = if grow(&mut t, &masses, &mut rng).map_err(|e| e.to_string())? {
            let new = t.full_paths().into_iter().find(|p| !before.contains(p)).unwrap();
            // the grown inner path is the prefix ending before the first new rank
            let depth_of_branch = if new.0[1] == 3 { 1 } else { 2 };
            new.0[..depth_of_branch].to_vec()
        } else {
            Vec::new()
        };
        *counts.entry(key).or_default() += 1;
    }
    let expect = [(vec![], 0.40), (vec![1], 0.10), (vec![1, 1], 0.30), (vec![1, 2], 0.20)];
    for (key, p) in expect {
        let got = counts.get(&key).copied().unwrap_or(0) as f64 / trials as f64;
        if (got - p).abs() > 0.02 {
            return Err(format!("path {key:?}: frequency {got} vs mass share {p}"));
        }
    }
    Ok(())
}

pub fn prune_respects_delta() -> Result<(), String> {
    run((tree_shape(), any::<u64>(), 0.01f64..0.9), |((depth, grows, seed), op_seed, delta)| {
        let mut t = random_tree(depth, grows, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(op_seed);
        let before = t.full_paths();
        // fourth powers give plenty of small shares
        let full: Vec<f64> = (0..before.len()).map(|_| rng.random_range(0.0f64..1.0).powi(4)).collect();
        let total: f64 = full.iter().sum();
        let share: BTreeMap<u64, f64> = before
            .iter()
            .zip(&full)
            .map(|(p, m)| (leaf_tag(&t, p), m / total))
            .collect();
        let any_minor = share.values().any(|s| *s < delta);

        let masses = mass_map(&t, &full);
        let changed = prune(&mut t, &masses, delta, &mut rng).unwrap();
        t.validate().map_err(|e| fail(e.to_string()))?;
        prop_assert!(t.num_full_paths() >= 1);
        prop_assert_eq!(changed, before.len() >= 2 && any_minor);
        let after: BTreeSet<u64> = t.full_paths().iter().map(|p| leaf_tag(&t, p)).collect();
        let removed: Vec<u64> = share.keys().copied().filter(|k| !after.contains(k)).collect();
        prop_assert_eq!(removed.len(), changed as usize);
        for k in removed {
            prop_assert!(share[&k] < delta, "removed a path with share {} >= {}", share[&k], delta);
        }
        Ok(())
    })
}

pub fn prune_never_empties() -> Result<(), String> {
    run(tree_shape(), |(depth, grows, seed)| {
        let mut t = random_tree(depth, grows, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // uniform masses with δ = 0.99 make every path minor while k ≥ 2
        for _ in 0..t.num_full_paths() + 1 {
            let k = t.num_full_paths();
            let masses = mass_map(&t, &vec![1.0; k]);
            let changed = prune(&mut t, &masses, 0.99, &mut rng).unwrap();
            prop_assert_eq!(changed, k >= 2);
            t.validate().map_err(|e| fail(e.to_string()))?;
        }
        prop_assert_eq!(t.num_full_paths(), 1);
        // zero total mass removes nothing either
        let mut t2 = random_tree(depth, grows, seed);
        let k = t2.num_full_paths();
        let zero = mass_map(&t2, &vec![0.0; k]);
        prop_assert!(!prune(&mut t2, &zero, 0.5, &mut rng).unwrap());
        Ok(())
    })
}

/// Root with two leaves.
fn two_leaves() -> Hierarchy {
    let mut t = Hierarchy::chain(2, 1, 1.0).unwrap();
    t.push_child(0, t.node(1).params.clone()).unwrap();
    t
}

pub fn merge_similarity_formula() -> Result<(), String> {
    // columns q_i = (1, 1, 0) and q_j = (1, 0, 1): J = 1 / (√2 √2) = 0.5
    let j = posterior_similarity(&[1.0, 1.0, 0.0], &[1.0, 0.0, 1.0]);
    if (j - 0.5).abs() > 1e-15 {
        return Err(format!("similarity {j}, expected 0.5"));
    }
    let q = vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let mut t = two_leaves();
    if !merge(&mut t, &q, 0.5).map_err(|e| e.to_string())?.changed {
        return Err("merge did not fire at threshold 0.5".into());
    }
    let mut t = two_leaves();
    if merge(&mut t, &q, 0.5 + 1e-9).map_err(|e| e.to_string())?.changed {
        return Err("merge fired above 0.5".into());
    }
    run(
        (proptest::collection::vec(0.0f64..1.0, 1..12), proptest::collection::vec(0.0f64..1.0, 1..12)),
        |(a, b)| {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let j = posterior_similarity(a, b);
            prop_assert!((j - cosine(a, b)).abs() < 1e-12);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&j));
            prop_assert_eq!(j, posterior_similarity(b, a));
            Ok(())
        },
    )
}

pub fn merge_fires_iff_threshold() -> Result<(), String> {
    run((tree_shape(), any::<u64>(), 0.0f64..1.0, 1usize..10), |((depth, grows, seed), op_seed, th, rows)| {
        let mut t = random_tree(depth, grows, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(op_seed);
        let full = t.full_paths();
        let k = full.len();
        let q = random_q(rows, k, &mut rng);
        let col = |c: usize| q.iter().map(|r| r[c]).collect::<Vec<f64>>();
        let mut sims = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                sims.push((cosine(&col(i), &col(j)), i, j));
            }
        }
        let best = sims.iter().copied().fold((f64::NEG_INFINITY, 0, 0), |b, s| if s.0 > b.0 { s } else { b });
        // pairs tied up to rounding may be picked either way
        let tied = sims.iter().filter(|s| (s.0 - best.0).abs() < 1e-12).count() > 1;
        if k >= 2 && (best.0 - th).abs() < 1e-12 {
            return Ok(());
        }
        let out = merge(&mut t, &q, th).unwrap();
        t.validate().map_err(|e| fail(e.to_string()))?;
        let should = k >= 2 && best.0 >= th;
        prop_assert_eq!(out.changed, should, "best similarity {} threshold {}", best.0, th);
        prop_assert_eq!(t.num_full_paths(), k - should as usize);
        if should && !tied {
            let (_, i, j) = best;
            let mass = |c: usize| col(c).iter().sum::<f64>();
            let (keep, drop) = if mass(j) > mass(i) { (j, i) } else { (i, j) };
            prop_assert_eq!(out.pair, Some((full[keep].clone(), full[drop].clone())));
        }
        Ok(())
    })
}

pub fn merge_threshold_inclusive() -> Result<(), String> {
    run((2usize..5, 1usize..10, any::<u64>(), 1usize..10), |(depth, grows, seed, rows)| {
        let t = random_tree(depth, grows, seed);
        let k = t.num_full_paths();
        if k < 2 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_q(rows, k, &mut rng);
        let probe = merge(&mut t.clone(), &q, f64::INFINITY).unwrap();
        prop_assert!(!probe.changed);
        let s = probe.similarity;
        prop_assert!(merge(&mut t.clone(), &q, s).unwrap().changed);
        prop_assert!(!merge(&mut t.clone(), &q, s.next_up()).unwrap().changed);
        Ok(())
    })
}

pub fn merge_averages_by_mass() -> Result<(), String> {
    run((2usize..5, 2usize..5, any::<u64>(), 1usize..10), |(depth, branches, seed, rows)| {
        // `branches` disjoint chains under the root
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Hierarchy::chain(depth, 2, 1.5).unwrap();
        for _ in 1..branches {
            let mut parent = 0;
            for _ in 1..depth {
                parent = t.push_child(parent, random_params(&mut rng, 0.0)).unwrap();
            }
        }
        t.canonicalize();
        for i in 0..t.len() {
            t.node_mut(i).params = random_params(&mut rng, i as f64);
        }
        let q = random_q(rows, branches, &mut rng);
        let before = t.clone();
        let out = merge(&mut t, &q, 0.0).unwrap();
        prop_assert!(out.changed);
        let (keep, drop) = out.pair.unwrap();
        let full = before.full_paths();
        let mass = |p: &PathId| {
            let c = full.iter().position(|f| f == p).unwrap();
            q.iter().map(|r| r[c]).sum::<f64>()
        };
        let (wk, wd) = (mass(&keep), mass(&drop));
        let (fk, fd) = if wk + wd > 0.0 { (wk / (wk + wd), wd / (wk + wd)) } else { (0.5, 0.5) };
        // sibling ranks above the dropped branch shift down by one
        let mut kept_now = keep.clone();
        if drop.0[1] < keep.0[1] {
            kept_now.0[1] -= 1;
        }
        prop_assert_eq!(&t.root().params, &before.root().params);
        for l in 2..=depth {
            let pk = &before.node(before.find(&PathId(keep.0[..l].to_vec())).unwrap()).params;
            let pd = &before.node(before.find(&PathId(drop.0[..l].to_vec())).unwrap()).params;
            let got = &t.node(t.find(&PathId(kept_now.0[..l].to_vec())).unwrap()).params;
            let near = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + y.abs());
            for d in 0..2 {
                prop_assert!(near(got.mu[d], fk * pk.mu[d] + fd * pd.mu[d]));
                prop_assert!(near(got.sigma2[d], fk * pk.sigma2[d] + fd * pd.sigma2[d]));
            }
            prop_assert!(near(got.a, fk * pk.a + fd * pd.a));
            prop_assert!(near(got.b, fk * pk.b + fd * pd.b));
        }
        Ok(())
    })
}

#[derive(Debug, Clone)]
enum Op {
    Grow(u64),
    Prune(u64, f64),
    Merge(u64, f64),
}

pub fn op_sequences_keep_tree_valid() -> Result<(), String> {
    let op = prop_oneof![
        any::<u64>().prop_map(Op::Grow),
        (any::<u64>(), 0.01f64..0.99).prop_map(|(s, d)| Op::Prune(s, d)),
        (any::<u64>(), 0.0f64..1.0).prop_map(|(s, th)| Op::Merge(s, th)),
    ];
    run((1usize..5, proptest::collection::vec(op, 1..40)), |(depth, ops)| {
        let mut t = Hierarchy::chain(depth, 2, 1.5).unwrap();
        for op in ops {
            let k = t.num_full_paths();
            let (seed, sign) = match op {
                Op::Grow(s) => (s, 1),
                Op::Prune(s, _) | Op::Merge(s, _) => (s, -1),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let full: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let masses = mass_map(&t, &full);
            let changed = match op {
                Op::Grow(_) => grow(&mut t, &masses, &mut rng).unwrap(),
                Op::Prune(_, d) => prune(&mut t, &masses, d, &mut rng).unwrap(),
                Op::Merge(_, th) => merge(&mut t, &random_q(6, k, &mut rng), th).unwrap().changed,
            };
            prop_assert_eq!(t.num_full_paths() as i64, k as i64 + changed as i64 * sign);
            t.validate().map_err(|e| fail(e.to_string()))?;
            prop_assert!(t.num_full_paths() >= 1);
            for p in t.full_paths() {
                prop_assert_eq!(p.len(), depth);
            }
            for (i, n) in t.nodes().iter().enumerate() {
                for (rank, &c) in n.children().iter().enumerate() {
                    prop_assert_eq!(t.path_of(c).0.last().copied(), Some(rank + 1));
                    prop_assert_eq!(t.node(c).parent(), Some(i));
                }
            }
        }
        Ok(())
    })
}
