//! Pipeline clustering baselines: k-means++ and recursive k-means, used to
//! seed flat mixtures and to turn a flat clustering into a hierarchy.

use ndarray::ArrayView2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{stream_rng, Model, Stream};

/// Result of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned center.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d = sq_dist(p, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from a k-means++ seeding. Empty clusters are reseeded
/// at the point farthest from its center.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut R) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!("k-means with k={k} on {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("k-means points have ragged dimensions"));
    }

    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centers[labels[a]]).total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
                    })
                    .unwrap();
                centers[c] = points[far].clone();
                labels[far] = c;
                changed = true;
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &c)| sq_dist(p, &centers[c]))
        .sum();
    Ok(KMeans {
        centers,
        labels,
        inertia,
    })
}

/// Split `points` recursively: `branching[0]` clusters first, then each
/// cluster into `branching[1]`, and so on. Returns per-level labels, with
/// ids unique within each level.
pub fn recursive_kmeans<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    branching: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let levels = refine_labels(points, &vec![0; points.len()], branching, rng)?;
    Ok(levels[1..].to_vec())
}

/// Refine an existing top-level labelling with recursive k-means inside each
/// cluster. `top` holds the first level; `branching` the splits below it.
pub fn refine_labels<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    top: &[usize],
    branching: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if top.len() != points.len() {
        return Err(Error::DimensionMismatch {
            context: "top-level labels",
            expected: points.len(),
            actual: top.len(),
        });
    }
    let mut levels = vec![top.to_vec()];
    let mut current = top.to_vec();
    for &b in branching {
        let mut next = vec![0; points.len()];
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &c) in current.iter().enumerate() {
            groups.entry(c).or_default().push(i);
        }
        let mut offset = 0;
        for members in groups.values() {
            let k = b.min(members.len()).max(1);
            let sub: Vec<Vec<f64>> = members.iter().map(|&i| points[i].clone()).collect();
            let km = kmeans(&sub, k, 100, rng)?;
            for (&i, &l) in members.iter().zip(&km.labels) {
                next[i] = offset + l;
            }
            offset += k;
        }
        levels.push(next.clone());
        current = next;
    }
    Ok(levels)
}

/// Two-stage pipeline: a trained flat model's clusters as the top level,
/// refined by recursive k-means on the posterior means. Returns
/// `1 + branching.len()` levels, the first one below the root.
pub fn pipeline_levels(flat: &Model, x: ArrayView2<f64>, branching: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    if flat.tree().is_some() {
        return Err(Error::invalid("the pipeline baseline needs a flat model"));
    }
    let top = flat.predict_levels(x)?.swap_remove(0);
    let enc = flat.encode(x)?;
    let points: Vec<Vec<f64>> = (0..x.nrows()).map(|i| enc.mu(i)).collect();
    refine_labels(&points, &top, branching, &mut stream_rng(seed, Stream::Structure, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs() -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
            for i in 0..20 {
                let t = i as f64 * 0.3;
                pts.push(vec![cx + 0.2 * t.sin(), cy + 0.2 * t.cos()]);
            }
        }
        pts
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let pts = blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let km = kmeans(&pts, 3, 50, &mut rng).unwrap();
        for b in 0..3 {
            let l = km.labels[b * 20];
            assert!(km.labels[b * 20..(b + 1) * 20].iter().all(|&x| x == l));
        }
        assert!(km.inertia < 60.0 * 0.1);
    }

    #[test]
    fn recursive_labels_nest() {
        let pts = blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let levels = recursive_kmeans(&pts, &[3, 2], &mut rng).unwrap();
        assert_eq!(levels.len(), 2);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                if levels[1][i] == levels[1][j] {
                    assert_eq!(levels[0][i], levels[0][j]);
                }
            }
        }
        let distinct: std::collections::BTreeSet<_> = levels[1].iter().collect();
        assert_eq!(distinct.len(), 6);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(kmeans(&[vec![0.0]], 2, 10, &mut rng).is_err());
        assert!(kmeans(&[vec![0.0]], 0, 10, &mut rng).is_err());
    }
}
