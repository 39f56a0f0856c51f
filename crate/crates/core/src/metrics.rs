//! Evaluation: importance-sampled likelihood, reconstruction error, pairwise
//! hierarchical F-score and tree export.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{data_pass, standard_normal, stream_rng, Model, Stream, EVAL_CHUNK};
use crate::special::log_sum_exp;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Importance-sampled log-likelihood estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub samples: usize,
    /// Per-instance estimate of `log p(x)`.
    pub log_likelihood: Vec<f64>,
    /// Negative mean of `log_likelihood`.
    pub nll: f64,
    /// Standard error of the mean across instances.
    pub std_error: f64,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `log p(x) ≈ logsumexp_s [log p(x|z_s) + log p(z_s) − log q(z_s|x)] − log S`
/// with `z_s` drawn from the encoder posterior.
pub fn nll_estimate(model: &Model, x: ArrayView2<f64>, samples: usize, seed: u64) -> Result<NllReport> {
    if samples < 1 {
        return Err(Error::invalid("the likelihood estimate needs at least one sample"));
    }
    let cfg = model.config();
    let j = cfg.latent_dim;
    let mut rng = stream_rng(cfg.seed, Stream::Nll, seed);
    let chunk = (4096 / samples).clamp(1, EVAL_CHUNK);
    let mut out = Vec::with_capacity(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + chunk).min(x.nrows());
        let xb = x.slice(s![start..end, ..]);
        let enc = model.encode(xb)?;
        let b = end - start;
        let eps = standard_normal(&mut rng, b * samples * j);
        let mut z = Array2::zeros((b * samples, j));
        let mut log_q = vec![0.0; b * samples];
        for i in 0..b {
            let mu = enc.mu(i);
            let s2 = enc.sigma2(i);
            for smp in 0..samples {
                let row = i * samples + smp;
                let mut lq = 0.0;
                for jj in 0..j {
                    let e = eps[row * j + jj];
                    z[[row, jj]] = mu[jj] + s2[jj].sqrt() * e;
                    lq -= 0.5 * (LN_2PI + s2[jj].ln() + e * e);
                }
                log_q[row] = lq;
            }
        }
        let dec = model.decode(z.view())?;
        for i in 0..b {
            let xi = xb.row(i).to_vec();
            let w: Vec<f64> = (0..samples)
                .map(|smp| {
                    let row = i * samples + smp;
                    let zr = z.row(row).to_vec();
                    let out = dec.row(row).to_vec();
                    cfg.observation.log_likelihood(&xi, &out) + model.log_prior_density(&zr) - log_q[row]
                })
                .collect();
            out.push(log_sum_exp(&w) - (samples as f64).ln());
        }
        start = end;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite likelihood estimate"));
    }
    let (mean, se) = mean_and_se(&out);
    Ok(NllReport {
        samples,
        log_likelihood: out,
        nll: -mean,
        std_error: se,
    })
}

/// Per-instance ELBO with fresh noise; dataset-level terms are spread
/// evenly over the instances.
pub fn elbo_per_instance(model: &Model, x: ArrayView2<f64>, seed: u64) -> Result<Vec<f64>> {
    let n = x.nrows();
    let global = model.global_terms()?.total() / n as f64;
    let mut rng = stream_rng(model.config().seed, Stream::Nll, seed ^ 0x5eed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.slice(s![i..i + 1, ..]);
        let (_, a) = model.e_step(row)?;
        let noise = model.draw_noise(1, &mut rng);
        let (v, _) = model.objective(row, &a, &noise, 0.0, false, false)?;
        out.push(v.total() + global);
    }
    Ok(out)
}

/// Mean reconstruction error at the posterior mean: squared error summed
/// over dimensions (gaussian) or summed cross-entropy (bernoulli).
pub fn reconstruction_error(model: &Model, x: ArrayView2<f64>) -> Result<f64> {
    chunked_mean(x, |xb| {
        let enc = model.encode(xb)?;
        model.reconstruction_errors(xb, enc.mu_z.view())
    })
}

/// Mean negative `log p(x | f(μ̃_z))`, the likelihood-scale counterpart of
/// [`reconstruction_error`]. Equal to it for bernoulli observations.
pub fn reconstruction_nll(model: &Model, x: ArrayView2<f64>) -> Result<f64> {
    let obs = model.config().observation;
    chunked_mean(x, |xb| {
        let enc = model.encode(xb)?;
        let out = model.decode(enc.mu_z.view())?;
        Ok(xb
            .rows()
            .into_iter()
            .zip(out.rows())
            .map(|(xr, o)| -obs.log_likelihood(&xr.to_vec(), &o.to_vec()))
            .collect())
    })
}

fn chunked_mean(x: ArrayView2<f64>, mut f: impl FnMut(ArrayView2<f64>) -> Result<Vec<f64>>) -> Result<f64> {
    let mut vals = Vec::with_capacity(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        vals.extend(f(x.slice(s![start..end, ..]))?);
        start = end;
    }
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Pairwise precision, recall and F pooled over levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    /// Pairs sharing both a predicted cluster and a true label.
    pub true_positive_pairs: f64,
    pub predicted_pairs: f64,
    pub truth_pairs: f64,
}

fn pairs(c: u64) -> f64 {
    (c * c.saturating_sub(1) / 2) as f64
}

/// Micro-averaged pairwise F-score: at every level count instance pairs
/// that share a predicted cluster, a true label, or both, sum the counts
/// over levels and form `F = 2PR / (P + R)`. Degenerate inputs score 0.
pub fn hierarchical_fscore(predicted: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<FScore> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "F-score level count",
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    let (mut tp, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::DimensionMismatch {
                context: "F-score instance count",
                expected: t.len(),
                actual: p.len(),
            });
        }
        let mut joint = std::collections::HashMap::<(usize, usize), u64>::new();
        let mut pc = std::collections::HashMap::<usize, u64>::new();
        let mut tc = std::collections::HashMap::<usize, u64>::new();
        for (&a, &b) in p.iter().zip(t) {
            *joint.entry((a, b)).or_default() += 1;
            *pc.entry(a).or_default() += 1;
            *tc.entry(b).or_default() += 1;
        }
        tp += joint.values().map(|&c| pairs(c)).sum::<f64>();
        pp += pc.values().map(|&c| pairs(c)).sum::<f64>();
        tt += tc.values().map(|&c| pairs(c)).sum::<f64>();
    }
    if pp == 0.0 || tt == 0.0 || tp == 0.0 {
        log::warn!("degenerate F-score (no positive pairs); reporting 0");
        return Ok(FScore {
            precision: if pp > 0.0 { tp / pp } else { 0.0 },
            recall: if tt > 0.0 { tp / tt } else { 0.0 },
            f: 0.0,
            true_positive_pairs: tp,
            predicted_pairs: pp,
            truth_pairs: tt,
        });
    }
    let (p, r) = (tp / pp, tp / tt);
    Ok(FScore {
        precision: p,
        recall: r,
        f: 2.0 * p * r / (p + r),
        true_positive_pairs: tp,
        predicted_pairs: pp,
        truth_pairs: tt,
    })
}

/// Compare a model's per-level clusters with per-level labels. The root
/// level is skipped on both sides; a flat model's single level is matched
/// to the first level below the root, and a single level of labels (flat
/// ground truth such as digit classes) to the model's deepest level.
pub fn model_fscore(model: &Model, x: ArrayView2<f64>, truth: &[Vec<usize>]) -> Result<FScore> {
    let mut pred = model.predict_levels(x)?;
    let (p, t): (Vec<Vec<usize>>, Vec<Vec<usize>>) = if truth.len() == 1 {
        (vec![pred.pop().expect("at least one level")], truth.to_vec())
    } else if pred.len() == 1 {
        let t = truth.get(1).or(truth.first()).ok_or_else(|| Error::invalid("no truth labels"))?;
        (pred, vec![t.clone()])
    } else {
        let levels = pred.len().min(truth.len());
        if levels < 2 {
            return Err(Error::invalid("truth labels need a level below the root"));
        }
        (pred[1..levels].to_vec(), truth[1..levels].to_vec())
    };
    hierarchical_fscore(&p, &t)
}

/// Tree export formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TreeFormat {
    Json,
    Dot,
}

/// Per-node posterior mass over `x`: `Σ_n q(ζ_n)` over full paths through
/// the node.
pub fn node_masses(model: &Model, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    let tree = model.tree().ok_or_else(|| Error::invalid("flat models have no tree"))?;
    let pass = data_pass(model, x, u64::MAX)?;
    Ok(tree.node_masses(&pass.full_path_mass()))
}

/// Render the model's tree, annotated with node masses when data is given.
pub fn export_tree(model: &Model, x: Option<ArrayView2<f64>>, format: TreeFormat) -> Result<String> {
    let tree = model.tree().ok_or_else(|| Error::invalid("flat models have no tree to export"))?;
    let masses = x.map(|x| node_masses(model, x)).transpose()?;
    match format {
        TreeFormat::Json => tree.to_json(masses.as_deref()),
        TreeFormat::Dot => Ok(tree.to_dot(masses.as_deref())),
    }
}

/// Evaluation summary written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub variant: String,
    pub instances: usize,
    pub nll_samples: usize,
    pub nll: f64,
    pub nll_std_error: f64,
    pub reconstruction_error: f64,
    pub reconstruction_nll: f64,
    pub elbo: f64,
    pub fscore: Option<FScore>,
}

impl MetricsReport {
    pub fn csv(&self) -> String {
        let f = self.fscore.map_or(String::new(), |f| format!("{}", f.f));
        format!(
            "dataset,variant,instances,nll_samples,nll,nll_std_error,reconstruction_error,reconstruction_nll,elbo,fscore\n\
             {},{},{},{},{},{},{},{},{},{}\n",
            self.dataset,
            self.variant,
            self.instances,
            self.nll_samples,
            self.nll,
            self.nll_std_error,
            self.reconstruction_error,
            self.reconstruction_nll,
            self.elbo,
            f
        )
    }
}

/// Every metric for one model on one dataset. The F-score is computed only
/// when labels are present.
pub fn evaluate(model: &Model, data: &Dataset, nll_samples: usize, seed: u64) -> Result<MetricsReport> {
    if data.dim() != model.config().data_dim {
        return Err(Error::DimensionMismatch {
            context: "evaluation data columns vs model data_dim",
            expected: model.config().data_dim,
            actual: data.dim(),
        });
    }
    let x = data.x.view();
    let nll = nll_estimate(model, x, nll_samples, seed)?;
    let elbo = elbo_per_instance(model, x, seed)?;
    Ok(MetricsReport {
        dataset: data.name.clone(),
        variant: model.config().variant.name().to_string(),
        instances: data.len(),
        nll_samples,
        nll: nll.nll,
        nll_std_error: nll.std_error,
        reconstruction_error: reconstruction_error(model, x)?,
        reconstruction_nll: reconstruction_nll(model, x)?,
        elbo: elbo.iter().sum::<f64>() / elbo.len().max(1) as f64,
        fscore: data.labels.as_ref().map(|l| model_fscore(model, x, l)).transpose()?,
    })
}
