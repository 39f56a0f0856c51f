//! Closed-form variational quantities: the logistic-normal to Dirichlet
//! bridge, the level and path posteriors, and every term of the hierarchical
//! and flat-mixture evidence lower bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{node_log_prior, Hierarchy, NodeParams, PathId};
use crate::special::{digamma, ln_gamma, normalize_log_weights, trigamma};

/// Floor applied to bridged Dirichlet parameters.
pub const ALPHA_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Dirichlet parameters from a logistic-normal posterior with mean `μ̃` and
/// variance `σ̃²`, clamped below at [`ALPHA_FLOOR`].
pub fn laplace_alpha(mu_eta: &[f64], sigma2_eta: &[f64]) -> Result<Vec<f64>> {
    if mu_eta.len() != sigma2_eta.len() {
        return Err(Error::DimensionMismatch {
            context: "laplace bridge",
            expected: mu_eta.len(),
            actual: sigma2_eta.len(),
        });
    }
    if mu_eta.is_empty() {
        return Err(Error::invalid("laplace bridge needs at least one level"));
    }
    if !mu_eta.iter().chain(sigma2_eta).all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite level-proportion posterior"));
    }
    if sigma2_eta.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("level-proportion variance must be positive"));
    }
    Ok(laplace_raw(mu_eta, sigma2_eta)
        .into_iter()
        .map(|a| a.max(ALPHA_FLOOR))
        .collect())
}

fn laplace_raw(mu: &[f64], s2: &[f64]) -> Vec<f64> {
    let l = mu.len() as f64;
    let e_sum: f64 = mu.iter().map(|m| (-m).exp()).sum();
    mu.iter()
        .zip(s2)
        .map(|(&m, &s)| (1.0 - 2.0 / l + (-m).exp() * e_sum / (l * l)) / s)
        .collect()
}

/// Pull an upstream gradient on `α̃` back to `(μ̃_η, log σ̃²_η)`. Clamped
/// entries pass no gradient.
pub fn laplace_alpha_backward(mu: &[f64], s2: &[f64], upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let l = mu.len() as f64;
    let raw = laplace_raw(mu, s2);
    let e: Vec<f64> = mu.iter().map(|m| (-m).exp()).collect();
    let e_sum: f64 = e.iter().sum();
    let up: Vec<f64> = upstream
        .iter()
        .zip(&raw)
        .map(|(&u, &a)| if a > ALPHA_FLOOR { u } else { 0.0 })
        .collect();
    let cross: f64 = up.iter().zip(&e).zip(s2).map(|((u, ei), s)| u * ei / s).sum();
    let d_mu = (0..mu.len())
        .map(|k| -(e[k] / (l * l)) * (up[k] * e_sum / s2[k] + cross))
        .collect();
    let d_log_s2 = up.iter().zip(&raw).map(|(u, a)| -u * a).collect();
    (d_mu, d_log_s2)
}

/// `E_{N(z|μ̃,σ̃²)}[log N(z | μ, σ²)]` for diagonal Gaussians.
pub fn gaussian_cross(mu_z: &[f64], sigma2_z: &[f64], node: &NodeParams) -> Result<f64> {
    if mu_z.len() != node.mu.len() || sigma2_z.len() != node.mu.len() {
        return Err(Error::DimensionMismatch {
            context: "gaussian cross term",
            expected: node.mu.len(),
            actual: mu_z.len(),
        });
    }
    if node.sigma2.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("node variance must be positive"));
    }
    Ok(gaussian_cross_raw(mu_z, sigma2_z, &node.mu, &node.sigma2))
}

pub(crate) fn gaussian_cross_raw(mu_z: &[f64], s2_z: &[f64], mu: &[f64], s2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..mu.len() {
        let d = mu_z[j] - mu[j];
        acc += -0.5 * (LN_2PI + s2[j].ln()) - (d * d + s2_z[j]) / (2.0 * s2[j]);
    }
    acc
}

/// Differential entropy of a diagonal Gaussian with variances `s2`.
pub fn gaussian_entropy(s2: &[f64]) -> f64 {
    s2.iter().map(|s| 0.5 * (LN_2PI + 1.0 + s.ln())).sum()
}

/// `ψ(α̃_l) − ψ(α̃_0)`, the expected log level proportions.
pub fn expected_log_eta(alpha_tilde: &[f64]) -> Vec<f64> {
    let a0: f64 = alpha_tilde.iter().sum();
    let d0 = digamma(a0);
    alpha_tilde.iter().map(|&a| digamma(a) - d0).collect()
}

/// Structural cache of a tree: node indices along each full path and the
/// expected log path priors, both in `full_paths` order.
#[derive(Debug, Clone)]
pub struct TreeView {
    pub paths: Vec<Vec<usize>>,
    pub log_prior: Vec<f64>,
    pub num_nodes: usize,
}

impl TreeView {
    pub fn new(tree: &Hierarchy) -> Self {
        let paths = tree.full_path_nodes();
        let node_prior: Vec<f64> = (0..tree.len()).map(|i| node_log_prior(tree, i)).collect();
        let log_prior = paths
            .iter()
            .map(|p| p.iter().map(|&n| node_prior[n]).sum())
            .collect();
        TreeView {
            paths,
            log_prior,
            num_nodes: tree.len(),
        }
    }

    pub fn depth(&self) -> usize {
        self.paths[0].len()
    }
}

/// Gaussian cross term against every node of the tree.
pub fn cross_table(tree: &Hierarchy, mu_z: &[f64], sigma2_z: &[f64]) -> Vec<f64> {
    tree.nodes()
        .iter()
        .map(|n| gaussian_cross_raw(mu_z, sigma2_z, &n.params.mu, &n.params.sigma2))
        .collect()
}

/// Normalized posterior over the full paths of a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPosterior {
    pub paths: Vec<PathId>,
    pub weights: Vec<f64>,
}

impl PathPosterior {
    /// Weight of an inner or full path: the sum over full paths below it.
    pub fn weight_of(&self, path: &PathId) -> f64 {
        self.paths
            .iter()
            .zip(&self.weights)
            .filter(|(p, _)| p.0.starts_with(&path.0))
            .map(|(_, w)| w)
            .sum()
    }
}

pub(crate) fn path_update(view: &TreeView, g: &[f64], omega: &[f64]) -> Result<Vec<f64>> {
    let mut logits: Vec<f64> = view
        .paths
        .iter()
        .zip(&view.log_prior)
        .map(|(p, prior)| prior + p.iter().zip(omega).map(|(&n, w)| w * g[n]).sum::<f64>())
        .collect();
    if !normalize_log_weights(&mut logits).is_finite() {
        return Err(Error::numeric("path posterior has no finite log-weight"));
    }
    Ok(logits)
}

pub(crate) fn level_update(view: &TreeView, g: &[f64], q: &[f64], e_log_eta: &[f64]) -> Result<Vec<f64>> {
    let mut logits = e_log_eta.to_vec();
    for (p, &qz) in view.paths.iter().zip(q) {
        for (l, &n) in p.iter().enumerate() {
            logits[l] += qz * g[n];
        }
    }
    if !normalize_log_weights(&mut logits).is_finite() {
        return Err(Error::numeric("level posterior has no finite log-weight"));
    }
    Ok(logits)
}

/// Coordinate update of `q(ζ)`:
/// `S_ζ ∝ exp(E[log p(ζ|v)] + Σ_l ω_l E[log N(z | node(ζ_{1:l}))])`.
pub fn path_posterior(tree: &Hierarchy, omega: &[f64], mu_z: &[f64], sigma2_z: &[f64]) -> Result<PathPosterior> {
    check_simplex(omega, tree.depth(), "level posterior")?;
    check_latent(tree, mu_z, sigma2_z)?;
    let view = TreeView::new(tree);
    let g = cross_table(tree, mu_z, sigma2_z);
    Ok(PathPosterior {
        paths: tree.full_paths(),
        weights: path_update(&view, &g, omega)?,
    })
}

/// Coordinate update of `q(l) = Multinomial(ω)`:
/// `ω_l ∝ exp(Σ_ζ S_ζ E[log N(z | node(ζ_l))] + ψ(α̃_l) − ψ(α̃_0))`.
pub fn level_posterior(
    tree: &Hierarchy,
    path_weights: &[f64],
    alpha_tilde: &[f64],
    mu_z: &[f64],
    sigma2_z: &[f64],
) -> Result<Vec<f64>> {
    check_simplex(path_weights, tree.num_full_paths(), "path posterior")?;
    check_latent(tree, mu_z, sigma2_z)?;
    check_positive(alpha_tilde, tree.depth(), "alpha_tilde")?;
    let view = TreeView::new(tree);
    let g = cross_table(tree, mu_z, sigma2_z);
    level_update(&view, &g, path_weights, &expected_log_eta(alpha_tilde))
}

/// Alternate path and level updates from uniform ω. Returns `(ω, q(ζ))`.
pub fn coordinate_ascent(
    view: &TreeView,
    g: &[f64],
    e_log_eta: &[f64],
    sweeps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = e_log_eta.len();
    let mut omega = vec![1.0 / l as f64; l];
    let mut q = path_update(view, g, &omega)?;
    for sweep in 0..sweeps {
        if sweep > 0 {
            q = path_update(view, g, &omega)?;
        }
        omega = level_update(view, g, &q, e_log_eta)?;
    }
    Ok((omega, q))
}

fn check_simplex(p: &[f64], len: usize, what: &'static str) -> Result<()> {
    if p.len() != len {
        return Err(Error::DimensionMismatch {
            context: what,
            expected: len,
            actual: p.len(),
        });
    }
    let s: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{what} is not a probability vector")));
    }
    Ok(())
}

fn check_positive(p: &[f64], len: usize, what: &'static str) -> Result<()> {
    if p.len() != len {
        return Err(Error::DimensionMismatch {
            context: what,
            expected: len,
            actual: p.len(),
        });
    }
    if p.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("{what} must be positive")));
    }
    Ok(())
}

fn check_latent(tree: &Hierarchy, mu_z: &[f64], s2_z: &[f64]) -> Result<()> {
    let j = tree.latent_dim();
    if mu_z.len() != j || s2_z.len() != j {
        return Err(Error::DimensionMismatch {
            context: "latent posterior",
            expected: j,
            actual: mu_z.len(),
        });
    }
    if s2_z.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("latent variance must be positive"));
    }
    Ok(())
}

/// `−KL(Beta(a, b) ‖ Beta(1, γ))`.
pub fn beta_neg_kl(a: f64, b: f64, gamma: f64) -> f64 {
    let (da, db, dab) = (digamma(a), digamma(b), digamma(a + b));
    let log_p = gamma.ln() + (gamma - 1.0) * (db - dab);
    let log_q = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * (da - dab) + (b - 1.0) * (db - dab);
    log_p - log_q
}

/// Gradient of [`beta_neg_kl`] with respect to `(log a, log b)`.
pub fn beta_neg_kl_grad_log(a: f64, b: f64, gamma: f64) -> (f64, f64) {
    let (ta, tb, tab) = (trigamma(a), trigamma(b), trigamma(a + b));
    let dq_da = (a - 1.0) * ta - (a + b - 2.0) * tab;
    let dq_db = (b - 1.0) * tb - (a + b - 2.0) * tab;
    let dp_da = -(gamma - 1.0) * tab;
    let dp_db = (gamma - 1.0) * (tb - tab);
    (a * (dp_da - dq_da), b * (dp_db - dq_db))
}

/// `E_q[log p(v)] − E_q[log q(v)]` summed over all non-root nodes; the root
/// stick is degenerate.
pub fn beta_term(tree: &Hierarchy) -> Result<f64> {
    let gamma = tree.gamma();
    let mut acc = 0.0;
    for n in &tree.nodes()[1..] {
        let (a, b) = (n.params.a, n.params.b);
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::invalid("Beta parameters must be positive"));
        }
        acc += beta_neg_kl(a, b, gamma);
    }
    Ok(acc)
}

/// `E_q[log p(η|α)] − E_q[log q(η)]`.
pub fn dirichlet_prior_entropy(alpha: &[f64], alpha_tilde: &[f64]) -> f64 {
    let e = expected_log_eta(alpha_tilde);
    let a0: f64 = alpha.iter().sum();
    let t0: f64 = alpha_tilde.iter().sum();
    let log_p = ln_gamma(a0) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        + alpha.iter().zip(&e).map(|(a, el)| (a - 1.0) * el).sum::<f64>();
    let log_q = ln_gamma(t0) - alpha_tilde.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        + alpha_tilde.iter().zip(&e).map(|(a, el)| (a - 1.0) * el).sum::<f64>();
    log_p - log_q
}

/// Per-instance Dirichlet block: `E[log p(η)] + E[log p(l|η)] − E[log q(η)]`.
pub fn dirichlet_terms(alpha: &[f64], alpha_tilde: &[f64], omega: &[f64]) -> Result<f64> {
    let l = alpha.len();
    check_positive(alpha, l, "alpha")?;
    check_positive(alpha_tilde, l, "alpha_tilde")?;
    if omega.len() != l {
        return Err(Error::DimensionMismatch {
            context: "level posterior",
            expected: l,
            actual: omega.len(),
        });
    }
    let level: f64 = omega.iter().zip(expected_log_eta(alpha_tilde)).map(|(w, e)| w * e).sum();
    Ok(dirichlet_prior_entropy(alpha, alpha_tilde) + level)
}

/// Gradient of [`dirichlet_terms`] with respect to `α̃`.
pub fn dirichlet_terms_grad(alpha: &[f64], alpha_tilde: &[f64], omega: &[f64]) -> Vec<f64> {
    let a0: f64 = alpha.iter().sum();
    let t0: f64 = alpha_tilde.iter().sum();
    let w0: f64 = omega.iter().sum();
    let common = (a0 + w0 - t0) * trigamma(t0);
    (0..alpha.len())
        .map(|k| (alpha[k] + omega[k] - alpha_tilde[k]) * trigamma(alpha_tilde[k]) - common)
        .collect()
}

/// Likelihood family of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    /// Decoder emits `[μ_x (D), log σ²_x (D)]`.
    Gaussian,
    /// Decoder emits `D` logits.
    Bernoulli,
}

impl Observation {
    pub fn output_dim(self, d: usize) -> usize {
        match self {
            Observation::Gaussian => 2 * d,
            Observation::Bernoulli => d,
        }
    }

    /// `log p(x | decoder output)`.
    pub fn log_likelihood(self, x: &[f64], out: &[f64]) -> f64 {
        let d = x.len();
        match self {
            Observation::Gaussian => {
                let (mu, lv) = out.split_at(d);
                (0..d)
                    .map(|i| {
                        let r = x[i] - mu[i];
                        -0.5 * (LN_2PI + lv[i]) - r * r * (-lv[i]).exp() * 0.5
                    })
                    .sum()
            }
            Observation::Bernoulli => x
                .iter()
                .zip(out)
                .map(|(&xi, &t)| xi * t - softplus(t))
                .sum(),
        }
    }

    /// Gradient of [`Observation::log_likelihood`] with respect to the
    /// decoder output, written into `grad`.
    pub fn log_likelihood_grad(self, x: &[f64], out: &[f64], grad: &mut [f64]) {
        let d = x.len();
        match self {
            Observation::Gaussian => {
                let (mu, lv) = out.split_at(d);
                for i in 0..d {
                    let inv = (-lv[i]).exp();
                    let r = x[i] - mu[i];
                    grad[i] = r * inv;
                    grad[d + i] = -0.5 + 0.5 * r * r * inv;
                }
            }
            Observation::Bernoulli => {
                for i in 0..d {
                    grad[i] = x[i] - sigmoid(out[i]);
                }
            }
        }
    }
}

pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Per-instance variational state of the hierarchical model.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceState {
    pub mu_z: Vec<f64>,
    pub sigma2_z: Vec<f64>,
    pub alpha_tilde: Vec<f64>,
    pub omega: Vec<f64>,
    /// `q(ζ)` over full paths in `Hierarchy::full_paths` order.
    pub q_path: Vec<f64>,
}

/// ELBO split by term. For the flat mixture, `path_*` terms hold the
/// cluster prior and cluster entropy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub path_prior: f64,
    pub level_prior: f64,
    pub eta: f64,
    pub gaussian: f64,
    pub path_entropy: f64,
    pub level_entropy: f64,
    pub z_entropy: f64,
    pub beta: f64,
}

impl ElboBreakdown {
    pub const FIELDS: [&'static str; 9] = [
        "reconstruction",
        "path_prior",
        "level_prior",
        "eta",
        "gaussian",
        "path_entropy",
        "level_entropy",
        "z_entropy",
        "beta",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.reconstruction,
            self.path_prior,
            self.level_prior,
            self.eta,
            self.gaussian,
            self.path_entropy,
            self.level_entropy,
            self.z_entropy,
            self.beta,
        ]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    pub fn add(&mut self, o: &ElboBreakdown) {
        self.reconstruction += o.reconstruction;
        self.path_prior += o.path_prior;
        self.level_prior += o.level_prior;
        self.eta += o.eta;
        self.gaussian += o.gaussian;
        self.path_entropy += o.path_entropy;
        self.level_entropy += o.level_entropy;
        self.z_entropy += o.z_entropy;
        self.beta += o.beta;
    }

    pub fn scaled(&self, s: f64) -> ElboBreakdown {
        ElboBreakdown {
            reconstruction: self.reconstruction * s,
            path_prior: self.path_prior * s,
            level_prior: self.level_prior * s,
            eta: self.eta * s,
            gaussian: self.gaussian * s,
            path_entropy: self.path_entropy * s,
            level_entropy: self.level_entropy * s,
            z_entropy: self.z_entropy * s,
            beta: self.beta * s,
        }
    }

    /// `total,<fields...>` header for CSV diagnostics.
    pub fn csv_header() -> String {
        std::iter::once("elbo")
            .chain(Self::FIELDS)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn csv_row(&self) -> String {
        std::iter::once(self.total())
            .chain(self.values())
            .map(|v| format!("{v:e}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Per-instance latent terms of the hierarchical bound (everything but the
/// reconstruction and the tree-level Beta term). `eta_per_instance` adds
/// the Dirichlet prior and entropy for this instance's own `α̃`.
pub fn instance_terms(
    view: &TreeView,
    g: &[f64],
    alpha: &[f64],
    state: &InstanceState,
    eta_per_instance: bool,
) -> ElboBreakdown {
    let e_log_eta = expected_log_eta(&state.alpha_tilde);
    let mut out = ElboBreakdown::default();
    for ((p, &prior), &qz) in view.paths.iter().zip(&view.log_prior).zip(&state.q_path) {
        if qz == 0.0 {
            continue;
        }
        out.path_prior += qz * prior;
        out.gaussian += qz * p.iter().zip(&state.omega).map(|(&n, w)| w * g[n]).sum::<f64>();
        out.path_entropy -= qz * qz.ln();
    }
    out.level_prior = state.omega.iter().zip(&e_log_eta).map(|(w, e)| w * e).sum();
    out.level_entropy = -state
        .omega
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|w| w * w.ln())
        .sum::<f64>();
    if eta_per_instance {
        out.eta = dirichlet_prior_entropy(alpha, &state.alpha_tilde);
    }
    out.z_entropy = gaussian_entropy(&state.sigma2_z);
    out
}

/// Hierarchical bound summed over a batch, plus the tree-level Beta term
/// and, when `global_alpha_tilde` is given, the shared Dirichlet block once.
///
/// `decoded[n]` holds one decoder output per Monte Carlo sample; the
/// reconstruction term is their mean log-likelihood.
#[allow(clippy::too_many_arguments)]
pub fn elbo_hcrl(
    x: &[Vec<f64>],
    obs: Observation,
    tree: &Hierarchy,
    alpha: &[f64],
    global_alpha_tilde: Option<&[f64]>,
    states: &[InstanceState],
    decoded: &[Vec<Vec<f64>>],
) -> Result<ElboBreakdown> {
    if states.len() != x.len() || decoded.len() != x.len() {
        return Err(Error::invalid("ELBO needs one state and one decoding per instance"));
    }
    let view = TreeView::new(tree);
    let l = tree.depth();
    check_positive(alpha, l, "alpha")?;
    let mut total = ElboBreakdown::default();
    for ((xn, st), dec) in x.iter().zip(states).zip(decoded) {
        check_latent(tree, &st.mu_z, &st.sigma2_z)?;
        check_simplex(&st.omega, l, "level posterior")?;
        check_simplex(&st.q_path, view.paths.len(), "path posterior")?;
        if dec.is_empty() {
            return Err(Error::invalid("at least one Monte Carlo sample is required"));
        }
        let mut st_view = st.clone();
        if let Some(g) = global_alpha_tilde {
            st_view.alpha_tilde = g.to_vec();
        }
        check_positive(&st_view.alpha_tilde, l, "alpha_tilde")?;
        let g = cross_table(tree, &st.mu_z, &st.sigma2_z);
        let mut terms = instance_terms(&view, &g, alpha, &st_view, global_alpha_tilde.is_none());
        terms.reconstruction =
            dec.iter().map(|o| obs.log_likelihood(xn, o)).sum::<f64>() / dec.len() as f64;
        total.add(&terms);
    }
    if let Some(g) = global_alpha_tilde {
        total.eta = dirichlet_prior_entropy(alpha, g);
    }
    total.beta = beta_term(tree)?;
    Ok(total)
}

/// Flat Gaussian mixture prior `Σ_c κ_c N(μ_c, diag σ²_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatMixture {
    pub kappa: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
}

impl FlatMixture {
    pub fn validate(&self) -> Result<()> {
        let k = self.kappa.len();
        if k == 0 || self.mu.len() != k || self.sigma2.len() != k {
            return Err(Error::invalid("mixture needs matching κ, μ and σ² per component"));
        }
        let s: f64 = self.kappa.iter().sum();
        if self.kappa.iter().any(|&v| !(v > 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mixture weights must be a positive simplex"));
        }
        if self.sigma2.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("mixture variances must be positive"));
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.kappa.len()
    }

    /// `p(c | z)` at a point.
    pub fn responsibilities(&self, z: &[f64]) -> Vec<f64> {
        let mut logits: Vec<f64> = (0..self.components())
            .map(|c| {
                self.kappa[c].ln()
                    + self.mu[c]
                        .iter()
                        .zip(&self.sigma2[c])
                        .zip(z)
                        .map(|((m, s), zj)| -0.5 * (LN_2PI + s.ln()) - (zj - m) * (zj - m) / (2.0 * s))
                        .sum::<f64>()
            })
            .collect();
        normalize_log_weights(&mut logits);
        logits
    }
}

/// Per-instance variational state of the flat mixture model.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatState {
    pub mu_z: Vec<f64>,
    pub sigma2_z: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Latent terms of the flat-mixture bound for one instance.
pub fn flat_instance_terms(mix: &FlatMixture, st: &FlatState) -> ElboBreakdown {
    let mut out = ElboBreakdown::default();
    for c in 0..mix.components() {
        let gc = st.gamma[c];
        if gc == 0.0 {
            continue;
        }
        out.path_prior += gc * mix.kappa[c].ln();
        out.gaussian += gc * gaussian_cross_raw(&st.mu_z, &st.sigma2_z, &mix.mu[c], &mix.sigma2[c]);
        out.path_entropy -= gc * gc.ln();
    }
    out.z_entropy = gaussian_entropy(&st.sigma2_z);
    out
}

/// Flat-mixture bound summed over a batch, with `q(c|x)` given per instance.
pub fn elbo_vade(
    x: &[Vec<f64>],
    obs: Observation,
    mix: &FlatMixture,
    states: &[FlatState],
    decoded: &[Vec<Vec<f64>>],
) -> Result<ElboBreakdown> {
    mix.validate()?;
    if states.len() != x.len() || decoded.len() != x.len() {
        return Err(Error::invalid("ELBO needs one state and one decoding per instance"));
    }
    let mut total = ElboBreakdown::default();
    for ((xn, st), dec) in x.iter().zip(states).zip(decoded) {
        if st.gamma.len() != mix.components() || st.mu_z.len() != mix.mu[0].len() {
            return Err(Error::invalid("flat state does not match the mixture"));
        }
        if dec.is_empty() {
            return Err(Error::invalid("at least one Monte Carlo sample is required"));
        }
        let mut terms = flat_instance_terms(mix, st);
        terms.reconstruction =
            dec.iter().map(|o| obs.log_likelihood(xn, o)).sum::<f64>() / dec.len() as f64;
        total.add(&terms);
    }
    Ok(total)
}

/// Plain VAE bound with a fixed standard normal prior.
pub fn elbo_vae(
    x: &[Vec<f64>],
    obs: Observation,
    latent: &[(Vec<f64>, Vec<f64>)],
    decoded: &[Vec<Vec<f64>>],
) -> Result<ElboBreakdown> {
    if latent.len() != x.len() || decoded.len() != x.len() {
        return Err(Error::invalid("ELBO needs one state and one decoding per instance"));
    }
    let mut total = ElboBreakdown::default();
    for ((xn, (mu, s2)), dec) in x.iter().zip(latent).zip(decoded) {
        if dec.is_empty() {
            return Err(Error::invalid("at least one Monte Carlo sample is required"));
        }
        let j = mu.len();
        total.gaussian += gaussian_cross_raw(mu, s2, &vec![0.0; j], &vec![1.0; j]);
        total.z_entropy += gaussian_entropy(s2);
        total.reconstruction +=
            dec.iter().map(|o| obs.log_likelihood(xn, o)).sum::<f64>() / dec.len() as f64;
    }
    Ok(total)
}

/// Closed-form `−KL(N(μ̃, σ̃²) ‖ N(0, I))`.
pub fn neg_kl_standard_normal(mu: &[f64], s2: &[f64]) -> f64 {
    mu.iter()
        .zip(s2)
        .map(|(m, s)| 0.5 * (1.0 + s.ln() - m * m - s))
        .sum()
}
