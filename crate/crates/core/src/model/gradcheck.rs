//! Analytic-versus-finite-difference comparison of the batch objective for
//! every parameter group, with assignments and noise held fixed.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant};
use super::engine::{stream_rng, Model, Stream};
use crate::error::{Error, Result};
use crate::hierarchy::{grow, PathId};
use crate::nn::{finite_diff_grad, relative_error, ParamGrads};

/// Largest data and latent dimension gradcheck accepts.
pub const MAX_GRADCHECK_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Weight of the dataset-level terms in the objective.
    pub global_weight: f64,
    /// Test hook: perturb the analytic gradient of this group.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            tolerance: 1e-4,
            global_weight: 0.5,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub params: usize,
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.relative_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!(
                "{:<22} {:>6} params  rel err {:.3e}  {}\n",
                g.group,
                g.params,
                g.relative_error,
                if g.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

/// A parameter group: read and write a flat vector, and pick the matching
/// slice out of the analytic gradients.
struct Group {
    name: String,
    get: Box<dyn Fn(&Model) -> Vec<f64>>,
    set: Box<dyn Fn(&mut Model, &[f64])>,
    grad: Box<dyn Fn(&super::Gradients) -> Vec<f64>>,
}

fn net_group(name: &str, which: fn(&Model) -> &crate::nn::DenseNet, which_mut: fn(&mut Model) -> &mut crate::nn::DenseNet, g: fn(&super::Gradients) -> &ParamGrads) -> Group {
    Group {
        name: name.to_string(),
        get: Box::new(move |m| which(m).flat_params()),
        set: Box::new(move |m, v| which_mut(m).set_flat_params(v).expect("same size")),
        grad: Box::new(move |gr| g(gr).flatten()),
    }
}

/// Node parameters, sliced as `[lo, hi)` of each node's unconstrained vector.
fn node_group(name: &str, lo: fn(usize) -> usize, hi: fn(usize) -> usize, skip_root: bool) -> Group {
    let first = usize::from(skip_root);
    Group {
        name: name.to_string(),
        get: Box::new(move |m| {
            let j = m.config.latent_dim;
            (first..m.tree.as_ref().unwrap().len())
                .flat_map(|k| m.node_theta(k)[lo(j)..hi(j)].to_vec())
                .collect()
        }),
        set: Box::new(move |m, v| {
            let j = m.config.latent_dim;
            let w = hi(j) - lo(j);
            for (i, k) in (first..m.tree.as_ref().unwrap().len()).enumerate() {
                let mut t = m.node_theta(k);
                t[lo(j)..hi(j)].copy_from_slice(&v[i * w..(i + 1) * w]);
                m.set_node_theta(k, &t);
            }
        }),
        grad: Box::new(move |gr| {
            let j = (gr.nodes[0].len() - 2) / 2;
            gr.nodes[first..].iter().flat_map(|g| g[lo(j)..hi(j)].to_vec()).collect()
        }),
    }
}

fn component_group(name: &str, lo: fn(usize) -> usize, hi: fn(usize) -> usize) -> Group {
    Group {
        name: name.to_string(),
        get: Box::new(move |m| {
            let j = m.config.latent_dim;
            (0..m.config.components)
                .flat_map(|c| m.component_theta(c)[lo(j)..hi(j)].to_vec())
                .collect()
        }),
        set: Box::new(move |m, v| {
            let j = m.config.latent_dim;
            let w = hi(j) - lo(j);
            for c in 0..m.config.components {
                let mut t = m.component_theta(c);
                t[lo(j)..hi(j)].copy_from_slice(&v[c * w..(c + 1) * w]);
                m.set_component_theta(c, &t);
            }
        }),
        grad: Box::new(move |gr| {
            let j = gr.components[0].len() / 2;
            gr.components.iter().flat_map(|g| g[lo(j)..hi(j)].to_vec()).collect()
        }),
    }
}

fn groups_for(model: &Model) -> Vec<Group> {
    let mut g = vec![
        net_group("encoder_z", |m| &m.encoder_z, |m| &mut m.encoder_z, |g| &g.encoder_z),
        net_group("decoder", |m| &m.decoder, |m| &mut m.decoder, |g| &g.decoder),
    ];
    if model.encoder_eta.is_some() {
        g.push(net_group(
            "encoder_eta",
            |m| m.encoder_eta.as_ref().unwrap(),
            |m| m.encoder_eta.as_mut().unwrap(),
            |g| g.encoder_eta.as_ref().unwrap(),
        ));
    }
    if model.tree.is_some() {
        g.push(node_group("node_mu", |_| 0, |j| j, false));
        g.push(node_group("node_log_sigma2", |j| j, |j| 2 * j, false));
        // the root stick is degenerate and carries no parameters
        g.push(node_group("node_log_a", |j| 2 * j, |j| 2 * j + 1, true));
        g.push(node_group("node_log_b", |j| 2 * j + 1, |j| 2 * j + 2, true));
    }
    if model.mixture.is_some() {
        g.push(component_group("component_mu", |_| 0, |j| j));
        g.push(component_group("component_log_sigma2", |j| j, |j| 2 * j));
    }
    g
}

/// Compare analytic and central-difference gradients of the batch
/// objective at the model's current parameters.
pub fn gradcheck(model: &Model, x: &Array2<f64>, noise_seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let c = &model.config;
    if c.data_dim > MAX_GRADCHECK_DIM || c.latent_dim > MAX_GRADCHECK_DIM {
        return Err(Error::invalid(format!(
            "gradcheck needs data and latent dimensions at most {MAX_GRADCHECK_DIM}"
        )));
    }
    let (_, assignments) = model.e_step(x.view())?;
    let mut rng = stream_rng(noise_seed, Stream::Noise, u64::MAX);
    let noise = model.draw_noise(x.nrows(), &mut rng);
    let eval = |m: &Model| -> f64 {
        m.objective(x.view(), &assignments, &noise, opts.global_weight, false, false)
            .map(|(v, _)| v.total())
            .unwrap_or(f64::NAN)
    };
    let (_, grads) = model.objective(x.view(), &assignments, &noise, opts.global_weight, false, true)?;
    let grads = grads.expect("requested");

    let mut report = GradcheckReport { groups: Vec::new() };
    for group in groups_for(model) {
        let theta = (group.get)(model);
        let mut scratch = model.clone();
        let numeric = finite_diff_grad(
            |p| {
                (group.set)(&mut scratch, p);
                eval(&scratch)
            },
            &theta,
            opts.eps,
        )?;
        let mut analytic = (group.grad)(&grads);
        if opts.corrupt.as_deref() == Some(group.name.as_str()) {
            for v in analytic.iter_mut() {
                *v = *v * 1.01 + 1e-3;
            }
        }
        let err = relative_error(&analytic, &numeric);
        report.groups.push(GroupReport {
            passed: err <= opts.tolerance,
            group: group.name,
            params: theta.len(),
            relative_error: err,
        });
    }
    Ok(report)
}

/// Desk-scale gradcheck setup: `D = 8, J = 2, L = 2, N = 32`, with a
/// two-path tree (or three flat components) and randomized prior
/// parameters so no gradient vanishes by symmetry.
pub fn desk_fixture(variant: Variant, seed: u64) -> Result<(Model, Array2<f64>)> {
    let mut c = ModelConfig::new(variant, 8, 2, 2);
    c.hidden = vec![10];
    c.components = 3;
    c.mc_samples = 2;
    c.seed = seed;
    let mut m = Model::new(&c)?;
    let mut rng: ChaCha8Rng = stream_rng(seed, Stream::Structure, u64::MAX);
    if let Some(tree) = m.tree.as_mut() {
        let mass = tree
            .full_paths()
            .into_iter()
            .chain(tree.inner_paths())
            .map(|p| {
                let w = if p == PathId(vec![1]) { 1.0 } else { 0.0 };
                (p, w)
            })
            .collect();
        grow(tree, &mass, &mut rng)?;
        for k in 0..tree.len() {
            let p = &mut tree.node_mut(k).params;
            for v in p.mu.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            for v in p.sigma2.iter_mut() {
                *v = rng.random_range(0.5..2.0);
            }
            p.a = rng.random_range(0.5..3.0);
            p.b = rng.random_range(0.5..3.0);
        }
    }
    if let Some(mix) = m.mixture.as_mut() {
        for cidx in 0..mix.components() {
            for v in mix.mu[cidx].iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            for v in mix.sigma2[cidx].iter_mut() {
                *v = rng.random_range(0.5..2.0);
            }
        }
        mix.kappa = vec![0.5, 0.3, 0.2];
    }
    if variant == Variant::Hcrl1 {
        m.global_alpha = vec![rng.random_range(1.0..20.0), rng.random_range(1.0..20.0)];
    }
    let x = Array2::from_shape_fn((32, 8), |_| rng.random_range(-1.0..1.0));
    Ok((m, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for variant in [Variant::Hcrl1, Variant::Hcrl2, Variant::Vade, Variant::Vae] {
            let (m, x) = desk_fixture(variant, 11).unwrap();
            let r = gradcheck(&m, &x, 1, &GradcheckOptions::default()).unwrap();
            assert!(r.passed(), "{variant:?}\n{}", r.to_text());
        }
    }

    #[test]
    fn corrupted_group_fails() {
        let (m, x) = desk_fixture(Variant::Hcrl2, 2).unwrap();
        let opts = GradcheckOptions {
            corrupt: Some("node_log_a".into()),
            ..GradcheckOptions::default()
        };
        let r = gradcheck(&m, &x, 1, &opts).unwrap();
        assert!(!r.passed());
        assert!(r.groups.iter().filter(|g| !g.passed).all(|g| g.group == "node_log_a"));
    }

    #[test]
    fn large_dimensions_are_rejected() {
        let m = Model::new(&ModelConfig::new(Variant::Vae, 9, 2, 1)).unwrap();
        assert!(gradcheck(&m, &Array2::zeros((2, 9)), 0, &GradcheckOptions::default()).is_err());
    }
}
