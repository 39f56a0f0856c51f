use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, Variant};
use crate::error::{ensure_finite, Error, Result};
use crate::hierarchy::{Hierarchy, NodeMoments};
use crate::nn::{adam_update, Activation, AdamConfig, AdamState, DenseNet, ParamGrads};
use crate::special::trigamma;
use crate::variational::{
    beta_neg_kl_grad_log, beta_term, coordinate_ascent, cross_table, dirichlet_prior_entropy,
    dirichlet_terms_grad, expected_log_eta, flat_instance_terms, gaussian_entropy,
    instance_terms, laplace_alpha, laplace_alpha_backward, ElboBreakdown, FlatMixture, FlatState,
    InstanceState, TreeView,
};

/// Independent random streams, so changing one consumer never shifts
/// another's draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    EtaInit = 2,
    Shuffle = 3,
    Noise = 4,
    Structure = 5,
    EvalNoise = 6,
    Pretrain = 7,
    MixtureInit = 8,
    Nll = 9,
}

/// Deterministic generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Fill a vector with standard normal draws.
pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Variational factors held fixed while network and node parameters move.
#[derive(Debug, Clone, PartialEq)]
pub enum Assignments {
    /// Per instance `(ω, q(ζ))`.
    Tree { omega: Vec<Vec<f64>>, q_path: Vec<Vec<f64>> },
    /// Per instance `q(c|x)`.
    Flat { gamma: Vec<Vec<f64>> },
    /// Nothing to assign: standard normal prior.
    None,
}

/// Encoder outputs for a batch.
pub struct Encoded {
    pub mu_z: Array2<f64>,
    pub logvar_z: Array2<f64>,
    /// Per-instance Dirichlet parameters (hierarchical variants).
    pub alpha_tilde: Vec<Vec<f64>>,
    pub(crate) tape_z: crate::nn::Tape,
    pub(crate) eta: Option<(Array2<f64>, Array2<f64>, crate::nn::Tape)>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.mu_z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mu(&self, n: usize) -> Vec<f64> {
        self.mu_z.row(n).to_vec()
    }

    pub fn sigma2(&self, n: usize) -> Vec<f64> {
        self.logvar_z.row(n).iter().map(|v| v.exp()).collect()
    }
}

/// Gradients of the batch objective, in the ascent direction.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub encoder_z: ParamGrads,
    pub encoder_eta: Option<ParamGrads>,
    pub decoder: ParamGrads,
    /// Per node `[μ (J), log σ² (J), log a, log b]`.
    pub nodes: Vec<Vec<f64>>,
    /// Per component `[μ (J), log σ² (J)]`.
    pub components: Vec<Vec<f64>>,
}

/// Encoders, decoder and latent prior of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) tree: Option<Hierarchy>,
    pub(crate) mixture: Option<FlatMixture>,
    pub(crate) mixture_moments: Vec<NodeMoments>,
    pub(crate) encoder_z: DenseNet,
    pub(crate) encoder_eta: Option<DenseNet>,
    pub(crate) decoder: DenseNet,
    /// Shared Dirichlet posterior of the single-proportion variant.
    pub(crate) global_alpha: Vec<f64>,
    pub(crate) adam_z: AdamState,
    pub(crate) adam_eta: Option<AdamState>,
    pub(crate) adam_dec: AdamState,
    pub(crate) epoch: usize,
    pub(crate) lock: usize,
    /// Whether the warm-up phase already ran.
    pub(crate) pretrained: bool,
}

impl Model {
    /// Freshly initialized model: seeded Glorot networks, a single chain of
    /// `L` Gaussians or a flat mixture at the origin.
    pub fn new(config: &ModelConfig) -> Result<Model> {
        let config = config.resolved()?;
        let (d, j, l) = (config.data_dim, config.latent_dim, config.depth);
        let mut rng = stream_rng(config.seed, Stream::Init, 0);
        let enc_sizes: Vec<usize> = std::iter::once(d)
            .chain(config.hidden.iter().copied())
            .chain(std::iter::once(2 * j))
            .collect();
        let dec_sizes: Vec<usize> = std::iter::once(j)
            .chain(config.hidden.iter().rev().copied())
            .chain(std::iter::once(config.observation.output_dim(d)))
            .collect();
        let encoder_z = DenseNet::mlp(&enc_sizes, Activation::Tanh, Activation::Identity, &mut rng)?;
        let decoder = DenseNet::mlp(&dec_sizes, Activation::Tanh, Activation::Identity, &mut rng)?;
        let encoder_eta = if config.variant == Variant::Hcrl2 {
            let mut eta_rng = stream_rng(config.seed, Stream::EtaInit, 0);
            let mut sizes = enc_sizes.clone();
            *sizes.last_mut().unwrap() = 2 * l;
            Some(DenseNet::mlp(&sizes, Activation::Tanh, Activation::Identity, &mut eta_rng)?)
        } else {
            None
        };
        let tree = if config.variant.is_hierarchical() {
            Some(Hierarchy::chain(l, j, config.gamma)?)
        } else {
            None
        };
        let mixture = match config.variant {
            Variant::Vade => {
                let k = config.components;
                Some(FlatMixture {
                    kappa: vec![1.0 / k as f64; k],
                    mu: vec![vec![0.0; j]; k],
                    sigma2: vec![vec![1.0; j]; k],
                })
            }
            _ => None,
        };
        let global_alpha = if config.variant == Variant::Hcrl1 {
            config.alpha()
        } else {
            Vec::new()
        };
        let adam = AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        };
        Ok(Model {
            adam_z: AdamState::new(&encoder_z, adam),
            adam_eta: encoder_eta.as_ref().map(|n| AdamState::new(n, adam)),
            adam_dec: AdamState::new(&decoder, adam),
            mixture_moments: vec![NodeMoments::default(); config.components],
            config,
            tree,
            mixture,
            encoder_z,
            encoder_eta,
            decoder,
            global_alpha,
            epoch: 0,
            lock: 0,
            pretrained: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tree(&self) -> Option<&Hierarchy> {
        self.tree.as_ref()
    }

    pub fn tree_mut(&mut self) -> Option<&mut Hierarchy> {
        self.tree.as_mut()
    }

    pub fn mixture(&self) -> Option<&FlatMixture> {
        self.mixture.as_ref()
    }

    pub fn mixture_mut(&mut self) -> Option<&mut FlatMixture> {
        self.mixture.as_mut()
    }

    pub fn encoder_z(&self) -> &DenseNet {
        &self.encoder_z
    }

    pub fn encoder_eta(&self) -> Option<&DenseNet> {
        self.encoder_eta.as_ref()
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    pub fn encoder_z_mut(&mut self) -> &mut DenseNet {
        &mut self.encoder_z
    }

    pub fn encoder_eta_mut(&mut self) -> Option<&mut DenseNet> {
        self.encoder_eta.as_mut()
    }

    pub fn decoder_mut(&mut self) -> &mut DenseNet {
        &mut self.decoder
    }

    pub fn global_alpha(&self) -> &[f64] {
        &self.global_alpha
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn lock_counter(&self) -> usize {
        self.lock
    }

    /// Copy encoder-z and decoder weights (and their optimizer state) from
    /// another model with the same architecture, e.g. a shared warm-up.
    pub fn adopt_autoencoder(&mut self, other: &Model) -> Result<()> {
        if other.encoder_z.flat_params().len() != self.encoder_z.flat_params().len()
            || other.decoder.flat_params().len() != self.decoder.flat_params().len()
        {
            return Err(Error::invalid("autoencoder architectures differ"));
        }
        self.encoder_z = other.encoder_z.clone();
        self.decoder = other.decoder.clone();
        self.adam_z = other.adam_z.clone();
        self.adam_dec = other.adam_dec.clone();
        Ok(())
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.data_dim {
            return Err(Error::DimensionMismatch {
                context: "model input",
                expected: self.config.data_dim,
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    /// Run the encoders on a batch.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Encoded> {
        self.check_input(x)?;
        let j = self.config.latent_dim;
        let tape_z = self.encoder_z.forward_batch(x)?;
        let out = tape_z.output();
        let mu_z = out.slice(s![.., ..j]).to_owned();
        let logvar_z = out.slice(s![.., j..]).to_owned();
        let (alpha_tilde, eta) = match (&self.encoder_eta, self.config.variant) {
            (Some(net), _) => {
                let l = self.config.depth;
                let tape = net.forward_batch(x)?;
                let o = tape.output();
                let mu = o.slice(s![.., ..l]).to_owned();
                let lv = o.slice(s![.., l..]).to_owned();
                let alphas = (0..x.nrows())
                    .map(|n| {
                        let s2: Vec<f64> = lv.row(n).iter().map(|v| v.exp()).collect();
                        laplace_alpha(mu.row(n).as_slice().unwrap(), &s2)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (alphas, Some((mu, lv, tape)))
            }
            (None, Variant::Hcrl1) => (vec![self.global_alpha.clone(); x.nrows()], None),
            _ => (Vec::new(), None),
        };
        Ok(Encoded {
            mu_z,
            logvar_z,
            alpha_tilde,
            tape_z,
            eta,
        })
    }

    /// Decoder outputs for a batch of latent vectors.
    pub fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.config.latent_dim {
            return Err(Error::DimensionMismatch {
                context: "decoder input",
                expected: self.config.latent_dim,
                actual: z.ncols(),
            });
        }
        self.decoder.predict_batch(z)
    }

    /// Closed-form updates of the assignment factors for a batch: the
    /// alternating path and level updates from uniform `ω`, or the flat
    /// mixture responsibilities at `μ̃`.
    pub fn assign(&self, enc: &Encoded) -> Result<Assignments> {
        let n = enc.len();
        match (&self.tree, &self.mixture) {
            (Some(tree), _) => {
                let view = TreeView::new(tree);
                let mut omega = Vec::with_capacity(n);
                let mut q_path = Vec::with_capacity(n);
                for i in 0..n {
                    let g = cross_table(tree, &enc.mu(i), &enc.sigma2(i));
                    let e = expected_log_eta(&enc.alpha_tilde[i]);
                    let (w, q) = coordinate_ascent(&view, &g, &e, self.config.e_step_sweeps)?;
                    omega.push(w);
                    q_path.push(q);
                }
                Ok(Assignments::Tree { omega, q_path })
            }
            (None, Some(mix)) => Ok(Assignments::Flat {
                gamma: (0..n).map(|i| mix.responsibilities(&enc.mu(i))).collect(),
            }),
            (None, None) => Ok(Assignments::None),
        }
    }

    /// E-step: encode the batch and return its full per-instance states.
    pub fn e_step(&self, x: ArrayView2<f64>) -> Result<(Encoded, Assignments)> {
        let enc = self.encode(x)?;
        let a = self.assign(&enc)?;
        Ok((enc, a))
    }

    /// Per-instance variational states of the hierarchical variants.
    pub fn instance_states(&self, enc: &Encoded, a: &Assignments) -> Vec<InstanceState> {
        match a {
            Assignments::Tree { omega, q_path } => (0..enc.len())
                .map(|i| InstanceState {
                    mu_z: enc.mu(i),
                    sigma2_z: enc.sigma2(i),
                    alpha_tilde: enc.alpha_tilde[i].clone(),
                    omega: omega[i].clone(),
                    q_path: q_path[i].clone(),
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Per-instance states of the flat mixture variant.
    pub fn flat_states(&self, enc: &Encoded, a: &Assignments) -> Vec<FlatState> {
        match a {
            Assignments::Flat { gamma } => (0..enc.len())
                .map(|i| FlatState {
                    mu_z: enc.mu(i),
                    sigma2_z: enc.sigma2(i),
                    gamma: gamma[i].clone(),
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Noise for a batch: `n · R · J` standard normal draws.
    pub fn draw_noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        standard_normal(rng, n * self.config.mc_samples * self.config.latent_dim)
    }

    /// Batch objective `Σ_n ℓ_n + w · T_global` with the assignment factors
    /// held fixed, and optionally its gradient with respect to every
    /// trainable parameter. `standard_prior` swaps the latent prior for
    /// N(0, I), as in warm-up training.
    pub fn objective(
        &self,
        x: ArrayView2<f64>,
        assignments: &Assignments,
        noise: &[f64],
        global_weight: f64,
        standard_prior: bool,
        want_grad: bool,
    ) -> Result<(ElboBreakdown, Option<Gradients>)> {
        let enc = self.encode(x)?;
        self.objective_encoded(x, &enc, assignments, noise, global_weight, standard_prior, want_grad)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn objective_encoded(
        &self,
        x: ArrayView2<f64>,
        enc: &Encoded,
        assignments: &Assignments,
        noise: &[f64],
        global_weight: f64,
        standard_prior: bool,
        want_grad: bool,
    ) -> Result<(ElboBreakdown, Option<Gradients>)> {
        let cfg = &self.config;
        let (n, j, r) = (x.nrows(), cfg.latent_dim, cfg.mc_samples);
        if noise.len() != n * r * j {
            return Err(Error::DimensionMismatch {
                context: "reparameterization noise",
                expected: n * r * j,
                actual: noise.len(),
            });
        }
        let use_prior = if standard_prior { &Assignments::None } else { assignments };
        match (use_prior, &self.tree, &self.mixture) {
            (Assignments::Tree { .. }, Some(_), _) | (Assignments::Flat { .. }, None, Some(_)) | (Assignments::None, _, _) => {}
            _ => return Err(Error::invalid("assignments do not match the model variant")),
        }

        // reparameterized samples, row n·R + r
        let mut z = Array2::<f64>::zeros((n * r, j));
        let mut sd = Array2::<f64>::zeros((n, j));
        for i in 0..n {
            for jj in 0..j {
                sd[[i, jj]] = (0.5 * enc.logvar_z[[i, jj]]).exp();
            }
            for s in 0..r {
                for jj in 0..j {
                    z[[i * r + s, jj]] = enc.mu_z[[i, jj]] + sd[[i, jj]] * noise[(i * r + s) * j + jj];
                }
            }
        }
        let tape_dec = self.decoder.forward_batch(z.view())?;
        let dec_out = tape_dec.output();
        let obs = cfg.observation;

        let mut total = ElboBreakdown::default();
        let mut d_dec = if want_grad { Array2::zeros(dec_out.dim()) } else { Array2::zeros((0, 0)) };
        let mut d_mu = Array2::<f64>::zeros((n, j));
        let mut d_lv = Array2::<f64>::zeros((n, j));
        let mut node_grads: Vec<Vec<f64>> = match &self.tree {
            Some(t) if want_grad => vec![vec![0.0; 2 * j + 2]; t.len()],
            _ => Vec::new(),
        };
        let mut comp_grads: Vec<Vec<f64>> = match &self.mixture {
            Some(m) if want_grad => vec![vec![0.0; 2 * j]; m.components()],
            _ => Vec::new(),
        };
        let l = cfg.depth;
        let alpha = cfg.alpha();
        let mut d_eta = if want_grad && self.encoder_eta.is_some() && !standard_prior {
            Array2::zeros((n, 2 * l))
        } else {
            Array2::zeros((0, 0))
        };
        let view = self.tree.as_ref().map(TreeView::new);
        // coefficients of E[log v_k] and E[log(1 − v_k)] accumulated over the batch
        let mut stick_v = vec![0.0; view.as_ref().map_or(0, |v| v.num_nodes)];
        let mut stick_1mv = stick_v.clone();

        let mut grad_row = vec![0.0; dec_out.ncols()];
        for i in 0..n {
            let xi = x.row(i);
            let xi = xi.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| xi.to_vec());
            let mu = enc.mu(i);
            let s2 = enc.sigma2(i);
            let mut rec = 0.0;
            for s in 0..r {
                let row = dec_out.row(i * r + s);
                let row = row.as_slice().expect("standard layout");
                rec += obs.log_likelihood(&xi, row);
                if want_grad {
                    obs.log_likelihood_grad(&xi, row, &mut grad_row);
                    for (k, g) in grad_row.iter().enumerate() {
                        d_dec[[i * r + s, k]] = g / r as f64;
                    }
                }
            }
            let mut terms = match (use_prior, &self.tree, &self.mixture) {
                (Assignments::Tree { omega, q_path }, Some(tree), _) => {
                    let view = view.as_ref().unwrap();
                    let g = cross_table(tree, &mu, &s2);
                    let st = InstanceState {
                        mu_z: mu.clone(),
                        sigma2_z: s2.clone(),
                        alpha_tilde: enc.alpha_tilde[i].clone(),
                        omega: omega[i].clone(),
                        q_path: q_path[i].clone(),
                    };
                    if want_grad {
                        let mass = path_node_mass(view, &st.q_path);
                        for (k, node) in tree.nodes().iter().enumerate() {
                            let rk = mass[k] * st.omega[node.level() - 1];
                            let p = &node.params;
                            let ng = &mut node_grads[k];
                            for jj in 0..j {
                                let diff = mu[jj] - p.mu[jj];
                                let inv = 1.0 / p.sigma2[jj];
                                d_mu[[i, jj]] -= rk * diff * inv;
                                d_lv[[i, jj]] -= rk * 0.5 * inv * s2[jj];
                                ng[jj] += rk * diff * inv;
                                ng[j + jj] += rk * (-0.5 + 0.5 * (diff * diff + s2[jj]) * inv);
                            }
                            if k > 0 {
                                stick_v[k] += mass[k];
                                let parent = node.parent().unwrap();
                                let sibs = tree.node(parent).children();
                                let pos = sibs.iter().position(|&c| c == k).unwrap();
                                stick_1mv[k] += sibs[pos + 1..].iter().map(|&c| mass[c]).sum::<f64>();
                            }
                        }
                        if let Some((mu_eta, lv_eta, _)) = &enc.eta {
                            let up = dirichlet_terms_grad(&alpha, &st.alpha_tilde, &st.omega);
                            let me = mu_eta.row(i).to_vec();
                            let s2e: Vec<f64> = lv_eta.row(i).iter().map(|v| v.exp()).collect();
                            let (dm, dl) = laplace_alpha_backward(&me, &s2e, &up);
                            for ll in 0..l {
                                d_eta[[i, ll]] = dm[ll];
                                d_eta[[i, l + ll]] = dl[ll];
                            }
                        }
                    }
                    instance_terms(view, &g, &alpha, &st, cfg.variant == Variant::Hcrl2)
                }
                (Assignments::Flat { gamma }, None, Some(mix)) => {
                    let st = FlatState {
                        mu_z: mu.clone(),
                        sigma2_z: s2.clone(),
                        gamma: gamma[i].clone(),
                    };
                    if want_grad {
                        for c in 0..mix.components() {
                            let rc = st.gamma[c];
                            let cg = &mut comp_grads[c];
                            for jj in 0..j {
                                let diff = mu[jj] - mix.mu[c][jj];
                                let inv = 1.0 / mix.sigma2[c][jj];
                                d_mu[[i, jj]] -= rc * diff * inv;
                                d_lv[[i, jj]] -= rc * 0.5 * inv * s2[jj];
                                cg[jj] += rc * diff * inv;
                                cg[j + jj] += rc * (-0.5 + 0.5 * (diff * diff + s2[jj]) * inv);
                            }
                        }
                    }
                    flat_instance_terms(mix, &st)
                }
                _ => {
                    if want_grad {
                        for jj in 0..j {
                            d_mu[[i, jj]] -= mu[jj];
                            d_lv[[i, jj]] -= 0.5 * s2[jj];
                        }
                    }
                    let mut t = ElboBreakdown::default();
                    t.gaussian = crate::variational::gaussian_cross_raw(&mu, &s2, &vec![0.0; j], &vec![1.0; j]);
                    t.z_entropy = gaussian_entropy(&s2);
                    t
                }
            };
            if want_grad {
                for jj in 0..j {
                    d_lv[[i, jj]] += 0.5;
                }
            }
            terms.reconstruction = rec / r as f64;
            total.add(&terms);
        }
        if !standard_prior {
            total.add(&self.global_terms()?.scaled(global_weight));
        }
        if !total.total().is_finite() {
            return Err(Error::numeric(format!("non-finite objective: {total:?}")));
        }
        if !want_grad {
            return Ok((total, None));
        }

        let (dec_grads, dz) = self.decoder.backward_batch(&tape_dec, d_dec.view())?;
        for i in 0..n {
            for s in 0..r {
                for jj in 0..j {
                    let g = dz[[i * r + s, jj]];
                    d_mu[[i, jj]] += g;
                    d_lv[[i, jj]] += g * 0.5 * sd[[i, jj]] * noise[(i * r + s) * j + jj];
                }
            }
        }
        let mut d_enc = Array2::<f64>::zeros((n, 2 * j));
        d_enc.slice_mut(s![.., ..j]).assign(&d_mu);
        d_enc.slice_mut(s![.., j..]).assign(&d_lv);
        let (enc_grads, _) = self.encoder_z.backward_batch(&enc.tape_z, d_enc.view())?;
        let eta_grads = match (&self.encoder_eta, &enc.eta) {
            (Some(net), Some((_, _, tape))) if d_eta.nrows() == n => Some(net.backward_batch(tape, d_eta.view())?.0),
            (Some(net), _) => Some(ParamGrads::zeros_like(net)),
            _ => None,
        };
        if let (Some(tree), false) = (&self.tree, standard_prior) {
            let gamma = tree.gamma();
            for (k, node) in tree.nodes().iter().enumerate().skip(1) {
                let (a, b) = (node.params.a, node.params.b);
                let (ta, tb, tab) = (trigamma(a), trigamma(b), trigamma(a + b));
                let (cv, c1) = (stick_v[k], stick_1mv[k]);
                let (ba, bb) = beta_neg_kl_grad_log(a, b, gamma);
                let ng = &mut node_grads[k];
                ng[2 * j] += a * (cv * (ta - tab) - c1 * tab) + global_weight * ba;
                ng[2 * j + 1] += b * (-cv * tab + c1 * (tb - tab)) + global_weight * bb;
            }
        } else {
            node_grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        }
        if standard_prior {
            comp_grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        }
        Ok((
            total,
            Some(Gradients {
                encoder_z: enc_grads,
                encoder_eta: eta_grads,
                decoder: dec_grads,
                nodes: node_grads,
                components: comp_grads,
            }),
        ))
    }

    /// Terms counted once per dataset rather than per instance: the Beta
    /// sticks and, with a shared level proportion, its Dirichlet terms.
    pub fn global_terms(&self) -> Result<ElboBreakdown> {
        let mut t = ElboBreakdown::default();
        if let Some(tree) = &self.tree {
            t.beta = beta_term(tree)?;
            if self.config.variant == Variant::Hcrl1 {
                t.eta = dirichlet_prior_entropy(&self.config.alpha(), &self.global_alpha);
            }
        }
        Ok(t)
    }

    /// Per-instance reconstruction error at the posterior mean: squared
    /// error of the mean head (gaussian) or cross-entropy (bernoulli).
    pub fn reconstruction_errors(&self, x: ArrayView2<f64>, mu_z: ArrayView2<f64>) -> Result<Vec<f64>> {
        let out = self.decode(mu_z)?;
        let d = self.config.data_dim;
        Ok(x
            .rows()
            .into_iter()
            .zip(out.rows())
            .map(|(xr, o)| match self.config.observation {
                crate::variational::Observation::Gaussian => {
                    xr.iter().zip(o.iter().take(d)).map(|(a, b)| (a - b) * (a - b)).sum()
                }
                crate::variational::Observation::Bernoulli => xr
                    .iter()
                    .zip(o.iter())
                    .map(|(&xv, &t)| crate::variational::softplus(t) - xv * t)
                    .sum(),
            })
            .collect())
    }

    /// Apply one optimizer step that ascends `scale · grads`. With
    /// `standard_prior` only the autoencoder moves.
    pub fn apply_gradients(&mut self, grads: &Gradients, scale: f64, standard_prior: bool) -> Result<()> {
        let descend = |g: &ParamGrads| {
            let mut g = g.clone();
            g.scale(-scale);
            g
        };
        self.encoder_z.adam_step(&descend(&grads.encoder_z), &mut self.adam_z)?;
        self.decoder.adam_step(&descend(&grads.decoder), &mut self.adam_dec)?;
        if standard_prior {
            return Ok(());
        }
        if let (Some(net), Some(state), Some(g)) = (&mut self.encoder_eta, &mut self.adam_eta, &grads.encoder_eta) {
            net.adam_step(&descend(g), state)?;
        }
        let hp = AdamConfig {
            lr: self.config.node_learning_rate,
            ..AdamConfig::default()
        };
        let j = self.config.latent_dim;
        if let Some(tree) = &mut self.tree {
            for (k, g) in grads.nodes.iter().enumerate() {
                ensure_finite(g, "node gradient")?;
                let node = tree.node_mut(k);
                let p = &mut node.params;
                let mut theta: Vec<f64> = p.mu.clone();
                theta.extend(p.sigma2.iter().map(|v| v.ln()));
                theta.push(p.a.ln());
                theta.push(p.b.ln());
                let desc: Vec<f64> = g.iter().map(|v| -scale * v).collect();
                let mom = &mut node.moments;
                if mom.m.len() != theta.len() {
                    *mom = NodeMoments {
                        step: 0,
                        m: vec![0.0; theta.len()],
                        v: vec![0.0; theta.len()],
                    };
                }
                mom.step += 1;
                adam_update(&mut theta, &desc, &mut mom.m, &mut mom.v, mom.step, &hp);
                p.mu.copy_from_slice(&theta[..j]);
                for jj in 0..j {
                    p.sigma2[jj] = theta[j + jj].exp();
                }
                p.a = theta[2 * j].exp();
                p.b = theta[2 * j + 1].exp();
                p.validate()
                    .map_err(|e| Error::numeric(format!("node parameters left the valid range: {e}")))?;
            }
        }
        if let Some(mix) = &mut self.mixture {
            for (c, g) in grads.components.iter().enumerate() {
                ensure_finite(g, "component gradient")?;
                let mut theta: Vec<f64> = mix.mu[c].clone();
                theta.extend(mix.sigma2[c].iter().map(|v| v.ln()));
                let desc: Vec<f64> = g.iter().map(|v| -scale * v).collect();
                let mom = &mut self.mixture_moments[c];
                if mom.m.len() != theta.len() {
                    *mom = NodeMoments {
                        step: 0,
                        m: vec![0.0; theta.len()],
                        v: vec![0.0; theta.len()],
                    };
                }
                mom.step += 1;
                adam_update(&mut theta, &desc, &mut mom.m, &mut mom.v, mom.step, &hp);
                mix.mu[c].copy_from_slice(&theta[..j]);
                for jj in 0..j {
                    mix.sigma2[c][jj] = theta[j + jj].exp();
                }
            }
            mix.validate()?;
        }
        Ok(())
    }

    /// One minibatch step: E-step, fresh noise, gradient ascent on
    /// `(1/B)[Σ ℓ_n + (B/N) T_global]`.
    pub fn train_step(
        &mut self,
        x: ArrayView2<f64>,
        n_total: usize,
        rng: &mut ChaCha8Rng,
        standard_prior: bool,
    ) -> Result<ElboBreakdown> {
        let b = x.nrows();
        let enc = self.encode(x)?;
        let a = if standard_prior { Assignments::None } else { self.assign(&enc)? };
        let noise = self.draw_noise(b, rng);
        let w = b as f64 / n_total as f64;
        let (value, grads) = self.objective_encoded(x, &enc, &a, &noise, w, standard_prior, true)?;
        self.apply_gradients(&grads.expect("requested"), 1.0 / b as f64, standard_prior)?;
        Ok(value)
    }

    /// `log p(z)` under the model prior. Tree variants use expected stick
    /// weights renormalized over existing full paths and the expected level
    /// proportion.
    pub fn log_prior_density(&self, z: &[f64]) -> f64 {
        use crate::special::log_sum_exp;
        let ln_normal = |mu: &[f64], s2: &[f64]| -> f64 {
            z.iter()
                .zip(mu)
                .zip(s2)
                .map(|((zj, m), s)| -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (zj - m) * (zj - m) / s))
                .sum()
        };
        match (&self.tree, &self.mixture) {
            (Some(tree), _) => {
                let weights = self.path_weights(tree);
                let eta = self.level_mean();
                let mut terms = Vec::new();
                for (p, w) in tree.full_path_nodes().iter().zip(&weights) {
                    for (l, &k) in p.iter().enumerate() {
                        let prm = &tree.node(k).params;
                        terms.push(w.ln() + eta[l].ln() + ln_normal(&prm.mu, &prm.sigma2));
                    }
                }
                log_sum_exp(&terms)
            }
            (None, Some(mix)) => {
                let terms: Vec<f64> = (0..mix.components())
                    .map(|c| mix.kappa[c].ln() + ln_normal(&mix.mu[c], &mix.sigma2[c]))
                    .collect();
                log_sum_exp(&terms)
            }
            _ => ln_normal(&vec![0.0; z.len()], &vec![1.0; z.len()]),
        }
    }

    /// Expected level proportion under the prior (per-instance variant) or
    /// the shared posterior (single-proportion variant).
    pub fn level_mean(&self) -> Vec<f64> {
        let a = if self.config.variant == Variant::Hcrl1 {
            self.global_alpha.clone()
        } else {
            self.config.alpha()
        };
        let s: f64 = a.iter().sum();
        a.iter().map(|v| v / s).collect()
    }

    /// Plug-in path probabilities `Π E[v] E[1 − v]` over the full paths,
    /// renormalized to sum to one.
    pub fn path_weights(&self, tree: &Hierarchy) -> Vec<f64> {
        let ev = |k: usize| {
            let p = &tree.node(k).params;
            p.a / (p.a + p.b)
        };
        let mut w: Vec<f64> = tree
            .full_path_nodes()
            .iter()
            .map(|p| {
                p.iter()
                    .skip(1)
                    .map(|&k| ev(k) * tree.left_siblings(k).iter().map(|&s| 1.0 - ev(s)).product::<f64>())
                    .product()
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    }

    /// Closed-form update of the shared Dirichlet posterior from per-instance
    /// level posteriors: `α̃ = α + Σ_n ω_n`.
    pub fn update_global_alpha(&mut self, omega_sum: &[f64]) {
        if self.config.variant == Variant::Hcrl1 {
            self.global_alpha = self.config.alpha().iter().zip(omega_sum).map(|(a, w)| a + w).collect();
        }
    }

    /// Closed-form update of the flat mixture weights: mean responsibility.
    pub fn update_kappa(&mut self, gamma_sum: &[f64], n: usize) {
        if let Some(mix) = &mut self.mixture {
            let floor = 1e-10;
            let mut k: Vec<f64> = gamma_sum.iter().map(|g| (g / n as f64).max(floor)).collect();
            let s: f64 = k.iter().sum();
            k.iter_mut().for_each(|v| *v /= s);
            mix.kappa = k;
        }
    }

    /// Flat parameter vector and accessor helpers for gradient checking.
    pub(crate) fn node_theta(&self, k: usize) -> Vec<f64> {
        let p = &self.tree.as_ref().unwrap().node(k).params;
        let mut t = p.mu.clone();
        t.extend(p.sigma2.iter().map(|v| v.ln()));
        t.push(p.a.ln());
        t.push(p.b.ln());
        t
    }

    pub(crate) fn set_node_theta(&mut self, k: usize, theta: &[f64]) {
        let j = self.config.latent_dim;
        let p = &mut self.tree.as_mut().unwrap().node_mut(k).params;
        p.mu.copy_from_slice(&theta[..j]);
        for jj in 0..j {
            p.sigma2[jj] = theta[j + jj].exp();
        }
        p.a = theta[2 * j].exp();
        p.b = theta[2 * j + 1].exp();
    }

    pub(crate) fn component_theta(&self, c: usize) -> Vec<f64> {
        let m = self.mixture.as_ref().unwrap();
        let mut t = m.mu[c].clone();
        t.extend(m.sigma2[c].iter().map(|v| v.ln()));
        t
    }

    pub(crate) fn set_component_theta(&mut self, c: usize, theta: &[f64]) {
        let j = self.config.latent_dim;
        let m = self.mixture.as_mut().unwrap();
        m.mu[c].copy_from_slice(&theta[..j]);
        for jj in 0..j {
            m.sigma2[c][jj] = theta[j + jj].exp();
        }
    }
}

/// Per node, the posterior mass of the full paths through it.
pub(crate) fn path_node_mass(view: &TreeView, q: &[f64]) -> Vec<f64> {
    let mut mass = vec![0.0; view.num_nodes];
    for (p, &w) in view.paths.iter().zip(q) {
        for &k in p {
            mass[k] += w;
        }
    }
    mass
}

/// Rows of `x` selected by `idx`.
pub fn select_rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variational::{elbo_hcrl, elbo_vade, elbo_vae, Observation};

    fn tiny(variant: Variant, depth: usize) -> ModelConfig {
        let mut c = ModelConfig::new(variant, 5, 2, depth);
        c.hidden = vec![4];
        c.components = 3;
        c.mc_samples = 2;
        c.seed = 7;
        c
    }

    fn data(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, Stream::Init, 99);
        Array2::from_shape_fn((n, d), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn zero_encoder_gives_standard_posterior() {
        let mut m = Model::new(&tiny(Variant::Hcrl2, 2)).unwrap();
        let z = DenseNet::zeros(&[5, 4, 4], Activation::Tanh, Activation::Identity).unwrap();
        m.encoder_z = z;
        let enc = m.encode(data(3, 5, 1).view()).unwrap();
        assert!(enc.mu_z.iter().all(|&v| v == 0.0));
        assert!(enc.sigma2(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn global_proportion_is_shared() {
        let m = Model::new(&tiny(Variant::Hcrl1, 3)).unwrap();
        let enc = m.encode(data(4, 5, 2).view()).unwrap();
        assert!(enc.alpha_tilde.iter().all(|a| a == &enc.alpha_tilde[0]));
    }

    #[test]
    fn encoder_matches_standalone_forward() {
        let m = Model::new(&tiny(Variant::Hcrl2, 2)).unwrap();
        let x = data(2, 5, 3);
        let enc = m.encode(x.view()).unwrap();
        let (out, _) = m.encoder_z().forward(x.row(1).as_slice().unwrap()).unwrap();
        assert_eq!(enc.mu(1), out[..2].to_vec());
        let (eta, _) = m.encoder_eta().unwrap().forward(x.row(1).as_slice().unwrap()).unwrap();
        let s2: Vec<f64> = eta[2..].iter().map(|v| v.exp()).collect();
        assert_eq!(enc.alpha_tilde[1], laplace_alpha(&eta[..2], &s2).unwrap());
    }

    #[test]
    fn zero_decoder_outputs() {
        let mut m = Model::new(&tiny(Variant::Vae, 1)).unwrap();
        m.decoder = DenseNet::zeros(&[2, 4, 10], Activation::Tanh, Activation::Identity).unwrap();
        let out = m.decode(Array2::from_elem((1, 2), 0.7).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let mut zero_resid = out.row(0).to_vec();
        zero_resid[..5].copy_from_slice(&x);
        let ll = Observation::Gaussian.log_likelihood(&x, &zero_resid);
        assert!((ll + 2.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_path_assigns_everything_to_it() {
        let m = Model::new(&tiny(Variant::Hcrl2, 3)).unwrap();
        let (_, a) = m.e_step(data(4, 5, 4).view()).unwrap();
        match a {
            Assignments::Tree { q_path, omega } => {
                assert!(q_path.iter().all(|q| q == &vec![1.0]));
                assert!(omega.iter().all(|w| (w.iter().sum::<f64>() - 1.0).abs() < 1e-12));
            }
            _ => panic!("tree assignments expected"),
        }
    }

    #[test]
    fn objective_matches_reference_elbo() {
        let x = data(4, 5, 5);
        for variant in [Variant::Hcrl1, Variant::Hcrl2, Variant::Vade, Variant::Vae] {
            let m = Model::new(&tiny(variant, 2)).unwrap();
            let (enc, a) = m.e_step(x.view()).unwrap();
            let mut rng = stream_rng(1, Stream::Noise, 0);
            let noise = m.draw_noise(4, &mut rng);
            let (val, _) = m.objective(x.view(), &a, &noise, 1.0, false, false).unwrap();

            // decode the same samples independently
            let (r, j) = (2, 2);
            let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
            let decoded: Vec<Vec<Vec<f64>>> = (0..4)
                .map(|i| {
                    (0..r)
                        .map(|s| {
                            let z: Vec<f64> = (0..j)
                                .map(|jj| enc.mu(i)[jj] + enc.sigma2(i)[jj].sqrt() * noise[(i * r + s) * j + jj])
                                .collect();
                            m.decoder().forward(&z).unwrap().0
                        })
                        .collect()
                })
                .collect();
            let reference = match variant {
                Variant::Hcrl1 | Variant::Hcrl2 => {
                    let states = m.instance_states(&enc, &a);
                    let global = (variant == Variant::Hcrl1).then(|| m.global_alpha().to_vec());
                    elbo_hcrl(&rows, Observation::Gaussian, m.tree().unwrap(), &[1.0, 1.0], global.as_deref(), &states, &decoded)
                        .unwrap()
                }
                Variant::Vade => elbo_vade(&rows, Observation::Gaussian, m.mixture().unwrap(), &m.flat_states(&enc, &a), &decoded).unwrap(),
                Variant::Vae => {
                    let latent: Vec<_> = (0..4).map(|i| (enc.mu(i), enc.sigma2(i))).collect();
                    elbo_vae(&rows, Observation::Gaussian, &latent, &decoded).unwrap()
                }
            };
            assert!((val.total() - reference.total()).abs() < 1e-9, "{variant:?}: {} vs {}", val.total(), reference.total());
        }
    }

    #[test]
    fn levels_coincide_at_depth_one() {
        let x = data(6, 5, 6);
        let m1 = Model::new(&tiny(Variant::Hcrl1, 1)).unwrap();
        let m2 = Model::new(&tiny(Variant::Hcrl2, 1)).unwrap();
        let mut r1 = stream_rng(0, Stream::Noise, 0);
        let mut r2 = stream_rng(0, Stream::Noise, 0);
        let (a1, _) = {
            let (_, a) = m1.e_step(x.view()).unwrap();
            let n = m1.draw_noise(6, &mut r1);
            (m1.objective(x.view(), &a, &n, 0.5, false, false).unwrap().0, ())
        };
        let (_, a) = m2.e_step(x.view()).unwrap();
        let n = m2.draw_noise(6, &mut r2);
        let a2 = m2.objective(x.view(), &a, &n, 0.5, false, false).unwrap().0;
        assert_eq!(a1.total(), a2.total());
    }

    #[test]
    fn small_step_increases_batch_objective() {
        let x = data(8, 5, 8);
        for variant in [Variant::Hcrl1, Variant::Hcrl2, Variant::Vade] {
            let mut c = tiny(variant, 2);
            c.learning_rate = 1e-4;
            c.node_learning_rate = 1e-4;
            let mut m = Model::new(&c).unwrap();
            let (_, a) = m.e_step(x.view()).unwrap();
            let mut rng = stream_rng(3, Stream::Noise, 0);
            let noise = m.draw_noise(8, &mut rng);
            let before = m.objective(x.view(), &a, &noise, 1.0, false, true).unwrap();
            m.apply_gradients(before.1.as_ref().unwrap(), 1.0 / 8.0, false).unwrap();
            let after = m.objective(x.view(), &a, &noise, 1.0, false, false).unwrap().0;
            assert!(after.total() > before.0.total(), "{variant:?}");
        }
    }

    #[test]
    fn prior_density_integrates_to_one() {
        let mut m = Model::new(&tiny(Variant::Hcrl2, 2)).unwrap();
        {
            let t = m.tree_mut().unwrap();
            t.node_mut(1).params.mu = vec![1.0, -0.5];
        }
        let h = 0.05;
        let mut acc = 0.0;
        let mut zx = -8.0;
        while zx < 8.0 {
            let mut zy = -8.0;
            while zy < 8.0 {
                acc += m.log_prior_density(&[zx + h / 2.0, zy + h / 2.0]).exp() * h * h;
                zy += h;
            }
            zx += h;
        }
        assert!((acc - 1.0).abs() < 1e-6, "{acc}");
    }
}
