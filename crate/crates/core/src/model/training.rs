use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, ArrayView2};
use rand::seq::SliceRandom;

use super::config::{GrowMass, Variant};
use super::engine::{stream_rng, Assignments, Model, Stream};
use crate::baseline::kmeans;
use crate::error::{Error, Result};
use crate::hierarchy::{grow, merge, node_log_prior, prune, Hierarchy, PathId};
use crate::special::{digamma, normalize_log_weights};
use crate::variational::{cross_table, gaussian_cross_raw, ElboBreakdown, TreeView};

/// Rows per chunk in full-data passes. Fixed so evaluation repeats training
/// passes bit for bit.
pub const EVAL_CHUNK: usize = 512;

/// Structure operation that changed the tree at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureOp {
    Grow,
    Prune,
    Merge,
}

impl StructureOp {
    pub fn name(self) -> &'static str {
        match self {
            StructureOp::Grow => "grow",
            StructureOp::Prune => "prune",
            StructureOp::Merge => "merge",
        }
    }
}

/// One row of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean per-instance ELBO and its terms, evaluated after the epoch's
    /// updates and before any structure change.
    pub elbo: ElboBreakdown,
    /// Mean reconstruction error at the posterior mean.
    pub reconstruction_error: f64,
    pub full_paths: usize,
    pub nodes: usize,
    pub op: Option<StructureOp>,
    /// Lock counter after the epoch.
    pub lock: usize,
}

/// Per-epoch training history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "epoch,{},reconstruction_error,full_paths,nodes,op,lock\n",
            ElboBreakdown::csv_header()
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{:e},{},{},{},{}",
                r.epoch,
                r.elbo.csv_row(),
                r.reconstruction_error,
                r.full_paths,
                r.nodes,
                r.op.map_or("", StructureOp::name),
                r.lock
            );
        }
        out
    }
}

/// Statistics of one pass over the full dataset.
#[derive(Debug, Clone, Default)]
pub struct DataPass {
    /// Summed ELBO including the global terms once.
    pub elbo: ElboBreakdown,
    pub reconstruction_errors: Vec<f64>,
    pub omega_sum: Vec<f64>,
    pub gamma_sum: Vec<f64>,
    /// `q(ζ_n)` over full paths per instance.
    pub q_matrix: Vec<Vec<f64>>,
    /// Masses for GROW, keyed by every inner and full path.
    pub grow_mass: BTreeMap<PathId, f64>,
}

impl DataPass {
    pub fn mean_elbo(&self) -> ElboBreakdown {
        self.elbo.scaled(1.0 / self.reconstruction_errors.len().max(1) as f64)
    }

    pub fn mean_reconstruction_error(&self) -> f64 {
        self.reconstruction_errors.iter().sum::<f64>() / self.reconstruction_errors.len().max(1) as f64
    }

    /// Summed `q(ζ)` per full path.
    pub fn full_path_mass(&self) -> Vec<f64> {
        let k = self.q_matrix.first().map_or(0, Vec::len);
        let mut m = vec![0.0; k];
        for row in &self.q_matrix {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m
    }
}

/// Pass over all rows in fixed chunks: E-step, ELBO with fresh noise from
/// `noise_index`, reconstruction errors and structure statistics.
pub fn data_pass(model: &Model, x: ArrayView2<f64>, noise_index: u64) -> Result<DataPass> {
    let cfg = model.config();
    let mut rng = stream_rng(cfg.seed, Stream::EvalNoise, noise_index);
    let mut pass = DataPass {
        omega_sum: vec![0.0; cfg.levels()],
        gamma_sum: vec![0.0; model.mixture().map_or(0, |m| m.components())],
        ..DataPass::default()
    };
    let view = model.tree().map(TreeView::new);
    if let Some(tree) = model.tree() {
        for p in tree.full_paths().into_iter().chain(tree.inner_paths()) {
            pass.grow_mass.insert(p, 0.0);
        }
    }
    let n = x.nrows();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let chunk = x.slice(s![start..end, ..]);
        let enc = model.encode(chunk)?;
        let a = model.assign(&enc)?;
        let noise = model.draw_noise(end - start, &mut rng);
        let (val, _) = model.objective_encoded(chunk, &enc, &a, &noise, 0.0, false, false)?;
        pass.elbo.add(&val);
        pass.reconstruction_errors
            .extend(model.reconstruction_errors(chunk, enc.mu_z.view())?);
        match &a {
            Assignments::Tree { omega, q_path } => {
                let tree = model.tree().unwrap();
                let view = view.as_ref().unwrap();
                for i in 0..enc.len() {
                    for (s, w) in pass.omega_sum.iter_mut().zip(&omega[i]) {
                        *s += w;
                    }
                    let masses = match cfg.grow_mass {
                        GrowMass::NewBranch => new_branch_masses(tree, view, &enc.mu(i), &enc.sigma2(i), &omega[i])?,
                        GrowMass::DescendantSum => descendant_masses(tree, view, &q_path[i]),
                    };
                    for (p, m) in masses {
                        *pass.grow_mass.get_mut(&p).expect("path listed") += m;
                    }
                    pass.q_matrix.push(q_path[i].clone());
                }
            }
            Assignments::Flat { gamma } => {
                for g in gamma {
                    for (s, v) in pass.gamma_sum.iter_mut().zip(g) {
                        *s += v;
                    }
                }
            }
            Assignments::None => {}
        }
        start = end;
    }
    pass.elbo.add(&model.global_terms()?);
    Ok(pass)
}

/// Inner paths weigh their descendant full paths.
fn descendant_masses(tree: &Hierarchy, view: &TreeView, q: &[f64]) -> Vec<(PathId, f64)> {
    let mut node_mass = vec![0.0; tree.len()];
    for (p, &w) in view.paths.iter().zip(q) {
        for &k in p {
            node_mass[k] += w;
        }
    }
    (0..tree.len()).map(|k| (tree.path_of(k), node_mass[k])).collect()
}

/// Posterior over the existing full paths together with one hypothetical
/// new branch under every inner node: the new chain starts at the inner
/// node's mean, halves its variance per level and carries prior sticks.
/// Returns each full path's share and each inner path's new-branch share.
fn new_branch_masses(
    tree: &Hierarchy,
    view: &TreeView,
    mu: &[f64],
    s2: &[f64],
    omega: &[f64],
) -> Result<Vec<(PathId, f64)>> {
    let depth = tree.depth();
    let g = cross_table(tree, mu, s2);
    let mut ids = Vec::new();
    let mut logits = Vec::new();
    for (p, prior) in view.paths.iter().zip(&view.log_prior) {
        ids.push(tree.path_of(*p.last().unwrap()));
        logits.push(prior + p.iter().zip(omega).map(|(&k, w)| w * g[k]).sum::<f64>());
    }
    let gamma = tree.gamma();
    let fresh_stick = digamma(1.0) - digamma(1.0 + gamma);
    for (u, node) in tree.nodes().iter().enumerate() {
        let level = node.level();
        if level >= depth {
            continue;
        }
        let mut chain = vec![u];
        while let Some(p) = tree.node(*chain.last().unwrap()).parent() {
            chain.push(p);
        }
        chain.reverse();
        let mut score: f64 = chain.iter().map(|&k| node_log_prior(tree, k)).sum();
        score += node
            .children()
            .iter()
            .map(|&c| tree.node(c).params.expected_log_one_minus_v())
            .sum::<f64>();
        score += (depth - level) as f64 * fresh_stick;
        for (l, &k) in chain.iter().enumerate() {
            score += omega[l] * g[k];
        }
        let mut var = node.params.sigma2.clone();
        for w in omega.iter().take(depth).skip(level) {
            var.iter_mut().for_each(|v| *v *= 0.5);
            score += w * gaussian_cross_raw(mu, s2, &node.params.mu, &var);
        }
        ids.push(tree.path_of(u));
        logits.push(score);
    }
    if !normalize_log_weights(&mut logits).is_finite() {
        return Err(Error::numeric("GROW masses have no finite log-weight"));
    }
    Ok(ids.into_iter().zip(logits).collect())
}

fn as_divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(message) => Error::Divergence { epoch, message },
        other => other,
    }
}

impl Model {
    /// Plain-VAE warm-up followed by initialization of the flat mixture
    /// from k-means on the posterior means. Runs at most once.
    pub fn warm_up(&mut self, x: ArrayView2<f64>) -> Result<()> {
        if self.pretrained {
            return Ok(());
        }
        let n = x.nrows();
        for e in 0..self.config.pretrain_epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream_rng(self.config.seed, Stream::Pretrain, 2 * e as u64));
            let mut noise = stream_rng(self.config.seed, Stream::Pretrain, 2 * e as u64 + 1);
            for batch in order.chunks(self.config.batch_size) {
                let xb = x.select(ndarray::Axis(0), batch);
                self.train_step(xb.view(), n, &mut noise, true)
                    .map_err(|e| as_divergence(0, e))?;
            }
            log::debug!("warm-up epoch {} done", e + 1);
        }
        if self.mixture.is_some() {
            self.init_mixture(x)?;
        }
        self.pretrained = true;
        Ok(())
    }

    /// Seed flat components from k-means on `μ̃`: centers, within-cluster
    /// variances and cluster proportions.
    pub fn init_mixture(&mut self, x: ArrayView2<f64>) -> Result<()> {
        let k = self.config.components;
        let mut points = Vec::with_capacity(x.nrows());
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + EVAL_CHUNK).min(x.nrows());
            let enc = self.encode(x.slice(s![start..end, ..]))?;
            points.extend((0..enc.len()).map(|i| enc.mu(i)));
            start = end;
        }
        let mut rng = stream_rng(self.config.seed, Stream::MixtureInit, 0);
        let km = kmeans(&points, k, 100, &mut rng)?;
        let j = self.config.latent_dim;
        let mut var = vec![vec![0.0; j]; k];
        let mut count = vec![0usize; k];
        for (p, &c) in points.iter().zip(&km.labels) {
            count[c] += 1;
            for jj in 0..j {
                let d = p[jj] - km.centers[c][jj];
                var[c][jj] += d * d;
            }
        }
        let mix = self.mixture.as_mut().expect("flat variant");
        for c in 0..k {
            mix.mu[c] = km.centers[c].clone();
            mix.sigma2[c] = var[c].iter().map(|v| (v / count[c].max(1) as f64).max(1e-2)).collect();
            mix.kappa[c] = count[c].max(1) as f64;
        }
        let total: f64 = mix.kappa.iter().sum();
        mix.kappa.iter_mut().for_each(|v| *v /= total);
        mix.validate()
    }

    /// Run the remaining epochs of training on `x`: optional warm-up, then
    /// per epoch minibatch ascent, a full-data pass, closed-form global
    /// updates and, for tree variants, the GROW/PRUNE/MERGE schedule.
    pub fn train(&mut self, x: ArrayView2<f64>) -> Result<History> {
        let mut history = History::default();
        if x.nrows() == 0 {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        if x.ncols() != self.config.data_dim {
            return Err(Error::DimensionMismatch {
                context: "training data",
                expected: self.config.data_dim,
                actual: x.ncols(),
            });
        }
        if self.epoch >= self.config.epochs {
            return Ok(history);
        }
        self.warm_up(x)?;
        let n = x.nrows();
        while self.epoch < self.config.epochs {
            let e = self.epoch as u64;
            let epoch = self.epoch + 1;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream_rng(self.config.seed, Stream::Shuffle, e));
            let mut noise = stream_rng(self.config.seed, Stream::Noise, e);
            for batch in order.chunks(self.config.batch_size) {
                let xb = x.select(ndarray::Axis(0), batch);
                self.train_step(xb.view(), n, &mut noise, false)
                    .map_err(|err| as_divergence(epoch, err))?;
            }
            let pass = data_pass(self, x, e).map_err(|err| as_divergence(epoch, err))?;
            if !pass.elbo.total().is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    message: format!("non-finite ELBO {:?}", pass.elbo),
                });
            }
            self.update_global_alpha(&pass.omega_sum);
            self.update_kappa(&pass.gamma_sum, n);
            self.epoch = epoch;
            let op = if self.tree.is_some() {
                self.restructure(&pass)?
            } else {
                None
            };
            let tree = self.tree.as_ref();
            let record = EpochRecord {
                epoch,
                elbo: pass.mean_elbo(),
                reconstruction_error: pass.mean_reconstruction_error(),
                full_paths: tree.map_or(self.mixture.as_ref().map_or(1, |m| m.components()), |t| t.num_full_paths()),
                nodes: tree.map_or(0, Hierarchy::len),
                op,
                lock: self.lock,
            };
            log::info!(
                "epoch {epoch}: elbo {:.4} re {:.4} paths {}{}",
                record.elbo.total(),
                record.reconstruction_error,
                record.full_paths,
                op.map_or(String::new(), |o| format!(" [{}]", o.name()))
            );
            history.records.push(record);
        }
        Ok(history)
    }

    /// Flat variants only: train without the tree schedule.
    pub fn train_vade(&mut self, x: ArrayView2<f64>) -> Result<History> {
        if self.config.variant.is_hierarchical() {
            return Err(Error::invalid("train_vade needs the vade or vae variant"));
        }
        self.train(x)
    }

    /// End-of-epoch structure schedule. GROW every `t_grow` epochs; with
    /// the tree unchanged and the lock counter at least `t_lock`, PRUNE and
    /// then MERGE. At most one operation fires.
    fn restructure(&mut self, pass: &DataPass) -> Result<Option<StructureOp>> {
        let cfg = self.config.clone();
        let mut rng = stream_rng(cfg.seed, Stream::Structure, self.epoch as u64);
        let tree = self.tree.as_mut().expect("tree variant");
        let mut op = None;
        if self.epoch % cfg.t_grow == 0 && grow(tree, &pass.grow_mass, &mut rng)? {
            op = Some(StructureOp::Grow);
        }
        if op.is_none() && self.lock >= cfg.t_lock {
            let ids = tree.full_paths();
            let full: BTreeMap<PathId, f64> = ids.into_iter().zip(pass.full_path_mass()).collect();
            if prune(tree, &full, cfg.delta, &mut rng)? {
                op = Some(StructureOp::Prune);
            } else if merge(tree, &pass.q_matrix, cfg.merge_threshold)?.changed {
                op = Some(StructureOp::Merge);
            }
        }
        if op.is_some() {
            self.lock = 0;
        } else {
            self.lock += 1;
        }
        Ok(op)
    }

    /// Cluster id per level for every row: at level `l`, the level-`l` node
    /// receiving the most posterior path mass (flat variants report the
    /// most responsible component at the single level). Ids are node or
    /// component indices.
    pub fn predict_levels(&self, x: ArrayView2<f64>) -> Result<Vec<Vec<usize>>> {
        let levels = self.config.levels();
        let mut out = vec![Vec::with_capacity(x.nrows()); levels];
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + EVAL_CHUNK).min(x.nrows());
            let enc = self.encode(x.slice(s![start..end, ..]))?;
            match self.assign(&enc)? {
                Assignments::Tree { q_path, .. } => {
                    let tree = self.tree.as_ref().unwrap();
                    let view = TreeView::new(tree);
                    for q in &q_path {
                        let mut mass = vec![0.0; tree.len()];
                        for (p, &w) in view.paths.iter().zip(q) {
                            for &k in p {
                                mass[k] += w;
                            }
                        }
                        for (l, lab) in out.iter_mut().enumerate() {
                            let best = (0..tree.len())
                                .filter(|&k| tree.node(k).level() == l + 1)
                                .max_by(|&a, &b| mass[a].total_cmp(&mass[b]).then(b.cmp(&a)))
                                .unwrap();
                            lab.push(best);
                        }
                    }
                }
                Assignments::Flat { gamma } => {
                    for g in &gamma {
                        let best = (0..g.len())
                            .max_by(|&a, &b| g[a].total_cmp(&g[b]).then(b.cmp(&a)))
                            .unwrap();
                        out[0].push(best);
                    }
                }
                Assignments::None => out[0].extend(std::iter::repeat_n(0, enc.len())),
            }
            start = end;
        }
        Ok(out)
    }
}

/// Train a model of the given variant from scratch.
pub fn fit(config: &super::ModelConfig, x: ArrayView2<f64>) -> Result<(Model, History)> {
    let mut m = Model::new(config)?;
    let h = m.train(x)?;
    Ok((m, h))
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Hcrl1 => "hcrl1",
            Variant::Hcrl2 => "hcrl2",
            Variant::Vade => "vade",
            Variant::Vae => "vae",
        }
    }
}
