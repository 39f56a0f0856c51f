use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::variational::Observation;

/// Which latent prior the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Tree prior with one level proportion shared by all instances.
    Hcrl1,
    /// Tree prior with an amortized per-instance level proportion.
    Hcrl2,
    /// Flat Gaussian mixture prior with `components` clusters.
    Vade,
    /// Fixed standard normal prior.
    Vae,
}

impl Variant {
    pub fn is_hierarchical(self) -> bool {
        matches!(self, Variant::Hcrl1 | Variant::Hcrl2)
    }
}

/// Path mass used to decide where GROW adds a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowMass {
    /// Each inner path scores a hypothetical new chain below it, normalized
    /// jointly with the existing full paths.
    NewBranch,
    /// Each inner path weighs the sum of its descendant full paths.
    DescendantSum,
}

/// Every hyperparameter of a model and its training run.
/// Missing keys in a serialized config take the [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub observation: Observation,
    /// Data dimension D; 0 until a dataset fills it in.
    pub data_dim: usize,
    /// Latent dimension J.
    pub latent_dim: usize,
    /// Tree depth L, counting the root as level 1.
    pub depth: usize,
    /// nCRP concentration γ.
    pub gamma: f64,
    /// Dirichlet prior on level proportions; empty means all ones.
    #[serde(default)]
    pub alpha: Vec<f64>,
    /// PRUNE threshold δ.
    pub delta: f64,
    pub merge_threshold: f64,
    /// Epochs between GROW attempts.
    pub t_grow: usize,
    /// Minimum epochs the tree stays locked after a change.
    pub t_lock: usize,
    pub grow_mass: GrowMass,
    /// Mixture components of the flat variant.
    pub components: usize,
    /// Reparameterized samples per instance.
    pub mc_samples: usize,
    /// Hidden layer widths of the encoders; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Learning rate for node and component parameters.
    pub node_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Plain-VAE warm-up epochs before the mixture prior is switched on.
    pub pretrain_epochs: usize,
    /// Alternations of the path and level updates per E-step.
    pub e_step_sweeps: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(Variant::Hcrl2, 0, 10, 3)
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, data_dim: usize, latent_dim: usize, depth: usize) -> Self {
        ModelConfig {
            variant,
            observation: Observation::Gaussian,
            data_dim,
            latent_dim,
            depth,
            gamma: 1.0,
            alpha: Vec::new(),
            delta: 0.01,
            merge_threshold: 0.95,
            t_grow: 5,
            t_lock: 3,
            grow_mass: GrowMass::DescendantSum,
            components: 1,
            mc_samples: 1,
            hidden: vec![64],
            learning_rate: 1e-3,
            node_learning_rate: 1e-2,
            batch_size: 256,
            epochs: 50,
            pretrain_epochs: 10,
            e_step_sweeps: 2,
            seed: 0,
        }
    }

    /// Override one field from a `key=value` string. The value is read as a
    /// TOML literal, falling back to a bare string (`variant=hcrl1`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::invalid(e.to_string()))?;
        if !table.contains_key(key) && !matches!(key, "alpha") {
            return Err(Error::invalid(format!("unknown config key `{key}`")));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(format!("bad value for `{key}`: {}", e.message())))?;
        Ok(())
    }

    /// Apply a list of `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Dirichlet prior vector, defaulting to ones.
    pub fn alpha(&self) -> Vec<f64> {
        if self.alpha.is_empty() {
            vec![1.0; self.depth]
        } else {
            self.alpha.clone()
        }
    }

    /// Effective tree depth: the flat variants use a single level.
    pub fn levels(&self) -> usize {
        if self.variant.is_hierarchical() {
            self.depth
        } else {
            1
        }
    }

    /// Fill defaults so the stored config fully determines a run.
    pub fn resolved(&self) -> Result<ModelConfig> {
        let mut c = self.clone();
        c.alpha = self.alpha();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(m.to_string()));
        if self.data_dim == 0 || self.latent_dim == 0 {
            return fail("data_dim and latent_dim must be positive");
        }
        if self.depth == 0 {
            return fail("depth must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail("gamma must be positive");
        }
        let alpha = self.alpha();
        if alpha.len() != self.depth || alpha.iter().any(|&a| !(a > 0.0)) {
            return fail("alpha must hold depth positive entries");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail("delta must lie in (0, 1)");
        }
        if !(self.merge_threshold > 0.0 && self.merge_threshold <= 1.0) {
            return fail("merge_threshold must lie in (0, 1]");
        }
        if self.t_grow == 0 {
            return fail("t_grow must be positive");
        }
        if self.components == 0 {
            return fail("components must be positive");
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be at least 1");
        }
        if self.hidden.contains(&0) {
            return fail("hidden layer widths must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.node_learning_rate > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.e_step_sweeps == 0 {
            return fail("e_step_sweeps must be positive");
        }
        Ok(())
    }
}
