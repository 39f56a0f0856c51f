//! Versioned JSON checkpoints.
//!
//! Layout: a top-level object with `format = "hcrl-checkpoint"`, `version`,
//! the resolved `config`, counters, the tree document (nodes in preorder)
//! with one `node_moments` entry per node in the same order, the flat
//! mixture, and `arrays`: named row-major tensors with explicit shapes.
//! Network tensors are `<net>.<layer>.weight` (`[out, in]`) and
//! `<net>.<layer>.bias`; their Adam moments add `.m` / `.v`. Floats are
//! written with shortest round-trip formatting, so a reload is bitwise
//! identical.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::engine::Model;
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, NodeMoments, TreeDocument};
use crate::nn::{Activation, AdamConfig, AdamState, Dense, DenseNet};
use crate::variational::FlatMixture;

pub const CHECKPOINT_FORMAT: &str = "hcrl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub activations: Vec<Activation>,
    pub adam_step: u64,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDoc {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub epoch: usize,
    pub lock: usize,
    pub pretrained: bool,
    pub networks: BTreeMap<String, NetworkDoc>,
    pub arrays: Vec<NamedArray>,
    pub tree: Option<TreeDocument>,
    pub node_moments: Vec<NodeMoments>,
    pub mixture: Option<FlatMixture>,
    pub mixture_moments: Vec<NodeMoments>,
    pub global_alpha: Vec<f64>,
}

fn push_net(doc: &mut CheckpointDoc, name: &str, net: &DenseNet, adam: &AdamState) {
    for (k, layer) in net.layers().iter().enumerate() {
        let (o, i) = layer.weight.dim();
        let shapes = [vec![o, i], vec![o]];
        let tensors = [
            layer.weight.iter().copied().collect::<Vec<_>>(),
            layer.bias.to_vec(),
        ];
        for (t, (kind, (shape, data))) in ["weight", "bias"].iter().zip(shapes.iter().zip(tensors)).enumerate() {
            let base = format!("{name}.{k}.{kind}");
            doc.arrays.push(NamedArray {
                name: format!("{base}.m"),
                shape: shape.clone(),
                data: adam.m[2 * k + t].clone(),
            });
            doc.arrays.push(NamedArray {
                name: format!("{base}.v"),
                shape: shape.clone(),
                data: adam.v[2 * k + t].clone(),
            });
            doc.arrays.push(NamedArray {
                name: base,
                shape: shape.clone(),
                data,
            });
        }
    }
    doc.networks.insert(
        name.to_string(),
        NetworkDoc {
            activations: net.layers().iter().map(|l| l.activation).collect(),
            adam_step: adam.step,
            adam: adam.config,
        },
    );
}

fn take_net(doc: &CheckpointDoc, arrays: &BTreeMap<&str, &NamedArray>, name: &str) -> Result<(DenseNet, AdamState)> {
    let nd = doc
        .networks
        .get(name)
        .ok_or_else(|| Error::invalid(format!("checkpoint lacks network {name}")))?;
    let get = |key: String, expect_rank: usize| -> Result<&NamedArray> {
        let a = arrays
            .get(key.as_str())
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks array {key}")))?;
        if a.shape.len() != expect_rank || a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::invalid(format!("array {key} has inconsistent shape {:?}", a.shape)));
        }
        Ok(a)
    };
    let mut layers = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (k, &act) in nd.activations.iter().enumerate() {
        let w = get(format!("{name}.{k}.weight"), 2)?;
        let b = get(format!("{name}.{k}.bias"), 1)?;
        let weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
            .map_err(|e| Error::invalid(format!("{name}.{k}.weight: {e}")))?;
        layers.push(Dense {
            weight,
            bias: Array1::from(b.data.clone()),
            activation: act,
        });
        for kind in ["weight", "bias"] {
            let rank = if kind == "weight" { 2 } else { 1 };
            m.push(get(format!("{name}.{k}.{kind}.m"), rank)?.data.clone());
            v.push(get(format!("{name}.{k}.{kind}.v"), rank)?.data.clone());
        }
    }
    let net = DenseNet::new(layers)?;
    Ok((
        net,
        AdamState {
            config: nd.adam,
            step: nd.adam_step,
            m,
            v,
        },
    ))
}

impl Model {
    pub fn to_checkpoint(&self) -> CheckpointDoc {
        let mut doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            lock: self.lock,
            pretrained: self.pretrained,
            networks: BTreeMap::new(),
            arrays: Vec::new(),
            tree: self.tree.as_ref().map(|t| t.to_document(None)),
            node_moments: self
                .tree
                .as_ref()
                .map_or(Vec::new(), |t| t.nodes().iter().map(|n| n.moments.clone()).collect()),
            mixture: self.mixture.clone(),
            mixture_moments: self.mixture_moments.clone(),
            global_alpha: self.global_alpha.clone(),
        };
        push_net(&mut doc, "encoder_z", &self.encoder_z, &self.adam_z);
        if let (Some(n), Some(a)) = (&self.encoder_eta, &self.adam_eta) {
            push_net(&mut doc, "encoder_eta", n, a);
        }
        push_net(&mut doc, "decoder", &self.decoder, &self.adam_dec);
        doc
    }

    pub fn from_checkpoint(doc: &CheckpointDoc) -> Result<Model> {
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} version {}",
                doc.format, doc.version
            )));
        }
        let config = doc.config.resolved()?;
        let arrays: BTreeMap<&str, &NamedArray> = doc.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let (encoder_z, adam_z) = take_net(doc, &arrays, "encoder_z")?;
        let (decoder, adam_dec) = take_net(doc, &arrays, "decoder")?;
        let eta = if doc.networks.contains_key("encoder_eta") {
            Some(take_net(doc, &arrays, "encoder_eta")?)
        } else {
            None
        };
        let tree = match &doc.tree {
            Some(t) => {
                let (mut tree, _) = Hierarchy::from_document(t)?;
                if doc.node_moments.len() != tree.len() {
                    return Err(Error::DimensionMismatch {
                        context: "checkpoint node moments",
                        expected: tree.len(),
                        actual: doc.node_moments.len(),
                    });
                }
                for (k, mom) in doc.node_moments.iter().enumerate() {
                    tree.node_mut(k).moments = mom.clone();
                }
                Some(tree)
            }
            None => None,
        };
        let (encoder_eta, adam_eta) = match eta {
            Some((n, a)) => (Some(n), Some(a)),
            None => (None, None),
        };
        let model = Model {
            config,
            tree,
            mixture: doc.mixture.clone(),
            mixture_moments: doc.mixture_moments.clone(),
            encoder_z,
            encoder_eta,
            decoder,
            global_alpha: doc.global_alpha.clone(),
            adam_z,
            adam_eta,
            adam_dec,
            epoch: doc.epoch,
            lock: doc.lock,
            pretrained: doc.pretrained,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Check that every component agrees with the configuration.
    pub(crate) fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let bad = |what: &str| Err(Error::invalid(format!("checkpoint {what} disagrees with its config")));
        if self.encoder_z.input_dim() != c.data_dim || self.encoder_z.output_dim() != 2 * c.latent_dim {
            return bad("encoder_z");
        }
        if self.decoder.input_dim() != c.latent_dim || self.decoder.output_dim() != c.observation.output_dim(c.data_dim) {
            return bad("decoder");
        }
        if (self.encoder_eta.is_some()) != (c.variant == super::Variant::Hcrl2) {
            return bad("encoder_eta");
        }
        if let Some(n) = &self.encoder_eta {
            if n.input_dim() != c.data_dim || n.output_dim() != 2 * c.depth {
                return bad("encoder_eta");
            }
        }
        if self.tree.is_some() != c.variant.is_hierarchical() {
            return bad("tree");
        }
        if let Some(t) = &self.tree {
            if t.depth() != c.depth || t.latent_dim() != c.latent_dim {
                return bad("tree");
            }
        }
        if let Some(m) = &self.mixture {
            m.validate()?;
            if m.components() != c.components || m.mu.iter().any(|v| v.len() != c.latent_dim) {
                return bad("mixture");
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        Model::from_checkpoint(&doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{data_pass, stream_rng, Stream, Variant};
    use rand::Rng;

    fn data() -> Array2<f64> {
        let mut rng = stream_rng(5, Stream::Init, 1);
        Array2::from_shape_fn((30, 4), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn round_trip_is_bitwise() {
        for variant in [Variant::Hcrl1, Variant::Hcrl2, Variant::Vade, Variant::Vae] {
            let mut c = ModelConfig::new(variant, 4, 2, 2);
            c.hidden = vec![6, 5];
            c.epochs = 2;
            c.pretrain_epochs = 1;
            c.batch_size = 8;
            c.components = 2;
            c.t_grow = 1;
            let x = data();
            let mut m = Model::new(&c).unwrap();
            m.train(x.view()).unwrap();
            let back = Model::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back, m, "{variant:?}");
            let a = data_pass(&m, x.view(), 9).unwrap().elbo.total();
            let b = data_pass(&back, x.view(), 9).unwrap().elbo.total();
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(back.to_json().unwrap(), m.to_json().unwrap());
        }
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let m = Model::new(&ModelConfig::new(Variant::Hcrl2, 4, 2, 2)).unwrap();
        let mut doc = m.to_checkpoint();
        doc.arrays.retain(|a| a.name != "decoder.0.bias");
        assert!(Model::from_checkpoint(&doc).is_err());
        let mut doc = m.to_checkpoint();
        doc.version = 99;
        assert!(Model::from_checkpoint(&doc).is_err());
        let mut doc = m.to_checkpoint();
        doc.config.latent_dim = 3;
        assert!(Model::from_checkpoint(&doc).is_err());
    }
}
