//! Encoders, decoder and latent prior wired into trainable models, plus the
//! training schedule, checkpoints and gradient checking.

mod checkpoint;
mod config;
mod engine;
mod gradcheck;
mod training;

pub use config::{GrowMass, ModelConfig, Variant};
pub use engine::{
    select_rows, standard_normal, stream_rng, Assignments, Encoded, Gradients, Model, Stream,
};
pub use training::{data_pass, fit, DataPass, EpochRecord, History, StructureOp, EVAL_CHUNK};
pub use checkpoint::{CheckpointDoc, NamedArray, NetworkDoc, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::{desk_fixture, gradcheck, GradcheckOptions, GradcheckReport, GroupReport, MAX_GRADCHECK_DIM};
