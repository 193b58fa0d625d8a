//! Shared fixtures for the benchmarks.

use gca_core::data::{generate_synthetic, SkeletonSequence, SyntheticSpec};
use gca_core::{AttentionConfig, Model, ModelDims, ModelSpec, Result, StreamSelection, Variant};

/// A model at the default skeleton size with hidden width `hidden`.
pub fn model(variant: Variant, hidden: usize, iterations: usize) -> Result<Model> {
    let data = SyntheticSpec::default();
    Model::new(ModelSpec {
        variant,
        dims: ModelDims {
            joints: data.joints,
            frames: data.frames,
            input_dim: 3,
            hidden,
            classes: data.num_classes(),
        },
        attention: AttentionConfig {
            n_iterations: iterations,
            score_hidden_dim: hidden,
            ..AttentionConfig::default()
        },
        streams: StreamSelection::Both,
        partition: data.partition,
        joint_order: Vec::new(),
        init: Default::default(),
        seed: 0,
    })
}

/// `n` sequences from the default synthetic generator.
pub fn sequences(n: usize) -> Result<Vec<SkeletonSequence>> {
    let spec = SyntheticSpec {
        per_class: n.div_ceil(8),
        ..SyntheticSpec::default()
    };
    let mut seqs = generate_synthetic(&spec)?.sequences;
    seqs.truncate(n);
    Ok(seqs)
}
