//! Small-scale settings tuned for the synthetic corpora, runnable on one core
//! in seconds per stage.

use crate::datagen::{CorpusSpec, KgSpec};
use crate::encoders::{Activation, Arch, EncoderConfig};
use crate::pipeline::TrainConfig;

/// CNN sentence encoder sized for [`CorpusSpec`] corpora.
pub fn sentence_encoder(spec: &CorpusSpec) -> EncoderConfig {
    EncoderConfig {
        arch: Arch::Cnn,
        word_dim: 16,
        pos_dim: 4,
        kernel: 3,
        channels: 32,
        max_len: spec.max_len,
        dropout: 0.1,
        activation: Activation::Tanh,
        vocab_size: spec.vocab_size,
        num_entities: 0,
        num_relations: 0,
        structural_dim: 0,
        embed_init: 0.2,
    }
}

pub fn sentence_training(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        learning_rate_instance: Some(1e-3),
        learning_rate_adapt: Some(3e-4),
        instance_updates_target: false,
        batch_size: 64,
        epochs_source: 10,
        epochs_instance: 10,
        epochs_adapt: 60,
        epochs_finetune: 10,
        dropout: 0.1,
        seed,
        ..TrainConfig::default()
    }
}

/// Triple encoder over the lattice features of a [`KgSpec`] graph.
pub fn triple_encoder(spec: &KgSpec) -> EncoderConfig {
    EncoderConfig {
        arch: Arch::Triple,
        word_dim: 8,
        pos_dim: 0,
        kernel: 1,
        channels: 32,
        max_len: 3,
        dropout: 0.1,
        activation: Activation::Tanh,
        vocab_size: 0,
        num_entities: spec.num_entities,
        num_relations: spec.num_relations,
        structural_dim: spec.structural_dim(),
        embed_init: 0.2,
    }
}

pub fn triple_training(seed: u64) -> TrainConfig {
    TrainConfig {
        mask_na: false,
        batch_size: 32,
        epochs_source: 30,
        epochs_finetune: 30,
        ..sentence_training(seed)
    }
}
