//! Weighted relation adversarial adaptation: staged adversarial training with
//! relation- and instance-level importance weights, plus the supporting
//! autodiff core, synthetic data, metrics and a numerical check of the
//! weighted minimax identity.

pub mod adversary;
pub mod datagen;
pub mod diffcore;
pub mod encoders;
pub mod evalkit;
pub mod experiments;
pub mod kv;
pub mod pipeline;
pub mod presets;
pub mod rng;
pub mod semantic;
pub mod theory;
pub mod weighting;
