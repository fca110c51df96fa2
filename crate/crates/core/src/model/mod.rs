//! Toy autoregressive patch-token image generator.
//!
//! Prompt tokens, a begin-of-image marker and the image tokens so far run
//! through a pre-norm causal transformer; a bias-free image head maps the
//! final-normed hidden state at each image position to codebook logits.

pub mod checkpoint;
mod params;
mod pretrain;
mod transformer;
mod vocab;

pub use params::{ModelConfig, ModelParams, ParamKey, Sublayer};
pub use pretrain::{
    example_loss, example_loss_and_grads, pretrain, pretrain_from, world_corpus, PretrainConfig,
    PretrainOutcome, TrainingExample,
};
pub use transformer::{forward_latents, forward_logits, generate, LatentSeq, ModelGraph, Sampling};
pub use vocab::{Vocab, BOI, BOS, UNK};
