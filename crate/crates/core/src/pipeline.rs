//! Defaults and seed plumbing for the end-to-end workflow.
//!
//! Every stage draws its randomness from `stage_seed(root, stage)`, so a
//! stage can be rerun alone and still match a full run with the same root.

use crate::ecgvf::{
    generate_pairs, visual_filter, FilterReport, FilterSampling, ModelImages, MotifClassifier,
    PromptSource, SyntheticSource,
};
use crate::erasure::PromptPair;
use crate::error::{Error, Result};
use crate::model::{pretrain, world_corpus, ModelConfig, PretrainConfig, PretrainOutcome, Vocab};
use crate::model::ModelParams;
use crate::world::{SyntheticWorld, CONCEPT_TEMPLATES};

pub const DEFAULT_ROOT_SEED: u64 = 0;
pub const DEFAULT_TARGET: &str = "blue-circle";
pub const DEFAULT_SURROGATE: &str = "church";

/// Grammar variants standing in for independent pair generators.
pub const SOURCES: usize = 6;
pub const ITERATIONS: usize = 3;
pub const PAIRS_PER_ITERATION: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    World,
    Init,
    Pretrain,
    Dataset,
    Erase,
    Sample,
}

impl Stage {
    fn counter(self) -> u64 {
        match self {
            Stage::World => 1,
            Stage::Init => 2,
            Stage::Pretrain => 3,
            Stage::Dataset => 4,
            Stage::Erase => 5,
            Stage::Sample => 6,
        }
    }
}

/// SplitMix64 finalizer of `root ^ counter * golden`.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    let mut z = root ^ stage.counter().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn default_world(root: u64) -> SyntheticWorld {
    SyntheticWorld::new(stage_seed(root, Stage::World))
}

pub fn model_config(vocab: &Vocab, root: u64) -> ModelConfig {
    ModelConfig::for_vocab(vocab, stage_seed(root, Stage::Init))
}

pub fn pretrain_config(root: u64) -> PretrainConfig {
    PretrainConfig {
        seed: stage_seed(root, Stage::Pretrain),
        ..PretrainConfig::default()
    }
}

/// Pretrains on the world's full prompt corpus.
pub fn pretrain_world(world: &SyntheticWorld, root: u64, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let vocab = Vocab::from_world(world);
    pretrain(model_config(&vocab, root), &world_corpus(world, &vocab), cfg)
}

/// Candidate pairs from the grammar variants before filtering.
pub fn propose_pairs(
    world: &SyntheticWorld,
    target: &str,
    surrogate: &str,
    root: u64,
) -> Result<Vec<PromptPair>> {
    world.concept(target)?;
    let mut sources = SyntheticSource::variants(world, SOURCES, stage_seed(root, Stage::Dataset), surrogate)?;
    let mut refs: Vec<&mut dyn PromptSource> = sources
        .iter_mut()
        .map(|s| s as &mut dyn PromptSource)
        .collect();
    generate_pairs(&mut refs, target, &CONCEPT_TEMPLATES, ITERATIONS, PAIRS_PER_ITERATION)
}

/// Greedy visual filtering with the world's motif classifier.
pub fn filter_pairs(
    world: &SyntheticWorld,
    params: &ModelParams,
    pairs: &[PromptPair],
    target: &str,
) -> Result<FilterReport> {
    let concept = world
        .concept_index(target)
        .ok_or_else(|| Error::invalid(format!("unknown concept `{target}`")))?;
    let vocab = Vocab::from_world(world);
    let images = ModelImages {
        params,
        vocab: &vocab,
        codebook: &world.codebook,
        sampling: FilterSampling::Greedy,
    };
    Ok(visual_filter(pairs, &images, &MotifClassifier::new(world), concept))
}
