use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::world::SyntheticWorld;

use super::params::{ModelConfig, ModelParams};
use super::transformer::ModelGraph;
use super::vocab::Vocab;

/// One `(prompt, image)` pair of the pretraining corpus, already tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub prompt: Vec<u32>,
    pub image: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Cosine-anneal the learning rate down to a tenth over the run.
    pub cosine_decay: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            lr: 3e-3,
            batch: 8,
            seed: 0,
            cosine_decay: true,
        }
    }
}

pub struct PretrainOutcome {
    pub params: ModelParams,
    /// Mean batch loss measured before each update.
    pub losses: Vec<f64>,
}

/// Every grammar prompt paired with its ground-truth rendering.
pub fn world_corpus(world: &SyntheticWorld, vocab: &Vocab) -> Vec<TrainingExample> {
    world
        .all_prompts()
        .into_iter()
        .map(|p| TrainingExample {
            prompt: vocab.tokenize(&p).expect("grammar prompts are non-empty"),
            image: world.render_prompt(&p),
        })
        .collect()
}

fn all_trainable(_: &str) -> bool {
    true
}

/// Mean next-image-token cross-entropy of one example plus its gradients.
pub fn example_loss_and_grads(
    params: &ModelParams,
    example: &TrainingExample,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let t = params.config().image_tokens;
    if example.image.len() != t {
        return Err(Error::invalid(format!(
            "training image has {} tokens, expected {t}",
            example.image.len()
        )));
    }
    let mut mg = ModelGraph::build(
        params.config(),
        &example.prompt,
        &example.image[..t - 1],
        &all_trainable,
    )?;
    let targets = example.image.iter().map(|&c| c as usize).collect();
    let loss = mg.graph.cross_entropy(mg.logits, targets);
    let value = mg.graph.forward(params)?.item().unwrap();
    let grads = mg.graph.backward(loss)?;
    Ok((value, grads.into_named().into_iter().collect()))
}

/// Mean next-image-token cross-entropy, forward only.
pub fn example_loss(params: &ModelParams, example: &TrainingExample) -> Result<f64> {
    let t = params.config().image_tokens;
    let mut mg = ModelGraph::build(
        params.config(),
        &example.prompt,
        &example.image[..t - 1],
        &|_| false,
    )?;
    let targets = example.image.iter().map(|&c| c as usize).collect();
    mg.graph.cross_entropy(mg.logits, targets);
    Ok(mg.graph.forward(params)?.item().unwrap())
}

/// Trains a freshly initialized model with Adam on the corpus.
pub fn pretrain(
    model: ModelConfig,
    corpus: &[TrainingExample],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    pretrain_from(ModelParams::init(model)?, corpus, cfg)
}

pub fn pretrain_from(
    mut params: ModelParams,
    corpus: &[TrainingExample],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut accum: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| (n.to_owned(), Tensor::zeros(t.shape())))
        .collect();

    for step in 0..cfg.steps {
        accum.iter_mut().for_each(|(_, t)| t.fill(0.0));
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let ex = &corpus[rng.gen_range(0..corpus.len())];
            let (loss, grads) = example_loss_and_grads(&params, ex)?;
            total += loss;
            for ((acc_name, acc), (name, g)) in accum.iter_mut().zip(&grads) {
                debug_assert_eq!(acc_name, name);
                acc.add_assign(g);
            }
        }
        let mean = total / cfg.batch as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { step, loss: mean });
        }
        losses.push(mean);

        let scale = 1.0 / cfg.batch as f64;
        accum
            .iter_mut()
            .for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= scale));
        adam.lr = if cfg.cosine_decay {
            let progress = step as f64 / cfg.steps.max(1) as f64;
            cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
        } else {
            cfg.lr
        };
        adam.step(&mut params, accum.iter().map(|(n, t)| (n.as_str(), t)));
    }
    Ok(PretrainOutcome { params, losses })
}
