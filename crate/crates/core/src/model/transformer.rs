use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{ModelConfig, ModelParams, ParamKey, Sublayer};
use super::vocab::BOI;

const NORM_EPS: f64 = 1e-5;

/// Final-layer hidden states at the image positions, one row per position.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq(Tensor);

impl LatentSeq {
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.dims2().is_none() {
            return Err(Error::invalid("latent sequence must be rank 2"));
        }
        Ok(Self(rows))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    /// Number of positions `T`.
    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Token-level decoding strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

/// The transformer unrolled over one token sequence.
///
/// The input is `prompt ++ [BOI] ++ image_context`; `latents` holds the
/// final-normed hidden states from the `BOI` position onward, so row `t`
/// is the state that predicts image token `t`.
pub struct ModelGraph {
    pub graph: Graph,
    pub latents: NodeId,
    pub logits: NodeId,
    pub seq_len: usize,
}

impl ModelGraph {
    /// `trainable(name)` marks which weights receive gradients.
    pub fn build(
        config: &ModelConfig,
        prompt: &[u32],
        image_context: &[u32],
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<Self> {
        let mut ids: Vec<usize> = Vec::with_capacity(prompt.len() + 1 + image_context.len());
        for &p in prompt {
            if p >= config.codebook_offset {
                return Err(Error::invalid(format!("prompt token {p} is not a text token")));
            }
            ids.push(p as usize);
        }
        ids.push(BOI as usize);
        for &c in image_context {
            if c as usize >= config.codebook_size {
                return Err(Error::invalid(format!(
                    "image token {c} outside codebook of size {}",
                    config.codebook_size
                )));
            }
            ids.push((config.codebook_offset + c) as usize);
        }
        let len = ids.len();
        if len > config.max_len {
            return Err(Error::invalid(format!(
                "sequence of {len} tokens exceeds max_len {}",
                config.max_len
            )));
        }

        let mut g = Graph::new();
        let param = |g: &mut Graph, key: ParamKey| {
            let name = key.to_string();
            let grad = trainable(&name);
            g.input(&name, grad)
        };

        let tok_table = param(&mut g, ParamKey::TokenEmbedding);
        let pos_table = param(&mut g, ParamKey::PositionEmbedding);
        let tok = g.embedding(tok_table, ids);
        let pos = g.slice(pos_table, 0, 0, len);
        let mut x = g.add(tok, pos);

        let dh = config.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..config.layers {
            let n1 = param(&mut g, ParamKey::Layer(l, Sublayer::Norm1));
            let wq = param(&mut g, ParamKey::Layer(l, Sublayer::Q));
            let wk = param(&mut g, ParamKey::Layer(l, Sublayer::K));
            let wv = param(&mut g, ParamKey::Layer(l, Sublayer::V));
            let wo = param(&mut g, ParamKey::Layer(l, Sublayer::O));
            let h = g.layer_norm(x, n1, NORM_EPS);
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let mut heads = Vec::with_capacity(config.heads);
            for head in 0..config.heads {
                let (s, e) = (head * dh, (head + 1) * dh);
                let qh = g.slice(q, 1, s, e);
                let kh = g.slice(k, 1, s, e);
                let vh = g.slice(v, 1, s, e);
                let scores = g.matmul_nt(qh, kh);
                let scores = g.scale(scores, inv_sqrt);
                let attn = g.causal_softmax(scores);
                heads.push(g.matmul(attn, vh));
            }
            let merged = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat(&heads, 1)
            };
            let attn_out = g.matmul(merged, wo);
            x = g.add(x, attn_out);

            let n2 = param(&mut g, ParamKey::Layer(l, Sublayer::Norm2));
            let w_in = param(&mut g, ParamKey::Layer(l, Sublayer::MlpIn));
            let w_out = param(&mut g, ParamKey::Layer(l, Sublayer::MlpOut));
            let h = g.layer_norm(x, n2, NORM_EPS);
            let up = g.matmul(h, w_in);
            let act = g.relu(up);
            let down = g.matmul(act, w_out);
            x = g.add(x, down);
        }

        let final_gain = param(&mut g, ParamKey::FinalNorm);
        let normed = g.layer_norm(x, final_gain, NORM_EPS);
        let latents = g.slice(normed, 0, prompt.len(), len);
        let head = param(&mut g, ParamKey::ImageHead);
        let logits = g.matmul(latents, head);
        Ok(Self {
            graph: g,
            latents,
            logits,
            seq_len: len,
        })
    }

    pub fn forward(&mut self, params: &ModelParams) -> Result<()> {
        self.graph.forward(params).map(|_| ())
    }

    pub fn latent_value(&self) -> LatentSeq {
        LatentSeq(self.graph.value(self.latents).expect("forward ran").clone())
    }

    pub fn logit_value(&self) -> &Tensor {
        self.graph.value(self.logits).expect("forward ran")
    }
}

fn frozen(_: &str) -> bool {
    false
}

fn check_image_len(params: &ModelParams, image_tokens: &[u32]) -> Result<()> {
    let t = params.config().image_tokens;
    if image_tokens.len() != t {
        return Err(Error::invalid(format!(
            "expected {t} image tokens, got {}",
            image_tokens.len()
        )));
    }
    Ok(())
}

/// Teacher-forced pass: the `T × d` hidden states feeding the image head.
pub fn forward_latents(
    params: &ModelParams,
    prompt: &[u32],
    image_tokens: &[u32],
) -> Result<LatentSeq> {
    check_image_len(params, image_tokens)?;
    let context = &image_tokens[..image_tokens.len() - 1];
    let mut mg = ModelGraph::build(params.config(), prompt, context, &frozen)?;
    mg.forward(params)?;
    Ok(mg.latent_value())
}

/// Teacher-forced `T × K` codebook logits.
pub fn forward_logits(params: &ModelParams, prompt: &[u32], image_tokens: &[u32]) -> Result<Tensor> {
    check_image_len(params, image_tokens)?;
    let context = &image_tokens[..image_tokens.len() - 1];
    let mut mg = ModelGraph::build(params.config(), prompt, context, &frozen)?;
    mg.forward(params)?;
    Ok(mg.logit_value().clone())
}

/// Codebook logits for image positions `0..=prefix.len()`.
fn prefix_logits(params: &ModelParams, prompt: &[u32], prefix: &[u32]) -> Result<Tensor> {
    let mut mg = ModelGraph::build(params.config(), prompt, prefix, &frozen)?;
    mg.forward(params)?;
    Ok(mg.logit_value().clone())
}

/// Lowest index of the maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive decoding of `length` image tokens, recomputing the full
/// prefix at every position.
pub fn generate(
    params: &ModelParams,
    prompt: &[u32],
    length: usize,
    sampling: Sampling,
) -> Result<Vec<u32>> {
    if length == 0 {
        return Err(Error::invalid("image length must be at least 1"));
    }
    let mut rng = match sampling {
        Sampling::Greedy => None,
        Sampling::Temperature { tau, seed } => {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
    };
    let mut out: Vec<u32> = Vec::with_capacity(length);
    while out.len() < length {
        let logits = prefix_logits(params, prompt, &out)?;
        let row = logits.row(out.len());
        let next = match (&sampling, rng.as_mut()) {
            (Sampling::Temperature { tau, .. }, Some(rng)) => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = row.iter().map(|v| ((v - max) / tau).exp()).collect();
                WeightedIndex::new(&weights)
                    .map_err(|e| Error::invalid(format!("sampling failed: {e}")))?
                    .sample(rng)
            }
            _ => argmax(row),
        };
        out.push(next as u32);
    }
    Ok(out)
}
