use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Bindings;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::world::IMAGE_TOKENS;

use super::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub codebook_size: usize,
    pub codebook_offset: u32,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_len: usize,
    pub image_tokens: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// 6 layers, width 48, 4 heads, 16 image tokens.
    pub fn for_vocab(vocab: &Vocab, init_seed: u64) -> Self {
        Self {
            vocab_size: vocab.size(),
            codebook_size: vocab.codebook_size(),
            codebook_offset: vocab.codebook_offset(),
            d_model: 48,
            layers: 6,
            heads: 4,
            mlp_hidden: 192,
            max_len: 40,
            image_tokens: IMAGE_TOKENS,
            init_seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid("d_model must be divisible by heads"));
        }
        if self.image_tokens == 0 || self.max_len <= self.image_tokens {
            return Err(Error::invalid("max_len must exceed the image length"));
        }
        if self.codebook_offset as usize + self.codebook_size != self.vocab_size {
            return Err(Error::invalid("codebook range must end the vocabulary"));
        }
        Ok(())
    }
}

/// Per-layer weight tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sublayer {
    Q,
    K,
    V,
    O,
    MlpIn,
    MlpOut,
    Norm1,
    Norm2,
}

impl Sublayer {
    pub const ALL: [Sublayer; 8] = [
        Sublayer::Q,
        Sublayer::K,
        Sublayer::V,
        Sublayer::O,
        Sublayer::MlpIn,
        Sublayer::MlpOut,
        Sublayer::Norm1,
        Sublayer::Norm2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sublayer::Q => "q",
            Sublayer::K => "k",
            Sublayer::V => "v",
            Sublayer::O => "o",
            Sublayer::MlpIn => "mlp_in",
            Sublayer::MlpOut => "mlp_out",
            Sublayer::Norm1 => "norm1",
            Sublayer::Norm2 => "norm2",
        }
    }
}

/// Address of one weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    TokenEmbedding,
    PositionEmbedding,
    FinalNorm,
    ImageHead,
    Layer(usize, Sublayer),
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::TokenEmbedding => f.write_str("tok_emb"),
            ParamKey::PositionEmbedding => f.write_str("pos_emb"),
            ParamKey::FinalNorm => f.write_str("final_norm"),
            ParamKey::ImageHead => f.write_str("image_head"),
            ParamKey::Layer(l, s) => write!(f, "layer{l}.{}", s.name()),
        }
    }
}

impl ParamKey {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "tok_emb" => Some(ParamKey::TokenEmbedding),
            "pos_emb" => Some(ParamKey::PositionEmbedding),
            "final_norm" => Some(ParamKey::FinalNorm),
            "image_head" => Some(ParamKey::ImageHead),
            _ => {
                let rest = name.strip_prefix("layer")?;
                let (idx, sub) = rest.split_once('.')?;
                let layer = idx.parse().ok()?;
                let sub = Sublayer::ALL.into_iter().find(|s| s.name() == sub)?;
                Some(ParamKey::Layer(layer, sub))
            }
        }
    }
}

/// All weights of the toy generator, keyed by [`ParamKey`] display names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl Bindings for ModelParams {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl ModelParams {
    /// Scaled-uniform initialization from `config.init_seed`. Norm gains start
    /// at one and the image head at zero, so initial logits are uniform.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.d_model;
        let h = config.mlp_hidden;
        let mut tensors = BTreeMap::new();
        let mut put = |key: ParamKey, t: Tensor| {
            tensors.insert(key.to_string(), t);
        };
        put(
            ParamKey::TokenEmbedding,
            uniform(&mut rng, &[config.vocab_size, d], 0.5),
        );
        put(
            ParamKey::PositionEmbedding,
            uniform(&mut rng, &[config.max_len, d], 0.5),
        );
        let proj = 1.0 / (d as f64).sqrt();
        let down = 1.0 / (h as f64).sqrt();
        for l in 0..config.layers {
            for s in [Sublayer::Q, Sublayer::K, Sublayer::V, Sublayer::O] {
                put(ParamKey::Layer(l, s), uniform(&mut rng, &[d, d], proj));
            }
            put(
                ParamKey::Layer(l, Sublayer::MlpIn),
                uniform(&mut rng, &[d, h], proj),
            );
            put(
                ParamKey::Layer(l, Sublayer::MlpOut),
                uniform(&mut rng, &[h, d], down),
            );
            put(ParamKey::Layer(l, Sublayer::Norm1), Tensor::filled(&[d], 1.0));
            put(ParamKey::Layer(l, Sublayer::Norm2), Tensor::filled(&[d], 1.0));
        }
        put(ParamKey::FinalNorm, Tensor::filled(&[d], 1.0));
        put(
            ParamKey::ImageHead,
            Tensor::zeros(&[d, config.codebook_size]),
        );
        Ok(Self { config, tensors })
    }

    pub(crate) fn from_parts(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone())?;
        for (name, t) in &reference.tensors {
            match tensors.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        if tensors.len() != reference.tensors.len() {
            return Err(Error::Checkpoint("unexpected extra tensors".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, key: ParamKey) -> &Tensor {
        &self.tensors[&key.to_string()]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// `(name, tensor)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Names of the tensors belonging to transformer layers.
    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.names()
            .filter(|n| matches!(ParamKey::parse(n), Some(ParamKey::Layer(..))))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Euclidean norm of `self - other` over all tensors.
    pub fn distance(&self, other: &ModelParams) -> f64 {
        self.tensors
            .iter()
            .map(|(k, a)| {
                a.data()
                    .iter()
                    .zip(other.tensors[k].data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Per-tensor bit equality.
    pub fn bit_equal(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, a)| {
                other.tensors.get(k).is_some_and(|b| {
                    a.shape() == b.shape()
                        && a
                            .data()
                            .iter()
                            .zip(b.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
            })
    }
}
