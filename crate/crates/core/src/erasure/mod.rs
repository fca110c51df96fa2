//! Concept erasure by latent regression.
//!
//! A frozen copy of the model produces latents for a target prompt and a
//! surrogate prompt on one shared image-token sequence. The trainable copy is
//! pulled toward a guidance target built from those two, window by window,
//! and windows whose loss is already below a threshold contribute nothing.

mod run;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentSeq, ModelParams, ParamKey, Sublayer};
use crate::tensor::Tensor;

pub use run::{
    erase_step, run_erasure, EraseState, RunReport, StepContext, StepSummary, WindowObjective,
    WindowRecord,
};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// A target prompt and its surrogate, plus where the pair came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPair {
    pub concept: String,
    pub target_prompt: String,
    pub surrogate_prompt: String,
    pub source: String,
    pub iteration: usize,
    pub seed: u64,
}

/// Disjoint, ordered half-open ranges covering `0..T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    ranges: Vec<Range<usize>>,
}

impl WindowSpec {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Total length covered.
    pub fn span(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }
}

pub fn partition_windows(t: usize, w: usize) -> Result<WindowSpec> {
    if w == 0 || w > t {
        return Err(Error::invalid(format!(
            "window length {w} must be in 1..={t}"
        )));
    }
    let ranges = (0..t)
        .step_by(w)
        .map(|s| s..(s + w).min(t))
        .collect();
    Ok(WindowSpec { ranges })
}

/// `g_t = h_sur_t - eta * (h_tar_t - h_sur_t)`.
pub fn guidance_target(h_tar: &LatentSeq, h_sur: &LatentSeq, eta: f64) -> Result<LatentSeq> {
    if h_tar.as_tensor().shape() != h_sur.as_tensor().shape() {
        return Err(Error::Shape {
            op: "guidance_target",
            lhs: h_tar.as_tensor().shape().to_vec(),
            rhs: h_sur.as_tensor().shape().to_vec(),
        });
    }
    let data = h_tar
        .as_tensor()
        .data()
        .iter()
        .zip(h_sur.as_tensor().data())
        .map(|(&tar, &sur)| sur - eta * (tar - sur))
        .collect();
    LatentSeq::new(Tensor::new(h_sur.as_tensor().shape().to_vec(), data)?)
}

/// Sum over `window` of squared Euclidean distances between rows.
pub fn window_loss(h_ft: &LatentSeq, g: &LatentSeq, window: Range<usize>) -> Result<f64> {
    if h_ft.as_tensor().shape() != g.as_tensor().shape() {
        return Err(Error::Shape {
            op: "window_loss",
            lhs: h_ft.as_tensor().shape().to_vec(),
            rhs: g.as_tensor().shape().to_vec(),
        });
    }
    if window.start > window.end || window.end > h_ft.len() {
        return Err(Error::invalid(format!(
            "window {window:?} outside 0..{}",
            h_ft.len()
        )));
    }
    Ok(window
        .flat_map(|t| h_ft.row(t).iter().zip(g.row(t)))
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Whether a window's gradients survived the loss threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TlmDecision {
    Kept,
    Discarded,
}

impl TlmDecision {
    pub fn discarded(self) -> bool {
        self == TlmDecision::Discarded
    }
}

/// Zeroes every gradient when `loss < mu`; equality keeps them.
pub fn apply_tlm(loss: f64, mu: f64, mut grads: GradMap) -> (GradMap, TlmDecision) {
    if loss < mu {
        grads.values_mut().for_each(|g| g.fill(0.0));
        (grads, TlmDecision::Discarded)
    } else {
        (grads, TlmDecision::Kept)
    }
}

/// Parameter names that receive erasure updates.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TrainableMask {
    names: BTreeSet<String>,
}

impl TrainableMask {
    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

/// Expands a projection selector into sublayers.
///
/// `mlp` and `norm` name both halves; `all` names every sublayer.
pub fn parse_projection(name: &str) -> Result<Vec<Sublayer>> {
    use Sublayer::*;
    Ok(match name {
        "all" => Sublayer::ALL.to_vec(),
        "mlp" => vec![MlpIn, MlpOut],
        "norm" => vec![Norm1, Norm2],
        other => match Sublayer::ALL.into_iter().find(|s| s.name() == other) {
            Some(s) => vec![s],
            None => return Err(Error::invalid(format!("unknown projection `{other}`"))),
        },
    })
}

pub fn select_trainable(
    params: &ModelParams,
    layers: Range<usize>,
    projections: &[String],
) -> Result<TrainableMask> {
    let depth = params.config().layers;
    if layers.start > layers.end || layers.end > depth {
        return Err(Error::invalid(format!(
            "layer range {layers:?} outside model depth {depth}"
        )));
    }
    let mut subs = BTreeSet::new();
    for p in projections {
        subs.extend(parse_projection(p)?);
    }
    let names = layers
        .flat_map(|l| subs.iter().map(move |&s| ParamKey::Layer(l, s).to_string()))
        .collect();
    Ok(TrainableMask { names })
}

/// Order in which windows are visited within a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowOrdering {
    Sequential,
    /// Shuffled with the run seed.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdatePolicy {
    /// One optimizer step after each window.
    PerWindow,
    /// Sum all window gradients, then one optimizer step.
    AccumulateAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EraseConfig {
    pub eta: f64,
    pub mu: f64,
    pub window: usize,
    pub layers: Range<usize>,
    pub projections: Vec<String>,
    pub steps: usize,
    pub lr: f64,
    pub ordering: WindowOrdering,
    pub policy: UpdatePolicy,
    /// Skip the optimizer entirely for discarded windows instead of feeding
    /// it a zero gradient.
    pub freeze_moments: bool,
    pub seed: u64,
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            mu: 0.05,
            window: 8,
            layers: 0..5,
            projections: vec!["q".into(), "k".into(), "v".into()],
            steps: 50,
            lr: 1e-4,
            ordering: WindowOrdering::Sequential,
            policy: UpdatePolicy::PerWindow,
            freeze_moments: false,
            seed: 0,
        }
    }
}

impl EraseConfig {
    /// Full-sequence regression onto the surrogate latents: one window, no
    /// guidance term, no threshold.
    pub fn full_sequence_baseline(t: usize) -> Self {
        Self {
            eta: 0.0,
            mu: 0.0,
            window: t,
            policy: UpdatePolicy::AccumulateAll,
            ..Self::default()
        }
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let t = params.config().image_tokens;
        if self.window == 0 || self.window > t {
            return Err(Error::invalid(format!(
                "window length {} must be in 1..={t}",
                self.window
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be finite and non-negative"));
        }
        if self.mu.is_nan() || self.mu < 0.0 {
            return Err(Error::invalid("mu must be non-negative"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        select_trainable(params, self.layers.clone(), &self.projections).map(|_| ())
    }
}
