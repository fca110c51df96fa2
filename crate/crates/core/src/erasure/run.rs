use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Layered, NodeId};
use crate::error::{Error, Result};
use crate::model::{forward_latents, generate, LatentSeq, ModelGraph, ModelParams, Sampling, Vocab};
use crate::optim::Adam;
use crate::tensor::Tensor;

use super::{
    apply_tlm, guidance_target, partition_windows, select_trainable, EraseConfig, GradMap,
    PromptPair, TrainableMask, UpdatePolicy, WindowOrdering, WindowSpec,
};

const GUIDANCE: &str = "guidance";

/// Everything the frozen model contributes to one step.
#[derive(Clone, Debug)]
pub struct StepContext {
    pub target_tokens: Vec<u32>,
    /// Greedy decoding of the frozen model on the target prompt; all three
    /// passes are teacher-forced on it.
    pub teacher: Vec<u32>,
    pub h_org_tar: LatentSeq,
    pub h_org_sur: LatentSeq,
    pub guidance: LatentSeq,
}

impl StepContext {
    pub fn prepare(frozen: &ModelParams, vocab: &Vocab, pair: &PromptPair, eta: f64) -> Result<Self> {
        let target_tokens = vocab.tokenize(&pair.target_prompt)?;
        let surrogate_tokens = vocab.tokenize(&pair.surrogate_prompt)?;
        let t = frozen.config().image_tokens;
        let teacher = generate(frozen, &target_tokens, t, Sampling::Greedy)?;
        let h_org_tar = forward_latents(frozen, &target_tokens, &teacher)?;
        let h_org_sur = forward_latents(frozen, &surrogate_tokens, &teacher)?;
        let guidance = guidance_target(&h_org_tar, &h_org_sur, eta)?;
        Ok(Self {
            target_tokens,
            teacher,
            h_org_tar,
            h_org_sur,
            guidance,
        })
    }
}

/// The trainable pass with one scalar loss node per window.
pub struct WindowObjective {
    model: ModelGraph,
    losses: Vec<NodeId>,
    windows: WindowSpec,
    guidance: BTreeMap<String, Tensor>,
}

impl WindowObjective {
    pub fn build(
        params: &ModelParams,
        ctx: &StepContext,
        windows: WindowSpec,
        mask: &TrainableMask,
    ) -> Result<Self> {
        let t = ctx.teacher.len();
        if windows.span() != t || ctx.guidance.len() != t {
            return Err(Error::invalid("windows, guidance and teacher disagree on length"));
        }
        let mut model = ModelGraph::build(
            params.config(),
            &ctx.target_tokens,
            &ctx.teacher[..t - 1],
            &|name| mask.contains(name),
        )?;
        let g = &mut model.graph;
        let target = g.input(GUIDANCE, false);
        let losses = windows
            .ranges()
            .iter()
            .map(|r| {
                let h = g.slice(model.latents, 0, r.start, r.end);
                let tgt = g.slice(target, 0, r.start, r.end);
                let diff = g.sub(h, tgt);
                g.sum_squares(diff)
            })
            .collect();
        let guidance = [(GUIDANCE.to_string(), ctx.guidance.as_tensor().clone())].into();
        Ok(Self {
            model,
            losses,
            windows,
            guidance,
        })
    }

    pub fn windows(&self) -> &WindowSpec {
        &self.windows
    }

    /// Forward under `params`; returns every window's loss.
    pub fn evaluate(&mut self, params: &ModelParams) -> Result<Vec<f64>> {
        self.model
            .graph
            .forward(&Layered(params, &self.guidance))?;
        Ok(self
            .losses
            .iter()
            .map(|&id| self.model.graph.value(id).and_then(Tensor::item).unwrap())
            .collect())
    }

    /// Gradient of window `i`'s loss with respect to the masked parameters.
    pub fn gradient(&self, i: usize) -> Result<GradMap> {
        Ok(self.model.graph.backward(self.losses[i])?.into_named())
    }

    pub fn latents(&self) -> LatentSeq {
        self.model.latent_value()
    }
}

/// One line of the run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub step: usize,
    pub window_index: usize,
    pub range: [usize; 2],
    pub loss: f64,
    pub discarded: bool,
    /// An optimizer step followed this window.
    pub update_applied: bool,
    /// Norm of the window gradient before thresholding.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub pair_index: usize,
    /// The dataset was shorter than the step count and wrapped around.
    pub cycled: bool,
    pub teacher: Vec<u32>,
    pub kept: usize,
    pub discarded: usize,
    pub loss: f64,
    pub param_delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub windows: Vec<WindowRecord>,
    pub steps: Vec<StepSummary>,
}

impl RunReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.windows {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn discarded(&self) -> usize {
        self.windows.iter().filter(|r| r.discarded).count()
    }
}

/// Trainable weights, the frozen snapshot, and optimizer state.
pub struct EraseState {
    params: ModelParams,
    frozen: ModelParams,
    adam: Adam,
    mask: TrainableMask,
    rng: ChaCha8Rng,
}

impl EraseState {
    pub fn new(initial: &ModelParams, cfg: &EraseConfig) -> Result<Self> {
        cfg.validate(initial)?;
        Ok(Self {
            params: initial.clone(),
            frozen: initial.clone(),
            adam: Adam::new(cfg.lr),
            mask: select_trainable(initial, cfg.layers.clone(), &cfg.projections)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn frozen(&self) -> &ModelParams {
        &self.frozen
    }

    pub fn mask(&self) -> &TrainableMask {
        &self.mask
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }
}

/// Result of one [`erase_step`].
pub struct StepOutcome {
    pub teacher: Vec<u32>,
    pub records: Vec<WindowRecord>,
    /// The summed, thresholded gradient handed to the optimizer under
    /// [`UpdatePolicy::AccumulateAll`].
    pub applied_gradient: Option<GradMap>,
}

fn add_into(acc: &mut GradMap, grads: &GradMap) {
    for (name, g) in grads {
        match acc.get_mut(name) {
            Some(a) => a.add_assign(g),
            None => {
                acc.insert(name.clone(), g.clone());
            }
        }
    }
}

fn norm(grads: &GradMap) -> f64 {
    grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

pub fn erase_step(
    state: &mut EraseState,
    vocab: &Vocab,
    pair: &PromptPair,
    cfg: &EraseConfig,
    step: usize,
) -> Result<StepOutcome> {
    let ctx = StepContext::prepare(&state.frozen, vocab, pair, cfg.eta)?;
    let windows = partition_windows(ctx.teacher.len(), cfg.window)?;
    let mut objective = WindowObjective::build(&state.params, &ctx, windows, &state.mask)?;

    let n = objective.windows().len();
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.ordering == WindowOrdering::Random {
        order.shuffle(&mut state.rng);
    }

    state.adam.lr = cfg.lr;
    let mut records = Vec::with_capacity(n);
    let mut accumulated = GradMap::new();
    let mut losses = objective.evaluate(&state.params)?;
    let mut stale = false;
    for &i in &order {
        if stale {
            losses = objective.evaluate(&state.params)?;
            stale = false;
        }
        let loss = losses[i];
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let grads = objective.gradient(i)?;
        let grad_norm = norm(&grads);
        let (grads, decision) = apply_tlm(loss, cfg.mu, grads);
        let mut update_applied = false;
        match cfg.policy {
            UpdatePolicy::PerWindow => {
                if !(decision.discarded() && cfg.freeze_moments) {
                    state
                        .adam
                        .step(&mut state.params, grads.iter().map(|(k, v)| (k.as_str(), v)));
                    update_applied = true;
                    stale = true;
                }
            }
            UpdatePolicy::AccumulateAll => {
                if !(decision.discarded() && cfg.freeze_moments) {
                    add_into(&mut accumulated, &grads);
                }
            }
        }
        let r = &objective.windows().ranges()[i];
        records.push(WindowRecord {
            step,
            window_index: i,
            range: [r.start, r.end],
            loss,
            discarded: decision.discarded(),
            update_applied,
            grad_norm,
        });
    }

    let mut applied_gradient = None;
    if cfg.policy == UpdatePolicy::AccumulateAll {
        let all_frozen = cfg.freeze_moments && records.iter().all(|r| r.discarded);
        if !all_frozen {
            state.adam.step(
                &mut state.params,
                accumulated.iter().map(|(k, v)| (k.as_str(), v)),
            );
            if let Some(last) = records.last_mut() {
                last.update_applied = true;
            }
        }
        applied_gradient = Some(accumulated);
    }
    Ok(StepOutcome {
        teacher: ctx.teacher,
        records,
        applied_gradient,
    })
}

/// Runs `cfg.steps` erasure steps, one pair per step, cycling through the
/// dataset if it is shorter.
pub fn run_erasure(
    initial: &ModelParams,
    vocab: &Vocab,
    dataset: &[PromptPair],
    cfg: &EraseConfig,
) -> Result<(ModelParams, RunReport)> {
    if dataset.is_empty() {
        return Err(Error::invalid("erasure dataset is empty"));
    }
    let mut state = EraseState::new(initial, cfg)?;
    let mut report = RunReport::default();
    for step in 0..cfg.steps {
        let pair_index = step % dataset.len();
        let before = state.params.clone();
        let outcome = erase_step(&mut state, vocab, &dataset[pair_index], cfg, step)?;
        let kept = outcome.records.iter().filter(|r| !r.discarded).count();
        report.steps.push(StepSummary {
            step,
            pair_index,
            cycled: step >= dataset.len(),
            teacher: outcome.teacher,
            kept,
            discarded: outcome.records.len() - kept,
            loss: outcome.records.iter().map(|r| r.loss).sum(),
            param_delta: state.params.distance(&before),
        });
        report.windows.extend(outcome.records);
    }
    Ok((state.into_params(), report))
}
