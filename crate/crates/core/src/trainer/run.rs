use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::ModelState;
use super::optim::{lr_at, OptimConfig, UpdateStats};
use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, PretrainLosses};
use crate::tasks::{finetune_step, pretrain_step, FinetuneItem, LossKind, PretrainConfig, SpeechItem, TaskSpec, TextItem};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    pub speech: usize,
    pub text: usize,
    pub finetune: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            speech: 4,
            text: 8,
            finetune: 4,
        }
    }
}

/// Loss components and schedule values of one optimizer update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: PretrainLosses,
    pub lr: f64,
    pub update: UpdateStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneRecord {
    pub step: u64,
    pub loss: f64,
    pub parts: Vec<(LossKind, f64)>,
    pub lr: f64,
    pub update: UpdateStats,
}

/// `min(n, len)` distinct items drawn uniformly, in draw order.
pub fn sample_batch<T: Clone, R: Rng + ?Sized>(items: &[T], n: usize, rng: &mut R) -> Vec<T> {
    if items.is_empty() || n == 0 {
        return Vec::new();
    }
    index::sample(rng, items.len(), n.min(items.len()))
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}

fn apply<S: Scalar>(state: &mut ModelState<S>, mut grads: Grads<S>, optim: &OptimConfig) -> Result<(f64, UpdateStats)> {
    if optim.accumulation > 1 {
        grads.scale(S::one() / S::from_usize(optim.accumulation).unwrap());
    }
    let lr = lr_at(state.step + 1, optim);
    let update = state.adam.step(&mut state.model.params, &grads, lr, optim)?;
    state.step += 1;
    Ok((lr, update))
}

/// Samples batches from the state's RNG, accumulates gradients over
/// `optim.accumulation` micro-batches and applies one Adam update.
pub fn pretrain_update<S: Scalar>(
    state: &mut ModelState<S>,
    speech: &[SpeechItem<S>],
    text: &[TextItem],
    cfg: &PretrainConfig,
    weights: &LossWeights,
    optim: &OptimConfig,
    batch: &BatchConfig,
) -> Result<StepRecord> {
    let mut grads = Grads::new(state.model.params.len());
    let mut losses = PretrainLosses::default();
    let k = optim.accumulation as f64;
    for _ in 0..optim.accumulation {
        let sb = if cfg.speech { sample_batch(speech, batch.speech, &mut state.rng) } else { Vec::new() };
        let tb = if cfg.text { sample_batch(text, batch.text, &mut state.rng) } else { Vec::new() };
        let out = pretrain_step(&state.model, &sb, &tb, cfg, weights, &mut state.rng)?;
        grads.merge(&out.grads);
        let l = out.losses;
        losses.mlm += l.mlm / k;
        losses.l1 += l.l1 / k;
        losses.bce += l.bce / k;
        losses.mle += l.mle / k;
        losses.diversity += l.diversity / k;
        losses.attraction += l.attraction / k;
        losses.total += l.total / k;
        losses.objective += l.objective / k;
    }
    let (lr, update) = apply(state, grads, optim)?;
    Ok(StepRecord {
        step: state.step,
        losses,
        lr,
        update,
    })
}

pub fn finetune_update<S: Scalar>(
    state: &mut ModelState<S>,
    spec: &TaskSpec,
    items: &[FinetuneItem<S>],
    weights: &LossWeights,
    optim: &OptimConfig,
    batch_size: usize,
) -> Result<FinetuneRecord> {
    if items.is_empty() {
        return Err(Error::Contract("no fine-tuning data".into()));
    }
    let mut grads = Grads::new(state.model.params.len());
    let mut loss = 0.0;
    let mut parts: Vec<(LossKind, f64)> = Vec::new();
    let k = optim.accumulation as f64;
    for _ in 0..optim.accumulation {
        let b = sample_batch(items, batch_size, &mut state.rng);
        let out = finetune_step(&state.model, spec, &b, weights)?;
        grads.merge(&out.grads);
        loss += out.loss / k;
        for (kind, v) in out.parts {
            match parts.iter_mut().find(|(p, _)| *p == kind) {
                Some((_, acc)) => *acc += v / k,
                None => parts.push((kind, v / k)),
            }
        }
    }
    let (lr, update) = apply(state, grads, optim)?;
    Ok(FinetuneRecord {
        step: state.step,
        loss,
        parts,
        lr,
        update,
    })
}
