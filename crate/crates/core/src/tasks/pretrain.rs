use rand::Rng;
use serde::{Deserialize, Serialize};

use super::items::{SpeechItem, TextItem};
use super::model::{shift_frames, Model};
use crate::autograd::{Grads, Tape, Tensor, Var};
use crate::data::{resample_nearest, Vocab};
use crate::error::{Error, Result};
use crate::losses::{mlm_loss, recon_l1, stop_bce, text_mle, LossWeights, PretrainLosses};
use crate::masking::{speech_span_mask, t5_span_mask, text_infill, MaskSet, TokenId};
use crate::quantizer::{assign, attraction_loss, diversity_loss, joint_soft_probs, mixup, soft_probs, DiversityMode};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMaskMode {
    /// One mask token per span; the decoder regenerates the whole sequence.
    Infill,
    /// One sentinel per span; the decoder generates only the hidden spans.
    Sentinel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub mask_prob: f64,
    pub mask_span: usize,
    pub text_mask_ratio: f64,
    pub poisson_lambda: f64,
    pub text_mask_mode: TextMaskMode,
    pub sentinel_mean_span: f64,
    pub speech: bool,
    pub text: bool,
    /// Quantizer, diversity loss and mix-up.
    pub joint: bool,
    pub mlm: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.08,
            mask_span: 10,
            text_mask_ratio: 0.3,
            poisson_lambda: 3.5,
            text_mask_mode: TextMaskMode::Infill,
            sentinel_mean_span: 3.0,
            speech: true,
            text: true,
            joint: true,
            mlm: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_span == 0 {
            return Err(Error::Config("mask_prob must lie in [0, 1] and mask_span be positive".into()));
        }
        if !(0.0..1.0).contains(&self.text_mask_ratio) || self.poisson_lambda <= 0.0 {
            return Err(Error::Config("text_mask_ratio must lie in [0, 1) and poisson_lambda be positive".into()));
        }
        if !self.speech && !self.text {
            return Err(Error::Config("pre-training needs the speech or the text path".into()));
        }
        Ok(())
    }
}

/// Loss values and parameter gradients of one pre-training step.
#[derive(Clone, Debug)]
pub struct StepOutput<S> {
    pub losses: PretrainLosses,
    pub grads: Grads<S>,
}

/// Averages scalar vars; `None` when there are none.
fn mean_of<S: Scalar>(tape: &mut Tape<'_, S>, parts: &[Var]) -> Result<Option<Var>> {
    if parts.is_empty() {
        return Ok(None);
    }
    let cat = tape.concat(parts, 0)?;
    Ok(Some(tape.mean(cat)))
}

fn rows_of<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let d = x.cols();
    Tensor::new(vec![len, d], x.data()[start * d..(start + len) * d].to_vec()).expect("row block")
}

struct SpeechPath<'a, S> {
    item: &'a SpeechItem<S>,
    encoded: Var,
}

struct TextPath {
    encoded: Var,
    target: Vec<TokenId>,
}

/// Forward and backward pass of Eq.-8 style pre-training over one speech
/// batch and one text batch. Parameters are not updated.
pub fn pretrain_step<S: Scalar, R: Rng + ?Sized>(
    model: &Model<S>,
    speech: &[SpeechItem<S>],
    text: &[TextItem],
    cfg: &PretrainConfig,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<StepOutput<S>> {
    cfg.validate()?;
    if cfg.speech && speech.is_empty() {
        return Err(Error::Contract("speech pre-training batch is empty".into()));
    }
    if cfg.text && text.is_empty() {
        return Err(Error::Contract("text pre-training batch is empty".into()));
    }
    let red = weights.reduction;
    let mut tape = model.tape();
    let t = &mut tape;

    let mut mlm_parts = Vec::new();
    let mut speech_paths = Vec::new();
    if cfg.speech {
        for item in speech {
            let n_h = model
                .config()
                .net
                .encoder_frames(item.waveform.len())
                .ok_or(Error::TooShort {
                    min: model.config().net.min_samples(),
                    got: item.waveform.len(),
                })?;
            let mask = if cfg.mlm {
                speech_span_mask(n_h, cfg.mask_prob, cfg.mask_span, rng)?
            } else {
                MaskSet::empty(n_h)
            };
            let (_, u) = model.encode_speech(t, &item.waveform, Some(&mask))?;
            if cfg.mlm {
                let units = item
                    .units
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("{}: no unit targets", item.id)))?;
                let z = resample_nearest(units, n_h)?;
                if z.len() != n_h {
                    return Err(Error::Data(format!("{} unit targets for {n_h} frames", z.len())));
                }
                if !mask.is_empty() {
                    let logits = model.mlm_head.forward(t, u)?;
                    mlm_parts.push(mlm_loss(t, logits, &z, &mask, red)?);
                }
            }
            speech_paths.push(SpeechPath { item, encoded: u });
        }
    }

    let mut text_paths = Vec::new();
    if cfg.text {
        let sentinels = Vocab::desk().sentinels();
        for item in text {
            let c = match cfg.text_mask_mode {
                TextMaskMode::Infill => text_infill(&item.tokens, cfg.text_mask_ratio, cfg.poisson_lambda, Vocab::MASK, rng)?,
                TextMaskMode::Sentinel => {
                    t5_span_mask(&item.tokens, cfg.text_mask_ratio, cfg.sentinel_mean_span, &sentinels, rng)?
                }
            };
            let u = model.encode_text(t, &c.corrupted)?;
            text_paths.push(TextPath {
                encoded: u,
                target: c.target,
            });
        }
    }

    // Shared codebook over every encoder output of the step.
    let encoded: Vec<Var> = speech_paths
        .iter()
        .map(|p| p.encoded)
        .chain(text_paths.iter().map(|p| p.encoded))
        .collect();
    let mut memories = encoded.clone();
    let mut diversity = None;
    let mut attraction = None;
    if cfg.joint {
        let qcfg = &model.config().quantizer;
        let cb = &model.codebook;
        let all = t.concat(&encoded, 0)?;
        let table = t.param(cb.table);
        let a = assign(t.value(all), t.value(table), cb.groups)?;
        let probs = match qcfg.diversity_mode {
            DiversityMode::PerGroup => soft_probs(t, all, table, cb.groups, qcfg.temperature)?,
            DiversityMode::Joint => joint_soft_probs(t, all, table, cb.groups, qcfg.temperature)?,
        };
        diversity = Some(diversity_loss(t, probs)?);
        attraction = Some(attraction_loss(t, all, table, &a, cb)?);
        let mut start = 0;
        for m in memories.iter_mut() {
            let n = t.shape(*m)[0];
            let q = rows_of(&a.quantized, start, n);
            *m = mixup(t, *m, &q, qcfg.mix_ratio, rng)?.0;
            start += n;
        }
    }

    let mut l1_parts = Vec::new();
    let mut bce_parts = Vec::new();
    for (p, &mem) in speech_paths.iter().zip(&memories) {
        let x = &p.item.features;
        let (post, _) = model.decode_speech(t, mem, &shift_frames(x), p.item.speaker)?;
        let target = t.constant(x.clone());
        let a = recon_l1(t, post.before, target, red)?;
        let b = recon_l1(t, post.refined, target, red)?;
        l1_parts.push(t.add(a, b)?);
        bce_parts.push(stop_bce(t, post.stop_logits, x.rows() - 1, weights.stop_positive_weight, red)?);
    }
    let mut mle_parts = Vec::new();
    for (p, &mem) in text_paths.iter().zip(&memories[speech_paths.len()..]) {
        let mut inputs = vec![Vocab::BOS];
        inputs.extend_from_slice(&p.target);
        let mut targets = p.target.clone();
        targets.push(Vocab::EOS);
        let (logits, _) = model.decode_text(t, mem, &inputs)?;
        mle_parts.push(text_mle(t, logits, &targets, red)?);
    }

    let mlm = mean_of(t, &mlm_parts)?;
    let l1 = mean_of(t, &l1_parts)?;
    let bce = mean_of(t, &bce_parts)?;
    let mle = mean_of(t, &mle_parts)?;
    let mut terms: Vec<Var> = [mlm, l1, bce, mle].into_iter().flatten().collect();
    if let Some(d) = diversity {
        terms.push(t.scale(d, S::lit(weights.gamma)));
    }
    let cat = t.concat(&terms, 0)?;
    let eq8 = t.sum(cat);
    let objective = match attraction {
        Some(a) => {
            let wa = t.scale(a, S::lit(weights.attraction_weight));
            t.add(eq8, wa)?
        }
        None => eq8,
    };
    let value = |v: Option<Var>, t: &Tape<'_, S>| v.map_or(0.0, |v| t.item(v).as_f64());
    let losses = PretrainLosses {
        mlm: value(mlm, t),
        l1: value(l1, t),
        bce: value(bce, t),
        mle: value(mle, t),
        diversity: value(diversity, t),
        attraction: value(attraction, t),
        total: t.item(eq8).as_f64(),
        objective: t.item(objective).as_f64(),
    };
    if !losses.objective.is_finite() {
        return Err(Error::Numerical(format!("non-finite pre-training loss {losses:?}")));
    }
    t.backward(objective)?;
    Ok(StepOutput {
        losses,
        grads: tape.param_grads(),
    })
}
