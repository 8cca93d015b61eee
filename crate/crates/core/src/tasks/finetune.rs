use super::items::{FinetuneItem, Input, Target};
use super::model::{shift_frames, Model};
use super::spec::{DecoderNets, EncoderPrenet, LossKind, TaskKind, TaskSpec};
use crate::autograd::{Grads, Tape, Var};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::losses::{ctc_loss, guided_attention, recon_l1, stop_bce, text_mle, LossWeights, Reduction};
use crate::Scalar;

/// Fine-tuning loss, its named parts (batch means) and parameter gradients.
#[derive(Clone, Debug)]
pub struct FinetuneOutput<S> {
    pub loss: f64,
    pub parts: Vec<(LossKind, f64)>,
    pub grads: Grads<S>,
}

impl<S> FinetuneOutput<S> {
    pub fn part(&self, kind: LossKind) -> Option<f64> {
        self.parts.iter().find(|(k, _)| *k == kind).map(|(_, v)| *v)
    }
}

/// Runs the encoder side of a route on one input.
pub(crate) fn encode_input<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<'_, S>,
    prenet: EncoderPrenet,
    input: &Input<S>,
) -> Result<Var> {
    match (prenet, input) {
        (EncoderPrenet::Speech, Input::Speech(w)) => Ok(model.encode_speech(tape, w, None)?.1),
        (EncoderPrenet::Text, Input::Text(tokens)) => model.encode_text(tape, tokens),
        (p, _) => Err(Error::Routing(format!("{p:?} encoder pre-net given the wrong input modality"))),
    }
}

/// Loss terms of one example as `(kind, var)` pairs, before weighting.
fn example_terms<S: Scalar>(
    model: &Model<S>,
    t: &mut Tape<'_, S>,
    spec: &TaskSpec,
    item: &FinetuneItem<S>,
    weights: &LossWeights,
) -> Result<Vec<(LossKind, Var)>> {
    let route = spec.route()?;
    let red: Reduction = weights.reduction;
    let memory = encode_input(model, t, route.encoder_prenet, &item.input)?;
    let mut out = Vec::new();
    match (route.decoder, &item.target) {
        (DecoderNets::Text, Target::Text(tokens)) => {
            let mut inputs = vec![Vocab::BOS];
            inputs.extend_from_slice(tokens);
            let mut targets = tokens.clone();
            targets.push(Vocab::EOS);
            let (logits, _) = model.decode_text(t, memory, &inputs)?;
            out.push((LossKind::Mle, text_mle(t, logits, &targets, red)?));
            if spec.uses(LossKind::Ctc) {
                let logits = model.ctc_logits(t, memory)?;
                out.push((LossKind::Ctc, ctc_loss(t, logits, tokens)?));
            }
        }
        (DecoderNets::Speech, Target::Speech(x)) => {
            let (post, dec) = model.decode_speech(t, memory, &shift_frames(x), item.speaker)?;
            let target = t.constant(x.clone());
            let a = recon_l1(t, post.before, target, red)?;
            let b = recon_l1(t, post.refined, target, red)?;
            out.push((LossKind::L1, t.add(a, b)?));
            out.push((
                LossKind::Bce,
                stop_bce(t, post.stop_logits, x.rows() - 1, weights.stop_positive_weight, red)?,
            ));
            if spec.uses(LossKind::GuidedAttention) {
                out.push((
                    LossKind::GuidedAttention,
                    guided_attention(t, &dec.cross_attention, weights.guided_attention_width)?,
                ));
            }
        }
        (DecoderNets::SpeakerTable, Target::Speaker(s)) => {
            let logits = model.classify_speaker(t, memory)?;
            let n = t.shape(logits)[1];
            if *s >= n {
                return Err(Error::Lookup { id: *s, len: n });
            }
            out.push((LossKind::SpeakerCe, text_mle(t, logits, &[*s], red)?));
        }
        (d, _) => {
            return Err(Error::Routing(format!(
                "{} expects a target for the {d:?} decoder",
                spec.kind
            )))
        }
    }
    Ok(out)
}

/// Weight of a fine-tuning loss term in the task total.
pub fn term_weight(kind: TaskKind, loss: LossKind, w: &LossWeights) -> f64 {
    match (kind, loss) {
        (TaskKind::Asr, LossKind::Mle) => 1.0 - w.ctc_weight,
        (TaskKind::Asr, LossKind::Ctc) => w.ctc_weight,
        (_, LossKind::GuidedAttention) => w.guided_attention_weight,
        _ => 1.0,
    }
}

/// Forward and backward pass of one fine-tuning batch routed by `spec`.
pub fn finetune_step<S: Scalar>(
    model: &Model<S>,
    spec: &TaskSpec,
    batch: &[FinetuneItem<S>],
    weights: &LossWeights,
) -> Result<FinetuneOutput<S>> {
    if spec.kind == TaskKind::Pretrain {
        return Err(Error::Routing("use pretrain_step for pre-training".into()));
    }
    if batch.is_empty() {
        return Err(Error::Contract("fine-tuning batch is empty".into()));
    }
    let mut tape = model.tape();
    let t = &mut tape;
    let mut by_kind: Vec<(LossKind, Vec<Var>)> = Vec::new();
    for item in batch {
        for (k, v) in example_terms(model, t, spec, item, weights)? {
            match by_kind.iter_mut().find(|(kk, _)| *kk == k) {
                Some((_, vs)) => vs.push(v),
                None => by_kind.push((k, vec![v])),
            }
        }
    }
    let mut parts = Vec::new();
    let mut weighted = Vec::new();
    for (k, vs) in &by_kind {
        let cat = t.concat(vs, 0)?;
        let m = t.mean(cat);
        parts.push((*k, t.item(m).as_f64()));
        weighted.push(t.scale(m, S::lit(term_weight(spec.kind, *k, weights))));
    }
    let cat = t.concat(&weighted, 0)?;
    let total = t.sum(cat);
    let loss = t.item(total).as_f64();
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite {} loss {parts:?}", spec.kind)));
    }
    t.backward(total)?;
    Ok(FinetuneOutput {
        loss,
        parts,
        grads: tape.param_grads(),
    })
}
