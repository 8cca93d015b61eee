//! Training objectives and the joint decoding score.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_add, log_sum_exp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::scalar::Scalar;

pub const BLANK: usize = 0;

/// Whether sequence losses are averaged over their elements or summed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the diversity term in the pre-training total.
    pub gamma: f64,
    /// Weight of CTC in ASR fine-tuning; the decoder gets `1 − ctc_weight`.
    pub ctc_weight: f64,
    pub stop_positive_weight: f64,
    pub attraction_weight: f64,
    pub guided_attention_weight: f64,
    pub guided_attention_width: f64,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            ctc_weight: 0.5,
            stop_positive_weight: 5.0,
            attraction_weight: 0.25,
            guided_attention_weight: 0.2,
            guided_attention_width: 0.4,
            reduction: Reduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gamma,
            self.ctc_weight,
            self.stop_positive_weight,
            self.attraction_weight,
            self.guided_attention_weight,
            self.guided_attention_width,
        ];
        if all.iter().any(|&w| !(w >= 0.0)) || self.ctc_weight > 1.0 {
            return Err(Error::Config(format!("loss weights must be >= 0 (ctc_weight <= 1): {self:?}")));
        }
        Ok(())
    }
}

fn reduce<S: Scalar>(tape: &mut Tape<'_, S>, total: Var, count: usize, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale(total, S::one() / S::from_usize(count.max(1)).unwrap()),
    }
}

fn picked_nll<S: Scalar>(
    tape: &mut Tape<'_, S>,
    logits: Var,
    rows: &[usize],
    targets: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [_, classes] = shape[..] else {
        return Err(Error::dim("cross_entropy", format!("logits shape {shape:?}")));
    };
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Lookup { id: bad, len: classes });
    }
    let logp = tape.log_softmax(logits, 1)?;
    let idx: Vec<usize> = rows.iter().zip(targets).map(|(&r, &t)| r * classes + t).collect();
    let picked = tape.gather(logp, &idx, &[idx.len()])?;
    let total = tape.sum(picked);
    let neg = tape.neg(total);
    Ok(reduce(tape, neg, idx.len(), reduction))
}

/// Cross-entropy of frame targets over masked timesteps only.
pub fn mlm_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    logits: Var,
    targets: &[usize],
    mask: &MaskSet,
    reduction: Reduction,
) -> Result<Var> {
    if mask.is_empty() {
        return Err(Error::Contract("masked prediction loss needs a non-empty mask".into()));
    }
    let n = tape.shape(logits)[0];
    if targets.len() != n || mask.total_len() != n {
        return Err(Error::dim(
            "mlm_loss",
            format!("{n} logit rows, {} targets, mask over {}", targets.len(), mask.total_len()),
        ));
    }
    let rows = mask.timesteps();
    let picked: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
    picked_nll(tape, logits, rows, &picked, reduction)
}

/// Token-level negative log-likelihood under teacher forcing.
pub fn text_mle<S: Scalar>(tape: &mut Tape<'_, S>, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
    let n = tape.shape(logits)[0];
    if targets.len() != n {
        return Err(Error::dim("text_mle", format!("{n} logit rows for {} targets", targets.len())));
    }
    let rows: Vec<usize> = (0..n).collect();
    picked_nll(tape, logits, &rows, targets, reduction)
}

/// Per-frame L1 distance, summed over frames and divided by the frame count
/// under [`Reduction::Mean`].
pub fn recon_l1<S: Scalar>(tape: &mut Tape<'_, S>, predicted: Var, target: Var, reduction: Reduction) -> Result<Var> {
    let diff = tape.sub(predicted, target)?;
    let a = tape.abs(diff);
    let total = tape.sum(a);
    let frames = tape.shape(predicted)[0];
    Ok(reduce(tape, total, frames, reduction))
}

/// Weighted binary cross-entropy with target 1 at `final_index` and 0 elsewhere.
pub fn stop_bce<S: Scalar>(
    tape: &mut Tape<'_, S>,
    logits: Var,
    final_index: usize,
    positive_weight: f64,
    reduction: Reduction,
) -> Result<Var> {
    let n = tape.value(logits).numel();
    if final_index >= n {
        return Err(Error::Lookup { id: final_index, len: n });
    }
    // BCE(x, y) = w·y·softplus(−x) + (1 − y)·softplus(x)
    let flat = tape.reshape(logits, &[n])?;
    let neg = tape.neg(flat);
    let sp_pos = tape.softplus(neg);
    let sp_neg = tape.softplus(flat);
    let mut wpos = vec![S::zero(); n];
    wpos[final_index] = S::lit(positive_weight);
    let mut wneg = vec![S::one(); n];
    wneg[final_index] = S::zero();
    let wpos = tape.constant(Tensor::vector(wpos));
    let wneg = tape.constant(Tensor::vector(wneg));
    let a = tape.mul(sp_pos, wpos)?;
    let b = tape.mul(sp_neg, wneg)?;
    let both = tape.add(a, b)?;
    let total = tape.sum(both);
    Ok(reduce(tape, total, n, reduction))
}

/// Frames needed to align `target`: one per label plus a blank between repeats.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-probability of `target` under CTC, with its gradient with
/// respect to the logits. Logits are `[T, C]` (softmax applied internally);
/// label `blank` is the blank symbol.
pub fn ctc_forward_backward<S: Scalar>(logits: &Tensor<S>, target: &[usize], blank: usize) -> Result<(S, Vec<S>)> {
    let (t_len, c) = (logits.rows(), logits.cols());
    if let Some(&bad) = target.iter().find(|&&l| l >= c || l == blank) {
        return Err(Error::Contract(format!("CTC target label {bad} invalid for {c} classes / blank {blank}")));
    }
    let needed = ctc_min_frames(target);
    if t_len < needed.max(1) {
        return Err(Error::Infeasible {
            needed: needed.max(1),
            available: t_len,
        });
    }
    let ninf = S::neg_infinity();
    let mut logp = vec![S::zero(); t_len * c];
    for t in 0..t_len {
        let row = logits.row(t);
        let lse = log_sum_exp(row.iter().copied());
        for k in 0..c {
            logp[t * c + k] = row[k] - lse;
        }
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = logp[ext[0]];
    if s_len > 1 {
        alpha[1] = logp[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = a + logp[t * c + ext[s]];
        }
    }
    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = S::zero();
    if s_len > 1 {
        beta[last + s_len - 2] = S::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let em = |s2: usize| beta[(t + 1) * s_len + s2] + logp[(t + 1) * c + ext[s2]];
            let mut b = em(s);
            if s + 1 < s_len {
                b = log_add(b, em(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, em(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }
    let mut log_total = alpha[last + s_len - 1];
    if s_len > 1 {
        log_total = log_add(log_total, alpha[last + s_len - 2]);
    }
    if log_total == ninf {
        return Err(Error::Infeasible {
            needed,
            available: t_len,
        });
    }
    let mut grad = vec![S::zero(); t_len * c];
    let mut occupancy = vec![ninf; c];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let k = ext[s];
            occupancy[k] = log_add(occupancy[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for k in 0..c {
            let post = (occupancy[k] - log_total).exp();
            grad[t * c + k] = logp[t * c + k].exp() - post;
        }
    }
    Ok((-log_total, grad))
}

/// CTC loss over encoder logits `[T, C]` with blank id [`BLANK`].
pub fn ctc_loss<S: Scalar>(tape: &mut Tape<'_, S>, logits: Var, target: &[usize]) -> Result<Var> {
    let (value, grad) = ctc_forward_backward(tape.value(logits), target, BLANK)?;
    tape.precomputed(logits, value, grad)
}

/// Penalises cross-attention mass far from the diagonal:
/// `mean(A ⊙ (1 − exp(−(n/N − t/T)² / 2g²)))`, averaged over heads.
pub fn guided_attention<S: Scalar>(tape: &mut Tape<'_, S>, weights: &[Var], width: f64) -> Result<Var> {
    let first = *weights
        .first()
        .ok_or_else(|| Error::Contract("no attention maps".into()))?;
    let (t, n) = (tape.shape(first)[0], tape.shape(first)[1]);
    let mut w = Vec::with_capacity(t * n);
    for i in 0..t {
        for j in 0..n {
            let d = j as f64 / n as f64 - i as f64 / t as f64;
            w.push(S::lit(1.0 - (-(d * d) / (2.0 * width * width)).exp()));
        }
    }
    let wv = tape.constant(Tensor::new(vec![t, n], w)?);
    let mut parts = Vec::with_capacity(weights.len());
    for &a in weights {
        let p = tape.mul(a, wv)?;
        parts.push(tape.mean(p));
    }
    let cat = tape.concat(&parts, 0)?;
    Ok(tape.mean(cat))
}

/// Per-component pre-training losses as plain numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub mlm: f64,
    pub l1: f64,
    pub bce: f64,
    pub mle: f64,
    pub diversity: f64,
    pub attraction: f64,
    /// Eq.-8 sum: the four task losses plus `γ·diversity`.
    pub total: f64,
    /// What is minimised: `total` plus the weighted attraction term.
    pub objective: f64,
}

/// `mlm + l1 + bce + mle + γ·diversity`.
pub fn pretrain_total(mlm: f64, l1: f64, bce: f64, mle: f64, diversity: f64, w: &LossWeights) -> f64 {
    mlm + l1 + bce + mle + w.gamma * diversity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Decoder weight; CTC gets `1 − alpha`.
    pub alpha: f64,
    /// External language-model weight.
    pub beta: f64,
    pub beam: usize,
    pub max_steps: usize,
    pub stop_threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.0,
            beam: 4,
            max_steps: 64,
            stop_threshold: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.beam < 1 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `α·log P_dec + (1 − α)·log P_ctc + β·log P_lm`
pub fn joint_decode_score(log_p_dec: f64, log_p_ctc: f64, log_p_lm: f64, cfg: &DecodeConfig) -> f64 {
    let ctc = if cfg.alpha == 1.0 { 0.0 } else { (1.0 - cfg.alpha) * log_p_ctc };
    let lm = if cfg.beta == 0.0 { 0.0 } else { cfg.beta * log_p_lm };
    cfg.alpha * log_p_dec + ctc + lm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_score_examples() {
        let cfg = DecodeConfig {
            alpha: 1.0,
            beta: 0.0,
            ..DecodeConfig::default()
        };
        assert_eq!(joint_decode_score(-1.25, f64::NEG_INFINITY, -7.0, &cfg), -1.25);
        let cfg = DecodeConfig {
            alpha: 0.5,
            beta: 1.0,
            ..DecodeConfig::default()
        };
        assert_eq!(joint_decode_score(-1.0, -3.0, -2.0, &cfg), -4.0);
    }

    #[test]
    fn total_arithmetic() {
        let w = LossWeights::default();
        assert!((pretrain_total(0.0, 0.0, 0.0, 0.0, 0.0, &w)).abs() < 1e-15);
        let t = pretrain_total(1.0, 1.0, 1.0, 1.0, -0.3, &w);
        assert!((t - 3.97).abs() < 1e-12);
    }

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(ctc_min_frames(&[1, 1, 2]), 4);
        assert_eq!(ctc_min_frames(&[1, 2, 3]), 3);
        assert_eq!(ctc_min_frames(&[]), 0);
    }

    #[test]
    fn infeasible_target_is_rejected() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            ctc_forward_backward(&logits, &[1, 1], BLANK),
            Err(Error::Infeasible { needed: 3, available: 2 })
        ));
    }

    #[test]
    fn weights_validate() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.gamma = -1.0;
        assert!(w.validate().is_err());
    }
}
