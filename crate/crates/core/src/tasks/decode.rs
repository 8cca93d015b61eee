use super::finetune::encode_input;
use super::items::Input;
use super::model::Model;
use super::spec::{DecodeMode, LossKind, TaskSpec};
use crate::autograd::{log_add, Tensor};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::losses::{joint_decode_score, DecodeConfig, BLANK};
use crate::Scalar;

/// Next-token log-probabilities given a prefix (begin token excluded).
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[usize]) -> Result<Vec<f64>>> StepScorer for F {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// CTC prefix probabilities over frame log-posteriors `[T][C]`.
#[derive(Clone, Debug)]
pub struct CtcPrefixScorer {
    logp: Vec<Vec<f64>>,
    blank: usize,
}

/// Forward variables of one prefix: log-probability of the prefix having been
/// emitted by frame `t` and ending in a label (`r_n`) or a blank (`r_b`).
#[derive(Clone, Debug)]
pub struct CtcState {
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<usize>,
    /// log P(prefix is a prefix of the labelling)
    pub prefix_score: f64,
}

impl CtcPrefixScorer {
    pub fn new(logp: Vec<Vec<f64>>, blank: usize) -> Result<Self> {
        if logp.is_empty() {
            return Err(Error::Contract("CTC scorer needs at least one frame".into()));
        }
        Ok(Self { logp, blank })
    }

    /// From raw logits `[T, C]`.
    pub fn from_logits<S: Scalar>(logits: &Tensor<S>, blank: usize) -> Result<Self> {
        let logp = (0..logits.rows())
            .map(|r| {
                let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.iter().map(|v| v - z).collect()
            })
            .collect();
        Self::new(logp, blank)
    }

    pub fn frames(&self) -> usize {
        self.logp.len()
    }

    pub fn initial(&self) -> CtcState {
        let mut r_b = Vec::with_capacity(self.frames());
        let mut acc = 0.0;
        for row in &self.logp {
            acc += row[self.blank];
            r_b.push(acc);
        }
        CtcState {
            r_n: vec![f64::NEG_INFINITY; self.frames()],
            r_b,
            last: None,
            prefix_score: 0.0,
        }
    }

    pub fn extend(&self, st: &CtcState, c: usize) -> CtcState {
        let t_max = self.frames();
        let mut r_n = vec![f64::NEG_INFINITY; t_max];
        let mut r_b = vec![f64::NEG_INFINITY; t_max];
        let phi = |t: usize| {
            if st.last == Some(c) {
                st.r_b[t]
            } else {
                log_add(st.r_b[t], st.r_n[t])
            }
        };
        if st.last.is_none() {
            r_n[0] = self.logp[0][c];
        }
        let mut psi = r_n[0];
        for t in 1..t_max {
            let p = phi(t - 1);
            r_n[t] = log_add(r_n[t - 1], p) + self.logp[t][c];
            r_b[t] = log_add(r_b[t - 1], r_n[t - 1]) + self.logp[t][self.blank];
            psi = log_add(psi, p + self.logp[t][c]);
        }
        CtcState {
            r_n,
            r_b,
            last: Some(c),
            prefix_score: psi,
        }
    }

    /// log P(labelling == prefix).
    pub fn final_score(&self, st: &CtcState) -> f64 {
        let t = self.frames() - 1;
        log_add(st.r_n[t], st.r_b[t])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

struct Beam {
    tokens: Vec<usize>,
    dec: f64,
    ctc: Option<CtcState>,
    lm: f64,
}

/// Beam search ranking candidates by `joint_decode_score`. `emittable` lists
/// the candidate tokens and must contain `eos`. Hypotheses still open after
/// `cfg.max_steps` tokens are ranked as they stand.
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    ctc: Option<&CtcPrefixScorer>,
    lm: Option<&dyn Fn(&[usize], usize) -> f64>,
    emittable: &[usize],
    eos: usize,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    cfg.validate()?;
    if !emittable.contains(&eos) {
        return Err(Error::Config("end token must be emittable".into()));
    }
    if cfg.alpha < 1.0 && ctc.is_none() {
        return Err(Error::Config("alpha < 1 needs CTC posteriors".into()));
    }
    let score_of = |b: &Beam, ctc_score: f64| joint_decode_score(b.dec, ctc_score, b.lm, cfg);
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        dec: 0.0,
        ctc: ctc.map(|c| c.initial()),
        lm: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_steps {
        let mut cands: Vec<(f64, Beam, bool)> = Vec::new();
        for b in &beams {
            let lp = scorer.log_probs(&b.tokens)?;
            for &c in emittable {
                let lp_c = *lp
                    .get(c)
                    .ok_or(Error::Lookup { id: c, len: lp.len() })?;
                let (ctc_state, ctc_score) = match (ctc, &b.ctc) {
                    (Some(sc), Some(st)) if c == eos => (None, sc.final_score(st)),
                    (Some(sc), Some(st)) => {
                        let next = sc.extend(st, c);
                        let s = next.prefix_score;
                        (Some(next), s)
                    }
                    _ => (None, 0.0),
                };
                let lm_c = match (lm, cfg.beta) {
                    (Some(f), beta) if beta != 0.0 => f(&b.tokens, c),
                    _ => 0.0,
                };
                let mut tokens = b.tokens.clone();
                if c != eos {
                    tokens.push(c);
                }
                let nb = Beam {
                    tokens,
                    dec: b.dec + lp_c,
                    ctc: ctc_state,
                    lm: b.lm + lm_c,
                };
                cands.push((score_of(&nb, ctc_score), nb, c == eos));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        beams.clear();
        for (score, b, ended) in cands.into_iter().take(cfg.beam) {
            if ended {
                finished.push(Hypothesis {
                    tokens: b.tokens,
                    score,
                    finished: true,
                });
            } else {
                beams.push(b);
            }
        }
        // Scores never increase along a hypothesis, so an open beam cannot
        // overtake the best finished one once it falls behind.
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_open = beams
            .iter()
            .map(|b| score_of(b, b.ctc.as_ref().map_or(0.0, |s| s.prefix_score)))
            .fold(f64::NEG_INFINITY, f64::max);
        if beams.is_empty() || best_done >= best_open {
            break;
        }
    }
    for b in beams {
        let ctc_score = match (ctc, &b.ctc) {
            (Some(sc), Some(st)) => sc.final_score(st),
            _ => 0.0,
        };
        let score = score_of(&b, ctc_score);
        finished.push(Hypothesis {
            tokens: b.tokens,
            score,
            finished: false,
        });
    }
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.score > b.score) {
            best = Some(h);
        }
    }
    Ok(best.expect("at least one hypothesis"))
}

/// Picks the most probable emittable token at every step.
pub fn greedy_search(scorer: &mut dyn StepScorer, emittable: &[usize], eos: usize, max_steps: usize) -> Result<Vec<usize>> {
    let mut tokens = Vec::new();
    for _ in 0..max_steps {
        let lp = scorer.log_probs(&tokens)?;
        let mut best = (f64::NEG_INFINITY, eos);
        for &c in emittable {
            if lp[c] > best.0 {
                best = (lp[c], c);
            }
        }
        if best.1 == eos {
            break;
        }
        tokens.push(best.1);
    }
    Ok(tokens)
}

/// Decoder log-probabilities with the encoder output held fixed.
pub struct ModelScorer<'m, S> {
    model: &'m Model<S>,
    memory: Tensor<S>,
}

impl<'m, S: Scalar> ModelScorer<'m, S> {
    pub fn new(model: &'m Model<S>, memory: Tensor<S>) -> Self {
        Self { model, memory }
    }
}

impl<S: Scalar> StepScorer for ModelScorer<'_, S> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut t = self.model.tape();
        let mem = t.constant(self.memory.clone());
        let mut inputs = vec![Vocab::BOS];
        inputs.extend_from_slice(prefix);
        let (logits, _) = self.model.decode_text(&mut t, mem, &inputs)?;
        let last = t.slice(logits, 0, inputs.len() - 1, 1)?;
        let lp = t.log_softmax(last, 1)?;
        Ok(t.value(lp).data().iter().map(|v| v.as_f64()).collect())
    }
}

fn check_mode(spec: &TaskSpec, mode: DecodeMode) -> Result<()> {
    if spec.decode != mode {
        return Err(Error::Routing(format!("{} decodes as {:?}, not {mode:?}", spec.kind, spec.decode)));
    }
    Ok(())
}

/// Encoder output of one input as a plain tensor.
fn encode_fixed<S: Scalar>(model: &Model<S>, spec: &TaskSpec, input: &Input<S>) -> Result<Tensor<S>> {
    let route = spec.route()?;
    let mut t = model.tape();
    let u = encode_input(model, &mut t, route.encoder_prenet, input)?;
    Ok(t.value(u).clone())
}

fn check_nonempty<S>(input: &Input<S>) -> Result<()> {
    let empty = match input {
        Input::Speech(w) => w.is_empty(),
        Input::Text(t) => t.is_empty(),
    };
    if empty {
        return Err(Error::Contract("cannot decode an empty input".into()));
    }
    Ok(())
}

/// Text output by joint decoder/CTC beam search. Tasks trained without CTC
/// decode with the decoder score alone.
pub fn decode_text<S: Scalar>(
    model: &Model<S>,
    spec: &TaskSpec,
    input: &Input<S>,
    vocab: &Vocab,
    cfg: &DecodeConfig,
    lm: Option<&dyn Fn(&[usize], usize) -> f64>,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    check_mode(spec, DecodeMode::TextAutoregressive)?;
    check_nonempty(input)?;
    let memory = encode_fixed(model, spec, input)?;
    let mut cfg = cfg.clone();
    let ctc = if spec.uses(LossKind::Ctc) && cfg.alpha < 1.0 {
        let mut t = model.tape();
        let m = t.constant(memory.clone());
        let logits = model.ctc_logits(&mut t, m)?;
        Some(CtcPrefixScorer::from_logits(t.value(logits), BLANK)?)
    } else {
        cfg.alpha = 1.0;
        None
    };
    let mut scorer = ModelScorer::new(model, memory);
    let hyp = beam_search(&mut scorer, ctc.as_ref(), lm, &vocab.emittable(), Vocab::EOS, &cfg)?;
    Ok(hyp.tokens)
}

/// Greedy text decoding, the reference for beam size 1 with `alpha = 1`.
pub fn decode_text_greedy<S: Scalar>(
    model: &Model<S>,
    spec: &TaskSpec,
    input: &Input<S>,
    vocab: &Vocab,
    max_steps: usize,
) -> Result<Vec<usize>> {
    check_mode(spec, DecodeMode::TextAutoregressive)?;
    check_nonempty(input)?;
    let memory = encode_fixed(model, spec, input)?;
    greedy_search(&mut ModelScorer::new(model, memory), &vocab.emittable(), Vocab::EOS, max_steps)
}

/// Autoregressive log-Mel generation: each refined frame is fed back through
/// the speech-decoder pre-net until the stop probability exceeds
/// `stop_threshold` or `max_frames` frames exist.
pub fn decode_spectrogram<S: Scalar>(
    model: &Model<S>,
    spec: &TaskSpec,
    input: &Input<S>,
    speaker: usize,
    max_frames: usize,
    stop_threshold: f64,
) -> Result<Tensor<S>> {
    if max_frames < 1 {
        return Err(Error::Config("max_frames must be at least 1".into()));
    }
    check_mode(spec, DecodeMode::SpectrogramAutoregressive)?;
    check_nonempty(input)?;
    let memory = encode_fixed(model, spec, input)?;
    let mel = model.config().net.mel_bins;
    let mut frames: Vec<S> = vec![S::zero(); mel];
    let mut out: Vec<S> = Vec::new();
    for step in 0..max_frames {
        let mut t = model.tape();
        let mem = t.constant(memory.clone());
        let dec_in = Tensor::new(vec![step + 1, mel], frames.clone())?;
        let (post, _) = model.decode_speech(&mut t, mem, &dec_in, speaker)?;
        let refined = t.value(post.refined).row(step).to_vec();
        let stop = t.value(post.stop_logits).data()[step].as_f64();
        out.extend_from_slice(&refined);
        frames.extend_from_slice(&refined);
        if 1.0 / (1.0 + (-stop).exp()) > stop_threshold {
            break;
        }
    }
    let n = out.len() / mel;
    Tensor::new(vec![n, mel], out)
}

/// Most probable speaker from one decoder step.
pub fn classify_speaker<S: Scalar>(model: &Model<S>, spec: &TaskSpec, input: &Input<S>) -> Result<usize> {
    check_mode(spec, DecodeMode::SingleStepClass)?;
    check_nonempty(input)?;
    let memory = encode_fixed(model, spec, input)?;
    let mut t = model.tape();
    let mem = t.constant(memory);
    let logits = model.classify_speaker(&mut t, mem)?;
    let row = t.value(logits).data();
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    Ok(best)
}
