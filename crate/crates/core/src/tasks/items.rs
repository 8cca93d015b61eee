use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TaskKind;
use crate::autograd::Tensor;
use crate::data::{fit_units, Corpus, MelExtractor, Synthesizer, UnitLabeler, Vocab};
use crate::error::{Error, Result};
use crate::Scalar;

/// One pre-training speech example: waveform, log-Mel frames and unit labels
/// at the log-Mel frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechItem<S> {
    pub id: String,
    pub waveform: Vec<S>,
    pub features: Tensor<S>,
    pub units: Option<Vec<usize>>,
    pub speaker: usize,
}

/// One pre-training text example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextItem {
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Input<S> {
    Speech(Vec<S>),
    Text(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target<S> {
    Text(Vec<usize>),
    Speech(Tensor<S>),
    Speaker(usize),
}

/// One fine-tuning pair. `speaker` conditions the speech decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneItem<S> {
    pub id: String,
    pub input: Input<S>,
    pub target: Target<S>,
    pub speaker: usize,
}

pub fn to_scalar<S: Scalar>(wave: &[f32]) -> Vec<S> {
    wave.iter().map(|&x| S::lit(x as f64)).collect()
}

fn cast<S: Scalar>(x: &Tensor<f64>) -> Tensor<S> {
    Tensor::from_f64(x.shape(), x.data()).expect("same shape")
}

/// Fits the unit labeler on every log-Mel frame of the corpus.
pub fn fit_corpus_units(corpus: &Corpus, mel: &MelExtractor, k: usize, iters: usize, seed: u64) -> Result<UnitLabeler> {
    let mut rows = Vec::new();
    let mut width = 0;
    for u in &corpus.utterances {
        let f = mel.extract::<f64>(&u.waveform)?;
        width = f.cols();
        rows.extend_from_slice(f.data());
    }
    let n = if width == 0 { 0 } else { rows.len() / width };
    let frames = Tensor::new(vec![n, width], rows)?;
    fit_units(&frames, k, iters, seed)
}

pub fn speech_items<S: Scalar>(
    corpus: &Corpus,
    mel: &MelExtractor,
    labeler: Option<&UnitLabeler>,
) -> Result<Vec<SpeechItem<S>>> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            let f = mel.extract::<f64>(&u.waveform)?;
            let units = labeler.map(|l| l.label(&f)).transpose()?;
            Ok(SpeechItem {
                id: u.id.clone(),
                waveform: to_scalar(&u.waveform),
                features: cast(&f),
                units,
                speaker: u.speaker,
            })
        })
        .collect()
}

pub fn text_items(sentences: &[String], vocab: &Vocab) -> Result<Vec<TextItem>> {
    sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| Ok(TextItem { tokens: vocab.encode(s)? }))
        .collect()
}

/// Builds the pairs of a fine-tuning task. Voice-conversion targets are the
/// same text re-rendered by the next speaker, seeded per utterance.
pub fn finetune_items<S: Scalar>(
    kind: TaskKind,
    corpus: &Corpus,
    mel: &MelExtractor,
    seed: u64,
) -> Result<Vec<FinetuneItem<S>>> {
    let vocab = corpus.vocab()?;
    let synth_cfg = corpus.synth_config(seed);
    let synth = Synthesizer::new(&synth_cfg)?;
    let mut out = Vec::with_capacity(corpus.len());
    for (i, u) in corpus.utterances.iter().enumerate() {
        let wave = || Input::Speech(to_scalar(&u.waveform));
        let (input, target, speaker) = match kind {
            TaskKind::Asr => (wave(), Target::Text(vocab.encode(&u.text)?), u.speaker),
            TaskKind::St => {
                let t = u
                    .translation
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("{}: no translation", u.id)))?;
                (wave(), Target::Text(vocab.encode(t)?), u.speaker)
            }
            TaskKind::Tts => (
                Input::Text(vocab.encode(&u.text)?),
                Target::Speech(mel.extract(&u.waveform)?),
                u.speaker,
            ),
            TaskKind::Se => {
                let noisy = u
                    .noisy
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("{}: no noisy waveform", u.id)))?;
                (
                    Input::Speech(to_scalar(noisy)),
                    Target::Speech(mel.extract(&u.waveform)?),
                    u.speaker,
                )
            }
            TaskKind::Vc => {
                let to = (u.speaker + 1) % corpus.n_speakers.max(1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                let converted = synth.render(&u.text, to, &mut rng)?;
                (wave(), Target::Speech(mel.extract(&converted)?), to)
            }
            TaskKind::Sid => (wave(), Target::Speaker(u.speaker), u.speaker),
            TaskKind::Pretrain => {
                return Err(Error::Routing("pre-training does not use fine-tuning pairs".into()));
            }
        };
        out.push(FinetuneItem {
            id: u.id.clone(),
            input,
            target,
            speaker,
        });
    }
    Ok(out)
}
