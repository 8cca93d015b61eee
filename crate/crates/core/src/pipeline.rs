//! Glue between a [`RunConfig`], the on-disk corpus and the training loops.

use std::path::Path;

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::data::io::{load_corpus, load_sentences};
use crate::data::{Corpus, MelExtractor, Vocab};
use crate::error::{Error, Result};
use crate::eval::{accuracy, edit_distance, mcd_dtw, wer_str, MetricReport, UtteranceScore};
use crate::tasks::{
    classify_speaker, decode_spectrogram, decode_text, finetune_items, fit_corpus_units, speech_items, text_items,
    FinetuneItem, SpeechItem, Target, TaskKind, TaskSpec, TextItem,
};
use crate::trainer::{finetune_update, pretrain_update, read_checkpoint, FinetuneRecord, ModelState, StepRecord};
use crate::Scalar;

/// Loads the configured corpus and checks it against the model and features.
pub fn load_run_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let dir = &cfg.data.corpus;
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let corpus = load_corpus(dir)?;
    check_corpus(cfg, &corpus)?;
    Ok(corpus)
}

pub fn check_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<()> {
    if corpus.sample_rate != cfg.mel.sample_rate {
        return Err(Error::Config(format!(
            "corpus sample rate {} differs from mel.sample_rate {}",
            corpus.sample_rate, cfg.mel.sample_rate
        )));
    }
    let vocab = corpus.vocab()?;
    if vocab.size() != cfg.model.net.vocab {
        return Err(Error::Config(format!(
            "corpus vocabulary has {} entries, model.net.vocab is {}",
            vocab.size(),
            cfg.model.net.vocab
        )));
    }
    if corpus.n_speakers > cfg.model.net.n_speakers {
        return Err(Error::Config(format!(
            "corpus has {} speakers, model.net.n_speakers is {}",
            corpus.n_speakers, cfg.model.net.n_speakers
        )));
    }
    Ok(())
}

/// Feature-extracted, unit-labelled pre-training data.
#[derive(Clone, Debug)]
pub struct PretrainData<S> {
    pub speech: Vec<SpeechItem<S>>,
    pub text: Vec<TextItem>,
    pub vocab: Vocab,
}

/// Units are fitted only when masked prediction is on; sentences are read
/// only when text pre-training is on.
pub fn prepare_pretrain<S: Scalar>(cfg: &RunConfig, corpus: &Corpus) -> Result<PretrainData<S>> {
    let mel = MelExtractor::new(&cfg.mel)?;
    let vocab = corpus.vocab()?;
    let p = &cfg.pretrain;
    let speech = if p.speech {
        let labeler = if p.mlm {
            Some(fit_corpus_units(
                corpus,
                &mel,
                cfg.model.clusters,
                cfg.data.unit_iters,
                cfg.data.unit_seed,
            )?)
        } else {
            None
        };
        speech_items(corpus, &mel, labeler.as_ref())?
    } else {
        Vec::new()
    };
    let text = if p.text {
        let sentences = load_sentences(&cfg.data.sentences_path())?;
        text_items(&sentences, &vocab)?
    } else {
        Vec::new()
    };
    if speech.is_empty() && text.is_empty() {
        return Err(Error::Data("no pre-training data: corpus and sentences are empty".into()));
    }
    Ok(PretrainData { speech, text, vocab })
}

/// Runs updates until `state.step == until`, calling `on_step` after each.
pub fn run_pretrain<S, F>(
    state: &mut ModelState<S>,
    data: &PretrainData<S>,
    cfg: &RunConfig,
    until: u64,
    mut on_step: F,
) -> Result<()>
where
    S: Scalar,
    F: FnMut(&ModelState<S>, &StepRecord) -> Result<()>,
{
    while state.step < until {
        let rec = pretrain_update(
            state,
            &data.speech,
            &data.text,
            &cfg.pretrain,
            &cfg.losses,
            &cfg.optim,
            &cfg.batch,
        )?;
        on_step(state, &rec)?;
    }
    Ok(())
}

/// Fresh state for fine-tuning, optionally initialised from a pre-training
/// checkpoint. Returns the names of parameters left at their fresh values.
pub fn init_finetune<S: Scalar>(cfg: &RunConfig, init: Option<&Path>) -> Result<(ModelState<S>, Vec<String>)> {
    let mut state = ModelState::new(&cfg.model, cfg.seed)?;
    let fresh = match init {
        Some(path) => {
            let data = read_checkpoint(path)?;
            data.check_fingerprint(&cfg.model)?;
            let store = data.param_store::<S>()?;
            let skip = if cfg.finetune.reinit_decoder { Backbone::decoder_prefixes() } else { &[] };
            state.model.transfer_from(&store, skip)
        }
        None => state.model.params.ids().map(|id| state.model.params.name(id).to_string()).collect(),
    };
    Ok((state, fresh))
}

/// Task pairs from the corpus, truncated to `data.limit` when set.
pub fn prepare_finetune<S: Scalar>(cfg: &RunConfig, kind: TaskKind, corpus: &Corpus) -> Result<Vec<FinetuneItem<S>>> {
    let mel = MelExtractor::new(&cfg.mel)?;
    let mut items = finetune_items(kind, corpus, &mel, cfg.finetune.target_seed)?;
    if cfg.data.limit > 0 {
        items.truncate(cfg.data.limit);
    }
    if items.is_empty() {
        return Err(Error::Data("no fine-tuning pairs".into()));
    }
    Ok(items)
}

pub fn run_finetune<S, F>(
    state: &mut ModelState<S>,
    spec: &TaskSpec,
    items: &[FinetuneItem<S>],
    cfg: &RunConfig,
    until: u64,
    mut on_step: F,
) -> Result<()>
where
    S: Scalar,
    F: FnMut(&ModelState<S>, &FinetuneRecord) -> Result<()>,
{
    while state.step < until {
        let rec = finetune_update(
            state,
            spec,
            items,
            &cfg.losses,
            &cfg.finetune.optim,
            cfg.batch.finetune,
        )?;
        on_step(state, &rec)?;
    }
    Ok(())
}

/// Mean absolute error per element over the first `min(T1, T2)` frames.
pub fn frame_l1<S: Scalar>(a: &crate::autograd::Tensor<S>, b: &crate::autograd::Tensor<S>) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::dim("frame_l1", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.rows().min(b.rows());
    if n == 0 {
        return Err(Error::Contract("frame_l1 of an empty sequence".into()));
    }
    let m = a.cols();
    let sum: f64 = a.data()[..n * m]
        .iter()
        .zip(&b.data()[..n * m])
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(sum / (n * m) as f64)
}

/// Decodes every item per the task's decode mode and scores it.
///
/// Text tasks report `wer` and `token_error`; spectrogram tasks report
/// `mcd`, `frame_l1` and `length_error` (frames); speaker identification
/// reports `accuracy`.
pub fn evaluate<S: Scalar>(
    state: &ModelState<S>,
    kind: TaskKind,
    items: &[FinetuneItem<S>],
    vocab: &Vocab,
    cfg: &RunConfig,
) -> Result<Vec<MetricReport>> {
    let spec = TaskSpec::for_kind(kind);
    let model = &state.model;
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut c = Vec::new();
    let score = |id: &str, value: f64| UtteranceScore { id: id.to_string(), value };
    for item in items {
        match &item.target {
            Target::Text(reference) => {
                let hyp = decode_text(model, &spec, &item.input, vocab, &cfg.decode, None)?;
                let (h, r) = (vocab.decode(&hyp), vocab.decode(reference));
                a.push(score(&item.id, wer_str(&h, &r)?));
                b.push(score(&item.id, edit_distance(&hyp, reference) as f64 / reference.len().max(1) as f64));
            }
            Target::Speech(reference) => {
                let gen = decode_spectrogram(
                    model,
                    &spec,
                    &item.input,
                    item.speaker,
                    cfg.finetune.max_frames,
                    cfg.decode.stop_threshold,
                )?;
                a.push(score(&item.id, mcd_dtw(&gen, reference)?));
                b.push(score(&item.id, frame_l1(&gen, reference)?));
                c.push(score(&item.id, gen.rows() as f64 - reference.rows() as f64));
            }
            Target::Speaker(label) => {
                let pred = classify_speaker(model, &spec, &item.input)?;
                a.push(score(&item.id, accuracy(&[pred], &[*label])?));
            }
        }
    }
    let names: &[&str] = match spec.decode {
        crate::tasks::DecodeMode::TextAutoregressive => &["wer", "token_error"],
        crate::tasks::DecodeMode::SpectrogramAutoregressive => &["mcd", "frame_l1", "length_error"],
        _ => &["accuracy"],
    };
    let mut reports = Vec::new();
    for (name, scores) in names.iter().zip([a, b, c]) {
        reports.push(MetricReport::from_breakdown(*name, scores)?);
    }
    Ok(reports)
}

