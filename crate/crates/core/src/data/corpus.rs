//! Synthetic paired speech/text corpus: every character is a fixed-length
//! tone whose pitch identifies it, shaped by a per-speaker gain and pitch shift.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_utterances: usize,
    pub n_speakers: usize,
    pub sample_rate: usize,
    pub samples_per_char: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub noise_std: f64,
    /// Signal-to-noise ratio of the noisy copies, in dB.
    pub snr_db: f64,
    pub alphabet: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_utterances: 64,
            n_speakers: 4,
            sample_rate: 1600,
            samples_per_char: 160,
            min_chars: 2,
            max_chars: 5,
            noise_std: 0.02,
            snr_db: 5.0,
            alphabet: super::vocab::DESK_ALPHABET.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub speaker: usize,
    pub waveform: Vec<f32>,
    pub noisy: Option<Vec<f32>>,
    pub translation: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub sample_rate: usize,
    pub samples_per_char: usize,
    pub n_speakers: usize,
    pub alphabet: String,
}

impl Corpus {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(&self.alphabet, 4)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Generator settings able to re-render this corpus's voices.
    pub fn synth_config(&self, seed: u64) -> CorpusConfig {
        CorpusConfig {
            seed,
            n_speakers: self.n_speakers,
            sample_rate: self.sample_rate,
            samples_per_char: self.samples_per_char,
            alphabet: self.alphabet.clone(),
            ..CorpusConfig::default()
        }
    }
}

/// Renders text as tones. Deterministic in `(text, speaker, cfg, rng)`.
pub struct Synthesizer<'a> {
    cfg: &'a CorpusConfig,
    vocab: Vocab,
}

impl<'a> Synthesizer<'a> {
    pub fn new(cfg: &'a CorpusConfig) -> Result<Self> {
        if cfg.alphabet.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        if cfg.n_speakers == 0 || cfg.sample_rate == 0 || cfg.samples_per_char == 0 {
            return Err(Error::Config("speakers, sample rate and samples per char must be positive".into()));
        }
        if cfg.min_chars == 0 || cfg.min_chars > cfg.max_chars {
            return Err(Error::Config(format!(
                "invalid utterance length range {}..={}",
                cfg.min_chars, cfg.max_chars
            )));
        }
        Ok(Self {
            cfg,
            vocab: Vocab::new(&cfg.alphabet, 4)?,
        })
    }

    /// Pitch of a character for a given speaker, in Hz.
    pub fn char_frequency(&self, index: usize, speaker: usize) -> f64 {
        let nyquist = self.cfg.sample_rate as f64 / 2.0;
        let n = self.vocab.alphabet().len() as f64;
        let base = 0.08 * nyquist + index as f64 * (0.75 * nyquist / n);
        base + speaker as f64 * 0.01 * nyquist
    }

    pub fn speaker_gain(&self, speaker: usize) -> f64 {
        0.5 + 0.5 * speaker as f64 / self.cfg.n_speakers.max(1) as f64
    }

    pub fn render<R: Rng + ?Sized>(&self, text: &str, speaker: usize, rng: &mut R) -> Result<Vec<f32>> {
        let sr = self.cfg.sample_rate as f64;
        let per = self.cfg.samples_per_char;
        let gain = self.speaker_gain(speaker);
        let noise = Normal::new(0.0, self.cfg.noise_std.max(0.0)).expect("non-negative std");
        let mut out = Vec::with_capacity(text.chars().count() * per);
        for c in text.chars() {
            let idx = self
                .vocab
                .char_index(c)
                .ok_or_else(|| Error::Data(format!("character {c:?} not in vocabulary")))?;
            let f = self.char_frequency(idx, speaker);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            for n in 0..per {
                let t = n as f64 / sr;
                // raised-cosine edges keep neighbouring characters apart
                let edge = (n.min(per - 1 - n) as f64 / (per as f64 * 0.1)).min(1.0);
                let env = 0.5 - 0.5 * (PI * edge).cos();
                let tone = (2.0 * PI * f * t + phase).sin() + 0.3 * (4.0 * PI * f * t + phase).sin();
                out.push((gain * env * tone + noise.sample(rng)) as f32);
            }
        }
        Ok(out)
    }

    /// Adds white noise at the configured SNR.
    pub fn add_noise<R: Rng + ?Sized>(&self, clean: &[f32], rng: &mut R) -> Vec<f32> {
        let power = clean.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / clean.len().max(1) as f64;
        let std = (power / 10f64.powf(self.cfg.snr_db / 10.0)).sqrt();
        let noise = Normal::new(0.0, std.max(1e-12)).expect("positive std");
        clean
            .iter()
            .map(|&x| (x as f64 + noise.sample(rng)) as f32)
            .collect()
    }

    /// Deterministic character substitution standing in for a translation.
    pub fn translate(&self, text: &str) -> String {
        let alpha = self.vocab.alphabet();
        let letters = alpha.iter().filter(|c| **c != ' ').count().max(1);
        text.chars()
            .map(|c| match self.vocab.char_index(c) {
                Some(i) if c != ' ' && i < letters => alpha[(i * 7 + 3) % letters],
                _ => c,
            })
            .collect()
    }

    pub fn random_text<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let len = rng.random_range(self.cfg.min_chars..=self.cfg.max_chars);
        let letters: Vec<char> = self.vocab.alphabet().iter().copied().filter(|&c| c != ' ').collect();
        (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect()
    }
}

/// Generates `cfg.n_utterances` utterances, speakers assigned round-robin.
/// Each utterance draws from its own seeded stream.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let synth = Synthesizer::new(cfg)?;
    let mut utterances = Vec::with_capacity(cfg.n_utterances);
    for i in 0..cfg.n_utterances {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let text = synth.random_text(&mut rng);
        let speaker = i % cfg.n_speakers;
        let waveform = synth.render(&text, speaker, &mut rng)?;
        let noisy = synth.add_noise(&waveform, &mut rng);
        utterances.push(Utterance {
            id: format!("utt{i:05}"),
            translation: Some(synth.translate(&text)),
            text,
            speaker,
            waveform,
            noisy: Some(noisy),
        });
    }
    Ok(Corpus {
        utterances,
        sample_rate: cfg.sample_rate,
        samples_per_char: cfg.samples_per_char,
        n_speakers: cfg.n_speakers,
        alphabet: cfg.alphabet.clone(),
    })
}

/// Unpaired text: space-separated random words.
pub fn gen_sentences(seed: u64, n: usize, alphabet: &str, max_words: usize) -> Result<Vec<String>> {
    let vocab = Vocab::new(alphabet, 4)?;
    let letters: Vec<char> = vocab.alphabet().iter().copied().filter(|&c| c != ' ').collect();
    if letters.is_empty() {
        return Err(Error::Config("alphabet has no letters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
    Ok((0..n)
        .map(|_| {
            let words = rng.random_range(1..=max_words.max(1));
            (0..words)
                .map(|_| {
                    let len = rng.random_range(2..=5);
                    (0..len)
                        .map(|_| letters[rng.random_range(0..letters.len())])
                        .collect::<String>()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect())
}
