use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig, DecoderOutput};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::nets::{
    NetConfig, PostnetOutput, SpeakerTable, SpeechDecoderPostnet, SpeechDecoderPrenet, SpeechEncoderPrenet,
    TextEmbedding,
};
use crate::nn::{normal, Linear};
use crate::quantizer::{Codebook, QuantizerConfig};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub net: NetConfig,
    pub backbone: BackboneConfig,
    pub quantizer: QuantizerConfig,
    /// Number of acoustic units predicted by the masked-prediction head.
    pub clusters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::desk(),
            backbone: BackboneConfig::desk(),
            quantizer: QuantizerConfig::default(),
            clusters: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.backbone.validate()?;
        if self.net.d_model != self.backbone.d_model {
            return Err(Error::Config(format!(
                "net d_model {} differs from backbone d_model {}",
                self.net.d_model, self.backbone.d_model
            )));
        }
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be positive".into()));
        }
        Ok(())
    }
}

/// Every learnable component plus the parameter store that owns the weights.
#[derive(Clone, Debug)]
pub struct Model<S> {
    cfg: ModelConfig,
    pub params: ParamStore<S>,
    pub speech_encoder_prenet: SpeechEncoderPrenet,
    pub speech_decoder_prenet: SpeechDecoderPrenet,
    pub speech_decoder_postnet: SpeechDecoderPostnet,
    pub text: TextEmbedding,
    pub speakers: SpeakerTable,
    pub backbone: Backbone,
    pub codebook: Codebook,
    pub mlm_head: Linear,
    pub ctc_head: Linear,
    pub mask_embedding: ParamId,
    pub sid_table: SpeakerTable,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut params = ParamStore::new();
        let p = &mut params;
        let d = cfg.net.d_model;
        let speech_encoder_prenet = SpeechEncoderPrenet::new(p, &cfg.net, rng);
        let speech_decoder_prenet = SpeechDecoderPrenet::new(p, &cfg.net, rng);
        let speech_decoder_postnet = SpeechDecoderPostnet::new(p, &cfg.net, rng);
        let text = TextEmbedding::new(p, &cfg.net, rng);
        let speakers = SpeakerTable::new(p, "speaker", cfg.net.n_speakers, cfg.net.speaker_dim, rng);
        let backbone = Backbone::new(p, &cfg.backbone, rng)?;
        let codebook = Codebook::new(p, d, &cfg.quantizer, rng)?;
        let mlm_head = Linear::new(p, "mlm_head", d, cfg.clusters, true, rng);
        let ctc_head = Linear::new(p, "ctc_head", d, cfg.net.vocab, true, rng);
        let mask_embedding = p.add("mask_embedding", normal(&[d], 1.0, rng));
        let sid_table = SpeakerTable::new(p, "sid", cfg.net.n_speakers, d, rng);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            speech_encoder_prenet,
            speech_decoder_prenet,
            speech_decoder_postnet,
            text,
            speakers,
            backbone,
            codebook,
            mlm_head,
            ctc_head,
            mask_embedding,
            sid_table,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tape(&self) -> Tape<'_, S> {
        Tape::with_params(&self.params)
    }

    /// Speech-encoder pre-net, optional masking of the listed frames with the
    /// learned mask embedding, then the encoder. Returns `(H, U)`.
    pub fn encode_speech(&self, tape: &mut Tape<'_, S>, waveform: &[S], mask: Option<&MaskSet>) -> Result<(Var, Var)> {
        let h = self.speech_encoder_prenet.forward(tape, waveform)?;
        let x = match mask {
            Some(m) if !m.is_empty() => {
                if m.total_len() != tape.shape(h)[0] {
                    return Err(Error::dim(
                        "encode_speech",
                        format!("mask over {} frames for {} frames", m.total_len(), tape.shape(h)[0]),
                    ));
                }
                let fill = tape.param(self.mask_embedding);
                tape.replace_rows(h, fill, m.timesteps())?
            }
            _ => h,
        };
        let u = self.backbone.encode(tape, x, None)?;
        Ok((h, u))
    }

    pub fn encode_text(&self, tape: &mut Tape<'_, S>, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let e = self.text.embed(tape, tokens)?;
        self.backbone.encode(tape, e, None)
    }

    /// Teacher-forced text decoding: logits for every position of `inputs`.
    pub fn decode_text(&self, tape: &mut Tape<'_, S>, memory: Var, inputs: &[usize]) -> Result<(Var, DecoderOutput)> {
        self.check_tokens(inputs)?;
        let e = self.text.embed(tape, inputs)?;
        let out = self.backbone.decode(tape, e, memory, None, None)?;
        let logits = self.text.project(tape, out.states)?;
        Ok((logits, out))
    }

    /// Teacher-forced spectrogram decoding from decoder input frames.
    pub fn decode_speech(
        &self,
        tape: &mut Tape<'_, S>,
        memory: Var,
        frames: &Tensor<S>,
        speaker: usize,
    ) -> Result<(PostnetOutput, DecoderOutput)> {
        if frames.ndim() != 2 || frames.cols() != self.cfg.net.mel_bins {
            return Err(Error::dim(
                "decode_speech",
                format!("frames {:?} for {} mel bins", frames.shape(), self.cfg.net.mel_bins),
            ));
        }
        let x = tape.constant(frames.clone());
        let pre = self.speech_decoder_prenet.forward(tape, x, speaker, &self.speakers)?;
        let out = self.backbone.decode(tape, pre, memory, None, None)?;
        let post = self.speech_decoder_postnet.forward(tape, out.states)?;
        Ok((post, out))
    }

    /// Speaker logits `[1, n_speakers]` from one decoder step on the begin token.
    pub fn classify_speaker(&self, tape: &mut Tape<'_, S>, memory: Var) -> Result<Var> {
        if self.sid_table.n_speakers < 2 {
            return Err(Error::Contract(format!(
                "speaker classification needs at least 2 speakers, table has {}",
                self.sid_table.n_speakers
            )));
        }
        let e = self.text.embed(tape, &[Vocab::BOS])?;
        let out = self.backbone.decode(tape, e, memory, None, None)?;
        let table = tape.param(self.sid_table.table);
        tape.matmul_bt(out.states, table)
    }

    pub fn ctc_logits(&self, tape: &mut Tape<'_, S>, memory: Var) -> Result<Var> {
        self.ctc_head.forward(tape, memory)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.cfg.net.vocab) {
            Some(&t) => Err(Error::Lookup {
                id: t,
                len: self.cfg.net.vocab,
            }),
            None => Ok(()),
        }
    }

    /// Copies every same-named, same-shaped parameter from `source`, skipping
    /// names that start with any of `skip_prefixes`. Returns the names left
    /// at their fresh initialisation.
    pub fn transfer_from(&mut self, source: &ParamStore<S>, skip_prefixes: &[&str]) -> Vec<String> {
        let mut fresh = Vec::new();
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            let skipped = skip_prefixes.iter().any(|p| name.starts_with(p));
            let src = source.id(&name).map(|s| source.get(s));
            match src {
                Some(t) if !skipped && t.shape() == self.params.get(id).shape() => {
                    *self.params.get_mut(id) = t.clone();
                }
                _ => fresh.push(name),
            }
        }
        fresh
    }
}

/// Decoder input frames for teacher forcing: a zero go-frame followed by all
/// but the last target frame.
pub fn shift_frames<S: Scalar>(target: &Tensor<S>) -> Tensor<S> {
    let (n, m) = (target.rows(), target.cols());
    let mut data = vec![S::zero(); n * m];
    if n > 1 {
        data[m..].copy_from_slice(&target.data()[..(n - 1) * m]);
    }
    Tensor::new(vec![n, m], data).expect("same size")
}
