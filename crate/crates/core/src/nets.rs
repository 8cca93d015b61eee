//! Modality-specific pre-nets and post-nets around the shared backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{conv_out_len, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, Conv1d, LayerNorm, Linear};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub d_model: usize,
    pub mel_bins: usize,
    pub conv_channels: usize,
    pub conv_strides: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub prenet_hidden: Vec<usize>,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub vocab: usize,
    pub n_speakers: usize,
    pub speaker_dim: usize,
    pub ln_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            mel_bins: 8,
            conv_channels: 32,
            conv_strides: vec![2, 2],
            conv_kernels: vec![4, 4],
            prenet_hidden: vec![256, 256, 256],
            postnet_layers: 5,
            postnet_channels: 32,
            postnet_kernel: 5,
            vocab: 32,
            n_speakers: 4,
            speaker_dim: 16,
            ln_eps: 1e-5,
        }
    }

    /// The full-size wav2vec-style feature extractor and 80-bin output.
    pub fn full_scale() -> Self {
        Self {
            d_model: 768,
            mel_bins: 80,
            conv_channels: 512,
            conv_strides: vec![5, 2, 2, 2, 2, 2, 2],
            conv_kernels: vec![10, 3, 3, 3, 3, 2, 2],
            prenet_hidden: vec![256, 256, 256],
            postnet_layers: 5,
            postnet_channels: 256,
            postnet_kernel: 5,
            vocab: 32,
            n_speakers: 4,
            speaker_dim: 512,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_strides.len() != self.conv_kernels.len() || self.conv_strides.is_empty() {
            return Err(Error::Config(format!(
                "conv_strides {:?} and conv_kernels {:?} must be non-empty and equally long",
                self.conv_strides, self.conv_kernels
            )));
        }
        if self.conv_strides.iter().chain(&self.conv_kernels).any(|&v| v == 0) {
            return Err(Error::Config("conv strides and kernels must be positive".into()));
        }
        if self.prenet_hidden.is_empty() || self.postnet_layers < 2 || self.postnet_kernel.is_multiple_of(2) {
            return Err(Error::Config(
                "prenet needs hidden layers; postnet needs >= 2 layers and an odd kernel".into(),
            ));
        }
        if self.n_speakers == 0 || self.vocab == 0 || self.d_model == 0 {
            return Err(Error::Config("vocab, speakers and d_model must be positive".into()));
        }
        Ok(())
    }

    /// Encoder frame count for a waveform of `samples`, or `None` if too short.
    pub fn encoder_frames(&self, samples: usize) -> Option<usize> {
        let mut len = samples;
        for (&k, &s) in self.conv_kernels.iter().zip(&self.conv_strides) {
            if len < k {
                return None;
            }
            len = conv_out_len(len, k, s);
        }
        Some(len)
    }

    /// Shortest waveform yielding one encoder frame.
    pub fn min_samples(&self) -> usize {
        self.conv_kernels
            .iter()
            .zip(&self.conv_strides)
            .rev()
            .fold(1, |len, (&k, &s)| (len - 1) * s + k)
    }
}

/// Convolutional feature extractor: waveform → `[N_h, d]`.
#[derive(Clone, Debug)]
pub struct SpeechEncoderPrenet {
    convs: Vec<Conv1d>,
    norms: Vec<LayerNorm>,
    proj: Linear,
    min_samples: usize,
}

impl SpeechEncoderPrenet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &NetConfig, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = 1;
        for (i, (&k, &s)) in cfg.conv_kernels.iter().zip(&cfg.conv_strides).enumerate() {
            let name = format!("speech_encoder_prenet.conv{i}");
            convs.push(Conv1d::new(store, &name, in_ch, cfg.conv_channels, k, s, false, false, rng));
            norms.push(LayerNorm::new(store, &format!("{name}.norm"), cfg.conv_channels, cfg.ln_eps));
            in_ch = cfg.conv_channels;
        }
        let proj = Linear::new(store, "speech_encoder_prenet.proj", in_ch, cfg.d_model, true, rng);
        Self {
            convs,
            norms,
            proj,
            min_samples: cfg.min_samples(),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, waveform: &[S]) -> Result<Var> {
        if waveform.len() < self.min_samples {
            return Err(Error::TooShort {
                min: self.min_samples,
                got: waveform.len(),
            });
        }
        let mut x = tape.constant(Tensor::new(vec![waveform.len(), 1], waveform.to_vec())?);
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let c = conv.forward(tape, x)?;
            let n = norm.forward(tape, c)?;
            x = tape.gelu(n);
        }
        self.proj.forward(tape, x)
    }
}

/// Learned per-speaker vectors standing in for x-vectors.
#[derive(Clone, Debug)]
pub struct SpeakerTable {
    pub table: ParamId,
    pub n_speakers: usize,
}

impl SpeakerTable {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        n_speakers: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            table: store.add(format!("{name}.table"), normal(&[n_speakers, dim], 1.0, rng)),
            n_speakers,
        }
    }

    /// The speaker's vector repeated over `rows` rows.
    pub fn lookup<S: Scalar>(&self, tape: &mut Tape<'_, S>, speaker: usize, rows: usize) -> Result<Var> {
        if speaker >= self.n_speakers {
            return Err(Error::Lookup {
                id: speaker,
                len: self.n_speakers,
            });
        }
        let t = tape.param(self.table);
        tape.embedding(t, &vec![speaker; rows])
    }
}

/// Three ReLU layers on log-Mel frames, speaker concat, projection to `d`.
#[derive(Clone, Debug)]
pub struct SpeechDecoderPrenet {
    layers: Vec<Linear>,
    proj: Linear,
}

impl SpeechDecoderPrenet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &NetConfig, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        let mut in_dim = cfg.mel_bins;
        for (i, &h) in cfg.prenet_hidden.iter().enumerate() {
            layers.push(Linear::new(store, &format!("speech_decoder_prenet.fc{i}"), in_dim, h, true, rng));
            in_dim = h;
        }
        let proj = Linear::new(
            store,
            "speech_decoder_prenet.proj",
            in_dim + cfg.speaker_dim,
            cfg.d_model,
            true,
            rng,
        );
        Self { layers, proj }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        frames: Var,
        speaker: usize,
        speakers: &SpeakerTable,
    ) -> Result<Var> {
        let n = tape.shape(frames)[0];
        if n == 0 {
            return Err(Error::Contract("speech decoder pre-net needs at least one frame".into()));
        }
        let mut x = frames;
        for layer in &self.layers {
            let h = layer.forward(tape, x)?;
            x = tape.relu(h);
        }
        let spk = speakers.lookup(tape, speaker, n)?;
        let cat = tape.concat(&[x, spk], 1)?;
        self.proj.forward(tape, cat)
    }
}

/// Outputs of the speech-decoder post-net.
#[derive(Clone, Copy, Debug)]
pub struct PostnetOutput {
    pub before: Var,
    pub refined: Var,
    pub stop_logits: Var,
}

/// Linear mel projection, residual convolution stack, stop-token head.
#[derive(Clone, Debug)]
pub struct SpeechDecoderPostnet {
    mel: Linear,
    convs: Vec<Conv1d>,
    stop: Linear,
}

impl SpeechDecoderPostnet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &NetConfig, rng: &mut R) -> Self {
        let mel = Linear::new(store, "speech_decoder_postnet.mel", cfg.d_model, cfg.mel_bins, true, rng);
        let mut convs = Vec::new();
        for i in 0..cfg.postnet_layers {
            let in_ch = if i == 0 { cfg.mel_bins } else { cfg.postnet_channels };
            let last = i + 1 == cfg.postnet_layers;
            let out_ch = if last { cfg.mel_bins } else { cfg.postnet_channels };
            let conv = Conv1d::new(
                store,
                &format!("speech_decoder_postnet.conv{i}"),
                in_ch,
                out_ch,
                cfg.postnet_kernel,
                1,
                true,
                true,
                rng,
            );
            if last {
                // refinement starts as the identity
                let shape = store.get(conv.weight).shape().to_vec();
                store.set(conv.weight, Tensor::zeros(&shape)).expect("same shape");
            }
            convs.push(conv);
        }
        let stop = Linear::new(store, "speech_decoder_postnet.stop", cfg.d_model, 1, true, rng);
        Self { mel, convs, stop }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, states: Var) -> Result<PostnetOutput> {
        let n = tape.shape(states)[0];
        if n == 0 {
            return Err(Error::Contract("post-net needs at least one state".into()));
        }
        let before = self.mel.forward(tape, states)?;
        let mut x = before;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let c = conv.forward(tape, x)?;
            x = if i == last { c } else { tape.tanh(c) };
        }
        let refined = tape.add(before, x)?;
        let s = self.stop.forward(tape, states)?;
        let stop_logits = tape.reshape(s, &[n])?;
        Ok(PostnetOutput {
            before,
            refined,
            stop_logits,
        })
    }
}

/// One token table serving as text encoder pre-net, text decoder pre-net and
/// (transposed) text decoder post-net.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub table: ParamId,
    pub vocab: usize,
    scale: f64,
}

impl TextEmbedding {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &NetConfig, rng: &mut R) -> Self {
        let std = 1.0 / (cfg.d_model as f64).sqrt();
        Self {
            table: store.add("text_embedding.table", normal(&[cfg.vocab, cfg.d_model], std, rng)),
            vocab: cfg.vocab,
            scale: (cfg.d_model as f64).sqrt(),
        }
    }

    pub fn embed<S: Scalar>(&self, tape: &mut Tape<'_, S>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot embed an empty token sequence".into()));
        }
        let t = tape.param(self.table);
        let e = tape.embedding(t, tokens)?;
        Ok(tape.scale(e, S::lit(self.scale)))
    }

    /// `states · Eᵀ`
    pub fn project<S: Scalar>(&self, tape: &mut Tape<'_, S>, states: Var) -> Result<Var> {
        let t = tape.param(self.table);
        tape.matmul_bt(states, t)
    }
}
