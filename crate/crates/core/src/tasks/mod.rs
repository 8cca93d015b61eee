//! Task routing, the pre-training and fine-tuning steps, and inference loops.

pub mod decode;
pub mod finetune;
pub mod items;
pub mod model;
pub mod pretrain;
pub mod spec;

pub use decode::{
    beam_search, classify_speaker, decode_spectrogram, decode_text, decode_text_greedy, greedy_search,
    CtcPrefixScorer, Hypothesis, ModelScorer, StepScorer,
};
pub use finetune::{finetune_step, term_weight, FinetuneOutput};
pub use items::{finetune_items, fit_corpus_units, speech_items, text_items, FinetuneItem, Input, SpeechItem, Target, TextItem};
pub use model::{shift_frames, Model, ModelConfig};
pub use pretrain::{pretrain_step, PretrainConfig, StepOutput, TextMaskMode};
pub use spec::{DecodeMode, DecoderNets, EncoderPrenet, LossKind, Modality, Route, TaskKind, TaskSpec};
