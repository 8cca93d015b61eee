//! Synthetic corpus, log-Mel features and k-means unit targets.

pub mod corpus;
pub mod io;
pub mod kmeans;
pub mod mel;
pub mod vocab;

pub use corpus::{gen_corpus, gen_sentences, Corpus, CorpusConfig, Synthesizer, Utterance};
pub use kmeans::{fit_units, resample_nearest, UnitLabeler};
pub use mel::{logmel, MelConfig, MelExtractor};
pub use vocab::Vocab;
