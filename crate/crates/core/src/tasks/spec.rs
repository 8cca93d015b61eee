use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Pretrain,
    Asr,
    Tts,
    Vc,
    Se,
    St,
    Sid,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Pretrain,
        TaskKind::Asr,
        TaskKind::Tts,
        TaskKind::Vc,
        TaskKind::Se,
        TaskKind::St,
        TaskKind::Sid,
    ];

    pub const FINETUNE: [TaskKind; 6] = [
        TaskKind::Asr,
        TaskKind::Tts,
        TaskKind::Vc,
        TaskKind::Se,
        TaskKind::St,
        TaskKind::Sid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Pretrain => "pretrain",
            TaskKind::Asr => "asr",
            TaskKind::Tts => "tts",
            TaskKind::Vc => "vc",
            TaskKind::Se => "se",
            TaskKind::St => "st",
            TaskKind::Sid => "sid",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Speech,
    Text,
    SpeakerId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderPrenet {
    Speech,
    Text,
}

/// Decoder-side pre-net and post-net pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderNets {
    /// Speech-decoder pre-net and post-net.
    Speech,
    /// Shared text embedding on both sides.
    Text,
    /// Begin token in, speaker table out.
    SpeakerTable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    Mlm,
    L1,
    Bce,
    Mle,
    Diversity,
    Attraction,
    Ctc,
    GuidedAttention,
    SpeakerCe,
}

impl LossKind {
    /// Column name in metric files.
    pub fn column(self) -> &'static str {
        match self {
            LossKind::Mlm => "L_mlm",
            LossKind::L1 => "L_1",
            LossKind::Bce => "L_bce",
            LossKind::Mle => "L_mle",
            LossKind::Diversity => "L_d",
            LossKind::Attraction => "L_att",
            LossKind::Ctc => "L_ctc",
            LossKind::GuidedAttention => "L_guide",
            LossKind::SpeakerCe => "L_spk",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    TextAutoregressive,
    SpectrogramAutoregressive,
    SingleStepClass,
    /// Pre-training has no inference loop.
    None,
}

/// One input-to-output route through the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub input: Modality,
    pub output: Modality,
    pub encoder_prenet: EncoderPrenet,
    pub decoder: DecoderNets,
}

/// Declarative routing for one task. Fine-tuning tasks have one route;
/// pre-training has a speech route and a text route.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub routes: Vec<Route>,
    pub losses: Vec<LossKind>,
    pub decode: DecodeMode,
}

impl TaskSpec {
    pub fn for_kind(kind: TaskKind) -> Self {
        use DecoderNets as D;
        use EncoderPrenet as E;
        use LossKind as L;
        use Modality as M;
        let route = |input, output, encoder_prenet, decoder| Route {
            input,
            output,
            encoder_prenet,
            decoder,
        };
        let (routes, losses, decode) = match kind {
            TaskKind::Pretrain => (
                vec![
                    route(M::Speech, M::Speech, E::Speech, D::Speech),
                    route(M::Text, M::Text, E::Text, D::Text),
                ],
                vec![L::Mlm, L::L1, L::Bce, L::Mle, L::Diversity, L::Attraction],
                DecodeMode::None,
            ),
            TaskKind::Asr => (
                vec![route(M::Speech, M::Text, E::Speech, D::Text)],
                vec![L::Mle, L::Ctc],
                DecodeMode::TextAutoregressive,
            ),
            TaskKind::St => (
                vec![route(M::Speech, M::Text, E::Speech, D::Text)],
                vec![L::Mle],
                DecodeMode::TextAutoregressive,
            ),
            TaskKind::Tts => (
                vec![route(M::Text, M::Speech, E::Text, D::Speech)],
                vec![L::L1, L::Bce, L::GuidedAttention],
                DecodeMode::SpectrogramAutoregressive,
            ),
            TaskKind::Vc | TaskKind::Se => (
                vec![route(M::Speech, M::Speech, E::Speech, D::Speech)],
                vec![L::L1, L::Bce, L::GuidedAttention],
                DecodeMode::SpectrogramAutoregressive,
            ),
            TaskKind::Sid => (
                vec![route(M::Speech, M::SpeakerId, E::Speech, D::SpeakerTable)],
                vec![L::SpeakerCe],
                DecodeMode::SingleStepClass,
            ),
        };
        Self {
            kind,
            routes,
            losses,
            decode,
        }
    }

    /// The single route of a fine-tuning task.
    pub fn route(&self) -> Result<Route> {
        match self.routes[..] {
            [r] => Ok(r),
            _ => Err(Error::Routing(format!("{} has {} routes, expected one", self.kind, self.routes.len()))),
        }
    }

    pub fn uses(&self, loss: LossKind) -> bool {
        self.losses.contains(&loss)
    }
}
