//! Registered finite-difference checks over every differentiable subgraph.
//!
//! Each case builds a small double-precision fixture from a seed, takes the
//! tape's gradient of a scalar and compares it with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{check_against, check_params, ParamCheck, ParamStore, Tape, Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::losses::{ctc_loss, guided_attention, mlm_loss, recon_l1, stop_bce, text_mle, LossWeights, Reduction};
use crate::masking::MaskSet;
use crate::nets::{NetConfig, SpeakerTable, SpeechDecoderPostnet, SpeechDecoderPrenet, SpeechEncoderPrenet, TextEmbedding};
use crate::nn::normal;
use crate::quantizer::{
    assign, attraction_loss, diversity_loss, joint_soft_probs, mixup, soft_probs, Codebook, DiversityMode,
    QuantizerConfig,
};
use crate::tasks::{
    finetune_step, pretrain_step, FinetuneItem, Input, Model, ModelConfig, PretrainConfig, SpeechItem, Target,
    TaskKind, TaskSpec, TextItem,
};

pub const DEFAULT_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// Deliberately wrong backward pass, for checking that the audit can fail.
pub const MUTANT: &str = "mutant";

/// Names of all registered subgraphs, in audit order.
pub const MODULES: &[&str] = &[
    "speech_encoder_prenet",
    "speech_decoder_prenet",
    "speech_decoder_postnet",
    "text_embedding",
    "speaker_table",
    "backbone_encoder",
    "backbone_decoder",
    "quantizer_ste",
    "quantizer_soft",
    "quantizer_joint",
    "attraction",
    "mlm_loss",
    "text_mle",
    "recon_l1",
    "stop_bce",
    "ctc",
    "guided_attention",
    "pretrain_objective",
    "finetune_asr",
    "finetune_tts",
    "finetune_sid",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AuditResult {
    pub module: String,
    pub max_rel_error: f64,
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

pub fn audit(module: &str, seed: u64, tol: f64) -> Result<AuditResult> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let check = run_case(module, seed)?;
    Ok(AuditResult {
        module: module.to_string(),
        max_rel_error: check.max_rel_error,
        worst: check.worst,
        analytic: check.worst_pair.0,
        numeric: check.worst_pair.1,
        checked: check.checked,
        passed: check.max_rel_error < tol,
    })
}

pub fn audit_all(seed: u64, tol: f64) -> Result<Vec<AuditResult>> {
    MODULES.iter().map(|m| audit(m, seed, tol)).collect()
}

fn run_case(module: &str, seed: u64) -> Result<ParamCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    match module {
        "speech_encoder_prenet" => speech_encoder_prenet(rng),
        "speech_decoder_prenet" => speech_decoder_prenet(rng),
        "speech_decoder_postnet" => speech_decoder_postnet(rng),
        "text_embedding" => text_embedding(rng),
        "speaker_table" => speaker_table(rng),
        "backbone_encoder" => backbone(rng, false),
        "backbone_decoder" => backbone(rng, true),
        "quantizer_ste" => quantizer_ste(rng),
        "quantizer_soft" => quantizer_soft(rng, DiversityMode::PerGroup),
        "quantizer_joint" => quantizer_soft(rng, DiversityMode::Joint),
        "attraction" => attraction(rng),
        "mlm_loss" => mlm(rng),
        "text_mle" => mle(rng),
        "recon_l1" => l1(rng),
        "stop_bce" => bce(rng),
        "ctc" => ctc(rng),
        "guided_attention" => guided(rng),
        "pretrain_objective" => pretrain_objective(rng),
        "finetune_asr" => finetune(rng, TaskKind::Asr),
        "finetune_tts" => finetune(rng, TaskKind::Tts),
        "finetune_sid" => finetune(rng, TaskKind::Sid),
        MUTANT => mutant(rng),
        other => Err(Error::Config(format!(
            "unknown audit module {other:?}; expected one of {} or {MUTANT}",
            MODULES.join(", ")
        ))),
    }
}

fn tiny_net() -> NetConfig {
    NetConfig {
        d_model: 8,
        mel_bins: 4,
        conv_channels: 4,
        conv_strides: vec![2, 2],
        conv_kernels: vec![4, 4],
        prenet_hidden: vec![6, 6],
        postnet_layers: 3,
        postnet_channels: 4,
        postnet_kernel: 3,
        vocab: Vocab::desk().size(),
        n_speakers: 2,
        speaker_dim: 3,
        ln_eps: 1e-5,
    }
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        d_model: 8,
        ffn_dim: 12,
        heads: 2,
        relpos_buckets: 8,
        relpos_max_distance: 16,
        use_relpos: true,
        ln_eps: 1e-5,
    }
}

/// Straight-through mix-up has no finite-difference counterpart, so the
/// whole-model cases run with it off; `quantizer_ste` covers it.
fn tiny_model() -> ModelConfig {
    ModelConfig {
        net: tiny_net(),
        backbone: tiny_backbone(),
        quantizer: QuantizerConfig {
            groups: 2,
            entries: 5,
            mix_ratio: 0.0,
            ..QuantizerConfig::default()
        },
        clusters: 4,
    }
}

fn random<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    normal(shape, 1.0, rng)
}

/// Zero-initialised tensors (biases, identity-start convolutions) would make
/// many gradients trivially zero; give them random values instead.
fn fill_zeros<R: Rng + ?Sized>(store: &mut ParamStore<f64>, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).data().iter().all(|&v| v == 0.0) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = normal(&shape, 0.3, rng);
        }
    }
}

/// Fixed random projection to a scalar, so every output element matters.
fn weighted_sum(tape: &mut Tape<'_, f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

const PER_PARAM: usize = 6;

fn speech_encoder_prenet(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let cfg = tiny_net();
    let mut store = ParamStore::new();
    let net = SpeechEncoderPrenet::new(&mut store, &cfg, rng);
    fill_zeros(&mut store, rng);
    let wave: Vec<f64> = random(&[40], rng).data().to_vec();
    let frames = cfg.encoder_frames(wave.len()).expect("long enough");
    let w = random(&[frames, cfg.d_model], rng);
    check_params(&store, |t| {
        let y = net.forward(t, &wave)?;
        weighted_sum(t, y, &w)
    }, EPS, PER_PARAM)
}

fn speech_decoder_prenet(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let cfg = tiny_net();
    let mut store = ParamStore::new();
    let net = SpeechDecoderPrenet::new(&mut store, &cfg, rng);
    let speakers = SpeakerTable::new(&mut store, "speaker", cfg.n_speakers, cfg.speaker_dim, rng);
    fill_zeros(&mut store, rng);
    let frames = random(&[5, cfg.mel_bins], rng);
    let w = random(&[5, cfg.d_model], rng);
    check_params(&store, |t| {
        let x = t.constant(frames.clone());
        let y = net.forward(t, x, 1, &speakers)?;
        weighted_sum(t, y, &w)
    }, EPS, PER_PARAM)
}

fn speech_decoder_postnet(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let cfg = tiny_net();
    let mut store = ParamStore::new();
    let net = SpeechDecoderPostnet::new(&mut store, &cfg, rng);
    fill_zeros(&mut store, rng);
    let states = random(&[5, cfg.d_model], rng);
    let wa = random(&[5, cfg.mel_bins], rng);
    let wb = random(&[5, cfg.mel_bins], rng);
    let ws = random(&[5], rng);
    check_params(&store, |t| {
        let x = t.constant(states.clone());
        let out = net.forward(t, x)?;
        let a = weighted_sum(t, out.before, &wa)?;
        let b = weighted_sum(t, out.refined, &wb)?;
        let s = weighted_sum(t, out.stop_logits, &ws)?;
        let ab = t.add(a, b)?;
        t.add(ab, s)
    }, EPS, PER_PARAM)
}

fn text_embedding(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let cfg = tiny_net();
    let mut store = ParamStore::new();
    let net = TextEmbedding::new(&mut store, &cfg, rng);
    let tokens = [5, 9, 5, 20, 3];
    let states = random(&[3, cfg.d_model], rng);
    let we = random(&[tokens.len(), cfg.d_model], rng);
    let wp = random(&[3, cfg.vocab], rng);
    check_params(&store, |t| {
        let e = net.embed(t, &tokens)?;
        let a = weighted_sum(t, e, &we)?;
        let s = t.constant(states.clone());
        let p = net.project(t, s)?;
        let b = weighted_sum(t, p, &wp)?;
        t.add(a, b)
    }, EPS, 64)
}

fn speaker_table(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let mut store = ParamStore::new();
    let table = SpeakerTable::new(&mut store, "speaker", 3, 4, rng);
    let w0 = random(&[2, 4], rng);
    let w2 = random(&[3, 4], rng);
    check_params(&store, |t| {
        let a = table.lookup(t, 0, 2)?;
        let a = weighted_sum(t, a, &w0)?;
        let b = table.lookup(t, 2, 3)?;
        let b = weighted_sum(t, b, &w2)?;
        t.add(a, b)
    }, EPS, 12)
}

fn backbone(rng: &mut ChaCha8Rng, decoder: bool) -> Result<ParamCheck> {
    let cfg = tiny_backbone();
    let mut store = ParamStore::new();
    let net = Backbone::new(&mut store, &cfg, rng)?;
    fill_zeros(&mut store, rng);
    let src = random(&[6, cfg.d_model], rng);
    let tgt = random(&[4, cfg.d_model], rng);
    let we = random(&[6, cfg.d_model], rng);
    let wd = random(&[4, cfg.d_model], rng);
    check_params(&store, |t| {
        let x = t.constant(src.clone());
        let h = net.encode(t, x, None)?;
        if !decoder {
            return weighted_sum(t, h, &we);
        }
        let y = t.constant(tgt.clone());
        let out = net.decode(t, y, h, None, None)?;
        weighted_sum(t, out.states, &wd)
    }, EPS, PER_PARAM)
}

/// The straight-through output is compared with the surrogate
/// `u + stop_gradient(q − u)` on the replaced rows, whose derivative is the
/// identity: the analytic gradient comes from the real mix-up op, the
/// numeric one from the surrogate with `q − u` frozen at the base point.
fn quantizer_ste(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let qcfg = QuantizerConfig {
        groups: 2,
        entries: 5,
        mix_ratio: 0.5,
        ..QuantizerConfig::default()
    };
    let mut store = ParamStore::new();
    let u_id = store.add("states", random(&[6, 8], rng));
    let cb = Codebook::new(&mut store, 8, &qcfg, rng)?;
    let w = random(&[6, 8], rng);
    let mix_seed: u64 = rng.random();

    let mut tape = Tape::with_params(&store);
    let u = tape.param(u_id);
    let table = tape.param(cb.table);
    let a = assign(tape.value(u), tape.value(table), cb.groups)?;
    let mut mix_rng = ChaCha8Rng::seed_from_u64(mix_seed);
    let (mixed, rows) = mixup(&mut tape, u, &a.quantized, qcfg.mix_ratio, &mut mix_rng)?;
    let y = weighted_sum(&mut tape, mixed, &w)?;
    tape.backward(y)?;
    let grads = tape.param_grads();

    let base = store.get(u_id).clone();
    let mut offset = Tensor::zeros(&[6, 8]);
    for &r in &rows {
        for (o, (q, b)) in offset.row_mut(r).iter_mut().zip(a.quantized.row(r).iter().zip(base.row(r))) {
            *o = q - b;
        }
    }
    check_against(&store, &grads, |probe| {
        let mut t = Tape::with_params(probe);
        let u = t.param(u_id);
        let off = t.constant(offset.clone());
        let s = t.add(u, off)?;
        let y = weighted_sum(&mut t, s, &w)?;
        Ok(t.item(y))
    }, EPS, 48)
}

fn quantizer_soft(rng: &mut ChaCha8Rng, mode: DiversityMode) -> Result<ParamCheck> {
    let qcfg = QuantizerConfig {
        groups: 2,
        entries: 5,
        temperature: 2.0,
        diversity_mode: mode,
        ..QuantizerConfig::default()
    };
    let mut store = ParamStore::new();
    let u_id = store.add("states", normal(&[6, 8], 0.5, rng));
    let cb = Codebook::new(&mut store, 8, &qcfg, rng)?;
    check_params(&store, |t| {
        let u = t.param(u_id);
        let table = t.param(cb.table);
        let p = match mode {
            DiversityMode::PerGroup => soft_probs(t, u, table, cb.groups, qcfg.temperature)?,
            DiversityMode::Joint => joint_soft_probs(t, u, table, cb.groups, qcfg.temperature)?,
        };
        diversity_loss(t, p)
    }, EPS, 24)
}

/// The target rows are gradient-stopped, so only the codebook is a
/// parameter here; that the states receive no gradient is checked exactly.
fn attraction(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let qcfg = QuantizerConfig {
        groups: 2,
        entries: 5,
        ..QuantizerConfig::default()
    };
    let states = random(&[6, 8], rng);
    let mut store = ParamStore::new();
    let cb = Codebook::new(&mut store, 8, &qcfg, rng)?;

    let mut tape = Tape::with_params(&store);
    let u = tape.leaf(states.clone());
    let table = tape.param(cb.table);
    let a = assign(&states, tape.value(table), cb.groups)?;
    let y = attraction_loss(&mut tape, u, table, &a, &cb)?;
    tape.backward(y)?;
    if tape.grad(u).is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
        return Err(Error::Numerical("attraction loss leaks gradient into the encoder states".into()));
    }

    check_params(&store, |t| {
        let u = t.constant(states.clone());
        let table = t.param(cb.table);
        let a = assign(&states, t.value(table), cb.groups)?;
        attraction_loss(t, u, table, &a, &cb)
    }, EPS, 40)
}

fn mlm(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let mut store = ParamStore::new();
    let id = store.add("logits", random(&[7, 5], rng));
    let targets: Vec<usize> = (0..7).map(|_| rng.random_range(0..5)).collect();
    let mask = MaskSet::from_starts(7, &[1, 4], 2);
    check_params(&store, |t| {
        let x = t.param(id);
        mlm_loss(t, x, &targets, &mask, Reduction::Mean)
    }, EPS, 35)
}

fn mle(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let mut store = ParamStore::new();
    let id = store.add("logits", random(&[4, 6], rng));
    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
    check_params(&store, |t| {
        let x = t.param(id);
        text_mle(t, x, &targets, Reduction::Mean)
    }, EPS, 24)
}

fn l1(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let mut store = ParamStore::new();
    let p = store.add("predicted", random(&[5, 4], rng));
    let q = store.add("target", random(&[5, 4], rng));
    check_params(&store, |t| {
        let a = t.param(p);
        let b = t.param(q);
        recon_l1(t, a, b, Reduction::Mean)
    }, EPS, 20)
}

fn bce(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let mut store = ParamStore::new();
    let id = store.add("stop_logits", random(&[6, 1], rng));
    check_params(&store, |t| {
        let x = t.param(id);
        stop_bce(t, x, 5, 5.0, Reduction::Mean)
    }, EPS, 6)
}

fn ctc(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let mut store = ParamStore::new();
    let id = store.add("logits", random(&[8, 5], rng));
    check_params(&store, |t| {
        let x = t.param(id);
        ctc_loss(t, x, &[2, 2, 4])
    }, EPS, 40)
}

fn guided(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let mut store = ParamStore::new();
    let a = store.add("scores_a", random(&[4, 6], rng));
    let b = store.add("scores_b", random(&[4, 6], rng));
    check_params(&store, |t| {
        let sa = t.param(a);
        let sb = t.param(b);
        let wa = t.softmax(sa, 1)?;
        let wb = t.softmax(sb, 1)?;
        guided_attention(t, &[wa, wb], 0.4)
    }, EPS, 24)
}

/// Runs `eval` on a model whose parameters are replaced by `probe`.
fn with_params<T>(model: &Model<f64>, probe: &ParamStore<f64>, eval: impl Fn(&Model<f64>) -> Result<T>) -> Result<T> {
    let mut m = model.clone();
    m.params = probe.clone();
    eval(&m)
}

fn tiny_model_fixture(rng: &mut ChaCha8Rng) -> Result<Model<f64>> {
    let mut model = Model::new(&tiny_model(), rng.random())?;
    fill_zeros(&mut model.params, rng);
    Ok(model)
}

fn pretrain_objective(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let model = tiny_model_fixture(rng)?;
    let speech: Vec<SpeechItem<f64>> = (0..2)
        .map(|s| SpeechItem {
            id: format!("a{s}"),
            waveform: random(&[64], rng).data().to_vec(),
            features: random(&[5, 4], rng),
            units: Some((0..10).map(|_| rng.random_range(0..4)).collect()),
            speaker: s,
        })
        .collect();
    let text = vec![
        TextItem { tokens: vec![8, 9, 10, 11, 12, 13] },
        TextItem { tokens: vec![14, 27, 15, 16] },
    ];
    let cfg = PretrainConfig {
        mask_prob: 0.3,
        mask_span: 2,
        ..PretrainConfig::default()
    };
    // The attraction term has a gradient-stopped target and is audited on its own.
    let weights = LossWeights {
        attraction_weight: 0.0,
        ..LossWeights::default()
    };
    let step_seed: u64 = rng.random();
    let run = |m: &Model<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(step_seed);
        pretrain_step(m, &speech, &text, &cfg, &weights, &mut r)
    };
    let out = run(&model)?;
    check_against(&model.params, &out.grads, |probe| {
        with_params(&model, probe, |m| Ok(run(m)?.losses.objective))
    }, EPS, 2)
}

fn finetune(rng: &mut ChaCha8Rng, kind: TaskKind) -> Result<ParamCheck> {
    let model = tiny_model_fixture(rng)?;
    let wave = |rng: &mut ChaCha8Rng| Input::Speech(random(&[64], rng).data().to_vec());
    let items: Vec<FinetuneItem<f64>> = (0..2)
        .map(|s| {
            let (input, target) = match kind {
                TaskKind::Asr => (wave(rng), Target::Text(vec![8 + s, 9, 9])),
                TaskKind::Tts => (Input::Text(vec![8, 9 + s, 10]), Target::Speech(random(&[5, 4], rng))),
                _ => (wave(rng), Target::Speaker(s)),
            };
            FinetuneItem {
                id: format!("f{s}"),
                input,
                target,
                speaker: s,
            }
        })
        .collect();
    let spec = TaskSpec::for_kind(kind);
    let weights = LossWeights::default();
    let out = finetune_step(&model, &spec, &items, &weights)?;
    check_against(&model.params, &out.grads, |probe| {
        with_params(&model, probe, |m| Ok(finetune_step(m, &spec, &items, &weights)?.loss))
    }, EPS, 2)
}

/// `Σx²` recorded with gradient `3x` instead of `2x`.
fn mutant(rng: &mut ChaCha8Rng) -> Result<ParamCheck> {
    let mut store = ParamStore::new();
    let id = store.add("x", random(&[5], rng));
    check_params(&store, |t| {
        let x = t.param(id);
        let v = t.value(x).clone();
        let value = v.data().iter().map(|a| a * a).sum();
        let grad = v.data().iter().map(|a| 3.0 * a).collect();
        t.precomputed(x, value, grad)
    }, EPS, 5)
}

