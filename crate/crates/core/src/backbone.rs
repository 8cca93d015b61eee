//! Shared Transformer encoder-decoder with bucketed relative position bias on
//! self-attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, LayerNorm, Linear};
use crate::scalar::Scalar;

/// Additive logit for disallowed attention pairs; `exp` of it underflows to 0.
const BLOCKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub relpos_buckets: usize,
    pub relpos_max_distance: usize,
    pub use_relpos: bool,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 64,
            ffn_dim: 128,
            heads: 4,
            relpos_buckets: 32,
            relpos_max_distance: 128,
            use_relpos: true,
            ln_eps: 1e-5,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            encoder_layers: 12,
            decoder_layers: 6,
            d_model: 768,
            ffn_dim: 3072,
            heads: 12,
            relpos_buckets: 320,
            relpos_max_distance: 800,
            use_relpos: true,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.relpos_buckets < 4 || !self.relpos_buckets.is_multiple_of(2) {
            return Err(Error::Config("relpos_buckets must be even and >= 4".into()));
        }
        if self.relpos_max_distance <= self.relpos_buckets / 4 {
            return Err(Error::Config(
                "relpos_max_distance must exceed the exact-bucket range".into(),
            ));
        }
        Ok(())
    }
}

/// Bidirectional log-spaced bucket of `offset = key − query`.
///
/// Half the table serves non-positive offsets and half positive ones. Within
/// a half, magnitudes below `buckets/4` get their own bucket and larger ones
/// are spaced logarithmically up to `max_distance`, where they saturate.
pub fn relpos_bucket(offset: i64, buckets: usize, max_distance: usize) -> usize {
    let half = buckets / 2;
    let base = if offset > 0 { half } else { 0 };
    let n = offset.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        return base + n;
    }
    let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let log_bucket = max_exact + (ratio * (half - max_exact) as f64) as usize;
    base + log_bucket.min(half - 1)
}

/// Learned scalar bias per (bucket, head), shared by every layer of a stack.
#[derive(Clone, Debug)]
pub struct RelPosBias {
    pub table: ParamId,
    buckets: usize,
    max_distance: usize,
    heads: usize,
}

impl RelPosBias {
    fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            table: store.add(
                format!("{name}.table"),
                normal(&[cfg.relpos_buckets, cfg.heads], 0.1, rng),
            ),
            buckets: cfg.relpos_buckets,
            max_distance: cfg.relpos_max_distance,
            heads: cfg.heads,
        }
    }

    /// Per-head `[Tq, Tk]` bias for the given absolute positions.
    pub fn bias<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        query_pos: &[i64],
        key_pos: &[i64],
    ) -> Result<Vec<Var>> {
        let table = tape.param(self.table);
        let buckets: Vec<usize> = query_pos
            .iter()
            .flat_map(|&q| {
                key_pos
                    .iter()
                    .map(move |&k| relpos_bucket(k - q, self.buckets, self.max_distance))
            })
            .collect();
        (0..self.heads)
            .map(|h| {
                let idx: Vec<usize> = buckets.iter().map(|&b| b * self.heads + h).collect();
                tape.gather(table, &idx, &[query_pos.len(), key_pos.len()])
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            heads,
        }
    }

    /// Returns the output and each head's attention weights `[Tq, Tk]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        query: Var,
        memory: Var,
        bias: Option<&[Var]>,
        mask: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let d = tape.shape(query)[1];
        let dh = d / self.heads;
        let q = self.q.forward(tape, query)?;
        let k = self.k.forward(tape, memory)?;
        let v = self.v.forward(tape, memory)?;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let raw = tape.matmul_bt(qh, kh)?;
            let mut scores = tape.scale(raw, scale);
            if let Some(b) = bias {
                scores = tape.add(scores, b[h])?;
            }
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let p = tape.softmax(scores, 1)?;
            contexts.push(tape.matmul(p, vh)?);
            weights.push(p);
        }
        let ctx = tape.concat(&contexts, 1)?;
        Ok((self.o.forward(tape, ctx)?, weights))
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, d: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, ffn, true, rng),
            down: Linear::new(store, &format!("{name}.down"), ffn, d, true, rng),
        }
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let a = tape.gelu(h);
        self.down.forward(tape, a)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Decoder states plus the cross-attention weights of every layer and head.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub states: Var,
    pub cross_attention: Vec<Var>,
}

/// Pre-norm Transformer encoder-decoder.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    encoder_bias: RelPosBias,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    decoder_bias: RelPosBias,
}

fn key_mask<S: Scalar>(rows: usize, pad: &[bool]) -> Tensor<S> {
    let row: Vec<S> = pad
        .iter()
        .map(|&p| if p { S::lit(BLOCKED) } else { S::zero() })
        .collect();
    let mut data = Vec::with_capacity(rows * pad.len());
    for _ in 0..rows {
        data.extend_from_slice(&row);
    }
    Tensor::new(vec![rows, pad.len()], data).expect("mask shape")
}

fn causal_mask<S: Scalar>(t: usize, pad: Option<&[bool]>) -> Tensor<S> {
    let mut data = vec![S::zero(); t * t];
    for i in 0..t {
        for j in 0..t {
            if j > i || pad.is_some_and(|p| p[j]) {
                data[i * t + j] = S::lit(BLOCKED);
            }
        }
    }
    Tensor::new(vec![t, t], data).expect("mask shape")
}

impl Backbone {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let eps = cfg.ln_eps;
        let encoder = (0..cfg.encoder_layers)
            .map(|i| {
                let n = format!("encoder.layer{i}");
                EncoderLayer {
                    norm_attn: LayerNorm::new(store, &format!("{n}.norm_attn"), d, eps),
                    attn: MultiHeadAttention::new(store, &format!("{n}.attn"), d, cfg.heads, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{n}.norm_ffn"), d, eps),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, cfg.ffn_dim, rng),
                }
            })
            .collect();
        let encoder_norm = LayerNorm::new(store, "encoder.norm", d, eps);
        let encoder_bias = RelPosBias::new(store, "encoder.relpos", cfg, rng);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| {
                let n = format!("decoder.layer{i}");
                DecoderLayer {
                    norm_self: LayerNorm::new(store, &format!("{n}.norm_self"), d, eps),
                    self_attn: MultiHeadAttention::new(store, &format!("{n}.self_attn"), d, cfg.heads, rng),
                    norm_cross: LayerNorm::new(store, &format!("{n}.norm_cross"), d, eps),
                    cross_attn: MultiHeadAttention::new(store, &format!("{n}.cross_attn"), d, cfg.heads, rng),
                    norm_ffn: LayerNorm::new(store, &format!("{n}.norm_ffn"), d, eps),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), d, cfg.ffn_dim, rng),
                }
            })
            .collect();
        let decoder_norm = LayerNorm::new(store, "decoder.norm", d, eps);
        let decoder_bias = RelPosBias::new(store, "decoder.relpos", cfg, rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            encoder_norm,
            encoder_bias,
            decoder,
            decoder_norm,
            decoder_bias,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Names-prefixes of decoder-side parameters.
    pub fn decoder_prefixes() -> &'static [&'static str] {
        &["decoder."]
    }

    pub fn encode<S: Scalar>(&self, tape: &mut Tape<'_, S>, embedded: Var, pad: Option<&[bool]>) -> Result<Var> {
        self.encode_at(tape, embedded, pad, 0)
    }

    /// Encoder with absolute positions starting at `first_position`.
    pub fn encode_at<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        embedded: Var,
        pad: Option<&[bool]>,
        first_position: i64,
    ) -> Result<Var> {
        let n = tape.shape(embedded)[0];
        if n == 0 {
            return Err(Error::Contract("encoder input is empty".into()));
        }
        if let Some(p) = pad {
            if p.len() != n {
                return Err(Error::dim("encode", format!("pad mask of {} for {n} frames", p.len())));
            }
            if p.iter().all(|&x| x) {
                return Err(Error::Contract("encoder input is entirely padding".into()));
            }
        }
        let positions: Vec<i64> = (0..n as i64).map(|i| i + first_position).collect();
        let bias = if self.cfg.use_relpos {
            Some(self.encoder_bias.bias(tape, &positions, &positions)?)
        } else {
            None
        };
        let mask = pad.map(|p| tape.constant(key_mask(n, p)));
        let mut x = embedded;
        for layer in &self.encoder {
            let h = layer.norm_attn.forward(tape, x)?;
            let (a, _) = layer.attn.forward(tape, h, h, bias.as_deref(), mask)?;
            x = tape.add(x, a)?;
            let h = layer.norm_ffn.forward(tape, x)?;
            let f = layer.ffn.forward(tape, h)?;
            x = tape.add(x, f)?;
        }
        self.encoder_norm.forward(tape, x)
    }

    pub fn decode<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        target: Var,
        memory: Var,
        memory_pad: Option<&[bool]>,
        target_pad: Option<&[bool]>,
    ) -> Result<DecoderOutput> {
        self.decode_at(tape, target, memory, memory_pad, target_pad, 0)
    }

    pub fn decode_at<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        target: Var,
        memory: Var,
        memory_pad: Option<&[bool]>,
        target_pad: Option<&[bool]>,
        first_position: i64,
    ) -> Result<DecoderOutput> {
        let t = tape.shape(target)[0];
        let n = tape.shape(memory)[0];
        if n == 0 {
            return Err(Error::Contract("decoder memory is empty".into()));
        }
        if t == 0 {
            return Err(Error::Contract("decoder input is empty".into()));
        }
        let positions: Vec<i64> = (0..t as i64).map(|i| i + first_position).collect();
        let bias = if self.cfg.use_relpos {
            Some(self.decoder_bias.bias(tape, &positions, &positions)?)
        } else {
            None
        };
        let self_mask = tape.constant(causal_mask(t, target_pad));
        let cross_mask = memory_pad.map(|p| tape.constant(key_mask(t, p)));
        let mut x = target;
        let mut cross_attention = Vec::new();
        for layer in &self.decoder {
            let h = layer.norm_self.forward(tape, x)?;
            let (a, _) = layer.self_attn.forward(tape, h, h, bias.as_deref(), Some(self_mask))?;
            x = tape.add(x, a)?;
            let h = layer.norm_cross.forward(tape, x)?;
            let (c, w) = layer.cross_attn.forward(tape, h, memory, None, cross_mask)?;
            cross_attention.extend(w);
            x = tape.add(x, c)?;
            let h = layer.norm_ffn.forward(tape, x)?;
            let f = layer.ffn.forward(tape, h)?;
            x = tape.add(x, f)?;
        }
        let states = self.decoder_norm.forward(tape, x)?;
        Ok(DecoderOutput {
            states,
            cross_attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_zero_and_direction() {
        assert_eq!(relpos_bucket(0, 32, 128), 0);
        for k in 1..300 {
            assert_ne!(relpos_bucket(k, 32, 128), relpos_bucket(-k, 32, 128));
        }
    }

    #[test]
    fn bucket_monotone_in_magnitude() {
        for sign in [1i64, -1] {
            let mut prev = relpos_bucket(0, 32, 128);
            for o in 1..=256i64 {
                let b = relpos_bucket(sign * o, 32, 128);
                if o > 1 || sign < 0 {
                    assert!(b >= prev, "offset {}: {b} < {prev}", sign * o);
                }
                prev = b;
                assert!(b < 32);
            }
        }
    }

    #[test]
    fn bucket_saturates_at_max_distance() {
        let far = relpos_bucket(-128, 32, 128);
        assert_eq!(far, relpos_bucket(-10_000, 32, 128));
        assert_eq!(far, 15);
        assert_eq!(relpos_bucket(10_000, 32, 128), 31);
    }
}
