//! Corruption procedures for pre-training: speech span masking and text span
//! infilling (single mask per span, or distinct sentinels per span).

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Masked frame indices of a sequence of `total_len` frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    timesteps: Vec<usize>,
    total_len: usize,
}

impl MaskSet {
    pub fn empty(total_len: usize) -> Self {
        Self {
            timesteps: Vec::new(),
            total_len,
        }
    }

    /// Spans of `span` frames from each start, truncated at the end, merged.
    pub fn from_starts(total_len: usize, starts: &[usize], span: usize) -> Self {
        let mut set = BTreeSet::new();
        for &s in starts.iter().filter(|&&s| s < total_len) {
            set.extend(s..(s + span).min(total_len));
        }
        Self {
            timesteps: set.into_iter().collect(),
            total_len,
        }
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.timesteps.binary_search(&t).is_ok()
    }

    pub fn coverage(&self) -> f64 {
        self.timesteps.len() as f64 / self.total_len.max(1) as f64
    }
}

/// Independently selects each frame as a span start with probability `p_start`
/// and masks `span` frames from every start.
pub fn speech_span_mask<R: Rng + ?Sized>(
    n_frames: usize,
    p_start: f64,
    span: usize,
    rng: &mut R,
) -> Result<MaskSet> {
    if n_frames == 0 {
        return Err(Error::Contract("speech_span_mask needs at least one frame".into()));
    }
    if !(0.0..=1.0).contains(&p_start) {
        return Err(Error::Contract(format!("p_start {p_start} outside [0, 1]")));
    }
    let starts: Vec<usize> = (0..n_frames).filter(|_| rng.random_bool(p_start)).collect();
    Ok(MaskSet::from_starts(n_frames, &starts, span))
}

/// A corrupted token sequence together with what is needed to undo it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextCorruption {
    pub corrupted: Vec<TokenId>,
    pub original: Vec<TokenId>,
    /// Replaced spans as `(start, len)` in `original`, ascending.
    pub spans: Vec<(usize, usize)>,
    /// Decoder target: the original sequence for infilling, or sentinel-delimited
    /// span contents for the sentinel strategy.
    pub target: Vec<TokenId>,
}

impl TextCorruption {
    pub fn identity(tokens: &[TokenId]) -> Self {
        Self {
            corrupted: tokens.to_vec(),
            original: tokens.to_vec(),
            spans: Vec::new(),
            target: tokens.to_vec(),
        }
    }

    /// Replaces each span with the single token `mask`.
    pub fn infill_from_spans(tokens: &[TokenId], spans: &[(usize, usize)], mask: TokenId) -> Result<Self> {
        let spans = normalize_spans(tokens.len(), spans)?;
        let corrupted = splice(tokens, &spans, |_| vec![mask]);
        Ok(Self {
            corrupted,
            original: tokens.to_vec(),
            spans,
            target: tokens.to_vec(),
        })
    }

    /// Replaces span `k` with `sentinels[k]`; the target lists each sentinel
    /// followed by the tokens it hides.
    pub fn sentinel_from_spans(
        tokens: &[TokenId],
        spans: &[(usize, usize)],
        sentinels: &[TokenId],
    ) -> Result<Self> {
        let spans = normalize_spans(tokens.len(), spans)?;
        if spans.len() > sentinels.len() {
            return Err(Error::Contract(format!(
                "{} spans but only {} sentinel tokens",
                spans.len(),
                sentinels.len()
            )));
        }
        let corrupted = splice(tokens, &spans, |k| vec![sentinels[k]]);
        let mut target = Vec::new();
        for (k, &(s, l)) in spans.iter().enumerate() {
            target.push(sentinels[k]);
            target.extend_from_slice(&tokens[s..s + l]);
        }
        Ok(Self {
            corrupted,
            original: tokens.to_vec(),
            spans,
            target,
        })
    }

    pub fn masked_tokens(&self) -> usize {
        self.spans.iter().map(|&(_, l)| l).sum()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_tokens() as f64 / self.original.len().max(1) as f64
    }

    /// Rebuilds the original sequence from `corrupted` and the span map.
    pub fn restore(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.original.len());
        let mut pos = 0; // position in original
        let mut spans = self.spans.iter().peekable();
        for &tok in &self.corrupted {
            match spans.peek() {
                Some(&&(s, l)) if s == pos => {
                    out.extend_from_slice(&self.original[s..s + l]);
                    pos += l;
                    spans.next();
                }
                _ => {
                    out.push(tok);
                    pos += 1;
                }
            }
        }
        out
    }
}

fn normalize_spans(n: usize, spans: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    let mut spans: Vec<_> = spans.iter().copied().filter(|&(_, l)| l > 0).collect();
    spans.sort_unstable();
    let mut end = 0;
    for &(s, l) in &spans {
        if s < end || s + l > n {
            return Err(Error::Contract(format!(
                "span ({s}, {l}) overlaps another span or exceeds length {n}"
            )));
        }
        end = s + l;
    }
    Ok(spans)
}

fn splice(tokens: &[TokenId], spans: &[(usize, usize)], fill: impl Fn(usize) -> Vec<TokenId>) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut pos = 0;
    for (k, &(s, l)) in spans.iter().enumerate() {
        out.extend_from_slice(&tokens[pos..s]);
        out.extend(fill(k));
        pos = s + l;
    }
    out.extend_from_slice(&tokens[pos..]);
    out
}

/// Text infilling: Poisson(`lambda`) span lengths (zero draws redrawn) at random
/// non-overlapping positions, until at least `mask_ratio` of the tokens are
/// covered. Each span becomes one `mask` token.
pub fn text_infill<R: Rng + ?Sized>(
    tokens: &[TokenId],
    mask_ratio: f64,
    lambda: f64,
    mask: TokenId,
    rng: &mut R,
) -> Result<TextCorruption> {
    if tokens.is_empty() {
        return Err(Error::Contract("text_infill needs a non-empty sequence".into()));
    }
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::Contract(format!("mask_ratio {mask_ratio} outside [0, 1)")));
    }
    if tokens.len() < 2 || mask_ratio == 0.0 {
        return Ok(TextCorruption::identity(tokens));
    }
    let poisson = Poisson::new(lambda)
        .map_err(|e| Error::Contract(format!("invalid Poisson rate {lambda}: {e}")))?;
    let n = tokens.len();
    let goal = ((mask_ratio * n as f64).round() as usize).min(n - 1);
    let mut masked = vec![false; n];
    let mut count = 0usize;
    let mut spans = Vec::new();
    while count < goal {
        let mut len = loop {
            let draw = poisson.sample(rng) as usize;
            if draw > 0 {
                break draw.min(goal - count);
            }
        };
        // Shrink until some placement fits in the unmasked gaps.
        let starts = loop {
            let fits: Vec<usize> = (0..n.saturating_sub(len - 1))
                .filter(|&s| !masked[s..s + len].iter().any(|&m| m))
                .collect();
            if !fits.is_empty() || len == 1 {
                break fits;
            }
            len -= 1;
        };
        if starts.is_empty() {
            break;
        }
        let s = starts[rng.random_range(0..starts.len())];
        masked[s..s + len].iter_mut().for_each(|m| *m = true);
        count += len;
        spans.push((s, len));
    }
    TextCorruption::infill_from_spans(tokens, &spans, mask)
}

/// Sentinel span corruption: exactly `round(mask_ratio·N)` tokens hidden in
/// `round(noise / mean_span)` spans (at least one, at most `sentinels.len()`),
/// with random span boundaries.
pub fn t5_span_mask<R: Rng + ?Sized>(
    tokens: &[TokenId],
    mask_ratio: f64,
    mean_span: f64,
    sentinels: &[TokenId],
    rng: &mut R,
) -> Result<TextCorruption> {
    if tokens.is_empty() {
        return Err(Error::Contract("t5_span_mask needs a non-empty sequence".into()));
    }
    if !(0.0..1.0).contains(&mask_ratio) || mean_span < 1.0 {
        return Err(Error::Contract(format!(
            "invalid mask_ratio {mask_ratio} or mean_span {mean_span}"
        )));
    }
    let n = tokens.len();
    let noise = ((mask_ratio * n as f64).round() as usize).min(n - 1);
    if n < 2 || noise == 0 || sentinels.is_empty() {
        return Ok(TextCorruption::identity(tokens));
    }
    let n_spans = ((noise as f64 / mean_span).round() as usize)
        .max(1)
        .min(sentinels.len())
        .min(noise)
        .min(n - noise);
    let noise_lens = random_partition(noise, n_spans, rng);
    let keep_lens = random_partition(n - noise, n_spans, rng);
    let mut spans = Vec::with_capacity(n_spans);
    let mut pos = 0;
    for k in 0..n_spans {
        pos += keep_lens[k];
        spans.push((pos, noise_lens[k]));
        pos += noise_lens[k];
    }
    TextCorruption::sentinel_from_spans(tokens, &spans, sentinels)
}

/// Splits `total` into `parts` positive integers uniformly over compositions.
fn random_partition<R: Rng + ?Sized>(total: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let mut cuts: Vec<usize> = index::sample(rng, total - 1, parts - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_start_probability_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(speech_span_mask(5, 0.0, 10, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn forced_start_is_truncated_at_end() {
        let m = MaskSet::from_starts(12, &[9], 10);
        assert_eq!(m.timesteps(), &[9, 10, 11]);
    }

    #[test]
    fn full_start_probability_covers_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = speech_span_mask(37, 1.0, 10, &mut rng).unwrap();
        assert_eq!(m.len(), 37);
    }

    #[test]
    fn speech_mask_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(speech_span_mask(0, 0.1, 10, &mut rng).is_err());
        assert!(speech_span_mask(5, 1.5, 10, &mut rng).is_err());
    }

    #[test]
    fn infill_single_span() {
        // "abcdef" with 9 as the mask token
        let toks = [0, 1, 2, 3, 4, 5];
        let c = TextCorruption::infill_from_spans(&toks, &[(2, 3)], 9).unwrap();
        assert_eq!(c.corrupted, vec![0, 1, 9, 5]);
        assert_eq!(c.restore(), toks.to_vec());
    }

    #[test]
    fn sentinel_single_span() {
        let toks = [0, 1, 2, 3, 4, 5];
        let c = TextCorruption::sentinel_from_spans(&toks, &[(2, 2)], &[20, 21]).unwrap();
        assert_eq!(c.corrupted, vec![0, 1, 20, 4, 5]);
        assert_eq!(c.target, vec![20, 2, 3]);
        assert_eq!(c.restore(), toks.to_vec());
    }

    #[test]
    fn zero_ratio_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let toks: Vec<_> = (0..20).collect();
        assert_eq!(text_infill(&toks, 0.0, 3.5, 99, &mut rng).unwrap().corrupted, toks);
        assert_eq!(t5_span_mask(&toks, 0.0, 3.0, &[99], &mut rng).unwrap().corrupted, toks);
    }

    #[test]
    fn short_sequence_is_returned_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = text_infill(&[4], 0.3, 3.5, 99, &mut rng).unwrap();
        assert_eq!(c.corrupted, vec![4]);
        assert!(c.spans.is_empty());
    }

    #[test]
    fn overlapping_spans_rejected() {
        assert!(TextCorruption::infill_from_spans(&[1, 2, 3, 4], &[(0, 2), (1, 2)], 0).is_err());
    }

    #[test]
    fn partition_sums_and_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = random_partition(17, 5, &mut rng);
            assert_eq!(p.iter().sum::<usize>(), 17);
            assert!(p.iter().all(|&x| x > 0));
        }
    }
}
