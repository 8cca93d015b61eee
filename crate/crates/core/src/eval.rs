//! Word error rate, DTW-aligned mel-cepstral distortion and accuracy.

use std::f64::consts::{LN_10, PI, SQRT_2};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between hypothesis and reference over the reference length.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("word error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// [`wer`] on whitespace-separated words.
pub fn wer_str(hyp: &str, reference: &str) -> Result<f64> {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    wer(&h, &r)
}

/// `(10 / ln 10)·√2`
pub const MCD_CONSTANT: f64 = 10.0 / LN_10 * SQRT_2;
pub const CEPSTRAL_ORDER: usize = 13;

/// Orthonormal DCT-II coefficients `1..=min(13, mel−1)` of each log-Mel frame.
pub fn mel_cepstra<S: Scalar>(x: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
    if x.ndim() != 2 {
        return Err(Error::dim("mel_cepstra", format!("expected [T, mel], got {:?}", x.shape())));
    }
    let m = x.cols();
    let order = CEPSTRAL_ORDER.min(m.saturating_sub(1));
    let scale = (2.0 / m as f64).sqrt();
    Ok((0..x.rows())
        .map(|r| {
            let row = x.row(r);
            (1..=order)
                .map(|k| {
                    scale
                        * row
                            .iter()
                            .enumerate()
                            .map(|(i, v)| v.as_f64() * (PI * k as f64 * (i as f64 + 0.5) / m as f64).cos())
                            .sum::<f64>()
                })
                .collect()
        })
        .collect())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum-cost monotone alignment with match/insert/delete steps.
/// Returns the summed local cost and the path as `(i, j)` pairs.
pub fn dtw(cost: &[Vec<f64>]) -> Result<(f64, Vec<(usize, usize)>)> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(Error::Contract("DTW needs two non-empty sequences".into()));
    }
    let mut acc = vec![vec![f64::INFINITY; m]; n];
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut b = f64::INFINITY;
                if i > 0 && j > 0 {
                    b = b.min(acc[i - 1][j - 1]);
                }
                if i > 0 {
                    b = b.min(acc[i - 1][j]);
                }
                if j > 0 {
                    b = b.min(acc[i][j - 1]);
                }
                b
            };
            acc[i][j] = best + cost[i][j];
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let mut options = Vec::with_capacity(3);
        if i > 0 && j > 0 {
            options.push((acc[i - 1][j - 1], i - 1, j - 1));
        }
        if i > 0 {
            options.push((acc[i - 1][j], i - 1, j));
        }
        if j > 0 {
            options.push((acc[i][j - 1], i, j - 1));
        }
        let (_, pi, pj) = options
            .into_iter()
            .fold((f64::INFINITY, 0, 0), |a, b| if b.0 < a.0 { b } else { a });
        i = pi;
        j = pj;
        path.push((i, j));
    }
    path.reverse();
    Ok((acc[n - 1][m - 1], path))
}

/// Pairwise Euclidean distances between cepstral frames.
pub fn cepstral_costs(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().map(|x| b.iter().map(|y| euclid(x, y)).collect()).collect()
}

/// Mel-cepstral distortion in dB along the DTW path between two log-Mel sequences.
pub fn mcd_dtw<S: Scalar>(generated: &Tensor<S>, reference: &Tensor<S>) -> Result<f64> {
    if generated.rows() == 0 || reference.rows() == 0 || generated.numel() == 0 || reference.numel() == 0 {
        return Err(Error::Contract("MCD needs two non-empty sequences".into()));
    }
    if generated.cols() != reference.cols() {
        return Err(Error::dim(
            "mcd_dtw",
            format!("{} vs {} mel bins", generated.cols(), reference.cols()),
        ));
    }
    let (a, b) = (mel_cepstra(generated)?, mel_cepstra(reference)?);
    let (total, path) = dtw(&cepstral_costs(&a, &b))?;
    Ok(MCD_CONSTANT * total / path.len() as f64)
}

/// Exact-match fraction.
pub fn accuracy<T: PartialEq>(preds: &[T], labels: &[T]) -> Result<f64> {
    if preds.len() != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "accuracy needs equally many predictions and labels, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub value: f64,
}

/// One metric with its per-utterance breakdown; `value` is the breakdown mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub count: usize,
    pub breakdown: Vec<UtteranceScore>,
}

impl MetricReport {
    pub fn from_breakdown(metric: impl Into<String>, breakdown: Vec<UtteranceScore>) -> Result<Self> {
        if breakdown.is_empty() {
            return Err(Error::Contract("metric report needs at least one utterance".into()));
        }
        let value = breakdown.iter().map(|u| u.value).sum::<f64>() / breakdown.len() as f64;
        Ok(Self {
            metric: metric.into(),
            value,
            count: breakdown.len(),
            breakdown,
        })
    }

    pub fn recompute(&self) -> f64 {
        self.breakdown.iter().map(|u| u.value).sum::<f64>() / self.breakdown.len().max(1) as f64
    }
}

#[derive(Serialize)]
struct ReportLine<'a> {
    metric: &'a str,
    value: f64,
    count: usize,
}

/// Writes `metrics.jsonl` (one metric per line) and `summary.json`
/// (every report with its breakdown) into `dir`.
pub fn write_reports(dir: &Path, reports: &[MetricReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for r in reports {
        let line = ReportLine {
            metric: &r.metric,
            value: r.value,
            count: r.count,
        };
        lines.push_str(&serde_json::to_string(&line).expect("serializable"));
        lines.push('\n');
    }
    let p = dir.join("metrics.jsonl");
    fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(reports).expect("serializable")).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer_str("a b c", "a b c").unwrap(), 0.0);
        assert!((wer_str("a x c", "a b c").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(wer_str("a", "").is_err());
    }

    #[test]
    fn mcd_closed_form() {
        assert!((MCD_CONSTANT - 6.1418).abs() < 1e-4);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0], &[1, 2]).unwrap(), 0.5);
    }
}
