use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub mel_bins: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 1600,
            frame_len: 64,
            hop: 32,
            mel_bins: 8,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.frame_len < 2 || self.hop == 0 || self.mel_bins == 0 {
            return Err(Error::Config(format!("invalid mel settings {self:?}")));
        }
        Ok(())
    }

    pub fn n_frames(&self, len: usize) -> Option<usize> {
        (len >= self.frame_len).then(|| 1 + (len - self.frame_len) / self.hop)
    }

    pub fn n_fft_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.frame_len as f64
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Filter edge frequencies in Hz: `mel_bins + 2` points evenly spaced on the
/// mel scale from 0 to Nyquist. Filter `m` rises on `[e[m], e[m+1]]` and
/// falls on `[e[m+1], e[m+2]]`.
pub fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect()
}

/// Triangular filterbank as a `[mel_bins][n_fft_bins]` weight table.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let edges = mel_edges(cfg);
    (0..cfg.mel_bins)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..cfg.n_fft_bins())
                .map(|k| {
                    let f = cfg.bin_frequency(k);
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Precomputed window, DFT basis and filterbank for repeated extraction.
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    filters: Vec<Vec<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_len;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect();
        let bins = cfg.n_fft_bins();
        let mut cos = Vec::with_capacity(bins * n);
        let mut sin = Vec::with_capacity(bins * n);
        for k in 0..bins {
            for i in 0..n {
                let a = 2.0 * PI * ((k * i) % n) as f64 / n as f64;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            window,
            cos,
            sin,
            filters: mel_filterbank(cfg),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn extract<S: Scalar>(&self, wave: &[f32]) -> Result<Tensor<S>> {
        let cfg = &self.cfg;
        let frames = cfg.n_frames(wave.len()).ok_or(Error::TooShort {
            min: cfg.frame_len,
            got: wave.len(),
        })?;
        let n = cfg.frame_len;
        let bins = cfg.n_fft_bins();
        let mut out = Vec::with_capacity(frames * cfg.mel_bins);
        let mut frame = vec![0.0; n];
        let mut mag = vec![0.0; bins];
        for t in 0..frames {
            let start = t * cfg.hop;
            for i in 0..n {
                frame[i] = wave[start + i] as f64 * self.window[i];
            }
            for (k, m) in mag.iter_mut().enumerate() {
                let c = &self.cos[k * n..(k + 1) * n];
                let s = &self.sin[k * n..(k + 1) * n];
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..n {
                    re += frame[i] * c[i];
                    im -= frame[i] * s[i];
                }
                *m = (re * re + im * im).sqrt();
            }
            for f in &self.filters {
                let e: f64 = f.iter().zip(&mag).map(|(w, m)| w * m).sum();
                out.push(S::lit(e.max(LOG_FLOOR).ln()));
            }
        }
        Tensor::new(vec![frames, cfg.mel_bins], out)
    }
}

/// Log-Mel features `[N_f, mel_bins]` with `N_f = 1 + (len - frame_len) / hop`.
pub fn logmel<S: Scalar>(wave: &[f32], cfg: &MelConfig) -> Result<Tensor<S>> {
    MelExtractor::new(cfg)?.extract(wave)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_is_log_floor() {
        let x = logmel::<f64>(&[0.0; 200], &MelConfig::default()).unwrap();
        assert_eq!(x.shape(), &[5, 8]);
        assert!(x.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn too_short_is_error() {
        assert!(matches!(
            logmel::<f64>(&[0.0; 63], &MelConfig::default()),
            Err(Error::TooShort { min: 64, got: 63 })
        ));
    }

    #[test]
    fn filters_are_nonempty() {
        for f in mel_filterbank(&MelConfig::default()) {
            assert!(f.iter().any(|&w| w > 0.0));
        }
    }
}
