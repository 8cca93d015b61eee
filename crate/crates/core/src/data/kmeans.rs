use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// k-means centroids over feature frames; labels frames by nearest centroid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitLabeler {
    pub centroids: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl UnitLabeler {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Nearest-centroid id for every row of `frames` `[n, dim]`.
    pub fn label(&self, frames: &Tensor<f64>) -> Result<Vec<usize>> {
        if frames.ndim() != 2 || frames.cols() != self.dim() {
            return Err(Error::dim(
                "label",
                format!("frames {:?} against centroids of width {}", frames.shape(), self.dim()),
            ));
        }
        Ok((0..frames.rows()).map(|r| self.nearest(frames.row(r))).collect())
    }
}

/// Lloyd's k-means with k-means++ seeding and a fixed iteration count.
pub fn fit_units(frames: &Tensor<f64>, k: usize, iters: usize, seed: u64) -> Result<UnitLabeler> {
    if frames.ndim() != 2 {
        return Err(Error::dim("fit_units", format!("expected [n, d], got {:?}", frames.shape())));
    }
    let n = frames.rows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} clusters for {n} frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![frames.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|r| sq_dist(frames.row(r), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = frames.row(pick).to_vec();
        for (r, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(frames.row(r), &c));
        }
        centroids.push(c);
    }

    let mut labeler = UnitLabeler { centroids };
    let dim = frames.cols();
    for _ in 0..iters {
        let labels = labeler.label(frames)?;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(frames.row(r)) {
                *s += x;
            }
        }
        let mut moved = false;
        for (c, (s, &cnt)) in labeler.centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            // an empty cluster keeps its previous centroid
            if cnt == 0 {
                continue;
            }
            let next: Vec<f64> = s.iter().map(|v| v / cnt as f64).collect();
            moved |= next != *c;
            *c = next;
        }
        if !moved {
            break;
        }
    }
    Ok(labeler)
}

/// Nearest-frame resampling of a label sequence to `target_len` entries.
pub fn resample_nearest(labels: &[usize], target_len: usize) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Contract("cannot resample an empty label sequence".into()));
    }
    let n = labels.len();
    Ok((0..target_len)
        .map(|j| {
            let src = ((j as f64 + 0.5) * n as f64 / target_len as f64).floor() as usize;
            labels[src.min(n - 1)]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_one_is_mean() {
        let x = Tensor::<f64>::from_f64(&[4, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let u = fit_units(&x, 1, 10, 0).unwrap();
        assert_eq!(u.centroids, vec![vec![3.0, 4.0]]);
        assert_eq!(u.label(&x).unwrap(), vec![0; 4]);
    }

    #[test]
    fn too_many_clusters() {
        let x = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(fit_units(&x, 4, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn resample_identity_and_stretch() {
        assert_eq!(resample_nearest(&[1, 2, 3], 3).unwrap(), vec![1, 2, 3]);
        assert_eq!(resample_nearest(&[1, 2], 4).unwrap(), vec![1, 1, 2, 2]);
        assert_eq!(resample_nearest(&[1, 2, 3, 4], 2).unwrap(), vec![2, 4]);
    }
}
