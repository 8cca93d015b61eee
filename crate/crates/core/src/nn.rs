//! Parameterised building blocks shared by the pre/post-nets and the backbone.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

pub(crate) fn uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub(crate) fn normal<S: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<S> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| S::lit(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// `y = x·W + b` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[in_dim, out_dim], bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation over the last axis with learned gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], S::one())),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let axis = tape.shape(x).len() - 1;
        let n = tape.layer_norm(x, axis, S::lit(self.eps))?;
        let g = tape.param(self.gain);
        let b = tape.param(self.shift);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

/// Temporal convolution over time-major `[L, C_in]` signals.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    /// Symmetric "same" padding when true, none otherwise.
    pub same: bool,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        same: bool,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[kernel * in_ch, out_ch], bound, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            kernel,
            stride,
            same,
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let (pl, pr) = if self.same {
            ((self.kernel - 1) / 2, self.kernel / 2)
        } else {
            (0, 0)
        };
        let w = tape.param(self.weight);
        let y = tape.conv1d(x, w, self.kernel, self.stride, pl, pr)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}
