//! Dense loops behind the tape primitives. All matrices are row-major.

use crate::scalar::Scalar;

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_bt_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    let bt = transpose(b, n, k);
    gemm_acc(a, &bt, out, m, k, n);
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn gemm_at_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    let inner = c * (x + S::lit(0.044715) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    let inner = c * (x + S::lit(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (S::one() + S::lit(3.0 * 0.044715) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// ln(1 + eˣ) without overflow.
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn log_sum_exp<S: Scalar>(xs: impl Iterator<Item = S> + Clone) -> S {
    let m = xs.clone().fold(S::neg_infinity(), S::max);
    if m == S::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<S>().ln()
}

pub(crate) fn log_add<S: Scalar>(a: S, b: S) -> S {
    if a == S::neg_infinity() {
        return b;
    }
    if b == S::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [5.0, 11.0, 14.0, 23.0]);

        let bt = transpose(&b, 3, 2);
        let mut c2 = [0.0; 4];
        gemm_bt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        let at = transpose(&a, 2, 3);
        let mut c3 = [0.0; 4];
        gemm_at_acc(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn stable_helpers() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(1000.0f64).is_finite());
        assert!((sigmoid(-1000.0f64)).abs() < 1e-300);
        assert_eq!(log_add(f64::NEG_INFINITY, 1.5), 1.5);
        let l = log_sum_exp([0.0f64, 0.0].into_iter());
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }
}
