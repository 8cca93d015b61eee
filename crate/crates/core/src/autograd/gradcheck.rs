//! Central finite-difference oracle for the tape's analytic gradients.

use super::{Grads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `|a − n| / max(|a|, |n|, 1e-12)`
pub fn relative_error<S: Scalar>(analytic: S, numeric: S) -> S {
    let denom = analytic.abs().max(numeric.abs()).max(S::lit(1e-12));
    (analytic - numeric).abs() / denom
}

fn eval_scalar<S: Scalar>(tape: &Tape<'_, S>, y: Var) -> Result<S> {
    if tape.value(y).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(y)
        )));
    }
    Ok(tape.item(y))
}

/// Maximum relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<'_, S>, Var) -> Result<Var>,
{
    if eps <= S::zero() {
        return Err(Error::Contract("eps must be positive".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    eval_scalar(&tape, y)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(<[S]>::to_vec)
        .unwrap_or_else(|| vec![S::zero(); x.numel()]);

    let eval_at = |probe: Tensor<S>| -> Result<S> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let y = f(&mut t, v)?;
        eval_scalar(&t, y)
    };

    let mut worst = S::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (eps + eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Outcome of a parameter-level gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    /// `name[flat index]` of the worst element.
    pub worst: String,
    /// Analytic and numeric gradient at the worst element.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// Checks gradients of a scalar function of all parameters in `store`.
/// At most `per_param` evenly spaced elements are probed per parameter.
pub fn check_params<S, F>(store: &ParamStore<S>, f: F, eps: S, per_param: usize) -> Result<ParamCheck>
where
    S: Scalar,
    F: Fn(&mut Tape<'_, S>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let y = f(&mut tape)?;
    eval_scalar(&tape, y)?;
    tape.backward(y)?;
    let grads = tape.param_grads();
    let eval = |probe: &ParamStore<S>| -> Result<S> {
        let mut t = Tape::with_params(probe);
        let y = f(&mut t)?;
        eval_scalar(&t, y)
    };
    check_against(store, &grads, eval, eps, per_param)
}

/// Compares precomputed `analytic` gradients with central differences of
/// `eval`, which maps a (perturbed) parameter store to a scalar.
///
/// A central difference carries rounding noise of about `ε_mach·|f|/eps`,
/// which swamps gradients that are exactly zero (for example attention key
/// biases, which softmax cancels). The relative error therefore uses
/// `max(|a|, |n|, 1e-6 + 1e6·ε_mach·|f|/eps)` as its denominator: at a
/// tolerance of 1e-4, disagreements up to a hundred times the nominal noise
/// (intermediate sums are larger than `|f|`) pass as zero.
pub fn check_against<S, F>(
    store: &ParamStore<S>,
    analytic: &Grads<S>,
    eval: F,
    eps: S,
    per_param: usize,
) -> Result<ParamCheck>
where
    S: Scalar,
    F: Fn(&ParamStore<S>) -> Result<S>,
{
    if eps <= S::zero() {
        return Err(Error::Contract("eps must be positive".into()));
    }
    let f0 = eval(store)?.as_f64().abs();
    let floor = 1e-6 + 1e6 * S::epsilon().as_f64() * f0 / eps.as_f64();
    let mut probe = store.clone();
    let mut report = ParamCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let step = (n / per_param.max(1)).max(1);
        for i in (0..n).step_by(step).take(per_param.max(1)) {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (eps + eps);
            let a = analytic.get(id).map_or(S::zero(), |g| g[i]);
            let (a, numeric) = (a.as_f64(), numeric.as_f64());
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if !err.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at {}[{i}]", store.name(id))));
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = format!("{}[{}]", store.name(id), i);
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}
