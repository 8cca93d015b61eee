//! Shared product codebook bridging speech and text encoder outputs: hard
//! nearest-neighbour assignment, straight-through mix-up, and the diversity
//! loss on averaged soft assignments.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::uniform;
use crate::scalar::Scalar;

/// How the diversity loss treats multiple groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMode {
    /// Entropy term per group over its `V` entries, averaged over groups.
    PerGroup,
    /// One distribution over all `V^G` entry combinations.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub groups: usize,
    pub entries: usize,
    pub temperature: f64,
    pub mix_ratio: f64,
    pub diversity_mode: DiversityMode,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            entries: 100,
            temperature: 1.0,
            mix_ratio: 0.1,
            diversity_mode: DiversityMode::PerGroup,
        }
    }
}

/// `groups × entries` learned sub-vectors of width `d / groups`.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub table: ParamId,
    pub groups: usize,
    pub entries: usize,
    pub sub_dim: usize,
}

impl Codebook {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        d_model: usize,
        cfg: &QuantizerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.groups == 0 || !d_model.is_multiple_of(cfg.groups) {
            return Err(Error::Config(format!(
                "codebook groups {} must divide d_model {d_model}",
                cfg.groups
            )));
        }
        if cfg.entries == 0 {
            return Err(Error::Config("codebook needs at least one entry".into()));
        }
        let sub_dim = d_model / cfg.groups;
        let table = store.add(
            "quantizer.codebook",
            uniform(&[cfg.groups * cfg.entries, sub_dim], 1.0, rng),
        );
        Ok(Self {
            table,
            groups: cfg.groups,
            entries: cfg.entries,
            sub_dim,
        })
    }

    /// Theoretical number of distinct codes, `entries^groups`.
    pub fn code_count(&self) -> usize {
        self.entries.pow(self.groups as u32)
    }
}

/// Hard assignment of each row to one entry per group.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<S> {
    /// `indices[t][g]`
    pub indices: Vec<Vec<usize>>,
    /// Concatenated chosen sub-vectors, `[N, d]`.
    pub quantized: Tensor<S>,
}

/// Nearest entry per group under L2 distance; ties go to the lowest index.
pub fn assign<S: Scalar>(u: &Tensor<S>, table: &Tensor<S>, groups: usize) -> Result<Assignment<S>> {
    let (n, d) = (u.rows(), u.cols());
    if groups == 0 || d % groups != 0 {
        return Err(Error::dim("quantize", format!("{groups} groups for width {d}")));
    }
    let sub = d / groups;
    if table.cols() != sub || !table.rows().is_multiple_of(groups) {
        return Err(Error::dim(
            "quantize",
            format!("codebook {:?} vs {groups} groups of width {sub}", table.shape()),
        ));
    }
    let entries = table.rows() / groups;
    let mut indices = Vec::with_capacity(n);
    let mut quantized = Tensor::zeros(&[n, d]);
    for t in 0..n {
        let row = u.row(t);
        let mut chosen = Vec::with_capacity(groups);
        for g in 0..groups {
            let part = &row[g * sub..(g + 1) * sub];
            let mut best = (S::infinity(), 0);
            for j in 0..entries {
                let e = table.row(g * entries + j);
                let dist: S = part.iter().zip(e).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            chosen.push(best.1);
            quantized.row_mut(t)[g * sub..(g + 1) * sub]
                .copy_from_slice(table.row(g * entries + best.1));
        }
        indices.push(chosen);
    }
    Ok(Assignment { indices, quantized })
}

/// Row-averaged softmax of `−‖u_g − c‖² / τ` per group: `[G, V]`.
pub fn soft_probs<S: Scalar>(
    tape: &mut Tape<'_, S>,
    u: Var,
    table: Var,
    groups: usize,
    temperature: f64,
) -> Result<Var> {
    let (n, d) = (tape.shape(u)[0], tape.shape(u)[1]);
    let sub = d / groups;
    let entries = tape.shape(table)[0] / groups;
    let mut per_group = Vec::with_capacity(groups);
    for g in 0..groups {
        let ug = tape.slice(u, 1, g * sub, sub)?;
        let cg = tape.slice(table, 0, g * entries, entries)?;
        let u2 = tape.square(ug);
        let u_norm = tape.sum_axis(u2, 1)?;
        let c2 = tape.square(cg);
        let c_norm = tape.sum_axis(c2, 1)?;
        let cross = tape.matmul_bt(ug, cg)?;
        let cross = tape.scale(cross, S::lit(-2.0));
        let dist = tape.add_col(cross, u_norm)?;
        let dist = tape.add_row(dist, c_norm)?;
        let logits = tape.scale(dist, S::lit(-1.0 / temperature));
        let p = tape.softmax(logits, 1)?;
        let total = tape.sum_axis(p, 0)?;
        let mean = tape.scale(total, S::one() / S::from_usize(n).unwrap());
        per_group.push(tape.reshape(mean, &[1, entries])?);
    }
    tape.concat(&per_group, 0)
}

/// Averaged joint distribution over all entry combinations, `[1, V^G]`,
/// from per-row products of the group softmaxes.
pub fn joint_soft_probs<S: Scalar>(
    tape: &mut Tape<'_, S>,
    u: Var,
    table: Var,
    groups: usize,
    temperature: f64,
) -> Result<Var> {
    let (n, d) = (tape.shape(u)[0], tape.shape(u)[1]);
    let sub = d / groups;
    let entries = tape.shape(table)[0] / groups;
    let mut joint: Option<Var> = None;
    for g in 0..groups {
        let ug = tape.slice(u, 1, g * sub, sub)?;
        let cg = tape.slice(table, 0, g * entries, entries)?;
        let u2 = tape.square(ug);
        let u_norm = tape.sum_axis(u2, 1)?;
        let c2 = tape.square(cg);
        let c_norm = tape.sum_axis(c2, 1)?;
        let cross = tape.matmul_bt(ug, cg)?;
        let cross = tape.scale(cross, S::lit(-2.0));
        let dist = tape.add_col(cross, u_norm)?;
        let dist = tape.add_row(dist, c_norm)?;
        let logits = tape.scale(dist, S::lit(-1.0 / temperature));
        let p = tape.softmax(logits, 1)?;
        joint = Some(match joint {
            None => p,
            Some(acc) => {
                let a = tape.shape(acc)[1];
                let mut ia = Vec::with_capacity(n * a * entries);
                let mut ib = Vec::with_capacity(n * a * entries);
                for r in 0..n {
                    for x in 0..a {
                        for y in 0..entries {
                            ia.push(r * a + x);
                            ib.push(r * entries + y);
                        }
                    }
                }
                let ea = tape.gather(acc, &ia, &[n, a * entries])?;
                let eb = tape.gather(p, &ib, &[n, a * entries])?;
                tape.mul(ea, eb)?
            }
        });
    }
    let joint = joint.expect("at least one group");
    let k = tape.shape(joint)[1];
    let total = tape.sum_axis(joint, 0)?;
    let mean = tape.scale(total, S::one() / S::from_usize(n).unwrap());
    tape.reshape(mean, &[1, k])
}

/// `(1/V) Σ p ln p` for each row of `probs: [G, V]`, averaged over rows.
/// `0·ln 0` is taken as 0.
pub fn diversity_loss<S: Scalar>(tape: &mut Tape<'_, S>, probs: Var) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    let (g, v) = match shape[..] {
        [g, v] => (g, v),
        [v] => (1, v),
        _ => return Err(Error::dim("diversity_loss", format!("shape {shape:?}"))),
    };
    // summation error grows with V and the precision
    let tol = S::lit(1e-9).max(S::epsilon() * S::from_usize(8 * v).unwrap());
    for r in 0..g {
        let row = &tape.value(probs).data()[r * v..(r + 1) * v];
        if row.iter().any(|&p| p < S::zero()) {
            return Err(Error::Contract("negative probability in diversity loss".into()));
        }
        let total: S = row.iter().copied().sum();
        if (total - S::one()).abs() > tol {
            return Err(Error::Contract(format!("distribution {r} sums to {total}, not 1")));
        }
    }
    // p·ln(p) with p floored away from zero; the floored term contributes 0·ln 0 = 0
    // since p itself multiplies it.
    let floor = S::min_positive_value();
    let clamped: Vec<S> = tape.value(probs).data().iter().map(|&p| p.max(floor)).collect();
    let safe = tape.constant(Tensor::new(shape.clone(), clamped)?);
    let shift = tape.sub(safe, probs)?;
    let shift = tape.detach(shift);
    let positive = tape.add(probs, shift)?;
    let logs = tape.ln(positive);
    let terms = tape.mul(probs, logs)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, S::one() / S::from_usize(v * g).unwrap()))
}

/// Closed-form diversity value for plain probability rows.
pub fn diversity_value(probs: &[Vec<f64>]) -> Result<f64> {
    let mut acc = 0.0;
    for p in probs {
        if p.iter().any(|&x| x < 0.0) {
            return Err(Error::Contract("negative probability in diversity loss".into()));
        }
        let v = p.len() as f64;
        acc += p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>() / v;
    }
    Ok(acc / probs.len().max(1) as f64)
}

/// Replaces `round(ratio·N)` uniformly chosen rows of `u` by their quantized
/// vectors. Forward takes the quantized value; backward passes the gradient
/// straight to `u`. Returns the mixed states and the replaced rows (ascending).
pub fn mixup<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, S>,
    u: Var,
    quantized: &Tensor<S>,
    ratio: f64,
    rng: &mut R,
) -> Result<(Var, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!("mix-up ratio {ratio} outside [0, 1]")));
    }
    let n = tape.shape(u)[0];
    let k = ((ratio * n as f64).round() as usize).min(n);
    let mut rows = index::sample(rng, n, k).into_vec();
    rows.sort_unstable();
    let mixed = tape.straight_through(u, quantized, &rows)?;
    Ok((mixed, rows))
}

/// Mean squared distance between each chosen entry and the (gradient-stopped)
/// row it was chosen for, averaged over groups. Trains the codebook only.
pub fn attraction_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    u: Var,
    table: Var,
    assignment: &Assignment<S>,
    codebook: &Codebook,
) -> Result<Var> {
    let target = tape.detach(u);
    let mut parts = Vec::with_capacity(codebook.groups);
    for g in 0..codebook.groups {
        let ids: Vec<usize> = assignment
            .indices
            .iter()
            .map(|row| g * codebook.entries + row[g])
            .collect();
        let chosen = tape.embedding(table, &ids)?;
        let tg = tape.slice(target, 1, g * codebook.sub_dim, codebook.sub_dim)?;
        let diff = tape.sub(chosen, tg)?;
        let sq = tape.square(diff);
        let total = tape.sum_axis(sq, 1)?;
        parts.push(tape.mean(total));
    }
    let cat = tape.concat(&parts, 0)?;
    Ok(tape.mean(cat))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_is_chosen() {
        let table = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 0.0, 1.0, 2.0]).unwrap();
        let u = Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let a = assign(&u, &table, 1).unwrap();
        assert_eq!(a.indices, vec![vec![1]]);
        assert_eq!(a.quantized.data(), u.data());
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let table = Tensor::<f64>::from_f64(&[2, 1], &[-1.0, 1.0]).unwrap();
        let u = Tensor::from_f64(&[1, 1], &[0.0]).unwrap();
        assert_eq!(assign(&u, &table, 1).unwrap().indices, vec![vec![0]]);
    }

    #[test]
    fn diversity_closed_forms() {
        let v = diversity_value(&[vec![0.25; 4]]).unwrap();
        assert!((v - 0.25f64.ln() / 4.0).abs() < 1e-15);
        assert_eq!(diversity_value(&[vec![0.0, 1.0, 0.0]]).unwrap(), 0.0);
        assert!(diversity_value(&[vec![-0.1, 1.1]]).is_err());
    }

    #[test]
    fn diversity_on_tape_handles_zeros() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_f64(&[1, 3], &[0.0, 1.0, 0.0]).unwrap());
        let l = diversity_loss(&mut tape, p).unwrap();
        assert_eq!(tape.item(l), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(p).unwrap().iter().all(|g| g.is_finite()));
    }
}
