use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechtext::autograd::Tensor;
use speechtext::losses::{ctc_forward_backward, ctc_min_frames, BLANK};
use speechtext::tasks::decode::CtcPrefixScorer;
use speechtext::Error;

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

fn softmax_rows(logits: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(|v| v.exp() / z).collect()
        })
        .collect()
}

/// All `C^T` frame paths with their probabilities.
fn all_paths(probs: &[Vec<f64>]) -> Vec<(Vec<usize>, f64)> {
    let c = probs[0].len();
    let mut paths = vec![(Vec::new(), 1.0)];
    for row in probs {
        paths = paths
            .into_iter()
            .flat_map(|(p, w)| {
                (0..c).map(move |k| {
                    let mut q: Vec<usize> = p.clone();
                    q.push(k);
                    (q, w * row[k])
                })
            })
            .collect();
    }
    paths
}

fn targets(labels: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            for l in 1..=labels {
                let mut u: Vec<usize> = t.clone();
                u.push(l);
                next.push(u);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn dp_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    for t_len in 1..=6 {
        // blank plus up to four labels
        for classes in 2..=5 {
            let data: Vec<f64> = (0..t_len * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
            let logits = Tensor::new(vec![t_len, classes], data).unwrap();
            let probs = softmax_rows(&logits);
            let paths = all_paths(&probs);
            for target in targets(classes - 1, 3) {
                let valid: Vec<&(Vec<usize>, f64)> = paths.iter().filter(|(p, _)| collapse(p) == target).collect();
                let total: f64 = valid.iter().map(|(_, w)| w).sum();
                match ctc_forward_backward(&logits, &target, BLANK) {
                    Ok((loss, grad)) => {
                        let want = -total.ln();
                        assert!(
                            (loss - want).abs() < 1e-9,
                            "T={t_len} C={classes} target={target:?}: {loss} vs {want}"
                        );
                        // d(-ln P)/dz[t,k] = softmax - posterior occupancy of k at t
                        for t in 0..t_len {
                            for k in 0..classes {
                                let occ: f64 =
                                    valid.iter().filter(|(p, _)| p[t] == k).map(|(_, w)| w).sum::<f64>() / total;
                                let g = grad[t * classes + k];
                                assert!((g - (probs[t][k] - occ)).abs() < 1e-9, "grad [{t},{k}]");
                            }
                        }
                        checked += 1;
                    }
                    Err(Error::Infeasible { needed, available }) => {
                        assert_eq!(total, 0.0, "feasible target {target:?} rejected");
                        assert_eq!(needed, ctc_min_frames(&target).max(1));
                        assert_eq!(available, t_len);
                    }
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
    assert!(checked > 500, "only {checked} feasible instances");
}

#[test]
fn blank_or_out_of_range_labels_rejected() {
    let logits = Tensor::<f64>::zeros(&[3, 3]);
    assert!(ctc_forward_backward(&logits, &[0], BLANK).is_err());
    assert!(ctc_forward_backward(&logits, &[3], BLANK).is_err());
}

#[test]
fn prefix_scores_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t_len, classes) = (5, 3);
    let data: Vec<f64> = (0..t_len * classes).map(|_| rng.random_range(-2.0..2.0)).collect();
    let logits = Tensor::new(vec![t_len, classes], data).unwrap();
    let paths = all_paths(&softmax_rows(&logits));
    let scorer = CtcPrefixScorer::from_logits(&logits, BLANK).unwrap();
    for prefix in targets(classes - 1, 3) {
        let mut st = scorer.initial();
        for &c in &prefix {
            st = scorer.extend(&st, c);
        }
        let exact: f64 = paths.iter().filter(|(p, _)| collapse(p) == prefix).map(|(_, w)| w).sum();
        let starts: f64 = paths
            .iter()
            .filter(|(p, _)| collapse(p).starts_with(&prefix))
            .map(|(_, w)| w)
            .sum();
        assert!((scorer.final_score(&st).exp() - exact).abs() < 1e-12, "{prefix:?}");
        if !prefix.is_empty() {
            assert!((st.prefix_score.exp() - starts).abs() < 1e-12, "{prefix:?}");
        }
    }
}
