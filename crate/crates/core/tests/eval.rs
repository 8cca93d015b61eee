use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechtext::autograd::Tensor;
use speechtext::eval::{
    accuracy, dtw, edit_distance, mcd_dtw, mel_cepstra, wer, write_reports, MetricReport, UtteranceScore,
    MCD_CONSTANT,
};

/// Levenshtein distance by plain recursion over the last symbols.
fn edit_oracle(a: &[u8], b: &[u8]) -> usize {
    match (a, b) {
        ([], _) => b.len(),
        (_, []) => a.len(),
        ([ra @ .., x], [rb @ .., y]) => {
            let sub = edit_oracle(ra, rb) + usize::from(x != y);
            sub.min(edit_oracle(ra, b) + 1).min(edit_oracle(a, rb) + 1)
        }
    }
}

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<u8>> = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..alphabet).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn edit_distance_matches_recursion_on_all_short_pairs() {
    let seqs = all_sequences(4, 3);
    for a in &seqs {
        for b in &seqs {
            assert_eq!(edit_distance(a, b), edit_oracle(a, b), "{a:?} vs {b:?}");
            if !b.is_empty() {
                assert_eq!(wer(a, b).unwrap(), edit_oracle(a, b) as f64 / b.len() as f64);
            }
        }
    }
}

/// Cost of every monotone path from (0,0) to (n-1,m-1).
fn all_path_costs(cost: &[Vec<f64>]) -> Vec<f64> {
    fn walk(cost: &[Vec<f64>], i: usize, j: usize, acc: f64, out: &mut Vec<f64>) {
        let acc = acc + cost[i][j];
        let (n, m) = (cost.len(), cost[0].len());
        if i + 1 == n && j + 1 == m {
            out.push(acc);
            return;
        }
        if i + 1 < n && j + 1 < m {
            walk(cost, i + 1, j + 1, acc, out);
        }
        if i + 1 < n {
            walk(cost, i + 1, j, acc, out);
        }
        if j + 1 < m {
            walk(cost, i, j + 1, acc, out);
        }
    }
    let mut out = Vec::new();
    walk(cost, 0, 0, 0.0, &mut out);
    out
}

fn random_costs(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
}

fn check_path(cost: &[Vec<f64>], path: &[(usize, usize)]) -> f64 {
    assert_eq!(path[0], (0, 0));
    assert_eq!(*path.last().unwrap(), (cost.len() - 1, cost[0].len() - 1));
    for w in path.windows(2) {
        let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)), "step {w:?}");
    }
    path.iter().map(|&(i, j)| cost[i][j]).sum()
}

#[test]
fn dtw_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in 1..=5 {
        for m in 1..=5 {
            let cost = random_costs(n, m, &mut rng);
            let (best, path) = dtw(&cost).unwrap();
            let min = all_path_costs(&cost).into_iter().fold(f64::INFINITY, f64::min);
            assert!((best - min).abs() < 1e-12, "{n}x{m}");
            assert!((check_path(&cost, &path) - best).abs() < 1e-12);
        }
    }
}

#[test]
fn dtw_beats_random_monotone_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cost = random_costs(20, 15, &mut rng);
    let (best, _) = dtw(&cost).unwrap();
    for _ in 0..100 {
        let (mut i, mut j) = (0, 0);
        let mut total = cost[0][0];
        while i < 19 || j < 14 {
            match rng.random_range(0..3) {
                0 if i < 19 && j < 14 => {
                    i += 1;
                    j += 1
                }
                1 if i < 19 => i += 1,
                _ if j < 14 => j += 1,
                _ => i += 1,
            }
            total += cost[i][j];
        }
        assert!(best <= total + 1e-12);
    }
}

#[test]
fn mcd_of_identical_inputs_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(vec![12, 8], (0..96).map(|_| rng.random_range(-5.0..1.0)).collect()).unwrap();
    assert_eq!(mcd_dtw(&x, &x).unwrap(), 0.0);
    let y = Tensor::new(vec![7, 8], (0..56).map(|_| rng.random_range(-5.0..1.0)).collect()).unwrap();
    let d = mcd_dtw(&x, &y).unwrap();
    assert!(d > 0.0);
    assert!((d - mcd_dtw(&y, &x).unwrap()).abs() < 1e-9);
}

#[test]
fn mcd_ignores_constant_gain_offsets() {
    // a uniform log-energy shift only moves the zeroth coefficient
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(vec![5, 8], (0..40).map(|_| rng.random_range(-5.0..1.0)).collect()).unwrap();
    let y = Tensor::new(vec![5, 8], x.data().iter().map(|v| v + 2.5).collect()).unwrap();
    assert!(mcd_dtw(&x, &y).unwrap() < 1e-12);
}

#[test]
fn single_frame_mcd_closed_form() {
    let a = Tensor::new(vec![1, 8], vec![0.0; 8]).unwrap();
    let mut spike = vec![0.0; 8];
    spike[0] = 1.0;
    let b = Tensor::new(vec![1, 8], spike).unwrap();
    // DCT-II of a unit spike at 0: c_k = sqrt(2/8)·cos(πk/16); sum of squares over k≥1
    let sq: f64 = (1..8)
        .map(|k| {
            let c = (2.0f64 / 8.0).sqrt() * (std::f64::consts::PI * k as f64 / 16.0).cos();
            c * c
        })
        .sum();
    assert!((mcd_dtw(&a, &b).unwrap() - MCD_CONSTANT * sq.sqrt()).abs() < 1e-12);
}

#[test]
fn cepstra_satisfy_parseval() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for m in 2..=14 {
        let row: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = Tensor::new(vec![1, m], row.clone()).unwrap();
        let c = mel_cepstra(&x).unwrap();
        assert_eq!(c[0].len(), m - 1);
        let c0 = row.iter().sum::<f64>() / (m as f64).sqrt();
        let energy: f64 = c[0].iter().map(|v| v * v).sum::<f64>() + c0 * c0;
        let direct: f64 = row.iter().map(|v| v * v).sum();
        assert!((energy - direct).abs() < 1e-9, "m={m}");
    }
    // 80 bins keep coefficients 1..=13 only
    let x = Tensor::<f64>::zeros(&[2, 80]);
    assert_eq!(mel_cepstra(&x).unwrap()[0].len(), 13);
}

#[test]
fn mismatched_inputs_rejected() {
    let a = Tensor::<f64>::zeros(&[3, 8]);
    let b = Tensor::<f64>::zeros(&[3, 6]);
    assert!(mcd_dtw(&a, &b).is_err());
    assert!(mcd_dtw(&a, &Tensor::zeros(&[0, 8])).is_err());
    assert!(accuracy(&[1, 2], &[1]).is_err());
    assert!(accuracy::<usize>(&[], &[]).is_err());
    assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 0, 3, 0]).unwrap(), 0.5);
}

#[test]
fn reports_recompute_from_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let r = MetricReport::from_breakdown(
        "wer",
        vec![
            UtteranceScore { id: "a".into(), value: 0.5 },
            UtteranceScore { id: "b".into(), value: 0.0 },
            UtteranceScore { id: "c".into(), value: 1.0 },
        ],
    )
    .unwrap();
    assert_eq!(r.value, 0.5);
    assert_eq!(r.recompute(), r.value);
    write_reports(dir.path(), std::slice::from_ref(&r)).unwrap();
    let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let back: Vec<MetricReport> = serde_json::from_str(&text).unwrap();
    assert_eq!(back, vec![r]);
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
    assert!(MetricReport::from_breakdown("x", vec![]).is_err());
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in prop::collection::vec(0u8..4, 0..8), b in prop::collection::vec(0u8..4, 0..8), c in prop::collection::vec(0u8..4, 0..8)) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
    }
}
