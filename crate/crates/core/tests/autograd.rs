use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use speechtext::autograd::{conv_out_len, grad_check, Tape, Tensor, Var};
use speechtext::Result;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks (relu, abs) are never probed.
fn random_off_kink(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = random(shape, seed);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// Fixed random weighting so every output element contributes to the scalar.
fn weighted_sum(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(y), seed ^ 0xABCD);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn matmul_identity_and_scalar() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(Tensor::from_f64(&[1, 1], &[2.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(&[1, 1], &[3.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[6.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let a = random(&[4, 5], seed);
        let b = random(&[5, 3], seed + 100);
        let err = grad_check(
            |t, x| {
                let bv = t.constant(b.clone());
                let y = t.matmul(x, bv)?;
                Ok(t.sum(y))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
        let err = grad_check(
            |t, x| {
                let av = t.constant(a.clone());
                let y = t.matmul(av, x)?;
                Ok(t.sum(y))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn relu_and_softmax_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let z = tape.constant(Tensor::vector(vec![0.0; 3]));
    let s = tape.softmax(z, 0).unwrap();
    for &p in tape.value(s).data() {
        assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
    }
}

#[test]
fn conv_length_example() {
    assert_eq!(conv_out_len(10, 3, 2), 4);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[10, 1]));
    let w = tape.constant(Tensor::zeros(&[3, 2]));
    let y = tape.conv1d(x, w, 3, 2, 0, 0).unwrap();
    assert_eq!(tape.shape(y), &[4, 2]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![0.3, -2.0, 5.0]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert_eq!(tape.grad(s).unwrap(), &[1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    // second call accumulates
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn grad_check_of_sum_is_exact() {
    let x = random(&[3, 4], 7);
    let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn grad_check_rejects_non_scalar_and_bad_eps() {
    let x = random(&[3], 1);
    assert!(grad_check(|_, x| Ok(x), &x, 1e-5).is_err());
    assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
}

#[test]
fn l1_loss_gradient_off_kink() {
    let x = random_off_kink(&[6], 3);
    let err = grad_check(
        |t, x| {
            let a = t.abs(x);
            Ok(t.mean(a))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

type Case = (&'static str, Vec<usize>, fn(&mut Tape<'_, f64>, Var, u64) -> Result<Var>);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("add", vec![3, 4], |t, x, s| {
            let c = t.constant(random(&[3, 4], s + 1));
            t.add(x, c)
        }),
        ("sub", vec![3, 4], |t, x, s| {
            let c = t.constant(random(&[3, 4], s + 1));
            t.sub(c, x)
        }),
        ("mul", vec![3, 4], |t, x, _| t.mul(x, x)),
        ("add_row", vec![3, 4], |t, x, s| {
            let r = t.leaf(random(&[4], s + 2));
            t.add_row(x, r)
        }),
        ("mul_row", vec![3, 4], |t, x, s| {
            let r = t.constant(random(&[4], s + 2));
            t.mul_row(x, r)
        }),
        ("add_col", vec![3, 4], |t, x, s| {
            let c = t.constant(random(&[3], s + 2));
            t.add_col(x, c)
        }),
        ("relu", vec![3, 4], |t, x, _| Ok(t.relu(x))),
        ("gelu", vec![3, 4], |t, x, _| Ok(t.gelu(x))),
        ("tanh", vec![3, 4], |t, x, _| Ok(t.tanh(x))),
        ("sigmoid", vec![3, 4], |t, x, _| Ok(t.sigmoid(x))),
        ("softplus", vec![3, 4], |t, x, _| Ok(t.softplus(x))),
        ("exp", vec![3, 4], |t, x, _| Ok(t.exp(x))),
        ("abs", vec![3, 4], |t, x, _| Ok(t.abs(x))),
        ("square", vec![3, 4], |t, x, _| Ok(t.square(x))),
        ("ln", vec![3, 4], |t, x, _| {
            let a = t.square(x);
            let p = t.add_scalar(a, 0.5);
            Ok(t.ln(p))
        }),
        ("softmax_axis1", vec![3, 4], |t, x, _| t.softmax(x, 1)),
        ("softmax_axis0", vec![3, 4], |t, x, _| t.softmax(x, 0)),
        ("log_softmax", vec![3, 4], |t, x, _| t.log_softmax(x, 1)),
        ("layer_norm", vec![3, 4], |t, x, _| t.layer_norm(x, 1, 1e-5)),
        ("layer_norm_axis0", vec![3, 4], |t, x, _| t.layer_norm(x, 0, 1e-5)),
        ("embedding", vec![5, 3], |t, x, _| t.embedding(x, &[4, 0, 4, 2])),
        ("gather", vec![3, 4], |t, x, _| t.gather(x, &[0, 5, 5, 11], &[2, 2])),
        ("conv1d", vec![9, 2], |t, x, s| {
            let w = t.leaf(random(&[3 * 2, 4], s + 3));
            t.conv1d(x, w, 3, 2, 1, 1)
        }),
        ("conv1d_weight", vec![6, 3], |t, w, s| {
            let x = t.constant(random(&[7, 2], s + 3));
            t.conv1d(x, w, 3, 1, 1, 1)
        }),
        ("transpose", vec![3, 4], |t, x, _| t.transpose(x)),
        ("concat", vec![3, 4], |t, x, s| {
            let c = t.constant(random(&[3, 2], s + 4));
            t.concat(&[c, x, x], 1)
        }),
        ("concat_rows", vec![3, 4], |t, x, _| t.concat(&[x, x], 0)),
        ("slice", vec![3, 4], |t, x, _| t.slice(x, 1, 1, 2)),
        ("reshape", vec![3, 4], |t, x, _| t.reshape(x, &[2, 6])),
        ("sum_axis", vec![3, 4], |t, x, _| t.sum_axis(x, 0)),
        ("mean", vec![3, 4], |t, x, _| Ok(t.mean(x))),
        ("matmul_bt", vec![3, 4], |t, x, s| {
            let b = t.constant(random(&[5, 4], s + 5));
            t.matmul_bt(x, b)
        }),
        ("matmul_bt_rhs", vec![5, 4], |t, b, s| {
            let a = t.constant(random(&[3, 4], s + 5));
            t.matmul_bt(a, b)
        }),
        ("replace_rows", vec![4, 3], |t, x, s| {
            let f = t.leaf(random(&[3], s + 6));
            t.replace_rows(x, f, &[1, 3])
        }),
    ]
}

#[test]
fn every_primitive_passes_grad_check_on_ten_seeds() {
    for (name, shape, build) in primitive_cases() {
        for seed in 0..10u64 {
            let x = random_off_kink(&shape, seed * 31 + 1);
            let err = grad_check(
                |t, x| {
                    let y = build(t, x, seed)?;
                    weighted_sum(t, y, seed)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let x = random(&[4, 3], 9);
    let repl = random(&[4, 3], 10);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.clone());
    let y = tape.straight_through(xv, &repl, &[2]).unwrap();
    assert_eq!(tape.value(y).row(2), repl.row(2));
    assert_eq!(tape.value(y).row(0), x.row(0));
    let l = weighted_sum(&mut tape, y, 1).unwrap();
    tape.backward(l).unwrap();
    let w = random(&[4, 3], 1 ^ 0xABCD);
    assert_eq!(tape.grad(xv).unwrap(), w.data());
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
    let p = tape.mul(c, x).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn layer_norm_of_constant_fiber_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[2, 5], 3.25));
    let y = tape.layer_norm(x, 1, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn axis_errors_are_dimension_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.softmax(x, 2).is_err());
    assert!(tape.slice(x, 0, 1, 2).is_err());
    let t = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.embedding(t, &[3]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        for r in 0..3 {
            let total: f64 = tape.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_length_follows_recurrence(len in 1usize..400, kernel in 1usize..12, stride in 1usize..6) {
        prop_assume!(len >= kernel);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[len, 1]));
        let w = tape.constant(Tensor::zeros(&[kernel, 1]));
        let y = tape.conv1d(x, w, kernel, stride, 0, 0).unwrap();
        // count windows that fit
        let mut count = 0;
        let mut start = 0;
        while start + kernel <= len {
            count += 1;
            start += stride;
        }
        prop_assert_eq!(tape.shape(y)[0], count);
        prop_assert_eq!(count, (len - kernel) / stride + 1);
    }
}
