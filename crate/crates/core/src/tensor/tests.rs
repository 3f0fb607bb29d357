use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Max relative error between tape gradients and central differences for
/// `loss = Σ w ⊙ build(inputs)`, with a fixed random weighting `w`.
fn grad_check(inputs: &[Tensor], seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let forward = |ins: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let w = rand_tensor(tape.value(out).shape(), seed ^ 0xabcd);
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = forward(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = finite_diff(
            |p| {
                let mut ins = inputs.to_vec();
                ins[i] = p.clone();
                let (tape, _, loss) = forward(&ins);
                tape.value(loss).item()
            },
            &inputs[i],
            1e-5,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let d = tape.matmul(r, col).unwrap();
    assert_eq!(tape.value(d), &t(&[1, 1], &[11.0]));
    assert_eq!(tape.macs(), 8 + 2);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    match &err {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, &[2, 3]);
            assert_eq!(rhs, &[2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let ins = [rand_tensor(&[5, 7], 1), rand_tensor(&[7, 3], 2)];
    let err = grad_check(&ins, 3, |tp, v| tp.matmul(v[0], v[1]).unwrap());
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3]));
    let s = tape.softmax_lastdim(z).unwrap();
    for &v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.constant(t(&[2], &[1000.0, 0.0]));
    let s = tape.softmax_lastdim(big).unwrap();
    let out = tape.value(s).data();
    assert_eq!(out[0], 1.0);
    assert!(out[1] >= 0.0 && out[1] < 1e-300);

    let x = tape.constant(rand_tensor(&[4, 6], 9).map(|v| 5.0 * v));
    let s = tape.softmax_lastdim(x).unwrap();
    for row in tape.value(s).data().chunks(6) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(tape.softmax_lastdim(x), Err(Error::Numeric(_))));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let c = tape.constant(Tensor::full(&[4], 2.5));
    let y = tape.layer_norm(c, g, b, 1e-6).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[8]));
    let b = tape.constant(Tensor::zeros(&[8]));
    let x = tape.constant(rand_tensor(&[3, 8], 4).map(|v| 3.0 * v + 1.0));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    for row in tape.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_gradient() {
    for seed in 0..3 {
        let ins = [
            rand_tensor(&[3, 5], seed),
            rand_tensor(&[5], seed + 10),
            rand_tensor(&[5], seed + 20),
        ];
        let err = grad_check(&ins, seed, |tp, v| {
            tp.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()
        });
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}

#[test]
fn elementwise_helpers() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let g = tape.gelu(z);
    assert_eq!(tape.value(g).item(), 0.0);

    let frame = rand_tensor(&[3, 2], 5);
    let f = tape.constant(frame.clone());
    let clip = tape.tile_leading(f, 4).unwrap();
    let m = tape.mean_over_axis(clip, 0).unwrap();
    assert!(tape.value(m).max_abs_diff(&frame) < 1e-15);

    let a = tape.constant(rand_tensor(&[2, 3, 4], 6));
    let b = tape.constant(rand_tensor(&[2, 5, 4], 7));
    let c = tape.concat(&[a, b], 1).unwrap();
    let a2 = tape.slice(c, 1, 0, 3).unwrap();
    let b2 = tape.slice(c, 1, 3, 8).unwrap();
    assert_eq!(tape.value(a2), tape.value(a));
    assert_eq!(tape.value(b2), tape.value(b));
}

#[test]
fn slice_out_of_bounds_is_index_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.slice(a, 1, 2, 4), Err(Error::Index { .. })));
    assert!(matches!(tape.slice(a, 2, 0, 1), Err(Error::Index { .. })));
    assert!(matches!(tape.slice(a, 0, 1, 1), Err(Error::Index { .. })));
}

#[test]
fn backward_simple_losses() {
    let x0 = rand_tensor(&[2, 3], 8);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &x0.map(|v| 2.0 * v));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn untracked_values_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]));
    let c = tape.constant(Tensor::ones(&[2]));
    let y = tape.mul(x, c).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(x).is_some());
}

#[test]
fn finite_diff_matches_backward_on_two_layer_mlp() {
    let x = rand_tensor(&[4, 3], 11);
    let w1 = rand_tensor(&[3, 6], 12);
    let b1 = rand_tensor(&[6], 13);
    let w2 = rand_tensor(&[6, 2], 14);
    let err = grad_check(&[x, w1, b1, w2], 15, |tp, v| {
        let h = tp.matmul(v[0], v[1]).unwrap();
        let h = tp.add_broadcast(h, v[2]).unwrap();
        let h = tp.gelu(h);
        tp.matmul(h, v[3]).unwrap()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn every_differentiable_op_passes_gradient_check() {
    for seed in 0..3u64 {
        let r = |shape: &[usize], k: u64| rand_tensor(shape, seed * 100 + k);
        let cases: Vec<(&str, f64)> = vec![
            (
                "add",
                grad_check(&[r(&[2, 3], 1), r(&[2, 3], 2)], seed, |tp, v| {
                    tp.add(v[0], v[1]).unwrap()
                }),
            ),
            (
                "mul",
                grad_check(&[r(&[2, 3], 1), r(&[2, 3], 2)], seed, |tp, v| {
                    tp.mul(v[0], v[1]).unwrap()
                }),
            ),
            (
                "scale",
                grad_check(&[r(&[4], 1)], seed, |tp, v| tp.scale(v[0], -1.7)),
            ),
            (
                "add_broadcast",
                grad_check(&[r(&[2, 3, 4], 1), r(&[3, 4], 2)], seed, |tp, v| {
                    tp.add_broadcast(v[0], v[1]).unwrap()
                }),
            ),
            (
                "tile_leading",
                grad_check(&[r(&[2, 3], 1)], seed, |tp, v| {
                    tp.tile_leading(v[0], 3).unwrap()
                }),
            ),
            (
                "sum",
                grad_check(&[r(&[2, 3], 1)], seed, |tp, v| tp.sum(v[0])),
            ),
            (
                "mean_over_axis",
                grad_check(&[r(&[3, 4, 2], 1)], seed, |tp, v| {
                    tp.mean_over_axis(v[0], 1).unwrap()
                }),
            ),
            (
                "reshape",
                grad_check(&[r(&[2, 6], 1)], seed, |tp, v| {
                    tp.reshape(v[0], &[3, 4]).unwrap()
                }),
            ),
            (
                "permute",
                grad_check(&[r(&[2, 3, 4], 1)], seed, |tp, v| {
                    tp.permute(v[0], &[2, 0, 1]).unwrap()
                }),
            ),
            (
                "concat",
                grad_check(&[r(&[2, 3], 1), r(&[2, 1], 2)], seed, |tp, v| {
                    tp.concat(&[v[0], v[1]], 1).unwrap()
                }),
            ),
            (
                "slice",
                grad_check(&[r(&[3, 5], 1)], seed, |tp, v| {
                    tp.slice(v[0], 1, 1, 4).unwrap()
                }),
            ),
            (
                "batch_matmul",
                grad_check(&[r(&[2, 3, 4], 1), r(&[2, 4, 5], 2)], seed, |tp, v| {
                    tp.batch_matmul(v[0], v[1], false).unwrap()
                }),
            ),
            (
                "batch_matmul_t",
                grad_check(&[r(&[2, 3, 4], 1), r(&[2, 5, 4], 2)], seed, |tp, v| {
                    tp.batch_matmul(v[0], v[1], true).unwrap()
                }),
            ),
            (
                "softmax",
                grad_check(&[r(&[3, 5], 1)], seed, |tp, v| {
                    tp.softmax_lastdim(v[0]).unwrap()
                }),
            ),
            (
                "gelu",
                grad_check(&[r(&[6], 1).map(|x| 3.0 * x)], seed, |tp, v| tp.gelu(v[0])),
            ),
            (
                "shift",
                grad_check(&[r(&[3, 4, 5], 1)], seed, |tp, v| {
                    let plan = ShiftPlan::new(
                        vec![
                            ShiftBlock {
                                rows: 0..4,
                                cols: 0..2,
                                offset: -1,
                            },
                            ShiftBlock {
                                rows: 1..3,
                                cols: 2..4,
                                offset: 1,
                            },
                        ],
                        Boundary::Zero,
                    )
                    .unwrap();
                    tp.shift(v[0], Arc::new(plan)).unwrap()
                }),
            ),
            (
                "cross_entropy",
                grad_check(&[r(&[5], 1)], seed, |tp, v| {
                    tp.cross_entropy(v[0], 2).unwrap()
                }),
            ),
        ];
        for (name, err) in cases {
            assert!(err < 1e-4, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn shift_boundary_rules() {
    let x = Tensor::from_fn(&[3, 1, 1], |i| (i + 1) as f64);
    let back = |b| {
        ShiftPlan::new(
            vec![ShiftBlock {
                rows: 0..1,
                cols: 0..1,
                offset: -1,
            }],
            b,
        )
        .unwrap()
    };
    assert_eq!(
        back(Boundary::Zero).apply(&x).unwrap().data(),
        &[0.0, 1.0, 2.0]
    );
    assert_eq!(
        back(Boundary::Clamp).apply(&x).unwrap().data(),
        &[1.0, 1.0, 2.0]
    );
    assert_eq!(
        back(Boundary::Wrap).apply(&x).unwrap().data(),
        &[3.0, 1.0, 2.0]
    );
}

#[test]
fn overlapping_shift_blocks_rejected() {
    let err = ShiftPlan::new(
        vec![
            ShiftBlock {
                rows: 0..2,
                cols: 0..2,
                offset: -1,
            },
            ShiftBlock {
                rows: 1..3,
                cols: 1..3,
                offset: 1,
            },
        ],
        Boundary::Zero,
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn file_round_trip_is_bitwise() {
    let x = rand_tensor(&[2, 3, 4], 21);
    let mut buf = Vec::new();
    write_tensor(&mut buf, &x).unwrap();
    let back = read_tensor(&mut buf.as_slice()).unwrap();
    assert_eq!(
        back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(back.shape(), x.shape());
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 1..4)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(shape in shape_strategy(), seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&shape, seed).map(|v| v * scale));
        let y = tape.softmax_lastdim(x).unwrap();
        let d = *shape.last().unwrap();
        for row in tape.value(y).data().chunks(d) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn concat_slice_conserve_elements(shape in shape_strategy(), extra in 1usize..4, seed in any::<u64>()) {
        let axis = shape.len() - 1;
        let mut other = shape.clone();
        other[axis] = extra;
        let a0 = rand_tensor(&shape, seed);
        let b0 = rand_tensor(&other, seed.wrapping_add(1));
        let mut tape = Tape::new();
        let a = tape.constant(a0.clone());
        let b = tape.constant(b0.clone());
        let c = tape.concat(&[a, b], axis).unwrap();
        prop_assert_eq!(tape.value(c).numel(), a0.numel() + b0.numel());
        let n = shape[axis];
        let a1 = tape.slice(c, axis, 0, n).unwrap();
        let b1 = tape.slice(c, axis, n, n + extra).unwrap();
        prop_assert_eq!(tape.value(a1), &a0);
        prop_assert_eq!(tape.value(b1), &b0);
        let flat = tape.reshape(c, &[a0.numel() + b0.numel()]).unwrap();
        let mut want: Vec<f64> = tape.value(c).data().to_vec();
        let mut got: Vec<f64> = tape.value(flat).data().to_vec();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        prop_assert_eq!(want, got);
    }

    #[test]
    fn shift_adjoint_is_transpose(
        frames in 1usize..5, rows in 1usize..4, cols in 1usize..4,
        back in 0usize..3, seed in any::<u64>(), boundary in 0usize..3,
    ) {
        let boundary = [Boundary::Zero, Boundary::Clamp, Boundary::Wrap][boundary];
        let back = back.min(cols);
        let plan = ShiftPlan::new(
            vec![
                ShiftBlock { rows: 0..rows, cols: 0..back, offset: -1 },
                ShiftBlock { rows: 0..rows, cols: back..cols, offset: 1 },
            ],
            boundary,
        ).unwrap();
        let x = rand_tensor(&[frames, rows, cols], seed);
        let y = rand_tensor(&[frames, rows, cols], seed ^ 1);
        let sx = plan.apply(&x).unwrap();
        let sty = plan.adjoint(&y);
        let lhs: f64 = sx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(sty.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}
