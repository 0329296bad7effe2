use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn m(rows: &[&[f64]]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(r, c, data).unwrap()
}

/// Contracts an arbitrary-shape node to a scalar with fixed generic weights so
/// no gradient coordinate is trivially symmetric.
fn weighted_sum(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let (r, c) = g.value(x).shape();
    let w: Vec<f64> = (0..r * c).map(|k| 0.3 + 0.7 * ((k * 7 + 3) % 11) as f64 / 11.0).collect();
    let w = g.input(Matrix::from_vec(r, c, w)?);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let mut g = Graph::new();
    let i3 = g.input(Matrix::identity(3));
    let a = g.input(m(&[&[1.0, 2.0, 3.0], &[-4.0, 5.0, 0.5], &[7.0, 8.0, 9.0]]));
    let prod = g.matmul(i3, a).unwrap();
    assert_eq!(g.value(prod), g.value(a));

    let x = g.input(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let ones = g.input(m(&[&[1.0], &[1.0]]));
    let y = g.matmul(x, ones).unwrap();
    assert_eq!(g.value(y), &m(&[&[3.0], &[7.0]]));
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Matrix::zeros(2, 3));
    let b = g.input(Matrix::zeros(2, 3));
    match g.matmul(a, b) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, (2, 3));
            assert_eq!(right, (2, 3));
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 2);
    let err = grad_check_inputs(&[a, b], |g, x| {
        let p = g.matmul(x[0], x[1])?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn softmax_uniform_masked_and_formula() {
    let mut g = Graph::new();
    let z = g.input(Matrix::zeros(1, 4));
    let s = g.row_softmax(z, None).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let mask = Mask::new(1, 4, |_, c| c < 2);
    let s = g.row_softmax(z, Some(&mask)).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.0, 0.0]);

    let x = g.input(m(&[&[1.0, 2.0, 3.0]]));
    let s = g.row_softmax(x, None).unwrap();
    let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (k, &v) in g.value(s).data().iter().enumerate() {
        let expected = ((k + 1) as f64).exp() / denom;
        assert!(((v - expected) / expected).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_fully_masked_row() {
    let mut g = Graph::new();
    let x = g.input(Matrix::zeros(2, 3));
    let mask = Mask::new(2, 3, |r, _| r == 0);
    assert!(matches!(g.row_softmax(x, Some(&mask)), Err(Error::DegenerateMask { row: 1 })));
    let wrong = Mask::new(3, 3, |_, _| true);
    assert!(matches!(g.row_softmax(x, Some(&wrong)), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.input(m(&[&[-1.0, 0.0, 2.0]]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let n = g.neg(x);
    let nn = g.neg(n);
    assert_eq!(g.value(nn), g.value(x));

    let a = g.input(Matrix::zeros(1, 2));
    let b = g.input(Matrix::zeros(2, 1));
    assert!(g.add(a, b).is_err());
    assert!(g.sub(a, b).is_err());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.variable(m(&[&[0.0, 1.0, -1.0]]));
    let r = g.relu(x);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn tanh_gradient_at_half() {
    let err = grad_check_inputs(&[Matrix::scalar(0.5)], |g, x| {
        let t = g.tanh(x[0]);
        Ok(g.sum(t))
    })
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
    let mut g = Graph::new();
    let x = g.variable(Matrix::scalar(0.5));
    let t = g.tanh(x);
    g.backward(t).unwrap();
    let expected = 1.0 - 0.5f64.tanh().powi(2);
    assert!((g.grad(x).unwrap().item() - expected).abs() < 1e-15);
}

#[test]
fn structural_examples() {
    let mut g = Graph::new();
    let row = g.input(m(&[&[1.5, -2.0]]));
    let mean = g.mean_rows(row);
    assert_eq!(g.value(mean), g.value(row));

    let a = g.input(m(&[&[1.0, 2.0]]));
    let b = g.input(m(&[&[3.0, 4.0, 5.0]]));
    let c = g.concat_cols(&[a, b]).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

    let x = g.input(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let mean = g.mean_rows(x);
    assert_eq!(g.value(mean).data(), &[2.0, 3.0]);

    assert!(matches!(g.slice_rows(x, 1, 2), Err(Error::Index { .. })));
    assert!(matches!(g.slice_cols(x, 2, 1), Err(Error::Index { .. })));
    assert!(g.concat_rows(&[a, b]).is_err());
    assert!(g.gather_rows(x, &[2]).is_err());
}

#[test]
fn cross_entropy_cases() {
    let mut g = Graph::new();
    let uniform = g.input(Matrix::zeros(3, 4));
    let l = g.cross_entropy(uniform, &[0, 1, 3], &[false; 3]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);

    let peaked = g.input(m(&[&[0.0, 20.0, 0.0]]));
    let l = g.cross_entropy(peaked, &[1], &[false]).unwrap();
    assert!(g.value(l).item() < 1e-8);

    assert!(matches!(
        g.cross_entropy(uniform, &[0, 1, 2], &[true; 3]),
        Err(Error::EmptyLoss)
    ));
    assert!(matches!(
        g.cross_entropy(uniform, &[0, 9, 2], &[false; 3]),
        Err(Error::Vocab { id: 9, .. })
    ));
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&mut rng, 3, 5).map(|v| 3.0 * v);
    let targets = [4, 0, 2];
    let pad = [false, true, false];
    let mut oracle = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if pad[r] {
            continue;
        }
        let z: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
        oracle -= (logits.get(r, t).exp() / z).ln();
    }
    oracle /= 2.0;
    let mut g = Graph::new();
    let x = g.input(logits.clone());
    let l = g.cross_entropy(x, &targets, &pad).unwrap();
    assert!(((g.value(l).item() - oracle) / oracle).abs() < 1e-12);

    let err = grad_check_inputs(&[logits], |g, x| g.cross_entropy(x[0], &targets, &pad)).unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.variable(Matrix::zeros(2, 2));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn repeated_backward_accumulates_into_params() {
    let mut store = ParamStore::new();
    let id = store.add("w", m(&[&[1.0, -2.0]])).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let s = g.sum(w);
    g.backward(s).unwrap();
    g.accumulate_param_grads(&mut store);
    g.backward(s).unwrap();
    g.accumulate_param_grads(&mut store);
    assert_eq!(store.get(id).grad.data(), &[2.0, 2.0]);
    store.zero_grads();
    assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
}

#[test]
fn reused_node_accumulates_every_use() {
    let x0 = m(&[&[0.3, -1.2], &[2.0, 0.1]]);
    let mut g = Graph::new();
    let x = g.variable(x0.clone());
    let twice = g.add(x, x).unwrap();
    let sq = g.mul(twice, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let via_add = g.grad(x).unwrap().clone();

    let mut g = Graph::new();
    let x = g.variable(x0.clone());
    let twice = g.scale(x, 2.0);
    let sq = g.mul(twice, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(&via_add, g.grad(x).unwrap());
    // d/dx 2x² = 4x
    assert_eq!(via_add, x0.map(|v| 4.0 * v));
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 3, 3);
    let err = grad_check_inputs(std::slice::from_ref(&x), |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(err < 1e-7, "rel err {err}");

    let err = grad_check_inputs(&[x], |g, _| Ok(g.input(Matrix::scalar(4.0)))).unwrap();
    assert_eq!(err, 0.0);
}

type OpFn = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// Every primitive, each with its input shapes.
fn primitive_cases() -> Vec<(&'static str, Vec<(usize, usize)>, OpFn)> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], |g, x| g.matmul(x[0], x[1])),
        ("matmul_nt", vec![(3, 4), (2, 4)], |g, x| g.matmul_nt(x[0], x[1])),
        ("add", vec![(2, 3), (2, 3)], |g, x| g.add(x[0], x[1])),
        ("sub", vec![(2, 3), (2, 3)], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![(2, 3), (2, 3)], |g, x| g.mul(x[0], x[1])),
        ("neg", vec![(2, 3)], |g, x| Ok(g.neg(x[0]))),
        ("scale", vec![(2, 3)], |g, x| Ok(g.scale(x[0], -1.7))),
        ("relu", vec![(3, 3)], |g, x| Ok(g.relu(x[0]))),
        ("tanh", vec![(3, 3)], |g, x| Ok(g.tanh(x[0]))),
        ("sigmoid", vec![(3, 3)], |g, x| Ok(g.sigmoid(x[0]))),
        ("add_row_vec", vec![(4, 3), (1, 3)], |g, x| g.add_row_vec(x[0], x[1])),
        ("concat_rows", vec![(2, 3), (1, 3)], |g, x| g.concat_rows(&[x[0], x[1]])),
        ("concat_cols", vec![(2, 3), (2, 1)], |g, x| g.concat_cols(&[x[0], x[1]])),
        ("slice_rows", vec![(4, 3)], |g, x| g.slice_rows(x[0], 1, 2)),
        ("slice_cols", vec![(3, 5)], |g, x| g.slice_cols(x[0], 2, 3)),
        ("mean_rows", vec![(4, 3)], |g, x| Ok(g.mean_rows(x[0]))),
        ("gather_rows", vec![(4, 3)], |g, x| g.gather_rows(x[0], &[3, 0, 3])),
        ("row_softmax", vec![(3, 4)], |g, x| g.row_softmax(x[0], None)),
        ("row_softmax_masked", vec![(3, 4)], |g, x| {
            let mask = Mask::new(3, 4, |r, c| (r + c) % 3 != 0 || c == 1);
            g.row_softmax(x[0], Some(&mask))
        }),
        ("cross_entropy", vec![(3, 5)], |g, x| g.cross_entropy(x[0], &[1, 4, 0], &[false, false, true])),
        ("sum", vec![(2, 2)], |g, x| Ok(g.sum(x[0]))),
    ]
}

fn away_from_kink(mut m: Matrix) -> Matrix {
    // Central differences straddle the relu kink when |x| < FD_STEP.
    for v in m.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.5;
        }
    }
    m
}

#[test]
fn every_primitive_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shapes, op) in primitive_cases() {
        for _ in 0..5 {
            let inputs: Vec<Matrix> = shapes
                .iter()
                .map(|&(r, c)| away_from_kink(random(&mut rng, r, c)))
                .collect();
            let err = grad_check_inputs(&inputs, |g, x| {
                let y = op(g, x)?;
                weighted_sum(g, y)
            })
            .unwrap();
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }
}

fn arb_matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..1.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_are_distributions(x in arb_matrix(6)) {
        let mut g = Graph::new();
        let n = g.input(x.map(|v| 10.0 * v));
        let s = g.row_softmax(n, None).unwrap();
        let s = g.value(s);
        for r in 0..s.rows() {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn every_primitive_passes_grad_check_on_random_inputs(case in 0usize..21, seed in any::<u64>()) {
        let (name, shapes, op) = primitive_cases().swap_remove(case);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Matrix> = shapes
            .iter()
            .map(|&(r, c)| away_from_kink(random(&mut rng, r, c)))
            .collect();
        let err = grad_check_inputs(&inputs, |g, x| {
            let y = op(g, x)?;
            weighted_sum(g, y)
        }).unwrap();
        prop_assert!(err < 1e-6, "{}: rel err {}", name, err);
    }

    // Composite graphs have near-zero gradient coordinates where central
    // difference truncation error dominates, so each coordinate is held to
    // |a - n| <= 1e-6 (|a| + |n|) + 1e-9 rather than a pure relative bound.
    #[test]
    fn random_small_graphs_pass_grad_check(a in arb_matrix(6), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random(&mut rng, a.cols(), 1 + (seed as usize % 6));
        let bias = random(&mut rng, 1, b.cols());
        let f = |g: &mut Graph, x: &[NodeId]| -> Result<NodeId> {
            let h = g.matmul(x[0], x[1])?;
            let h = g.add_row_vec(h, x[2])?;
            let t = g.tanh(h);
            let s = g.row_softmax(t, None)?;
            let sig = g.sigmoid(h);
            let p = g.mul(s, sig)?;
            let m = g.mean_rows(p);
            weighted_sum(g, m)
        };
        let inputs = [a, b, bias];
        let eval = |xs: &[Matrix]| -> (f64, Vec<Matrix>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = xs.iter().map(|m| g.variable(m.clone())).collect();
            let root = f(&mut g, &ids).unwrap();
            g.backward(root).unwrap();
            let grads = ids.iter().map(|&i| g.grad(i).unwrap().clone()).collect();
            (g.value(root).item(), grads)
        };
        let (_, analytic) = eval(&inputs);
        for (i, grad) in analytic.iter().enumerate() {
            for k in 0..grad.data().len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[k] += FD_STEP;
                let mut minus = inputs.clone();
                minus[i].data_mut()[k] -= FD_STEP;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * FD_STEP);
                let a = grad.data()[k];
                prop_assert!(
                    (a - numeric).abs() <= 1e-6 * (a.abs() + numeric.abs()) + 1e-9,
                    "input {} coord {}: analytic {} numeric {}", i, k, a, numeric
                );
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic(a in arb_matrix(5)) {
        let run = || {
            let mut g = Graph::new();
            let x = g.input(a.clone());
            let y = g.matmul_nt(x, x).unwrap();
            let s = g.row_softmax(y, None).unwrap();
            g.value(s).clone()
        };
        prop_assert_eq!(run().data().to_vec(), run().data().to_vec());
    }
}
