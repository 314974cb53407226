//! Autodiff checked against central finite differences, op by op.

mod common;

use common::{check, random};
use lcap_core::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new([2, 2], vec![1., 0., 0., 1.]).unwrap());
    let b = g.constant(Tensor::new([2, 2], vec![2., 3., 4., 5.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[2., 3., 4., 5.]);

    let a = g.constant(Tensor::new([1, 2], vec![1., 2.]).unwrap());
    let b = g.constant(Tensor::new([2, 1], vec![3., 4.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([3, 4]));
    let b = g.constant(Tensor::zeros([3, 2]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn matmul_sum_grad_is_row_sum_of_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[4, 2], -1.0, 1.0);
    let mut g = Graph::new();
    let av = g.input(a.clone());
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let loss = g.sum(c);
    let ga = g.backward(loss).unwrap().of(av).unwrap();
    for i in 0..3 {
        for p in 0..4 {
            let row_sum = b.at(&[p, 0]) + b.at(&[p, 1]);
            assert!((ga.at(&[i, p]) - row_sum).abs() < 1e-14);
        }
    }
    check(&[a, b], |g, v| g.matmul(v[0], v[1]), 1e-6);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let cases: [(&[f64], &[f64]); 3] = [
        (&[0., 0., 0.], &[1. / 3., 1. / 3., 1. / 3.]),
        (&[1000., 0.], &[1., 0.]),
        (&[1., 2., 3.], &[0.09003, 0.24473, 0.66524]),
    ];
    for (input, want) in cases {
        let x = g.constant(Tensor::new([input.len()], input.to_vec()).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let got = g.value(y).data();
        let tol = if input[0] == 1. { 5e-6 } else { 1e-12 };
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < tol, "{got:?} vs {want:?}");
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([2], vec![f64::NAN, 0.0]).unwrap());
    assert!(g.softmax(x, 0).is_err());
    let x = g.constant(Tensor::new([2], vec![f64::INFINITY, 0.0]).unwrap());
    assert!(g.softmax(x, 0).is_err());
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let p = store
        .add("p", Tensor::new([3], vec![0.5, -2.0, 3.0]).unwrap())
        .unwrap();

    let mut g = Graph::new();
    let pv = g.param(&store, p);
    let loss = g.sum(pv);
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), &[1., 1., 1.]);

    store.zero_grad();
    let mut g = Graph::new();
    let pv = g.param(&store, p);
    let sq = g.mul(pv, pv).unwrap();
    let loss = g.sum(sq);
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), &[1.0, -4.0, 6.0]);

    // a second call without zeroing accumulates
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), &[2.0, -8.0, 12.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[2, 3, 4], 0.5, 2.0);
    let b = random(&mut rng, &[2, 1, 4], 0.5, 2.0);
    check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), 1e-6);
    check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), 1e-6);
    check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]), 1e-6);
    check(&[a.clone(), b.clone()], |g, v| g.div(v[0], v[1]), 1e-6);
    check(std::slice::from_ref(&a), |g, v| Ok(g.exp(v[0])), 1e-6);
    check(std::slice::from_ref(&a), |g, v| Ok(g.ln(v[0])), 1e-6);
    check(std::slice::from_ref(&a), |g, v| Ok(g.sqrt(v[0])), 1e-6);
    check(std::slice::from_ref(&a), |g, v| Ok(g.square(v[0])), 1e-6);
    check(std::slice::from_ref(&a), |g, v| Ok(g.tanh(v[0])), 1e-6);
    check(std::slice::from_ref(&a), |g, v| Ok(g.affine(v[0], -1.5, 0.25)), 1e-6);
    let c = random(&mut rng, &[3, 5], -3.0, 3.0);
    check(std::slice::from_ref(&c), |g, v| Ok(g.sigmoid(v[0])), 1e-6);
    check(std::slice::from_ref(&c), |g, v| Ok(g.log_sigmoid(v[0])), 1e-6);
    check(std::slice::from_ref(&c), |g, v| Ok(g.relu(v[0])), 1e-6);
    check(&[c], |g, v| Ok(g.clamp_min(v[0], 0.1)), 1e-6);
}

#[test]
fn reductions_and_normalisers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3, 4], -2.0, 2.0);
    for axis in 0..3 {
        check(std::slice::from_ref(&x), |g, v| g.sum_axis(v[0], axis), 1e-6);
        check(std::slice::from_ref(&x), |g, v| g.softmax(v[0], axis), 1e-6);
        check(std::slice::from_ref(&x), |g, v| g.log_softmax(v[0], axis), 1e-6);
        check(std::slice::from_ref(&x), |g, v| g.mean_axis(v[0], axis), 1e-6);
    }
    check(&[x], |g, v| Ok(g.sum(v[0])), 1e-6);
}

#[test]
fn movement_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let y = random(&mut rng, &[2, 2, 4], -1.0, 1.0);
    check(std::slice::from_ref(&x), |g, v| g.reshape(v[0], [6, 4]), 1e-6);
    check(std::slice::from_ref(&x), |g, v| g.permute(v[0], &[2, 0, 1]), 1e-6);
    check(std::slice::from_ref(&x), |g, v| g.slice(v[0], 1, 1, 2), 1e-6);
    check(&[x.clone(), y], |g, v| g.concat(&[v[0], v[1]], 1), 1e-6);
    let table = random(&mut rng, &[5, 3], -1.0, 1.0);
    check(&[table], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]), 1e-6);
    let m = random(&mut rng, &[3, 4], -1.0, 1.0);
    check(&[m], |g, v| g.pick(v[0], &[3, 0, 1]), 1e-6);
}

#[test]
fn batched_matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = random(&mut rng, &[2, 4, 5], -1.0, 1.0);
    let bt = random(&mut rng, &[2, 5, 4], -1.0, 1.0);
    check(&[a.clone(), b], |g, v| g.bmm(v[0], v[1], false), 1e-6);
    check(&[a, bt], |g, v| g.bmm(v[0], v[1], true), 1e-6);
}

#[test]
fn squash_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[3, 2, 4], -2.0, 2.0);
    check(&[x], |g, v| g.squash(v[0]), 1e-6);
    // zero vector: value and gradient are both zero
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros([1, 3]));
    let s = g.squash(z).unwrap();
    assert_eq!(g.value(s).data(), &[0.0; 3]);
    let loss = g.sum(s);
    assert_eq!(g.backward(loss).unwrap().of(z).unwrap().data(), &[0.0; 3]);
}

#[test]
fn shared_subexpression_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[4], -1.0, 1.0);
    check(
        &[x],
        |g, v| {
            let e = g.exp(v[0]);
            let m = g.mul(e, v[0])?;
            g.add(m, e)
        },
        1e-6,
    );
}
