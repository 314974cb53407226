//! Finite-difference checking shared by the integration tests.
#![allow(dead_code)]

use lcap_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Builds `f` on fresh graphs and compares d(sum(f · w))/d(input) against
/// central differences, where `w` is a fixed random weighting so that every
/// output element contributes distinctly.
pub fn check<F>(inputs: &[Tensor], f: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |ins: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let w = weights
            .cloned()
            .unwrap_or_else(|| Tensor::ones(g.shape(out).to_vec()));
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .map(|&v| {
                grads
                    .of(v)
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))
            })
            .collect();
        (g.value(loss).item(), w, gs)
    };
    let (_, shape_probe, _) = eval(inputs, None);
    let weights = Tensor::from_fn(shape_probe.shape().to_vec(), |_| rng.random_range(0.5..1.5));
    let (_, _, analytic) = eval(inputs, Some(&weights));
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric =
                (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * STEP);
            let a = analytic[k].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < tol,
                "input {k} elem {i}: analytic {a} vs numeric {numeric} (rel {rel:e})"
            );
        }
    }
}
