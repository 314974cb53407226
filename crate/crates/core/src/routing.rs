//! Capsule routing-by-agreement between layer capsules and output capsules.
//!
//! Shapes used throughout, per call over `R` independent positions:
//!
//! * votes `V`: `[R, L, N, h]` with `h = d / N`
//! * assignments `C` and logits `B`: `[R, L, N]`, normalised over `N`
//! * means / variances: `[R, 1, N, h]` inside the graph, `[R, N, h]` in [`RoutingState`]
//! * input activations `A^H`: `[R, L]`; output activations `A^Ω`: `[R, N]`
//!
//! Every position is routed independently; nothing mixes across the `R` axis.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingKind {
    Dynamic,
    Em,
}

/// Working set of one routing call, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct RoutingState {
    pub kind: RoutingKind,
    /// Final agreement logits `B` (dynamic routing only).
    pub logits: Option<Tensor>,
    /// Final assignments: the `C` of the last loop body for dynamic routing,
    /// the output of the last E-step for EM routing.
    pub assignments: Tensor,
    pub votes: Tensor,
    pub means: Option<Tensor>,
    pub variances: Option<Tensor>,
    pub act_in: Option<Tensor>,
    pub act_out: Option<Tensor>,
    /// `C` as seen at the start of each iteration (before the M-step for EM).
    pub iteration_trace: Vec<Tensor>,
}

/// Output capsules `Ω`, as `[R, N, h]` and concatenated per position as `[R, d]`.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleOutput {
    pub capsules: Var,
    pub flattened: Var,
}

/// Squashing nonlinearity on a plain vector.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|v| v * v).sum();
    let k = crate::graph::squash_scale(n2);
    s.iter().map(|v| v * k).collect()
}

fn votes_dims(g: &Graph, votes: Var) -> Result<[usize; 4]> {
    match *g.shape(votes) {
        [r, l, n, h] => Ok([r, l, n, h]),
        ref s => Err(Error::Shape {
            op: "routing votes",
            lhs: s.to_vec(),
            rhs: vec![4],
        }),
    }
}

/// `V[j,l,n] = Ĥ^l[j] · W_{l→n}`. Each `weights[l]` is a `[d, d]` matrix whose
/// column block `n·h..(n+1)·h` is `W_{l→n}`.
pub fn compute_votes(
    g: &mut Graph,
    store: &ParamStore,
    capsules: &[Var],
    weights: &[ParamId],
    n_out: usize,
) -> Result<Var> {
    if capsules.len() != weights.len() || capsules.is_empty() {
        return Err(Error::Config(format!(
            "{} input capsules but {} vote matrices",
            capsules.len(),
            weights.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(capsules.len());
    for (&cap, &w) in capsules.iter().zip(weights) {
        let shape = store.get(w).tensor.shape().to_vec();
        let d_out = shape.get(1).copied().unwrap_or(0);
        if n_out == 0 || d_out % n_out != 0 {
            return Err(Error::Config(format!(
                "output width {d_out} is not divisible by N = {n_out}"
            )));
        }
        let wv = g.param(store, w);
        let v = g.matmul(cap, wv)?;
        let rows = g.shape(v)[0];
        per_layer.push(g.reshape(v, [rows, 1, n_out, d_out / n_out])?);
    }
    g.concat(&per_layer, 1)
}

/// `A^H_l[j] = sigmoid(Ĥ^l[j] · w_l)` with each `w_l` of shape `[d, 1]`.
/// Computed once per routing call and held fixed while routing iterates.
pub fn input_activation(
    g: &mut Graph,
    store: &ParamStore,
    capsules: &[Var],
    weights: &[ParamId],
) -> Result<Var> {
    if capsules.len() != weights.len() || capsules.is_empty() {
        return Err(Error::Config(format!(
            "{} input capsules but {} activation vectors",
            capsules.len(),
            weights.len()
        )));
    }
    let mut cols = Vec::with_capacity(capsules.len());
    for (&cap, &w) in capsules.iter().zip(weights) {
        let wv = g.param(store, w);
        cols.push(g.matmul(cap, wv)?);
    }
    let logits = g.concat(&cols, 1)?;
    Ok(g.sigmoid(logits))
}

/// Iterative dynamic routing starting from all-zero logits.
pub fn dynamic_routing(
    g: &mut Graph,
    votes: Var,
    iterations: usize,
) -> Result<(CapsuleOutput, RoutingState)> {
    let [r, l, n, _] = votes_dims(g, votes)?;
    let b0 = g.constant(Tensor::zeros([r, l, n]));
    dynamic_routing_from(g, votes, iterations, b0)
}

/// Dynamic routing from explicit initial logits `[R, L, N]`.
pub fn dynamic_routing_from(
    g: &mut Graph,
    votes: Var,
    iterations: usize,
    initial_logits: Var,
) -> Result<(CapsuleOutput, RoutingState)> {
    if iterations == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let [r, l, n, h] = votes_dims(g, votes)?;
    if g.shape(initial_logits) != [r, l, n] {
        return Err(Error::Shape {
            op: "dynamic_routing logits",
            lhs: g.shape(initial_logits).to_vec(),
            rhs: vec![r, l, n],
        });
    }
    let mut logits = initial_logits;
    let mut trace = Vec::with_capacity(iterations);
    let mut assign = logits;
    let mut omega = votes;
    for _ in 0..iterations {
        assign = g.softmax(logits, 2)?;
        trace.push(g.value(assign).clone());
        let c4 = g.reshape(assign, [r, l, n, 1])?;
        let weighted = g.mul(c4, votes)?;
        let total = g.sum_axis(weighted, 1)?;
        omega = g.squash(total)?;
        let agree = g.mul(omega, votes)?;
        let agree = g.sum_axis(agree, 3)?;
        let agree = g.reshape(agree, [r, l, n])?;
        logits = g.add(logits, agree)?;
    }
    let capsules = g.reshape(omega, [r, n, h])?;
    let flattened = g.reshape(omega, [r, n * h])?;
    let state = RoutingState {
        kind: RoutingKind::Dynamic,
        logits: Some(g.value(logits).clone()),
        assignments: g.value(assign).clone(),
        votes: g.value(votes).clone(),
        means: None,
        variances: None,
        act_in: None,
        act_out: None,
        iteration_trace: trace,
    };
    Ok((
        CapsuleOutput {
            capsules,
            flattened,
        },
        state,
    ))
}

/// Gaussian statistics produced by one M-step.
#[derive(Clone, Copy, Debug)]
pub struct MStep {
    /// `[R, 1, N, h]`
    pub mean: Var,
    /// `[R, 1, N, h]`, floored at the variance floor.
    pub variance: Var,
    /// `A^Ω` as `[R, 1, N]`.
    pub act_out: Var,
    /// `ln A^Ω`, computed from the logit so it stays finite when `A^Ω` underflows.
    pub log_act_out: Var,
    /// `Σ_l C'_{l→n}` as `[R, 1, N]`.
    pub mass: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EmCoefficients {
    /// Fixed cost of activating a capsule, broadcastable to `[1, 1, 1]`.
    pub beta_a: Var,
    /// Per-input cost of not activating it, broadcastable to `[1, 1, 1]`.
    pub beta_mu: Var,
    pub variance_floor: f64,
}

const HALF_LOG_2PI_E: f64 = 1.418_938_533_204_672_7; // (1 + ln 2π) / 2

/// M-step: holds `C` fixed and refits every output capsule's Gaussian and activation.
pub fn m_step(
    g: &mut Graph,
    assign: Var,
    act_in: Var,
    votes: Var,
    inv_temperature: f64,
    coef: EmCoefficients,
) -> Result<MStep> {
    let [r, l, n, _] = votes_dims(g, votes)?;
    let a_h = g.reshape(act_in, [r, l, 1])?;
    let weighted = g.mul(assign, a_h)?;
    let mass = g.sum_axis(weighted, 1)?;
    // An unused capsule has zero mass; its numerators are zero as well, so the
    // floor on the denominator yields μ = 0 and σ² = floor.
    let denom = g.clamp_min(mass, f64::MIN_POSITIVE);
    let denom = g.reshape(denom, [r, 1, n, 1])?;
    let w4 = g.reshape(weighted, [r, l, n, 1])?;

    let wv = g.mul(w4, votes)?;
    let num = g.sum_axis(wv, 1)?;
    let mean = g.div(num, denom)?;

    let dev = g.sub(votes, mean)?;
    let dev2 = g.square(dev);
    let wdev = g.mul(w4, dev2)?;
    let vnum = g.sum_axis(wdev, 1)?;
    let var = g.div(vnum, denom)?;
    let variance = g.clamp_min(var, coef.variance_floor);

    // cost_h = (ln σ + (1 + ln 2π)/2) · Σ_l C'
    let log_var = g.ln(variance);
    let per_dim = g.affine(log_var, 0.5, HALF_LOG_2PI_E);
    let mass4 = g.reshape(mass, [r, 1, n, 1])?;
    let cost = g.mul(per_dim, mass4)?;
    let cost = g.sum_axis(cost, 3)?;
    let cost = g.reshape(cost, [r, 1, n])?;

    let mu_mass = g.mul(coef.beta_mu, mass)?;
    let z = g.sub(coef.beta_a, mu_mass)?;
    let z = g.sub(z, cost)?;
    let z = g.scale(z, inv_temperature);
    let act_out = g.sigmoid(z);
    let log_act_out = g.log_sigmoid(z);
    Ok(MStep {
        mean,
        variance,
        act_out,
        log_act_out,
        mass,
    })
}

/// E-step: holds the Gaussians fixed and reassigns every input capsule,
/// `C_{l→n} ∝ A^Ω_n p_n(V_{l→n})`, normalised over `n` in log space.
pub fn e_step(
    g: &mut Graph,
    mean: Var,
    variance: Var,
    log_act_out: Var,
    votes: Var,
) -> Result<Var> {
    let [r, l, n, _] = votes_dims(g, votes)?;
    let dev = g.sub(votes, mean)?;
    let dev2 = g.square(dev);
    let two_var = g.scale(variance, 2.0);
    let quad = g.div(dev2, two_var)?;
    let norm = g.scale(variance, 2.0 * PI);
    let norm = g.ln(norm);
    let norm = g.scale(norm, -0.5);
    let log_p = g.sub(norm, quad)?;
    let log_p = g.sum_axis(log_p, 3)?;
    let log_p = g.reshape(log_p, [r, l, n])?;
    let logits = g.add(log_p, log_act_out)?;
    g.softmax(logits, 2)
}

/// Iterative EM routing. `act_in` is `[R, L]`; `lambda` holds one inverse
/// temperature per iteration.
pub fn em_routing(
    g: &mut Graph,
    votes: Var,
    act_in: Var,
    lambda: &[f64],
    coef: EmCoefficients,
) -> Result<(CapsuleOutput, RoutingState)> {
    let iterations = lambda.len();
    if iterations == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    if coef.variance_floor <= 0.0 || coef.variance_floor.is_nan() {
        return Err(Error::Config("variance_floor must be positive".into()));
    }
    let [r, l, n, h] = votes_dims(g, votes)?;
    if g.shape(act_in) != [r, l] {
        return Err(Error::Shape {
            op: "em_routing activations",
            lhs: g.shape(act_in).to_vec(),
            rhs: vec![r, l],
        });
    }
    let mut assign = g.constant(Tensor::full([r, l, n], 1.0 / n as f64));
    let mut trace = Vec::with_capacity(iterations);
    let mut last = None;
    for (t, &lam) in lambda.iter().enumerate() {
        trace.push(g.value(assign).clone());
        let m = m_step(g, assign, act_in, votes, lam, coef)?;
        let finite = [m.mean, m.variance, m.act_out]
            .iter()
            .all(|&v| g.value(v).is_finite());
        if !finite {
            return Err(Error::NonFinite(format!(
                "EM routing statistics at iteration {}",
                t + 1
            )));
        }
        assign = e_step(g, m.mean, m.variance, m.log_act_out, votes)?;
        last = Some(m);
    }
    let m = last.expect("at least one iteration");
    let a4 = g.reshape(m.act_out, [r, 1, n, 1])?;
    let omega = g.mul(a4, m.mean)?;
    let capsules = g.reshape(omega, [r, n, h])?;
    let flattened = g.reshape(omega, [r, n * h])?;
    let state = RoutingState {
        kind: RoutingKind::Em,
        logits: None,
        assignments: g.value(assign).clone(),
        votes: g.value(votes).clone(),
        means: Some(g.value(m.mean).reshaped([r, n, h])?),
        variances: Some(g.value(m.variance).reshaped([r, n, h])?),
        act_in: Some(g.value(act_in).clone()),
        act_out: Some(g.value(m.act_out).reshaped([r, n])?),
        iteration_trace: trace,
    };
    Ok((
        CapsuleOutput {
            capsules,
            flattened,
        },
        state,
    ))
}

/// Default inverse-temperature schedule `λ_t = 1 + t`.
pub fn default_lambda_schedule(iterations: usize) -> Vec<f64> {
    (0..iterations).map(|t| 1.0 + t as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert!(close(&squash(&[1.0, 0.0]), &[0.5, 0.0], 1e-15));
        let s = squash(&[3.0, 4.0]);
        assert!(close(&s, &[25.0 / 26.0 * 0.6, 25.0 / 26.0 * 0.8], 1e-15));
        assert!((s[0] - 0.576923).abs() < 1e-6 && (s[1] - 0.769231).abs() < 1e-6);
    }

    #[test]
    fn zero_iterations_is_a_config_error() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros([1, 1, 1, 2]));
        assert!(matches!(
            dynamic_routing(&mut g, v, 0),
            Err(Error::Config(_))
        ));
        let a = g.constant(Tensor::ones([1, 1]));
        let z = g.constant(Tensor::zeros([1, 1, 1]));
        let coef = EmCoefficients {
            beta_a: z,
            beta_mu: z,
            variance_floor: 1e-6,
        };
        assert!(matches!(
            em_routing(&mut g, v, a, &[], coef),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn votes_require_divisible_width() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros([4, 4])).unwrap();
        let mut g = Graph::new();
        let cap = g.constant(Tensor::ones([2, 4]));
        assert!(matches!(
            compute_votes(&mut g, &store, &[cap], &[w], 3),
            Err(Error::Config(_))
        ));
        let v = compute_votes(&mut g, &store, &[cap], &[w], 2).unwrap();
        assert_eq!(g.shape(v), &[2, 1, 2, 2]);
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lambda_default_is_increasing() {
        assert_eq!(default_lambda_schedule(3), vec![1.0, 2.0, 3.0]);
    }
}
