//! Fusing the hidden states of all layers into one representation.
//!
//! [`Aggregator`] owns the parameters of one strategy for one side of the
//! model and dispatches to the static combination, the position-wise
//! dynamic combination, or one of the two routing procedures.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{scale_by, Linear};
use crate::param::{xavier, ParamId, ParamStore};
use crate::routing::{self, EmCoefficients, RoutingState};
use crate::tensor::Tensor;

/// Scale applied to Xavier-initialised vote matrices under dynamic routing.
/// Agreement logits grow with the squared vote norm, and small votes keep the
/// first iterations close to uniform coupling. EM assignments do not depend
/// on the vote scale, so EM keeps plain Xavier votes.
pub const DYNAMIC_VOTE_GAIN: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    None,
    Linear,
    DynamicFfn,
    DynamicRouting,
    EmRouting,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::None,
        Strategy::Linear,
        Strategy::DynamicFfn,
        Strategy::DynamicRouting,
        Strategy::EmRouting,
    ];

    pub fn is_routing(self) -> bool {
        matches!(self, Strategy::DynamicRouting | Strategy::EmRouting)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Linear => "linear",
            Strategy::DynamicFfn => "dynamic-ffn",
            Strategy::DynamicRouting => "dynamic-routing",
            Strategy::EmRouting => "em-routing",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// How input capsules are built from the layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapsuleInputMode {
    /// `Ĥ^l = F_l(H^l)`
    PerLayer,
    /// `Ĥ^l = F_l(H^1 ‖ … ‖ H^L)`
    AllLayers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub strategy: Strategy,
    /// Number of output capsules `N`.
    pub output_capsules: usize,
    /// Routing iterations `T`.
    pub iterations: usize,
    pub capsule_input_mode: CapsuleInputMode,
    pub variance_floor: f64,
    /// Inverse temperature per EM iteration; `1 + t` when absent.
    pub lambda_schedule: Option<Vec<f64>>,
    /// Softmax the dynamic-combination weights over layers.
    pub normalize_dynamic_weights: bool,
    /// Train `β_A` and `β_μ` instead of holding them at their initial value.
    pub beta_trainable: bool,
    pub beta_a: f64,
    pub beta_mu: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            strategy: Strategy::None,
            output_capsules: 8,
            iterations: 3,
            capsule_input_mode: CapsuleInputMode::AllLayers,
            variance_floor: 1e-6,
            lambda_schedule: None,
            normalize_dynamic_weights: false,
            beta_trainable: true,
            beta_a: 0.0,
            beta_mu: 0.0,
        }
    }
}

impl AggregatorConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        AggregatorConfig {
            strategy,
            ..Default::default()
        }
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.lambda_schedule
            .clone()
            .unwrap_or_else(|| routing::default_lambda_schedule(self.iterations))
    }

    /// Every violated constraint for a model of width `d`, prefixed by `field`.
    pub fn problems(&self, d: usize, field: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            out.push(format!(
                "{field}.variance_floor: must be a positive finite number"
            ));
        }
        if !self.strategy.is_routing() {
            return out;
        }
        if self.output_capsules == 0 {
            out.push(format!("{field}.output_capsules: must be at least 1"));
        } else if !d.is_multiple_of(self.output_capsules) {
            out.push(format!(
                "{field}.output_capsules: d_model = {d} is not divisible by N = {}",
                self.output_capsules
            ));
        }
        if self.iterations == 0 {
            out.push(format!("{field}.iterations: must be at least 1"));
        }
        if let Some(l) = &self.lambda_schedule {
            if l.len() != self.iterations {
                out.push(format!(
                    "{field}.lambda_schedule: has {} entries, expected T = {}",
                    l.len(),
                    self.iterations
                ));
            }
            if l.iter().any(|v| !v.is_finite()) {
                out.push(format!("{field}.lambda_schedule: entries must be finite"));
            }
        }
        if !self.beta_a.is_finite() || !self.beta_mu.is_finite() {
            out.push(format!("{field}.beta_a/beta_mu: must be finite"));
        }
        out
    }
}

/// Hidden states `H^1..H^L`, each `[J, d]` (or `[B·J, d]` for a batch).
#[derive(Clone, Debug)]
pub struct LayerStack {
    layers: Vec<Var>,
}

impl LayerStack {
    pub fn new(g: &Graph, layers: Vec<Var>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("a layer stack needs at least one layer".into()))?;
        let shape = g.shape(*first).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "layer stack",
                lhs: shape,
                rhs: vec![2],
            });
        }
        for &l in &layers[1..] {
            if g.shape(l) != shape.as_slice() {
                return Err(Error::Shape {
                    op: "layer stack",
                    lhs: shape,
                    rhs: g.shape(l).to_vec(),
                });
            }
        }
        Ok(LayerStack { layers })
    }

    pub fn layers(&self) -> &[Var] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn top(&self) -> Var {
        *self.layers.last().unwrap()
    }
}

/// Static combination `Σ_l W_l ⊙ H^l` with one `[d]` weight per layer,
/// shared by every position.
pub fn linear_combine(
    g: &mut Graph,
    store: &ParamStore,
    stack: &LayerStack,
    weights: &[ParamId],
) -> Result<Var> {
    if weights.len() != stack.len() {
        return Err(Error::Config(format!(
            "{} combination weights for {} layers",
            weights.len(),
            stack.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&h, &w) in stack.layers().iter().zip(weights) {
        let term = scale_by(g, store, h, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Position-wise two-layer network `ReLU(x·W1)·W2` mapping the concatenated
/// layer states `[L·d]` of one position to a `[d]` weight vector.
#[derive(Clone, Debug)]
pub struct PositionFfn {
    pub hidden: Linear,
    pub output: Linear,
}

impl PositionFfn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d: usize,
    ) -> Result<Self> {
        Ok(PositionFfn {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d_in, d, false)?,
            output: Linear::new(store, rng, &format!("{name}.out"), d, d, false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        self.output.forward(g, store, h)
    }

    pub fn out_width(&self, store: &ParamStore) -> usize {
        store.get(self.output.weight).tensor.shape()[1]
    }
}

/// Dynamic combination: `W_l[j] = FFN_l(H^1[j] ‖ … ‖ H^L[j])`,
/// `out[j] = Σ_l W_l[j] ⊙ H^l[j]`.
pub fn dynamic_combine(
    g: &mut Graph,
    store: &ParamStore,
    stack: &LayerStack,
    ffns: &[PositionFfn],
    normalize: bool,
) -> Result<Var> {
    if ffns.len() != stack.len() {
        return Err(Error::Config(format!(
            "{} networks for {} layers",
            ffns.len(),
            stack.len()
        )));
    }
    let [rows, d] = [g.shape(stack.top())[0], g.shape(stack.top())[1]];
    for f in ffns {
        if f.out_width(store) != d {
            return Err(Error::Config(format!(
                "weight network outputs width {} but d = {d}",
                f.out_width(store)
            )));
        }
    }
    let context = g.concat(stack.layers(), 1)?;
    let mut weights = Vec::with_capacity(ffns.len());
    for f in ffns {
        weights.push(f.forward(g, store, context)?);
    }
    if normalize {
        let cols: Vec<Var> = weights
            .iter()
            .map(|&w| g.reshape(w, [rows, 1, d]))
            .collect::<Result<_>>()?;
        let all = g.concat(&cols, 1)?;
        let soft = g.softmax(all, 1)?;
        let h: Vec<Var> = stack
            .layers()
            .iter()
            .map(|&h| g.reshape(h, [rows, 1, d]))
            .collect::<Result<_>>()?;
        let h = g.concat(&h, 1)?;
        let prod = g.mul(soft, h)?;
        let sum = g.sum_axis(prod, 1)?;
        return g.reshape(sum, [rows, d]);
    }
    let mut acc: Option<Var> = None;
    for (&h, &w) in stack.layers().iter().zip(&weights) {
        let term = g.mul(h, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Input capsules `Ĥ^l`, one affine map per layer applied position-wise.
pub fn build_input_capsules(
    g: &mut Graph,
    store: &ParamStore,
    stack: &LayerStack,
    mode: CapsuleInputMode,
    transforms: &[Linear],
) -> Result<Vec<Var>> {
    if transforms.len() != stack.len() {
        return Err(Error::Config(format!(
            "{} capsule transforms for {} layers",
            transforms.len(),
            stack.len()
        )));
    }
    match mode {
        CapsuleInputMode::PerLayer => stack
            .layers()
            .iter()
            .zip(transforms)
            .map(|(&h, f)| f.forward(g, store, h))
            .collect(),
        CapsuleInputMode::AllLayers => {
            let context = g.concat(stack.layers(), 1)?;
            transforms
                .iter()
                .map(|f| f.forward(g, store, context))
                .collect()
        }
    }
}

#[derive(Clone, Debug)]
enum Params {
    None,
    Linear(Vec<ParamId>),
    DynamicFfn(Vec<PositionFfn>),
    Routing {
        transforms: Vec<Linear>,
        votes: Vec<ParamId>,
        em: Option<EmParams>,
    },
}

#[derive(Clone, Debug)]
struct EmParams {
    activation: Vec<ParamId>,
    beta_a: ParamId,
    beta_mu: ParamId,
}

/// Result of aggregating one stack.
#[derive(Clone, Debug)]
pub struct Aggregated {
    pub output: Var,
    pub routing: Option<RoutingState>,
}

/// One side's aggregation strategy together with its parameters.
#[derive(Clone, Debug)]
pub struct Aggregator {
    config: AggregatorConfig,
    layers: usize,
    d: usize,
    params: Params,
}

impl Aggregator {
    /// Registers the strategy's parameters under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        layers: usize,
        d: usize,
        config: &AggregatorConfig,
    ) -> Result<Self> {
        let problems = config.problems(d, "aggregator");
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let params = match config.strategy {
            Strategy::None => Params::None,
            Strategy::Linear => Params::Linear(
                (0..layers)
                    .map(|l| {
                        store.add(
                            format!("{prefix}.linear.{l}"),
                            Tensor::full([d], 1.0 / layers as f64),
                        )
                    })
                    .collect::<Result<_>>()?,
            ),
            Strategy::DynamicFfn => Params::DynamicFfn(
                (0..layers)
                    .map(|l| {
                        PositionFfn::new(store, rng, &format!("{prefix}.ffn.{l}"), layers * d, d)
                    })
                    .collect::<Result<_>>()?,
            ),
            Strategy::DynamicRouting | Strategy::EmRouting => {
                let mut transforms = Vec::with_capacity(layers);
                for l in 0..layers {
                    // Starts as the identity on layer l, in either input mode.
                    let d_in = match config.capsule_input_mode {
                        CapsuleInputMode::PerLayer => d,
                        CapsuleInputMode::AllLayers => layers * d,
                    };
                    let block = match config.capsule_input_mode {
                        CapsuleInputMode::PerLayer => 0,
                        CapsuleInputMode::AllLayers => l,
                    };
                    let w = Tensor::from_fn([d_in, d], |i| {
                        let (r, c) = (i / d, i % d);
                        if r == block * d + c {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    transforms.push(Linear::with_weights(
                        store,
                        &format!("{prefix}.capsule.{l}"),
                        w,
                        Some(Tensor::zeros([d])),
                    )?);
                }
                let votes = (0..layers)
                    .map(|l| {
                        let mut w = xavier(rng, d, d);
                        if config.strategy == Strategy::DynamicRouting {
                            w.data_mut().iter_mut().for_each(|v| *v *= DYNAMIC_VOTE_GAIN);
                        }
                        store.add(format!("{prefix}.vote.{l}"), w)
                    })
                    .collect::<Result<_>>()?;
                let em = if config.strategy == Strategy::EmRouting {
                    let activation = (0..layers)
                        .map(|l| store.add(format!("{prefix}.activation.{l}"), xavier(rng, d, 1)))
                        .collect::<Result<_>>()?;
                    let (ba, bm) = (
                        Tensor::full([1], config.beta_a),
                        Tensor::full([1], config.beta_mu),
                    );
                    let (beta_a, beta_mu) = if config.beta_trainable {
                        (
                            store.add(format!("{prefix}.beta_a"), ba)?,
                            store.add(format!("{prefix}.beta_mu"), bm)?,
                        )
                    } else {
                        (
                            store.add_frozen(format!("{prefix}.beta_a"), ba)?,
                            store.add_frozen(format!("{prefix}.beta_mu"), bm)?,
                        )
                    };
                    Some(EmParams {
                        activation,
                        beta_a,
                        beta_mu,
                    })
                } else {
                    None
                };
                Params::Routing {
                    transforms,
                    votes,
                    em,
                }
            }
        };
        Ok(Aggregator {
            config: config.clone(),
            layers,
            d,
            params,
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    pub fn aggregate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stack: &LayerStack,
    ) -> Result<Aggregated> {
        if stack.len() != self.layers || g.shape(stack.top())[1] != self.d {
            return Err(Error::Config(format!(
                "aggregator built for {} layers of width {}, got {} of shape {:?}",
                self.layers,
                self.d,
                stack.len(),
                g.shape(stack.top())
            )));
        }
        let plain = |output| Aggregated {
            output,
            routing: None,
        };
        match &self.params {
            Params::None => Ok(plain(stack.top())),
            Params::Linear(w) => Ok(plain(linear_combine(g, store, stack, w)?)),
            Params::DynamicFfn(ffns) => Ok(plain(dynamic_combine(
                g,
                store,
                stack,
                ffns,
                self.config.normalize_dynamic_weights,
            )?)),
            Params::Routing {
                transforms,
                votes,
                em,
            } => {
                let caps = build_input_capsules(
                    g,
                    store,
                    stack,
                    self.config.capsule_input_mode,
                    transforms,
                )?;
                let n = self.config.output_capsules;
                let v = routing::compute_votes(g, store, &caps, votes, n)?;
                let (out, state) = match em {
                    None => routing::dynamic_routing(g, v, self.config.iterations)?,
                    Some(em) => {
                        let act = routing::input_activation(g, store, &caps, &em.activation)?;
                        let ba = g.param(store, em.beta_a);
                        let ba = g.reshape(ba, [1, 1, 1])?;
                        let bm = g.param(store, em.beta_mu);
                        let bm = g.reshape(bm, [1, 1, 1])?;
                        let coef = EmCoefficients {
                            beta_a: ba,
                            beta_mu: bm,
                            variance_floor: self.config.variance_floor,
                        };
                        routing::em_routing(g, v, act, &self.config.lambda(), coef)?
                    }
                };
                Ok(Aggregated {
                    output: out.flattened,
                    routing: Some(state),
                })
            }
        }
    }
}
