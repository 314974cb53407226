//! Parameterised building blocks shared by the model and the aggregators.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{xavier, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x·W (+ b)` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out))?;
        let bias = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros([fan_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    /// Builds the layer around an explicit weight matrix and optional bias.
    pub fn with_weights(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Option<Tensor>,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), weight)?;
        let b = bias
            .map(|b| store.add(format!("{name}.b"), b))
            .transpose()?;
        Ok(Linear { weight: w, bias: b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Adds a `[d]` bias parameter across all leading dims of `x`.
pub fn add_bias(g: &mut Graph, store: &ParamStore, x: Var, bias: ParamId) -> Result<Var> {
    let rank = g.shape(x).len();
    let b = g.param(store, bias);
    let mut shape = vec![1; rank];
    shape[rank - 1] = store.get(bias).tensor.len();
    let b = g.reshape(b, shape)?;
    g.add(x, b)
}

/// Elementwise product of `x[..., d]` with a `[d]` parameter.
pub fn scale_by(g: &mut Graph, store: &ParamStore, x: Var, gain: ParamId) -> Result<Var> {
    let rank = g.shape(x).len();
    let w = g.param(store, gain);
    let mut shape = vec![1; rank];
    shape[rank - 1] = store.get(gain).tensor.len();
    let w = g.reshape(w, shape)?;
    g.mul(x, w)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.g"), Tensor::ones([d]))?,
            bias: store.add(format!("{name}.b"), Tensor::zeros([d]))?,
            eps: 1e-5,
        })
    }

    /// Normalises the last axis.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Value-only layer normalisation of each row, matching [`LayerNorm`] with
/// unit gain and zero bias.
pub fn layer_norm_rows(x: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let std = (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
