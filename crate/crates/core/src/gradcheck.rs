//! Central-difference verification of every trainable parameter's gradient.

use std::collections::BTreeMap;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{Graph, Var};
use crate::model::Seq2Seq;
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to rounding compare on an absolute scale. One ulp of an O(1)
    /// loss divided by `step` is about 1e-11, which the default keeps near
    /// 1e-6 relative.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            floor: 1e-5,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element, with its two estimates.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ParamReport {
    /// Parameter name without its final component, e.g. `enc.0.attn.q`.
    pub fn module(&self) -> &str {
        self.name.rsplit_once('.').map_or(&self.name, |(m, _)| m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub loss: f64,
    pub params: Vec<ParamReport>,
}

impl Report {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn by_module(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            let e = out.entry(p.module().to_string()).or_insert(0.0f64);
            *e = e.max(p.max_rel_error);
        }
        out
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,max_rel_error\n");
        for (m, e) in self.by_module() {
            s.push_str(&format!("{m},{e:.3e}\n"));
        }
        s
    }
}

fn scalar_loss<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Contract("gradcheck loss must be scalar".into()));
    }
    Ok(g.value(loss).item())
}

/// Compares the tape gradient of `build`'s scalar output with central
/// differences for every trainable parameter. Leaves `store` unchanged apart
/// from its gradient buffers.
pub fn check<F>(store: &mut ParamStore, config: &GradcheckConfig, build: F) -> Result<Report>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var> + Sync,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let value = g.value(loss).item();
    g.backward_into(loss, store)?;
    drop(g);

    let ids: Vec<ParamId> = store
        .sorted_ids()
        .filter(|&id| store.get(id).trainable)
        .collect();
    let base: &ParamStore = store;
    let h = config.step;
    let reports = exec::map(ids, |id| -> Result<ParamReport> {
        let mut local = base.clone();
        let p = base.get(id);
        let mut report = ParamReport {
            name: p.name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..p.tensor.len() {
            let orig = p.tensor.data()[i];
            local.get_mut(id).tensor.data_mut()[i] = orig + h;
            let up = scalar_loss(&local, &build)?;
            local.get_mut(id).tensor.data_mut()[i] = orig - h;
            let down = scalar_loss(&local, &build)?;
            local.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = p.grad.data()[i];
            let rel = relative_error(analytic, numeric, config.floor);
            if rel > report.max_rel_error || i == 0 {
                report.max_rel_error = rel;
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
        Ok(report)
    });
    Ok(Report {
        loss: value,
        params: reports.into_iter().collect::<Result<_>>()?,
    })
}

/// Gradient check of the model's training loss on one batch.
pub fn check_model(
    model: &Seq2Seq,
    store: &mut ParamStore,
    batch: &Batch,
    config: &GradcheckConfig,
) -> Result<Report> {
    check(store, config, |g, s| {
        let out = model.forward(g, s, batch)?;
        model.loss(g, out.logits, batch)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn exact_for_a_cubic() {
        let mut store = ParamStore::new();
        let p = store.add("m.p", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let r = check(&mut store, &GradcheckConfig::default(), |g, s| {
            let x = g.param(s, p);
            let c = g.map(x, |v| v * v * v, |v| 3.0 * v * v);
            Ok(g.sum(c))
        })
        .unwrap();
        assert!(r.passed(1e-8), "{r:?}");
        assert_eq!(r.by_module().keys().collect::<Vec<_>>(), ["m"]);
    }

    #[test]
    fn wrong_rule_is_caught() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::new([2], vec![0.3, 0.7]).unwrap()).unwrap();
        let r = check(&mut store, &GradcheckConfig::default(), |g, s| {
            let x = g.param(s, p);
            let c = g.map(x, f64::sin, |v| 1.1 * v.cos());
            Ok(g.sum(c))
        })
        .unwrap();
        assert!(!r.passed(1e-4));
        assert_eq!(r.worst().unwrap().name, "p");
    }

    #[test]
    fn floor_bounds_the_denominator() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-12, 0.0, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}
