//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{LairError, Result};

const REL_FLOOR: f64 = 1e-12;

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Entries sorted by descending relative error.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.first().map_or(0.0, |e| e.rel_error)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.first()
    }
}

/// `|a − f| / max(|a|, |f|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(loss_fn: &mut F, store: &ParamStore, label: &str) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(LairError::NonFinite(format!("loss is {v} when perturbing `{label}`")));
    }
    Ok(v)
}

/// Checks every coordinate of every parameter in `params`.
///
/// `loss_fn` must be deterministic for a given store: stochastic nodes have
/// to replay identical noise on each call.
pub fn grad_check<F>(loss_fn: F, params: &ParamStore, eps: f64) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let ids: Vec<ParamId> = params.ids().collect();
    grad_check_subset(loss_fn, params, eps, &ids)
}

/// As [`grad_check`], restricted to the listed parameters.
pub fn grad_check_subset<F>(mut loss_fn: F, params: &ParamStore, eps: f64, ids: &[ParamId]) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let base = g.scalar(loss);
    if !base.is_finite() {
        return Err(LairError::NonFinite(format!("unperturbed loss is {base}")));
    }
    let analytic = g.backward(loss)?.param_grads(params);
    drop(g);

    let mut work = params.clone();
    let mut entries = Vec::new();
    for &id in ids {
        let name = params.name(id).to_string();
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&mut loss_fn, &work, &name)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&mut loss_fn, &work, &name)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].data()[i];
            entries.push(GradEntry {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    Ok(GradReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Init;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn sum_of_squares() {
        let mut store = ParamStore::new(0, 0.02);
        let theta = store.insert("theta", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let report = grad_check(
            |g, s| {
                let t = g.param(s, theta);
                let sq = g.mul(t, t)?;
                Ok(g.sum(sq))
            },
            &store,
            1e-5,
        )
        .unwrap();
        let mut by_index: Vec<_> = report.entries.clone();
        by_index.sort_by_key(|e| e.index);
        assert_eq!(by_index[0].analytic, 2.0);
        assert_eq!(by_index[1].analytic, 4.0);
        for e in &by_index {
            assert!((e.numeric - e.analytic).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new(0, 0.02);
        let theta = store.add("theta", &[3], Init::Const(0.7)).unwrap();
        let report = grad_check(
            |g, s| {
                let _ = g.param(s, theta);
                Ok(g.constant(Tensor::scalar(3.0)))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.entries.iter().all(|e| e.analytic == 0.0 && e.numeric == 0.0));
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let mut store = ParamStore::new(0, 0.02);
        let theta = store.insert("theta", Tensor::vector(vec![0.0])).unwrap();
        let err = grad_check(
            |g, s| {
                let t = g.param(s, theta);
                let v = g.value(t).item();
                // finite at the base point, infinite when perturbed upward
                let c = g.constant(Tensor::scalar(if v > 0.0 { f64::INFINITY } else { 1.0 }));
                g.mul(t, c)
            },
            &store,
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
