use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Central-difference step used by every check in this crate.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences for every coordinate of
/// `params`. `f` builds the scalar loss on a fresh graph from the given store.
pub fn grad_check<F>(f: F, store: &ParamStore<f64>, params: &[ParamId], eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<(ParamId, Vec<f64>)> = params
        .iter()
        .map(|&id| {
            let grad = grads
                .params()
                .into_iter()
                .find(|(pid, _)| *pid == id)
                .map(|(_, t)| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
            (id, grad)
        })
        .collect();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, s)?;
        let out = g.value(v).item();
        if !out.is_finite() {
            return Err(Error::NonFiniteLoss { value: out, context: "finite-difference probe".into() });
        }
        Ok(out)
    };

    let mut probe = store.clone();
    let mut report = GradReport { max_rel_err: 0.0, worst: None, coordinates: 0 };
    for (id, grad) in analytic {
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(a, numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
