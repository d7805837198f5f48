//! Central finite-difference gradient checker.

use super::graph::{Graph, NodeId, OpKind};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Element;

pub const FD_STEP: f64 = 1e-4;
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// (parameter identifier, max relative error over its elements)
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of every trainable parameter with central
/// finite differences of step [`FD_STEP`].
///
/// `build` must be deterministic and return a scalar loss node. Graphs that
/// contain a stop-gradient are rejected: finite differences see straight
/// through detachment.
pub fn grad_check<T, F>(store: &ParamStore<T>, build: F) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Graph<'_, T>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let root = build(&mut g)?;
        if g.contains(OpKind::StopGradient) {
            return Err(Error::GradCheck(
                "graph contains a stop-gradient node; finite differences cannot respect detachment"
                    .into(),
            ));
        }
        if g.contains(OpKind::Dropout) {
            return Err(Error::GradCheck(
                "graph contains a stochastic dropout node".into(),
            ));
        }
        g.backward(root)?
    };

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new(s);
        let root = build(&mut g)?;
        Ok(g.value(root).item().as_f64())
    };

    let mut probe = store.clone();
    let mut per_param = Vec::new();
    let h = T::from_f64(FD_STEP);
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let grad = analytic.dense(id, store);
        let mut worst: f64 = 0.0;
        for i in 0..p.tensor.len() {
            let orig = p.tensor.data()[i];
            probe.tensor_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[i].as_f64(), fd));
        }
        per_param.push((p.name.clone(), worst));
    }
    Ok(GradCheckReport { per_param })
}
