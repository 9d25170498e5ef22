//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};

/// Denominator floor for relative errors, so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckStatus {
    Checked {
        max_rel_err: f64,
        /// Flat indices whose relative error exceeded the tolerance.
        flagged: Vec<usize>,
    },
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub status: CheckStatus,
}

impl ParamCheck {
    pub fn passed(&self) -> bool {
        match &self.status {
            CheckStatus::Checked { flagged, .. } => flagged.is_empty(),
            CheckStatus::Frozen => true,
        }
    }

    pub fn max_rel_err(&self) -> Option<f64> {
        match &self.status {
            CheckStatus::Checked { max_rel_err, .. } => Some(*max_rel_err),
            CheckStatus::Frozen => None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_loss<F>(store: &ParamStore<f64>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    Ok(g.value(loss).item())
}

/// Compares the analytic gradient of every trainable parameter against
/// `(L(p + h) - L(p - h)) / 2h`. `loss_fn` must rebuild the same
/// deterministic graph on every call.
pub fn finite_difference_check<F>(
    store: &mut ParamStore<f64>,
    h: f64,
    tol: f64,
    loss_fn: F,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(&*store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?.into_params()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let name = store.name(id).to_string();
        let numel = store.get(id).numel();
        if !store.is_trainable(id) {
            report.push(ParamCheck {
                name,
                numel,
                status: CheckStatus::Frozen,
            });
            continue;
        }
        let mut max_rel_err = 0.0f64;
        let mut flagged = Vec::new();
        for i in 0..numel {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval_loss(store, &loss_fn)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval_loss(store, &loss_fn)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[id.index()].data()[i], numeric);
            max_rel_err = max_rel_err.max(err);
            if err > tol {
                flagged.push(i);
            }
        }
        report.push(ParamCheck {
            name,
            numel,
            status: CheckStatus::Checked {
                max_rel_err,
                flagged,
            },
        });
    }
    Ok(report)
}
