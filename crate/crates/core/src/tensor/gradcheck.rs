//! Central finite-difference oracle for analytic gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use super::matrix::Tensor;
use super::params::ParamSet;

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub max_abs_err: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.
    pub rel_err: f64,
}

impl TensorCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

pub const DEFAULT_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-8;

/// Compares `analytic[name]` against `(f(θ + ε) − f(θ − ε)) / 2ε` for every
/// element of every named tensor.
pub fn check_gradients(
    params: &ParamSet,
    analytic: &BTreeMap<String, Tensor>,
    eps: f64,
    loss: impl Fn(&ParamSet) -> f64,
) -> Vec<TensorCheck> {
    let mut work = params.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (name, a) in analytic {
        let n = a.len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work.expect(name).data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let plus = loss(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let minus = loss(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let diff: f64 = a
            .data()
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let max_abs_err = a
            .data()
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let an = a.norm_sq().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push(TensorCheck {
            name: name.clone(),
            elements: n,
            analytic_norm: an,
            numeric_norm: nn,
            max_abs_err,
            rel_err: diff / an.max(nn).max(NORM_FLOOR),
        });
    }
    out
}
