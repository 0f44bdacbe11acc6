//! Central finite-difference verification of analytic gradients.

use crate::Tensor;

/// Something whose scalar loss depends on a set of named `f64` tensors.
///
/// `loss_and_grads` must return analytic gradients for exactly the tensors
/// reachable through `tensor_mut`, in the same order as `names`.
pub trait GradCheckable {
    fn names(&self) -> Vec<String>;
    fn tensor_mut(&mut self, name: &str) -> &mut Tensor<f64>;
    fn loss(&mut self) -> f64;
    fn loss_and_grads(&mut self) -> (f64, Vec<Tensor<f64>>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Finite-difference step used unless the caller overrides it.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely: a gradient of exactly
/// zero cannot be matched relatively by a finite difference.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare analytic gradients against `(L(x+h) − L(x−h)) / 2h` for every
/// element of every named tensor.
pub fn gradient_check<M: GradCheckable>(model: &mut M, step: f64, tolerance: f64) -> GradReport {
    let names = model.names();
    let (_, analytic) = model.loss_and_grads();
    assert_eq!(analytic.len(), names.len(), "one gradient per named tensor");

    let mut entries = Vec::with_capacity(names.len());
    for (name, grad) in names.iter().zip(&analytic) {
        let n = model.tensor_mut(name).len();
        assert_eq!(grad.len(), n, "gradient shape for `{name}`");
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..n {
            let orig = model.tensor_mut(name).data()[i];
            model.tensor_mut(name).data_mut()[i] = orig + step;
            let plus = model.loss();
            model.tensor_mut(name).data_mut()[i] = orig - step;
            let minus = model.loss();
            model.tensor_mut(name).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        entries.push(GradEntry {
            name: name.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    GradReport { entries, tolerance }
}
