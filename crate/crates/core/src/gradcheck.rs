//! Central finite-difference gradient checking.

use crate::params::{ParamId, ParamStore};

/// One scalar parameter's analytic and central-difference derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdEntry {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Larger of the two loss values used for the difference.
    pub loss_scale: f64,
}

impl FdEntry {
    /// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + self.numeric.abs() + 1e-12)
    }

    pub fn absolute_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

/// Central differences of `loss` for every scalar parameter, paired with the
/// gradients currently stored in `params`. `loss` must be deterministic.
///
/// Parameter values are restored exactly after each probe.
pub fn finite_diff_entries<F>(params: &mut ParamStore, h: f64, mut loss: F) -> Vec<FdEntry>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut out = Vec::new();
    let ids: Vec<_> = params.param_ids().collect();
    for id in ids {
        for k in 0..params.value(id).len() {
            let original = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = original + h;
            let plus = loss(params);
            params.value_mut(id).data_mut()[k] = original - h;
            let minus = loss(params);
            params.value_mut(id).data_mut()[k] = original;
            out.push(FdEntry {
                param: id,
                index: k,
                analytic: params.grad(id).data()[k],
                numeric: (plus - minus) / (2.0 * h),
                loss_scale: plus.abs().max(minus.abs()),
            });
        }
    }
    out
}

/// Largest relative error (see [`FdEntry::relative_error`]) over every
/// scalar parameter.
pub fn finite_diff_check<F>(params: &mut ParamStore, h: f64, loss: F) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    finite_diff_entries(params, h, loss)
        .iter()
        .map(FdEntry::relative_error)
        .fold(0.0, f64::max)
}
