//! Finite-difference validation of analytic gradients.

use crate::error::{Error, Result};

/// A model whose scalar loss is a deterministic function of a flat parameter
/// vector. Training inputs, targets, and any noise draws are frozen inside
/// the implementor so repeated evaluations are exactly repeatable.
pub trait DiffModel {
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, flat: &[f64]);
    /// Loss and the analytic gradient in the same flat layout.
    fn loss_and_grad(&mut self) -> (f64, Vec<f64>);
    /// Loss only (must agree with `loss_and_grad().0`).
    fn loss(&mut self) -> f64 {
        self.loss_and_grad().0
    }
}

/// Compare analytic gradients against central finite differences.
///
/// Returns the maximum over parameters of
/// |analytic - central| / max(1, |central|).
pub fn grad_check<M: DiffModel>(model: &mut M, h: f64) -> Result<f64> {
    assert!((1e-7..=1e-3).contains(&h), "h outside supported range");
    let base = model.flat_params();
    let (loss0, analytic) = model.loss_and_grad();
    if !loss0.is_finite() {
        return Err(Error::numerical("grad_check", "non-finite loss"));
    }
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        model.set_flat_params(&probe);
        let lp = model.loss();
        probe[i] = base[i] - h;
        model.set_flat_params(&probe);
        let lm = model.loss();
        probe[i] = base[i];
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::numerical("grad_check", "non-finite loss at probe"));
        }
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    model.set_flat_params(&base);
    Ok(worst)
}

/// Flatten helper for implementors: append slices in a fixed order.
pub fn collect_flat<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut out = Vec::new();
    for p in parts {
        out.extend_from_slice(p);
    }
    out
}

/// Scatter helper: split `flat` back into mutable parts. Panics if the total
/// length differs.
pub fn scatter_flat<'a>(flat: &[f64], parts: impl IntoIterator<Item = &'a mut [f64]>) {
    let mut off = 0;
    for p in parts {
        p.copy_from_slice(&flat[off..off + p.len()]);
        off += p.len();
    }
    assert_eq!(off, flat.len(), "flat length mismatch");
}
