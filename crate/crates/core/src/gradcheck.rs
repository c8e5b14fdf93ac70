//! Central finite-difference checks of analytic parameter gradients.

use crate::autodiff::{Grads, ParamId, ParamStore};

/// Denominator floor for relative errors, so that gradients that are zero up
/// to rounding do not blow up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over whole gradient vectors; 0 when both vanish.
pub fn vector_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Three-point central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + step;
            let plus = f(&work);
            work[i] = x[i] - step;
            let minus = f(&work);
            work[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    /// Entries skipped because a perturbation crossed a discontinuity.
    pub fn excluded(&self) -> usize {
        self.groups.iter().map(|g| g.excluded).sum()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.groups.extend(other.groups);
    }
}

/// Central difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error `O(h²)`.
    ThreePoint,
    /// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, error `O(h⁴)`.
    FivePoint,
}

/// Compares `analytic` against three-point central differences of `loss` for
/// every entry of the parameters in `ids`.
///
/// `loss` returns `None` when the perturbed point is not comparable (for
/// example, a quantised level changed); such entries count as excluded.
pub fn check_parameters<F>(
    store: &ParamStore<f64>,
    analytic: &Grads<f64>,
    ids: &[ParamId],
    step: f64,
    loss: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>) -> Option<f64>,
{
    check_parameters_with(store, analytic, ids, step, Stencil::ThreePoint, loss)
}

pub fn check_parameters_with<F>(
    store: &ParamStore<f64>,
    analytic: &Grads<f64>,
    ids: &[ParamId],
    step: f64,
    stencil: Stencil,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>) -> Option<f64>,
{
    let (offsets, weights, denom): (&[f64], &[f64], f64) = match stencil {
        Stencil::ThreePoint => (&[1.0, -1.0], &[1.0, -1.0], 2.0),
        Stencil::FivePoint => (&[-2.0, -1.0, 1.0, 2.0], &[1.0, -8.0, 8.0, -1.0], 12.0),
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for &id in ids {
        let mut group = GroupReport { name: store.name(id).to_string(), ..Default::default() };
        for i in 0..store.get(id).len() {
            let base = store.get(id).data[i];
            let mut numeric = Some(0.0);
            for (&o, &w) in offsets.iter().zip(weights) {
                work.get_mut(id).data[i] = base + o * step;
                numeric = match (numeric, loss(&work)) {
                    (Some(acc), Some(v)) => Some(acc + w * v),
                    _ => None,
                };
                if numeric.is_none() {
                    break;
                }
            }
            work.get_mut(id).data[i] = base;
            match numeric {
                Some(sum) => {
                    let err = relative_error(analytic.get(id).data[i], sum / (denom * step));
                    group.max_rel_err = group.max_rel_err.max(err);
                    group.checked += 1;
                }
                None => group.excluded += 1,
            }
        }
        report.groups.push(group);
    }
    report
}
