//! Central finite differences, used to check analytic gradients.
//!
//! Only forward evaluations of the function are used, never the graph, so
//! these estimates are independent of the backward rules they check.

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked entries.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because a kink sits inside `[x−ε, x+ε]`.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Central-difference estimate of `∂f/∂x_i` for each requested index.
///
/// With `kink_tol = Some(τ)`, an index is skipped (`None`) when the function
/// is not smooth at scale `ε` around `x_i`: either the forward and backward
/// one-sided slopes differ by more than `τ·max(1, |slope|)`, or the central
/// difference at `ε/4` differs from the one at `ε` by a quarter of that. Both
/// happen when a piecewise-linear kink lies within `ε` of `x_i`; the second
/// also catches kinks on both sides whose one-sided effects cancel.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f32]) -> f64,
    x: &[f32],
    indices: &[usize],
    eps: f32,
    kink_tol: Option<f64>,
) -> Vec<Option<f64>> {
    let mut probe = x.to_vec();
    let f0 = if kink_tol.is_some() { f(&probe) } else { 0.0 };
    indices
        .iter()
        .map(|&i| {
            let orig = probe[i];
            let mut eval = |step: f32| {
                probe[i] = orig + step;
                let fp = f(&probe);
                probe[i] = orig - step;
                let fm = f(&probe);
                probe[i] = orig;
                // The realized step differs from `step` after f32 rounding.
                let up = ((orig + step) as f64) - orig as f64;
                let down = orig as f64 - ((orig - step) as f64);
                (fp, fm, up, down)
            };
            let (fp, fm, up, down) = eval(eps);
            let central = (fp - fm) / (up + down);
            if let Some(tol) = kink_tol {
                let bound = tol * central.abs().max(1.0);
                let fwd = (fp - f0) / up;
                let bwd = (f0 - fm) / down;
                if (fwd - bwd).abs() > bound {
                    return None;
                }
                let (fp, fm, up, down) = eval(eps / 4.0);
                if ((fp - fm) / (up + down) - central).abs() > bound / 4.0 {
                    return None;
                }
            }
            Some(central)
        })
        .collect()
}

/// Compares `analytic[i]` against `numeric` for the listed indices.
pub fn compare(analytic: &[f32], indices: &[usize], numeric: &[Option<f64>]) -> GradCheck {
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    for (&i, n) in indices.iter().zip(numeric) {
        match n {
            None => report.skipped += 1,
            Some(n) => {
                report.checked += 1;
                let e = relative_error(analytic[i] as f64, *n);
                if e > report.max_rel_error || e.is_nan() {
                    report.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
                    report.worst_index = Some(i);
                }
            }
        }
    }
    report
}

/// Checks every coordinate of `x` (or a prefix subset chosen by the caller).
pub fn check(
    f: impl FnMut(&[f32]) -> f64,
    x: &[f32],
    analytic: &[f32],
    indices: &[usize],
    eps: f32,
    kink_tol: Option<f64>,
) -> GradCheck {
    let numeric = numeric_gradient(f, x, indices, eps, kink_tol);
    compare(analytic, indices, &numeric)
}
