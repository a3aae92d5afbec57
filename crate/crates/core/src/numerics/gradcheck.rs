use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub epsilon: f64,
    /// Coordinates left out because a probe crossed a kink.
    #[serde(default)]
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tolerance
    }

    /// Folds another report for the same op into this one.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Central finite differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = point.to_vec();
    (0..point.len())
        .map(|i| {
            probe[i] = point[i] + eps;
            let plus = f(&probe);
            probe[i] = point[i] - eps;
            let minus = f(&probe);
            probe[i] = point[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

fn rel_error(a: f64, n: f64) -> f64 {
    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    if rel.is_nan() {
        f64::INFINITY
    } else {
        rel
    }
}

/// Compares an analytic gradient against central differences of `f` at `point`.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`; the report
/// carries the maximum over all elements.
pub fn grad_check<F>(op: &str, f: F, point: &[f64], analytic: &[f64], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "{op}: analytic gradient length");
    let numeric = central_difference(f, point, eps);
    GradCheckReport {
        op: op.to_string(),
        max_rel_error: analytic.iter().zip(&numeric).map(|(&a, &n)| rel_error(a, n)).fold(0.0, f64::max),
        checked: point.len(),
        epsilon: eps,
        skipped: 0,
    }
}

/// Like [`grad_check`] for piecewise-smooth `f`, which also returns the
/// active piece (ReLU masks, pooling winners, hinge states). Coordinates
/// whose probes land on a different piece than `point` are not compared.
pub fn grad_check_piecewise<F, S>(op: &str, mut f: F, point: &[f64], analytic: &[f64], eps: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, S),
    S: PartialEq,
{
    assert_eq!(point.len(), analytic.len(), "{op}: analytic gradient length");
    let (_, piece) = f(point);
    let mut probe = point.to_vec();
    let mut report = GradCheckReport {
        op: op.to_string(),
        max_rel_error: 0.0,
        checked: 0,
        epsilon: eps,
        skipped: 0,
    };
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let (plus, p_piece) = f(&probe);
        probe[i] = point[i] - eps;
        let (minus, m_piece) = f(&probe);
        probe[i] = point[i];
        if p_piece != piece || m_piece != piece {
            report.skipped += 1;
            continue;
        }
        let n = (plus - minus) / (2.0 * eps);
        report.max_rel_error = report.max_rel_error.max(rel_error(analytic[i], n));
        report.checked += 1;
    }
    report
}
