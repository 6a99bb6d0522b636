use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative error, so coordinates whose true gradient
/// is ~0 are judged against round-off rather than against themselves.
const REL_FLOOR: f64 = 1e-5;

/// One-sided slopes differing by more than this (relative) mark a kink.
const KINK_TOL: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateFailure {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub failures: Vec<CoordinateFailure>,
    /// Coordinates where forward and backward one-sided slopes disagree,
    /// i.e. `f` is not differentiable there.
    pub kinks: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.kinks.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval(f: &impl Fn(&mut Graph, Var) -> Result<Var>, x: Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.leaf(x, false);
    let out = f(&mut g, v)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::NonScalar(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Compares reverse-mode gradients of scalar `f` at `x` against central
/// differences with the given `step`, coordinate by coordinate.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let f0 = g.value(out).item();
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport {
        coordinates: x.numel(),
        ..Default::default()
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&f, probe.clone())?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&f, probe.clone())?;
        probe.data_mut()[i] = orig;

        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = relative_error(a, numeric);
        report.max_rel_err = report.max_rel_err.max(rel);
        if rel > tolerance || !rel.is_finite() {
            report.failures.push(CoordinateFailure {
                index: i,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
        let fwd = (fp - f0) / step;
        let bwd = (f0 - fm) / step;
        if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
            report.kinks.push(i);
        }
    }
    Ok(report)
}
