//! Central finite-difference checks of tape gradients.
//!
//! Only forward evaluations are used to build the numeric gradient, so the
//! check is independent of every backward rule it exercises.

use super::{Graph, NumericsError, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tolerance: f64,
    /// Denominator floor of the relative error; below it the comparison is
    /// effectively absolute.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, rel_tolerance: 1e-4, floor: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

/// Builds a scalar from the given input vars; the closure is re-run for every
/// perturbation.
pub trait ScalarFn: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>> ScalarFn for F {}

fn eval(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<f64, NumericsError> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.constant(t)).collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out)[0])
}

/// Compares tape gradients of `f` w.r.t. the inputs flagged `differentiable`
/// against central differences.
pub fn check(
    f: impl ScalarFn,
    inputs: &[Tensor],
    differentiable: &[bool],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, NumericsError> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| if d { g.param(t) } else { g.constant(t) })
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, passed: true };
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        if !differentiable[which] {
            continue;
        }
        let analytic = g.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + cfg.step;
            let up = eval(&f, &probe)?;
            probe[which].data_mut()[i] = orig - cfg.step;
            let down = eval(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((which, i, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error < cfg.rel_tolerance;
    Ok(report)
}

/// Contracts an arbitrary-shaped output with fixed weights so its whole
/// Jacobian participates in a scalar check.
pub fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var, NumericsError> {
    let w = g.constant(weights)?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}
