//! Central finite-difference gradient checks against the autodiff graph.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::NdArray;

/// Denominator floor for relative errors, so exact zeros compare as equal.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<NdArray<f64>>,
    pub numeric: Vec<NdArray<f64>>,
    /// Per-parameter, per-element relative errors.
    pub rel_errors: Vec<Vec<f64>>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compare the graph gradient of `build` with central differences of step `step`.
///
/// `build` receives a fresh graph plus one parameter handle per entry of `params`
/// and must return a scalar loss.
pub fn finite_difference_check<F>(
    build: F,
    params: &[NdArray<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[NdArray<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<NdArray<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| NdArray::zeros(p.shape())))
        .collect();

    let mut work: Vec<NdArray<f64>> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut rel_errors = Vec::with_capacity(params.len());
    let mut max_rel_error: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let mut num = NdArray::zeros(p.shape());
        let mut errs = Vec::with_capacity(p.len());
        for i in 0..p.len() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let d = (plus - minus) / (2.0 * step);
            num.data_mut()[i] = d;
            let a = analytic[pi].data()[i];
            let err = (a - d).abs() / a.abs().max(d.abs()).max(REL_ERR_FLOOR);
            max_rel_error = max_rel_error.max(err);
            errs.push(err);
        }
        numeric.push(num);
        rel_errors.push(errs);
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        passed: max_rel_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_function_has_zero_gradient() {
        let p = vec![NdArray::full(&[3], 2.0)];
        let report = finite_difference_check(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                Ok(g.sum(z))
            },
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.analytic[0].data().iter().all(|&x| x == 0.0));
        assert!(report.numeric[0].data().iter().all(|&x| x == 0.0));
        assert!(report.passed);
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at exactly zero: numeric 0.5, analytic 0
        let p = vec![NdArray::zeros(&[1])];
        let report = finite_difference_check(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            &p,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
