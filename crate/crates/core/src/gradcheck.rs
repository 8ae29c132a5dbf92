//! Central finite-difference checking of graph gradients (double precision).

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error with the denominator floored at [`DENOMINATOR_FLOOR`].
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[e];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((i, e, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
