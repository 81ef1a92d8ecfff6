//! Central finite-difference verification of tape gradients.

use super::array::Tensor;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    grad_check_elements(f, inputs, &all, eps)
}

/// Like [`grad_check`] but only perturbs the listed elements of each input.
pub fn grad_check_elements<F>(
    f: F,
    inputs: &[Tensor],
    elements: &[Vec<usize>],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let eval = |values: &[Tensor], track: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                if track {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("function value {value} is not finite")));
        }
        if !track {
            return Ok((value, Vec::new()));
        }
        g.backward(out)?;
        Ok((value, vars.iter().map(|&v| g.grad(v)).collect()))
    };

    let (_, grads) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, idxs) in elements.iter().enumerate() {
        for &j in idxs {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
            if !analytic.is_finite() {
                return Err(Error::Numeric(format!("gradient of input {i}[{j}] is not finite")));
            }
            let e = rel_err(analytic, numeric);
            report.checked += 1;
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (i, j);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum_all(sq)
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        let mut g = Graph::new();
        let v = g.variable(x);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let r = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[Tensor::vector(vec![0.3, -0.2])],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert_eq!(r.analytic, 0.0);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let r = grad_check(
            |g, v| {
                let s = g.scale(v[0], f64::INFINITY);
                g.sum_all(s)
            },
            &[Tensor::vector(vec![1.0])],
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(matches!(
            grad_check(|g, v| g.sum_all(v[0]), &[Tensor::vector(vec![1.0])], 0.0),
            Err(Error::Config(_))
        ));
    }
}
