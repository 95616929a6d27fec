//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::Dimension(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Checks the reverse-mode gradient of a scalar function of several tensors
/// against central differences with the given `step`.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = f(&mut tape, &vars)?;
        let mut grads = tape.backward(root)?;
        vars.iter()
            .zip(points)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };
    for (i, g) in analytic.iter().enumerate() {
        if let Some(c) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite analytic gradient at input {i}, coordinate {c}"
            )));
        }
    }

    let mut work = points.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut coordinates = 0;
    for i in 0..points.len() {
        for c in 0..points[i].len() {
            let orig = points[i].data()[c];
            work[i].data_mut()[c] = orig + step;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[c] = orig - step;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite finite difference at input {i}, coordinate {c}"
                )));
            }
            let err = relative_error(analytic[i].data()[c], numeric);
            if err > max_rel_err || worst.is_none() {
                max_rel_err = err.max(max_rel_err);
                worst = Some((i, c));
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        coordinates,
        pass: max_rel_err <= tol,
    })
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        step,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                Ok(t.sum(y))
            },
            &Tensor::from_vec(vec![3.0]),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.coordinates, 1);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 2.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-15);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let err = grad_check(
            |t, x| {
                let g = t.constant(Tensor::from_vec(vec![1.0, 1.0]));
                let n = t.rmsnorm(x, g, 0.0)?;
                Ok(t.sum(n))
            },
            &Tensor::from_vec(vec![0.0, 0.0]),
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
