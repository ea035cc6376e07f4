use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing autodiff against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub pass: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks the gradient of the scalar function `f` at `x`.
///
/// `f` receives a fresh tape and the leaf for `x` on every evaluation and
/// must return a scalar node. Errors from `f` are propagated; a gradient
/// mismatch is reported through `pass`, not as an error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |values: Vec<f64>, requires_grad: bool| -> Result<(Tape, Var, Var)> {
        let mut tape = Tape::new();
        let leaf = tape.input(x.shape(), values, requires_grad)?;
        let out = f(&mut tape, leaf)?;
        Ok((tape, leaf, out))
    };

    let (mut tape, leaf, out) = eval(x.data().to_vec(), true)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let (tp, _, op) = eval(plus, false)?;
        let (tm, _, om) = eval(minus, false)?;
        numeric.push((tp.scalar_value(op) - tm.scalar_value(om)) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        pass: max_rel_error <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[4], vec![0.1, -2.0, 3.5, 7.0], false).unwrap();
        let r = grad_check(|t, v| t.sum(v), &x, 1e-4, 1e-10).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn reports_wrong_gradient_without_error() {
        // relu at a kink: the subgradient convention disagrees with the
        // symmetric difference quotient.
        let x = Tensor::new(&[1], vec![0.0], false).unwrap();
        let r = grad_check(
            |t, v| {
                let r = t.relu(v)?;
                t.sum(r)
            },
            &x,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!r.pass);
        assert_eq!(r.analytic, vec![0.0]);
    }
}
