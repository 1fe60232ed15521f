use std::sync::Arc;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` at `x` against central finite
/// differences and returns the worst relative error.
///
/// `f` builds a scalar on the tape from the leaf it is handed. When `indices`
/// is given only those coordinates are perturbed.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, indices: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.param("x", Arc::new(point));
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let leaf = tape.param("x", Arc::new(x.clone()));
    let loss = f(&mut tape, leaf)?;
    let analytic = tape.backward(loss)?.wrt(leaf);

    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|t, v| t.sum(v), &x, 1e-5, None).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn tanh_at_zero() {
        let x = Tensor::zeros(&[5]);
        let err = grad_check(
            |t, v| {
                let y = t.tanh(v)?;
                t.sum(y)
            },
            &x,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }
}
