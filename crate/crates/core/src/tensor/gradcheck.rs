//! Central finite differences as an oracle for the reverse sweep.

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-3;

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function with central
/// differences at every component of `x`, returning the largest relative
/// error.
///
/// `f` receives a fresh tape and the variable holding `x`, and must return a
/// scalar. It is evaluated twice at `x` first; if the two values differ the
/// function is not deterministic and the check is refused.
pub fn finite_diff_check<Fun>(mut f: Fun, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    Fun: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let base = eval(&mut f, x)?;
    if eval(&mut f, x)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let out = f(&mut tape, v)?;
        scalar(&tape, out)?;
        tape.backward(out)?;
        tape.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()])
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

fn eval<Fun>(f: &mut Fun, point: &Tensor<f64>) -> Result<f64>
where
    Fun: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(point.clone());
    let out = f(&mut tape, v)?;
    scalar(&tape, out)
}

fn scalar(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "finite-difference check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum(sq)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_f64(&[2], &[0.3, -0.4]).unwrap();
        let err = finite_diff_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(5.0))),
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn stochastic_function_is_refused() {
        let x = Tensor::from_f64(&[2], &[0.3, -0.4]).unwrap();
        let mut calls = 0.0;
        let res = finite_diff_check(
            |tape, v| {
                calls += 1.0;
                let s = tape.sum(v)?;
                tape.affine(s, 1.0, calls)
            },
            &x,
            DEFAULT_STEP,
        );
        assert!(matches!(res, Err(Error::NonDeterministic)));
    }

    #[test]
    fn bad_step_is_refused() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        assert!(finite_diff_check(|t, v| t.sum(v), &x, 0.0).is_err());
    }
}
