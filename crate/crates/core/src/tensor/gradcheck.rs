use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<(f64, Tape, Var, Var)> {
        let mut tape = Tape::new();
        let xv = tape.param(point.clone());
        let y = f(&mut tape, xv)?;
        let v = tape.value(y);
        if v.len() != 1 {
            return Err(Error::shape("grad_check", format!("f returned {:?}", v.shape())));
        }
        let val = v.item() as f64;
        if !val.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok((val, tape, xv, y))
    };
    let (_, tape, xv, y) = eval(x)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, ..) = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, ..) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // The perturbed coordinate is rounded to f32; divide by the step
        // that was actually taken.
        let step = (orig + h) as f64 - (orig - h) as f64;
        let numeric = (fp - fm) / step;
        let a = analytic.data()[i] as f64;
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                Ok(t.sum(y))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new(&[1], vec![-1.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let y = t.log(x);
                Ok(t.sum(y))
            },
            &x,
            1e-3,
        );
        assert!(r.is_err());
    }
}
