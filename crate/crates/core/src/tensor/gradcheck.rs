use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("check_gradients", format!("f must return a scalar, got {:?}", tape.shape(out))));
    }
    Ok(tape.item(out))
}

/// Compares the tape gradient of `f` at `x` with central differences of
/// step `eps`. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let mut leaf = x.clone();
    leaf.requires_grad = true;
    let xv = tape.leaf(&leaf);
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("check_gradients", format!("f must return a scalar, got {:?}", tape.shape(out))));
    }
    tape.backward(out)?;
    let analytic = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut probe = x.clone();
    probe.requires_grad = false;
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (hi - lo) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[5], vec![0.3, -1.2, 2.0, 0.7, -0.1]).unwrap();
        let err = check_gradients(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = check_gradients(|t, _| Ok(t.scalar_constant(4.2)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(check_gradients(|_, x| Ok(x), &x, 1e-5).is_err());
    }
}
