use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest `|analytic - central difference| / max(1, |analytic|)` over `coords`
/// (all coordinates when `coords` is `None`).
pub fn finite_diff_check<T, F>(
    mut f: F,
    params: &[T],
    analytic: &[T],
    h: T,
    coords: Option<&[usize]>,
) -> Result<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape {
            op: "finite_diff_check",
            lhs: vec![params.len()],
            rhs: vec![analytic.len()],
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut x = params.to_vec();
    let mut worst = T::zero();
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x)?;
        x[i] = orig - h;
        let down = f(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: i });
        }
        let numeric = (up - down) / (h + h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient-checks a function built on the tape from `inputs`, all of which are
/// treated as differentiable. Returns the worst relative error.
pub fn check_tape_fn<T, F>(inputs: &[Tensor<T>], h: T, build: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let flat: Vec<T> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let eval = |values: &[T], want_grad: bool| -> Result<(T, Vec<T>)> {
        let mut tape = Tape::new();
        let mut off = 0;
        let mut vars = Vec::with_capacity(inputs.len());
        for t in inputs {
            let data = values[off..off + t.len()].to_vec();
            off += t.len();
            vars.push(if want_grad {
                tape.param(t.shape().to_vec(), data)?
            } else {
                tape.constant(t.shape().to_vec(), data)?
            });
        }
        let out = build(&mut tape, &vars)?;
        let val = tape.scalar(out);
        if !want_grad {
            return Ok((val, Vec::new()));
        }
        let grads = tape.backward(out)?;
        let mut g = Vec::with_capacity(values.len());
        for (t, &v) in inputs.iter().zip(&vars) {
            match grads.wrt(v) {
                Some(x) => g.extend_from_slice(x),
                None => g.extend(std::iter::repeat_n(T::zero(), t.len())),
            }
        }
        Ok((val, g))
    };
    let (_, analytic) = eval(&flat, true)?;
    finite_diff_check(|x| eval(x, false).map(|r| r.0), &flat, &analytic, h, None)
}
