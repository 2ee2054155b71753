#![allow(dead_code)]

use plaindet::numerics::{finite_diff_check, Bound, ParamStore, Tape, Tensor, Var};
use plaindet::Result;
use rand::rngs::StdRng;
use rand::Rng;

pub fn rand_tensor(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn with_values(store: &ParamStore, values: &[f64]) -> ParamStore {
    let mut s = store.clone();
    let mut off = 0;
    for t in s.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&values[off..off + n]);
        off += n;
    }
    s
}

/// Worst relative error between autodiff and central differences for a loss
/// built from every parameter of `store` plus the `extra` inputs.
/// `coords` picks the flat coordinates to probe (parameters first, then extras).
pub fn store_gradcheck<F>(store: &ParamStore, extra: &[Tensor], coords: Option<&[usize]>, h: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
{
    let mut flat: Vec<f64> = store.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let n_params = flat.len();
    flat.extend(extra.iter().flat_map(|t| t.data().to_vec()));
    let eval = |values: &[f64], grad: bool| -> Result<(f64, Vec<f64>)> {
        let s = with_values(store, &values[..n_params]);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape)?;
        let mut off = n_params;
        let mut vars = Vec::new();
        for t in extra {
            let data = values[off..off + t.len()].to_vec();
            off += t.len();
            vars.push(if grad {
                tape.param(t.shape().to_vec(), data)?
            } else {
                tape.constant(t.shape().to_vec(), data)?
            });
        }
        let out = build(&mut tape, &p, &vars)?;
        let val = tape.scalar(out);
        if !grad {
            return Ok((val, Vec::new()));
        }
        let grads = tape.backward(out)?;
        let mut g = Vec::with_capacity(values.len());
        for (i, t) in s.tensors().iter().enumerate() {
            let id = s.id_of(&s.names()[i]).unwrap();
            match grads.wrt(p.get(id)) {
                Some(v) => g.extend_from_slice(v),
                None => g.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        for (v, t) in vars.iter().zip(extra) {
            match grads.wrt(*v) {
                Some(x) => g.extend_from_slice(x),
                None => g.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok((val, g))
    };
    let (_, analytic) = eval(&flat, true).unwrap();
    finite_diff_check(|v| eval(v, false).map(|r| r.0), &flat, &analytic, h, coords).unwrap()
}

/// `n` distinct random coordinates out of `total` (all of them when `n >= total`).
pub fn sample_coords(rng: &mut StdRng, total: usize, n: usize) -> Vec<usize> {
    if n >= total {
        return (0..total).collect();
    }
    rand::seq::index::sample(rng, total, n).into_vec()
}

/// Sums `v` against fixed weights so every element contributes.
pub fn project(tape: &mut Tape, v: Var, weights: &[f64]) -> Result<Var> {
    let n = tape.value(v).len();
    let w = tape.constant(tape.shape(v).to_vec(), weights[..n].to_vec())?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

pub fn weights(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
