//! Parameterized layers over a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Fully connected layer, weight `[in, out]`, bias `[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| T::lit(rng.gen_range(-limit..limit))).collect();
        Self::from_values(store, name, in_dim, out_dim, w, vec![T::zero(); out_dim])
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::from_values(store, name, in_dim, out_dim, vec![T::zero(); in_dim * out_dim], vec![T::zero(); out_dim])
    }

    pub fn from_values<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::new(vec![in_dim, out_dim], weight).expect("weight shape"));
        let bias = store.add(format!("{name}.bias"), Tensor::new(vec![out_dim], bias).expect("bias shape"));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, p.get(self.weight), p.get(self.bias))
    }
}

/// `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            second: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], rng),
        }
    }

    /// Like [`Mlp::new`] but with a zero output layer, so the initial output is 0.
    pub fn zero_output<T: Scalar>(store: &mut ParamStore<T>, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], rng),
            second: Linear::zeros(store, &format!("{name}.1"), dims[1], dims[2]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.first.out_dim
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::new(vec![dim], vec![T::one(); dim]).unwrap()),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta))
    }
}

/// Two-layer feed-forward block with a residual connection.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, name, [d, hidden, d], rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.mlp.forward(tape, p, x)?;
        tape.add(x, y)
    }
}
