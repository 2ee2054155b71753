//! Box-to-pixel relative position bias.
//!
//! A small meta-network turns the offsets between each grid position and a
//! query's box into one additive attention bias per head. Three forms:
//!
//! * naive: one MLP on the 4-vector `(dx1, dy1, dx2, dy2)` at every `(i, j)`;
//! * decomposed: `Bx = mlp_x(dx1, dx2)` over columns and `By = mlp_y(dy1, dy2)`
//!   over rows, combined as `B[k, i, j] = Bx[k, j] + By[k, i]`;
//! * center: one MLP on the center offsets `(dcx, dcy)` at every position.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::diff::OffsetVars;
use crate::geometry::GridSize;
use crate::nn::Mlp;
use crate::numerics::{Bound, ParamStore, Tape, Var};
use crate::scalar::Scalar;

/// Bias meta-network: `Linear(in -> hidden) -> ReLU -> Linear(hidden -> heads)`.
#[derive(Clone, Debug)]
pub struct RpbMlp {
    pub mlp: Mlp,
}

impl RpbMlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 || heads == 0 {
            return Err(Error::Config(format!(
                "rpb mlp widths must be positive, got {input}->{hidden}->{heads}"
            )));
        }
        Ok(Self {
            mlp: Mlp::new(store, name, [input, hidden, heads], rng),
        })
    }

    pub fn input_width(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn hidden_width(&self) -> usize {
        self.mlp.hidden_dim()
    }

    pub fn heads(&self) -> usize {
        self.mlp.out_dim()
    }

    fn expect_input(&self, want: usize, op: &'static str) -> Result<()> {
        if self.input_width() != want {
            return Err(Error::Dimension {
                op,
                msg: format!("mlp input width {} but {} offsets supplied", self.input_width(), want),
            });
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.mlp.forward(tape, p, x)
    }
}

/// Bias on the tape. `full` is always `[k, h, w, m]`; the axial factors
/// `[k, w, m]` and `[k, h, m]` are kept when the bias came from them.
#[derive(Clone, Copy, Debug)]
pub struct BiasVar {
    pub full: Var,
    pub axial: Option<(Var, Var)>,
}

/// Bias values detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub enum BiasTerm<T: Scalar = f64> {
    /// Row-major `[k, h, w, m]`.
    Full { k: usize, grid: GridSize, heads: usize, values: Vec<T> },
    /// `bx: [k, w, m]`, `by: [k, h, m]`.
    Axial { k: usize, grid: GridSize, heads: usize, bx: Vec<T>, by: Vec<T> },
}

impl<T: Scalar> BiasTerm<T> {
    pub fn queries(&self) -> usize {
        match self {
            BiasTerm::Full { k, .. } | BiasTerm::Axial { k, .. } => *k,
        }
    }

    pub fn grid(&self) -> GridSize {
        match self {
            BiasTerm::Full { grid, .. } | BiasTerm::Axial { grid, .. } => *grid,
        }
    }

    pub fn heads(&self) -> usize {
        match self {
            BiasTerm::Full { heads, .. } | BiasTerm::Axial { heads, .. } => *heads,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        let g = self.grid();
        vec![self.queries(), g.h, g.w, self.heads()]
    }

    /// Records the bias on `tape` as constants, broadcasting axial factors.
    pub fn record(&self, tape: &mut Tape<T>) -> Result<BiasVar> {
        match self {
            BiasTerm::Full { values, .. } => Ok(BiasVar {
                full: tape.constant(self.shape(), values.clone())?,
                axial: None,
            }),
            BiasTerm::Axial { k, grid, heads, bx, by } => {
                let bxv = tape.constant(vec![*k, grid.w, *heads], bx.clone())?;
                let byv = tape.constant(vec![*k, grid.h, *heads], by.clone())?;
                Ok(BiasVar {
                    full: axial_add(tape, bxv, byv)?,
                    axial: Some((bxv, byv)),
                })
            }
        }
    }

    /// Full `[k, h, w, m]` values; axial factors go through the broadcast-add.
    pub fn materialize(&self) -> Result<Vec<T>> {
        match self {
            BiasTerm::Full { values, .. } => Ok(values.clone()),
            BiasTerm::Axial { .. } => {
                let mut tape = Tape::new();
                let b = self.record(&mut tape)?;
                Ok(tape.value(b.full).to_vec())
            }
        }
    }

    pub fn from_tape(tape: &Tape<T>, b: &BiasVar) -> Self {
        let s = tape.shape(b.full);
        let (k, grid, heads) = (s[0], GridSize::new(s[1], s[2]), s[3]);
        match b.axial {
            Some((bx, by)) => BiasTerm::Axial {
                k,
                grid,
                heads,
                bx: tape.value(bx).to_vec(),
                by: tape.value(by).to_vec(),
            },
            None => BiasTerm::Full {
                k,
                grid,
                heads,
                values: tape.value(b.full).to_vec(),
            },
        }
    }
}

/// `unsqueeze(bx, 1) + unsqueeze(by, 2)`: `[k, w, m] + [k, h, m] -> [k, h, w, m]`.
pub fn axial_add<T: Scalar>(tape: &mut Tape<T>, bx: Var, by: Var) -> Result<Var> {
    let sx = tape.shape(bx).to_vec();
    let sy = tape.shape(by).to_vec();
    if sx.len() != 3 || sy.len() != 3 || sx[0] != sy[0] || sx[2] != sy[2] {
        return Err(Error::Shape {
            op: "axial_add",
            lhs: sx,
            rhs: sy,
        });
    }
    let (k, w, h, m) = (sx[0], sx[1], sy[1], sx[2]);
    let bx = tape.reshape(bx, vec![k, 1, w, m])?;
    let bx = tape.expand(bx, vec![k, h, w, m])?;
    let by = tape.reshape(by, vec![k, h, 1, m])?;
    let by = tape.expand(by, vec![k, h, w, m])?;
    tape.add(bx, by)
}

fn spread<T: Scalar>(tape: &mut Tape<T>, v: Var, along_w: bool, k: usize, h: usize, w: usize) -> Result<Var> {
    let v = if along_w {
        tape.reshape(v, vec![k, 1, w, 1])?
    } else {
        tape.reshape(v, vec![k, h, 1, 1])?
    };
    tape.expand(v, vec![k, h, w, 1])
}

/// Naive form: the MLP sees `(dx1, dy1, dx2, dy2)` at every grid position.
pub fn naive_boxrpb<T: Scalar>(tape: &mut Tape<T>, p: &Bound, offsets: &OffsetVars, mlp: &RpbMlp) -> Result<BiasVar> {
    mlp.expect_input(4, "naive_boxrpb")?;
    let (k, w) = (tape.shape(offsets.dx1)[0], tape.shape(offsets.dx1)[1]);
    let h = tape.shape(offsets.dy1)[1];
    let dx1 = spread(tape, offsets.dx1, true, k, h, w)?;
    let dy1 = spread(tape, offsets.dy1, false, k, h, w)?;
    let dx2 = spread(tape, offsets.dx2, true, k, h, w)?;
    let dy2 = spread(tape, offsets.dy2, false, k, h, w)?;
    let input = tape.concat(&[dx1, dy1, dx2, dy2], 3)?;
    Ok(BiasVar {
        full: mlp.forward(tape, p, input)?,
        axial: None,
    })
}

/// Decomposed form: one MLP per axis, then the broadcast-add.
pub fn decomposed_boxrpb<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    offsets: &OffsetVars,
    mlp_x: &RpbMlp,
    mlp_y: &RpbMlp,
) -> Result<BiasVar> {
    mlp_x.expect_input(2, "decomposed_boxrpb")?;
    mlp_y.expect_input(2, "decomposed_boxrpb")?;
    let (k, w) = (tape.shape(offsets.dx1)[0], tape.shape(offsets.dx1)[1]);
    let h = tape.shape(offsets.dy1)[1];
    let x1 = tape.reshape(offsets.dx1, vec![k, w, 1])?;
    let x2 = tape.reshape(offsets.dx2, vec![k, w, 1])?;
    let xin = tape.concat(&[x1, x2], 2)?;
    let y1 = tape.reshape(offsets.dy1, vec![k, h, 1])?;
    let y2 = tape.reshape(offsets.dy2, vec![k, h, 1])?;
    let yin = tape.concat(&[y1, y2], 2)?;
    let bx = mlp_x.forward(tape, p, xin)?;
    let by = mlp_y.forward(tape, p, yin)?;
    Ok(BiasVar {
        full: axial_add(tape, bx, by)?,
        axial: Some((bx, by)),
    })
}

/// Center-point ablation: one MLP on `(dcx, dcy)` at every grid position.
/// `dcx` is `[k, w]`, `dcy` is `[k, h]`.
pub fn center_rpb<T: Scalar>(tape: &mut Tape<T>, p: &Bound, dcx: Var, dcy: Var, mlp: &RpbMlp) -> Result<BiasVar> {
    mlp.expect_input(2, "center_rpb")?;
    let (k, w) = (tape.shape(dcx)[0], tape.shape(dcx)[1]);
    let h = tape.shape(dcy)[1];
    let cx = spread(tape, dcx, true, k, h, w)?;
    let cy = spread(tape, dcy, false, k, h, w)?;
    let input = tape.concat(&[cx, cy], 3)?;
    Ok(BiasVar {
        full: mlp.forward(tape, p, input)?,
        axial: None,
    })
}
