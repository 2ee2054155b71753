//! Multi-head attention with an optional additive bias, plus the local
//! baselines (box mask, RoI sampling) expressed as biases over the full grid.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxrpb::{BiasTerm, BiasVar};
use crate::error::{Error, Result};
use crate::geometry::{BBox, GridSize};
use crate::nn::Linear;
use crate::numerics::{Bound, ParamStore, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {d_model}")));
        }
        Ok(Self { d_model, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// `output` is `[n_q, d]` with the residual already added; `weights` is
/// `[heads, n_q, n_k]` after the softmax.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: AttentionConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            cfg,
            query: Linear::new(store, &format!("{name}.q"), d, d, rng),
            key: Linear::new(store, &format!("{name}.k"), d, d, rng),
            value: Linear::new(store, &format!("{name}.v"), d, d, rng),
            output: Linear::new(store, &format!("{name}.o"), d, d, rng),
        }
    }

    fn split_heads<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let x = tape.reshape(x, vec![n, self.cfg.heads, self.cfg.head_dim()])?;
        tape.permute(x, &[1, 0, 2])
    }

    /// Scaled dot-product attention; `bias` is `[heads, n_q, n_k]`.
    fn attend<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        bias: Option<Var>,
    ) -> Result<(Var, Var)> {
        let d = self.cfg.d_model;
        for v in [q_in, k_in, v_in] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != d {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: s.to_vec(),
                    rhs: vec![d],
                });
            }
        }
        let nq = tape.shape(q_in)[0];
        let q = self.query.forward(tape, p, q_in)?;
        let q = self.split_heads(tape, q)?;
        let k = self.key.forward(tape, p, k_in)?;
        let k = self.split_heads(tape, k)?;
        let v = self.value.forward(tape, p, v_in)?;
        let v = self.split_heads(tape, v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, T::lit(self.cfg.scale()))?;
        if let Some(b) = bias {
            scores = tape.add(scores, b)?;
        }
        let weights = tape.softmax_last(scores)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, vec![nq, d])?;
        Ok((self.output.forward(tape, p, ctx)?, weights))
    }
}

/// Rearranges a `[k, h, w, m]` bias to the `[m, k, h*w]` score layout.
pub fn bias_to_scores<T: Scalar>(tape: &mut Tape<T>, bias: Var) -> Result<Var> {
    let s = tape.shape(bias).to_vec();
    let b = tape.reshape(bias, vec![s[0], s[1] * s[2], s[3]])?;
    tape.permute(b, &[2, 0, 1])
}

/// Cross-attention of queries `x: [k, d]` over `memory: [h*w, d]`:
/// `softmax(q k^T / sqrt(d_h) + B) v W_o + x`, with `q` from `x + query_pos` and
/// `k` from `memory + key_pos`.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    attn: &MultiHeadAttention,
    x: Var,
    memory: Var,
    grid: GridSize,
    bias: Option<&BiasVar>,
    query_pos: Option<Var>,
    key_pos: Option<Var>,
) -> Result<AttentionOutput> {
    if tape.shape(memory)[0] != grid.cells() {
        return Err(Error::Shape {
            op: "cross_attention",
            lhs: tape.shape(memory).to_vec(),
            rhs: vec![grid.h, grid.w],
        });
    }
    let scores_bias = match bias {
        None => None,
        Some(b) => {
            let want = [tape.shape(x)[0], grid.h, grid.w, attn.cfg.heads];
            if tape.shape(b.full) != want {
                return Err(Error::Shape {
                    op: "cross_attention bias",
                    lhs: tape.shape(b.full).to_vec(),
                    rhs: want.to_vec(),
                });
            }
            Some(bias_to_scores(tape, b.full)?)
        }
    };
    let q_in = match query_pos {
        Some(pos) => tape.add(x, pos)?,
        None => x,
    };
    let k_in = match key_pos {
        Some(pos) => tape.add(memory, pos)?,
        None => memory,
    };
    let (o, weights) = attn.attend(tape, p, q_in, k_in, memory, scores_bias)?;
    Ok(AttentionOutput {
        output: tape.add(o, x)?,
        weights,
    })
}

/// Self-attention with positions added to queries and keys but not values;
/// `mask` is an additive `[n, n]` term shared by all heads.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    attn: &MultiHeadAttention,
    x: Var,
    pos: Option<Var>,
    mask: Option<Var>,
) -> Result<AttentionOutput> {
    if let Some(pos) = pos {
        if tape.shape(pos) != tape.shape(x) {
            return Err(Error::Shape {
                op: "self_attention",
                lhs: tape.shape(x).to_vec(),
                rhs: tape.shape(pos).to_vec(),
            });
        }
    }
    let n = tape.shape(x)[0];
    let qk = match pos {
        Some(pos) => tape.add(x, pos)?,
        None => x,
    };
    let bias = match mask {
        Some(m) => {
            let m = tape.reshape(m, vec![1, n, n])?;
            Some(tape.expand(m, vec![attn.cfg.heads, n, n])?)
        }
        None => None,
    };
    let (o, weights) = attn.attend(tape, p, qk, qk, x, bias)?;
    Ok(AttentionOutput {
        output: tape.add(o, x)?,
        weights,
    })
}

fn cell_range<T: Scalar>(lo: T, hi: T, n: usize) -> (usize, usize) {
    // cells whose centers c = j + 0.5 satisfy lo <= c < hi
    let first = (lo - T::lit(0.5)).ceil().max(T::zero());
    let last = (hi - T::lit(0.5)).ceil().min(T::from_usize(n).unwrap());
    let first = first.to_usize().unwrap_or(0).min(n);
    let last = last.to_usize().unwrap_or(0).min(n);
    (first, last.max(first))
}

/// Grid cells whose centers fall inside `b`; never empty, falling back to the
/// cell nearest the box center.
pub fn cells_inside<T: Scalar>(b: &BBox<T>, grid: GridSize) -> Vec<(usize, usize)> {
    let [x1, y1, x2, y2] = b.corners();
    let (j0, j1) = cell_range(x1, x2, grid.w);
    let (i0, i1) = cell_range(y1, y2, grid.h);
    let mut cells: Vec<(usize, usize)> = (i0..i1).flat_map(|i| (j0..j1).map(move |j| (i, j))).collect();
    if cells.is_empty() {
        cells.push((nearest_cell(b.cy, grid.h), nearest_cell(b.cx, grid.w)));
    }
    cells
}

fn nearest_cell<T: Scalar>(x: T, n: usize) -> usize {
    x.floor().max(T::zero()).to_usize().unwrap_or(0).min(n.saturating_sub(1))
}

/// Box mask: 0 at cells inside each query's box, `-1e9` elsewhere.
pub fn box_mask_bias<T: Scalar>(boxes: &[BBox<T>], grid: GridSize, heads: usize) -> BiasTerm<T> {
    let cells = grid.cells();
    let mut values = vec![T::mask_value(); boxes.len() * cells * heads];
    for (k, b) in boxes.iter().enumerate() {
        for (i, j) in cells_inside(b, grid) {
            let base = (k * cells + i * grid.w + j) * heads;
            values[base..base + heads].iter_mut().for_each(|v| *v = T::zero());
        }
    }
    BiasTerm::Full {
        k: boxes.len(),
        grid,
        heads,
        values,
    }
}

/// Sample cells of an `n × n` lattice inside `b`: points at
/// `x1 + w (s + 1) / (n + 1)`, snapped to the containing cell and clamped.
pub fn roi_sample_cells<T: Scalar>(b: &BBox<T>, grid: GridSize, n: usize) -> Vec<(usize, usize)> {
    let [x1, y1, _, _] = b.corners();
    let denom = T::from_usize(n + 1).unwrap();
    let along = |start: T, extent: T, cells: usize| -> Vec<usize> {
        (0..n)
            .map(|s| nearest_cell(start + extent * T::from_usize(s + 1).unwrap() / denom, cells))
            .collect()
    };
    let cols = along(x1, b.w, grid.w);
    let rows = along(y1, b.h, grid.h);
    rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).collect()
}

/// RoI sampling as a bias: `ln(count)` at sampled cells, `-1e9` elsewhere, so
/// the softmax over the full grid equals the softmax over the sampled
/// multiset of positions.
pub fn roi_sampling_bias<T: Scalar>(boxes: &[BBox<T>], grid: GridSize, n: usize, heads: usize) -> Result<BiasTerm<T>> {
    if n == 0 {
        return Err(Error::Config("roi sampling needs at least one sample per axis".into()));
    }
    let cells = grid.cells();
    let mut values = vec![T::mask_value(); boxes.len() * cells * heads];
    for (k, b) in boxes.iter().enumerate() {
        let mut counts = vec![0usize; cells];
        for (i, j) in roi_sample_cells(b, grid, n) {
            counts[i * grid.w + j] += 1;
        }
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let v = T::from_usize(cnt).unwrap().ln();
                let base = (k * cells + c) * heads;
                values[base..base + heads].iter_mut().for_each(|x| *x = v);
            }
        }
    }
    Ok(BiasTerm::Full {
        k: boxes.len(),
        grid,
        heads,
        values,
    })
}

/// Attention restricted to RoI sample points inside each query's box.
#[allow(clippy::too_many_arguments)]
pub fn roi_sampling_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    attn: &MultiHeadAttention,
    x: Var,
    memory: Var,
    grid: GridSize,
    boxes: &[BBox<T>],
    samples: usize,
    query_pos: Option<Var>,
    key_pos: Option<Var>,
) -> Result<AttentionOutput> {
    let bias = roi_sampling_bias(boxes, grid, samples, attn.cfg.heads)?.record(tape)?;
    cross_attention(tape, p, attn, x, memory, grid, Some(&bias), query_pos, key_pos)
}

/// File format of a dumped attention map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapFormat {
    /// 8-bit binary PGM, max-normalized.
    #[default]
    Pgm,
    /// Raw weights, one grid row per line.
    Csv,
    /// A PGM and a CSV for every map.
    Both,
}

impl std::str::FromStr for MapFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pgm" => Ok(Self::Pgm),
            "csv" => Ok(Self::Csv),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown map format {s:?} (expected pgm, csv or both)")),
        }
    }
}

/// Writes one attention map as `attn_l{layer}_h{head}_q{query}.{pgm,csv}`
/// and returns the paths written.
pub fn dump_attention_map<T: Scalar>(
    dir: &Path,
    layer: usize,
    head: usize,
    query: usize,
    weights: &[T],
    grid: GridSize,
    format: MapFormat,
) -> Result<Vec<PathBuf>> {
    if weights.len() != grid.cells() {
        return Err(Error::Shape {
            op: "dump_attention_map",
            lhs: vec![weights.len()],
            rhs: vec![grid.h, grid.w],
        });
    }
    if format == MapFormat::Both {
        let mut paths = dump_attention_map(dir, layer, head, query, weights, grid, MapFormat::Pgm)?;
        paths.extend(dump_attention_map(dir, layer, head, query, weights, grid, MapFormat::Csv)?);
        return Ok(paths);
    }
    let stem = format!("attn_l{layer}_h{head}_q{query}");
    let (path, bytes) = match format {
        MapFormat::Pgm => {
            let max = weights.iter().fold(T::zero(), |m, &w| m.max(w));
            let mut bytes = format!("P5\n{} {}\n255\n", grid.w, grid.h).into_bytes();
            bytes.extend(weights.iter().map(|&w| {
                if max > T::zero() {
                    (w / max * T::lit(255.0)).round().to_f64_lossy().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            }));
            (dir.join(format!("{stem}.pgm")), bytes)
        }
        MapFormat::Csv => {
            let mut text = String::new();
            for row in weights.chunks(grid.w) {
                let line: Vec<String> = row.iter().map(|w| format!("{:e}", w.to_f64_lossy())).collect();
                text.push_str(&line.join(","));
                text.push('\n');
            }
            (dir.join(format!("{stem}.csv")), text.into_bytes())
        }
        MapFormat::Both => unreachable!(),
    };
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(vec![path])
}
