//! Set-matching costs and the minimum-cost assignment solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, BBox, GridSize};
use crate::scalar::Scalar;

/// A labelled box; units are whatever the caller uses consistently.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth<T: Scalar = f64> {
    pub class: usize,
    pub bbox: BBox<T>,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn scaled(&self, s: T) -> Self {
        Self {
            class: self.class,
            bbox: self.bbox.scale(s, s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult<T: Scalar = f64> {
    /// `(prediction, ground truth)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub cost: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Focal-style class cost: positive minus negative focal term at the
/// probability `p` of the target class.
pub fn focal_class_cost<T: Scalar>(logit: T, alpha: T, gamma: T) -> T {
    let eps = T::lit(1e-8);
    let p = T::one() / (T::one() + (-logit).exp());
    let pos = alpha * (T::one() - p).powf(gamma) * -(p + eps).ln();
    let neg = (T::one() - alpha) * p.powf(gamma) * -(T::one() - p + eps).ln();
    pos - neg
}

/// Row-major `[k, g]` matching cost. `logits` is `[k, classes]`; box L1 is
/// measured on coordinates divided by the grid extents.
pub fn match_cost_matrix<T: Scalar>(
    logits: &[T],
    classes: usize,
    boxes: &[BBox<T>],
    gts: &[GroundTruth<T>],
    grid: GridSize,
    w: &CostWeights,
) -> Result<Vec<T>> {
    if logits.len() != boxes.len() * classes {
        return Err(Error::Shape {
            op: "match_cost_matrix",
            lhs: vec![logits.len()],
            rhs: vec![boxes.len(), classes],
        });
    }
    if let Some(g) = gts.iter().find(|g| g.class >= classes) {
        return Err(Error::Domain(format!("ground-truth class {} out of {classes}", g.class)));
    }
    let (sx, sy) = (
        T::one() / T::from_usize(grid.w).unwrap(),
        T::one() / T::from_usize(grid.h).unwrap(),
    );
    let norm = |b: &BBox<T>| [b.cx * sx, b.cy * sy, b.w * sx, b.h * sy];
    let (alpha, gamma) = (T::lit(w.alpha), T::lit(w.gamma));
    let mut out = Vec::with_capacity(boxes.len() * gts.len());
    for (k, b) in boxes.iter().enumerate() {
        let nb = norm(b);
        for g in gts {
            let cls = focal_class_cost(logits[k * classes + g.class], alpha, gamma);
            let ng = norm(&g.bbox);
            let l1 = nb.iter().zip(&ng).map(|(a, b)| (*a - *b).abs()).fold(T::zero(), |s, v| s + v);
            let gi = giou(b, &g.bbox);
            out.push(T::lit(w.class) * cls + T::lit(w.l1) * l1 + T::lit(w.giou) * (T::one() - gi));
        }
    }
    Ok(out)
}

/// Minimum-cost assignment of `min(rows, cols)` pairs on a row-major matrix
/// (shortest augmenting paths with potentials). Rows are predictions,
/// columns ground truths. Among equal candidates the lower index wins, so
/// the result is deterministic.
pub fn hungarian<T: Scalar>(cost: &[T], rows: usize, cols: usize) -> Result<MatchResult<T>> {
    if cost.len() != rows * cols {
        return Err(Error::Shape {
            op: "hungarian",
            lhs: vec![cost.len()],
            rhs: vec![rows, cols],
        });
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::Domain(format!(
            "cost entry ({}, {}) is {}",
            i / cols.max(1),
            i % cols.max(1),
            cost[i]
        )));
    }
    let (mut pairs, tight) = optimum(cost, cols, &(0..rows).collect::<Vec<_>>(), &(0..cols).collect::<Vec<_>>());
    let mut total = pair_cost(cost, cols, &pairs);
    if tight {
        pairs = lexicographic(cost, rows, cols, total);
        total = pair_cost(cost, cols, &pairs);
    }
    let mut matched = vec![false; rows];
    pairs.iter().for_each(|&(r, _)| matched[r] = true);
    Ok(MatchResult {
        unmatched: (0..rows).filter(|&r| !matched[r]).collect(),
        pairs,
        cost: total,
    })
}

fn pair_cost<T: Scalar>(cost: &[T], cols: usize, pairs: &[(usize, usize)]) -> T {
    pairs.iter().fold(T::zero(), |s, &(r, c)| s + cost[r * cols + c])
}

/// Optimal pairs (sorted) on the submatrix `rs × cs`, and whether some
/// unassigned entry has zero reduced cost, i.e. another optimum may exist.
fn optimum<T: Scalar>(cost: &[T], cols: usize, rs: &[usize], cs: &[usize]) -> (Vec<(usize, usize)>, bool) {
    if rs.is_empty() || cs.is_empty() {
        return (Vec::new(), false);
    }
    let transposed = rs.len() > cs.len();
    let (n, m) = if transposed { (cs.len(), rs.len()) } else { (rs.len(), cs.len()) };
    let at = |i: usize, j: usize| {
        if transposed {
            cost[rs[j] * cols + cs[i]]
        } else {
            cost[rs[i] * cols + cs[j]]
        }
    };
    let (assign, tight) = solve(n, m, at);
    let mut pairs: Vec<(usize, usize)> = assign
        .into_iter()
        .enumerate()
        .map(|(i, j)| if transposed { (rs[j], cs[i]) } else { (rs[i], cs[j]) })
        .collect();
    pairs.sort_unstable();
    (pairs, tight)
}

/// Lexicographically smallest sorted pair list among the optimal ones:
/// each row in turn takes the lowest column that still admits an optimum.
fn lexicographic<T: Scalar>(cost: &[T], rows: usize, cols: usize, best: T) -> Vec<(usize, usize)> {
    let k = rows.min(cols);
    let scale = cost.iter().fold(T::zero(), |s, c| s + c.abs());
    let tol = T::lit(1e-12) * (T::one() + scale);
    let mut fixed = Vec::with_capacity(k);
    let mut fixed_sum = T::zero();
    let mut free: Vec<usize> = (0..cols).collect();
    for r in 0..rows {
        if fixed.len() == k {
            break;
        }
        let later: Vec<usize> = (r + 1..rows).collect();
        if later.len() < k - fixed.len() - 1 {
            continue;
        }
        for pos in 0..free.len() {
            let c = free[pos];
            let rest: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let (sub, _) = optimum(cost, cols, &later, &rest);
            let here = fixed_sum + cost[r * cols + c];
            if here + pair_cost(cost, cols, &sub) <= best + tol {
                fixed.push((r, c));
                fixed_sum = here;
                free.remove(pos);
                break;
            }
        }
    }
    fixed
}

/// Assigns each of `n <= m` rows a distinct column; returns the column per
/// row and whether an unassigned entry is tight under the final potentials.
fn solve<T: Scalar>(n: usize, m: usize, a: impl Fn(usize, usize) -> T) -> (Vec<usize>, bool) {
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    let mut scale = T::zero();
    for i in 0..n {
        for j in 0..m {
            scale = scale.max(a(i, j).abs());
        }
    }
    let tol = T::lit(1e-9) * (T::one() + scale);
    let tight = (0..n).any(|i| (0..m).any(|j| j != col_of[i] && a(i, j) - u[i + 1] - v[j + 1] <= tol));
    (col_of, tight)
}
