//! Focal classification loss, box losses and the hybrid one-to-one /
//! one-to-many training objective over every decoder stage.

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderTrace;
use crate::error::{Error, Result};
use crate::geometry::{diff, GridSize};
use crate::matching::{hungarian, match_cost_matrix, CostWeights, GroundTruth};
use crate::numerics::{Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Ground-truth copies for the one-to-many branch.
    pub hybrid_repeats: usize,
    pub one_to_many_weight: f64,
    /// Match and supervise the dense proposals as well.
    pub proposal_loss: bool,
    pub cost: CostWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weight: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            alpha: 0.25,
            gamma: 2.0,
            hybrid_repeats: 3,
            one_to_many_weight: 1.0,
            proposal_loss: true,
            cost: CostWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    OneToOne,
    OneToMany,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Proposal,
    Layer(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm<T: Scalar = f64> {
    pub branch: Branch,
    pub stage: Stage,
    pub focal: T,
    pub l1: T,
    /// Mean of `1 - GIoU` over matched pairs, in `[0, 2]`.
    pub giou: T,
    pub matched: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T: Scalar = f64> {
    pub terms: Vec<LossTerm<T>>,
    pub weights: LossConfig,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    fn term_value(&self, t: &LossTerm<T>) -> T {
        let w = &self.weights;
        let v = T::lit(w.class_weight) * t.focal + T::lit(w.l1_weight) * t.l1 + T::lit(w.giou_weight) * t.giou;
        match t.branch {
            Branch::OneToOne => v,
            Branch::OneToMany => T::lit(w.one_to_many_weight) * v,
        }
    }

    /// Weighted sum of the components, in term order.
    pub fn recompose(&self) -> T {
        self.terms.iter().fold(T::zero(), |s, t| s + self.term_value(t))
    }
}

/// Sigmoid focal loss summed over rows and classes, divided by `normalizer`.
/// `targets[r]` is the positive class of row `r`, if any. `alpha = None`
/// disables the class-balance weighting; `gamma = 0` drops the modulating factor.
pub fn focal_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[Option<usize>],
    alpha: Option<T>,
    gamma: T,
    normalizer: T,
) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Shape {
            op: "focal_loss",
            lhs: s,
            rhs: vec![targets.len()],
        });
    }
    let c = s[1];
    let mut onehot = vec![T::zero(); targets.len() * c];
    for (r, t) in targets.iter().enumerate() {
        if let Some(k) = *t {
            if k >= c {
                return Err(Error::Domain(format!("target class {k} out of {c} for row {r}")));
            }
            onehot[r * c + k] = T::one();
        }
    }
    let (a_pos, a_neg) = match alpha {
        Some(a) => (a, T::one() - a),
        None => (T::one(), T::one()),
    };
    let pos_w: Vec<T> = onehot.iter().map(|&t| t * a_pos).collect();
    let neg_w: Vec<T> = onehot.iter().map(|&t| (T::one() - t) * a_neg).collect();
    let pos_w = tape.constant(s.clone(), pos_w)?;
    let neg_w = tape.constant(s.clone(), neg_w)?;
    let log_p = tape.log_sigmoid(logits)?;
    let neg_logits = tape.neg(logits)?;
    let log_q = tape.log_sigmoid(neg_logits)?;
    let (mut pos, mut neg) = (log_p, log_q);
    if gamma != T::zero() {
        let p = tape.sigmoid(logits)?;
        let q = tape.sigmoid(neg_logits)?;
        let mq = tape.powf(q, gamma)?;
        let mp = tape.powf(p, gamma)?;
        pos = tape.mul(mq, pos)?;
        neg = tape.mul(mp, neg)?;
    }
    let pos = tape.mul(pos_w, pos)?;
    let neg = tape.mul(neg_w, neg)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, -T::one() / normalizer)
}

/// Box losses of matched pairs: L1 and `1 - GIoU`, each summed and divided
/// by `normalizer`. With `reparam` the L1 compares deltas relative to the
/// detached `reference` rows; otherwise coordinates divided by the grid.
#[allow(clippy::too_many_arguments)]
pub fn box_losses<T: Scalar>(
    tape: &mut Tape<T>,
    boxes: Var,
    reference: Var,
    pairs: &[(usize, usize)],
    gts: &[GroundTruth<T>],
    grid: GridSize,
    reparam: bool,
    normalizer: T,
) -> Result<(Var, Var)> {
    if pairs.is_empty() {
        let z = tape.constant(vec![1], vec![T::zero()])?;
        return Ok((z, z));
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let targets: Vec<_> = pairs.iter().map(|p| gts[p.1].bbox).collect();
    let pred = tape.index_rows(boxes, &rows)?;
    let target = diff::boxes_constant(tape, &targets)?;
    let diff_l1 = if reparam {
        let r = tape.index_rows(reference, &rows)?;
        let r = tape.detach(r)?;
        let dp = diff::reparam_deltas(tape, pred, r)?;
        let dg = diff::reparam_deltas(tape, target, r)?;
        tape.sub(dp, dg)?
    } else {
        let np = diff::normalize(tape, pred, grid)?;
        let ng = diff::normalize(tape, target, grid)?;
        tape.sub(np, ng)?
    };
    let l1 = tape.abs(diff_l1)?;
    let l1 = tape.sum(l1)?;
    let l1 = tape.scale(l1, T::one() / normalizer)?;
    let g = diff::giou(tape, pred, target)?;
    let g = tape.sum(g)?;
    let n = T::from_usize(pairs.len()).unwrap();
    let g = tape.scale(g, -T::one() / normalizer)?;
    let g = tape.add_scalar(g, n / normalizer)?;
    Ok((l1, g))
}

/// One matched stage over `rows` of the trace tensors.
#[allow(clippy::too_many_arguments)]
fn stage<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    boxes: Var,
    reference: Var,
    rows: std::ops::Range<usize>,
    gts: &[GroundTruth<T>],
    grid: GridSize,
    reparam: bool,
    cfg: &LossConfig,
) -> Result<(Var, Var, Var, usize)> {
    let idx: Vec<usize> = rows.collect();
    let full = tape.shape(logits)[0] == idx.len();
    let (logits, boxes, reference) = if full {
        (logits, boxes, reference)
    } else {
        (
            tape.index_rows(logits, &idx)?,
            tape.index_rows(boxes, &idx)?,
            tape.index_rows(reference, &idx)?,
        )
    };
    let classes = tape.shape(logits)[1];
    let pred_boxes = diff::boxes_value(tape, boxes)?;
    let cost = match_cost_matrix(tape.value(logits), classes, &pred_boxes, gts, grid, &cfg.cost)?;
    let m = hungarian(&cost, idx.len(), gts.len())?;
    let mut targets = vec![None; idx.len()];
    for &(r, g) in &m.pairs {
        targets[r] = Some(gts[g].class);
    }
    let norm = T::from_usize(gts.len().max(1)).unwrap();
    let focal = focal_loss(tape, logits, &targets, Some(T::lit(cfg.alpha)), T::lit(cfg.gamma), norm)?;
    let (l1, g) = box_losses(tape, boxes, reference, &m.pairs, gts, grid, reparam, norm)?;
    Ok((focal, l1, g, m.pairs.len()))
}

/// Hybrid objective. The one-to-one branch matches the first `trace.queries`
/// rows of every layer (and the dense proposals) against `gts`; the
/// one-to-many branch matches the auxiliary rows against `gts` repeated
/// `hybrid_repeats` times. Ground truths are in grid units.
pub fn hybrid_loss<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &DecoderTrace,
    gts: &[GroundTruth<T>],
    reparam: bool,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown<T>)> {
    let grid = trace.grid;
    let mut terms = Vec::new();
    let mut parts: Vec<(Var, Var, Var, T)> = Vec::new();
    let mut push = |tape: &mut Tape<T>, branch, stage_id, r: (Var, Var, Var, usize), weight: f64| {
        terms.push(LossTerm {
            branch,
            stage: stage_id,
            focal: tape.scalar(r.0),
            l1: tape.scalar(r.1),
            giou: tape.scalar(r.2),
            matched: r.3,
        });
        parts.push((r.0, r.1, r.2, T::lit(weight)));
    };
    if cfg.proposal_loss {
        let n = tape.shape(trace.proposal_logits)[0];
        let r = stage(
            tape,
            trace.proposal_logits,
            trace.proposal_boxes,
            trace.anchors,
            0..n,
            gts,
            grid,
            reparam,
            cfg,
        )?;
        push(tape, Branch::OneToOne, Stage::Proposal, r, 1.0);
    }
    let repeated: Vec<GroundTruth<T>> = (0..cfg.hybrid_repeats.max(1)).flat_map(|_| gts.iter().copied()).collect();
    for (l, layer) in trace.layers.iter().enumerate() {
        let r = stage(
            tape,
            layer.logits,
            layer.boxes,
            layer.reference,
            0..trace.queries,
            gts,
            grid,
            reparam,
            cfg,
        )?;
        push(tape, Branch::OneToOne, Stage::Layer(l), r, 1.0);
        if trace.aux_queries > 0 {
            let rows = trace.queries..trace.queries + trace.aux_queries;
            let r = stage(
                tape,
                layer.logits,
                layer.boxes,
                layer.reference,
                rows,
                &repeated,
                grid,
                reparam,
                cfg,
            )?;
            push(tape, Branch::OneToMany, Stage::Layer(l), r, cfg.one_to_many_weight);
        }
    }
    let mut total: Option<Var> = None;
    for (f, l1, g, w) in parts {
        let f = tape.scale(f, T::lit(cfg.class_weight))?;
        let l1 = tape.scale(l1, T::lit(cfg.l1_weight))?;
        let g = tape.scale(g, T::lit(cfg.giou_weight))?;
        let s = tape.add(f, l1)?;
        let s = tape.add(s, g)?;
        let s = if w == T::one() { s } else { tape.scale(s, w)? };
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(vec![1], vec![T::zero()])?,
    };
    let mut breakdown = LossBreakdown {
        terms,
        weights: *cfg,
        total: T::zero(),
    };
    breakdown.total = breakdown.recompose();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn focal_value(logit: f64, target: Option<usize>, alpha: Option<f64>, gamma: f64) -> f64 {
        let mut tape = Tape::new();
        let x = tape.param(vec![1, 1], vec![logit]).unwrap();
        let l = focal_loss(&mut tape, x, &[target], alpha, gamma, 1.0).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn focal_hand_case() {
        let logit = (0.9f64 / 0.1).ln();
        let v = focal_value(logit, Some(0), Some(0.25), 2.0);
        let want = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((v - want).abs() < 1e-15, "{v} vs {want}");
        assert!((want - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn focal_reduces_to_bce() {
        for &(x, t) in &[(0.3f64, Some(0)), (-1.7, None), (2.5, Some(0)), (0.0, None)] {
            let p = 1.0 / (1.0 + (-x).exp());
            let want = if t.is_some() { -p.ln() } else { -(1.0 - p).ln() };
            assert!((focal_value(x, t, None, 0.0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_limits_and_errors() {
        assert!(focal_value(40.0, Some(0), Some(0.25), 2.0) < 1e-30);
        let mut tape = Tape::new();
        let x = tape.param(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            focal_loss(&mut tape, x, &[Some(2)], None, 2.0, 1.0),
            Err(Error::Domain(_))
        ));
    }
}
