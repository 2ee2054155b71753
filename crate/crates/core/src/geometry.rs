//! Axis-aligned boxes, overlap measures, delta re-parameterization and the
//! box-corner offset grids that feed the relative position bias.
//!
//! Boxes live in feature-grid units: the grid is `w` cells wide and `h`
//! cells tall, cell `(i, j)` has its center at `(j + 0.5, i + 0.5)`.
//! Offsets use the sign convention "pixel center minus box coordinate".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::scalar::Scalar;

/// Minimum box extent after clamping to the grid.
pub const MIN_SIZE: f64 = 1e-4;

/// Axis-aligned box in center-size form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T: Scalar = f64> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

/// Feature grid extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub h: usize,
    pub w: usize,
}

impl GridSize {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

/// Box deltas relative to a reference box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDeltas<T: Scalar = f64> {
    pub tx: T,
    pub ty: T,
    pub tw: T,
    pub th: T,
}

impl<T: Scalar> BoxDeltas<T> {
    pub fn zero() -> Self {
        Self {
            tx: T::zero(),
            ty: T::zero(),
            tw: T::zero(),
            th: T::zero(),
        }
    }

    pub fn to_array(self) -> [T; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

impl<T: Scalar> BBox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        if !(w > T::zero() && h > T::zero()) || !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Domain(format!(
                "box needs finite coordinates and positive size, got ({cx}, {cy}, {w}, {h})"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let two = T::lit(2.0);
        Self::new((x1 + x2) / two, (y1 + y2) / two, x2 - x1, y2 - y1)
    }

    pub fn from_array(a: [T; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [T; 4] {
        let two = T::lit(2.0);
        [
            self.cx - self.w / two,
            self.cy - self.h / two,
            self.cx + self.w / two,
            self.cy + self.h / two,
        ]
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn scale(&self, sx: T, sy: T) -> Self {
        Self {
            cx: self.cx * sx,
            cy: self.cy * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }

    /// Whether the point lies inside (left/top edges inclusive).
    pub fn contains(&self, x: T, y: T) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x >= x1 && x < x2 && y >= y1 && y < y2
    }

    /// Clamps corners into the grid and enforces the minimum extent.
    pub fn clamp_to_grid(&self, grid: GridSize) -> Self {
        let eps = T::lit(MIN_SIZE);
        let (gw, gh) = (T::from_usize(grid.w).unwrap(), T::from_usize(grid.h).unwrap());
        let [x1, y1, x2, y2] = self.corners();
        let cl = |lo: T, v: T, hi: T| v.max(lo).min(hi);
        let x1 = cl(T::zero(), x1, gw - eps);
        let y1 = cl(T::zero(), y1, gh - eps);
        let x2 = cl(eps, x2, gw);
        let y2 = cl(eps, y2, gh);
        let w = cl(eps, x2 - x1, gw);
        let h = cl(eps, y2 - y1, gh);
        let two = T::lit(2.0);
        Self {
            cx: x1 + w / two,
            cy: y1 + h / two,
            w,
            h,
        }
    }
}

fn intersection<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(T::zero());
    let ih = (ay2.min(by2) - ay1.max(by1)).max(T::zero());
    iw * ih
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = intersection(a, b);
    inter / (a.area() + b.area() - inter)
}

/// Generalized IoU: IoU minus the share of the enclosing box not covered by the union.
pub fn giou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    inter / union - (enclosing - union) / enclosing
}

/// Deltas that carry the reference `p` onto the target `g`.
pub fn reparam_deltas<T: Scalar>(g: &BBox<T>, p: &BBox<T>) -> Result<BoxDeltas<T>> {
    if !(p.w > T::zero() && p.h > T::zero() && g.w > T::zero() && g.h > T::zero()) {
        return Err(Error::Domain("reparam_deltas needs positive box sizes".into()));
    }
    Ok(BoxDeltas {
        tx: (g.cx - p.cx) / p.w,
        ty: (g.cy - p.cy) / p.h,
        tw: (g.w / p.w).ln(),
        th: (g.h / p.h).ln(),
    })
}

/// Inverse of [`reparam_deltas`]; clamps into `grid` when one is given.
pub fn apply_deltas<T: Scalar>(p: &BBox<T>, t: &BoxDeltas<T>, grid: Option<GridSize>) -> Result<BBox<T>> {
    for (name, v) in [("tx", t.tx), ("ty", t.ty), ("tw", t.tw), ("th", t.th)] {
        if !v.is_finite() {
            return Err(Error::Domain(format!("delta {name} is not finite")));
        }
    }
    // Extents above sqrt(MAX) overflow the area products downstream.
    let cap = T::max_value().sqrt();
    let sw = t.tw.exp();
    if !(p.w * sw <= cap) {
        return Err(Error::Overflow(format!("exp of delta tw = {}", t.tw)));
    }
    let sh = t.th.exp();
    if !(p.h * sh <= cap) {
        return Err(Error::Overflow(format!("exp of delta th = {}", t.th)));
    }
    let b = BBox {
        cx: p.cx + t.tx * p.w,
        cy: p.cy + t.ty * p.h,
        w: p.w * sw,
        h: p.h * sh,
    };
    match grid {
        Some(g) => Ok(b.clamp_to_grid(g)),
        None if b.w > T::zero() && b.h > T::zero() => Ok(b),
        None => Err(Error::Domain("delta application collapsed the box".into())),
    }
}

/// Offsets between every grid column/row center and each box's two corners.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetGrid<T: Scalar = f64> {
    pub k: usize,
    pub grid: GridSize,
    /// `k × w`, column center minus left edge.
    pub dx1: Vec<T>,
    /// `k × w`, column center minus right edge.
    pub dx2: Vec<T>,
    /// `k × h`, row center minus top edge.
    pub dy1: Vec<T>,
    /// `k × h`, row center minus bottom edge.
    pub dy2: Vec<T>,
    pub normalized: bool,
}

fn axis_offsets<T: Scalar>(coord: T, n: usize, normalize: bool) -> impl Iterator<Item = T> {
    let inv = T::one() / T::from_usize(n).unwrap();
    (0..n).map(move |j| {
        let d = T::from_usize(j).unwrap() + T::lit(0.5) - coord;
        if normalize {
            d * inv
        } else {
            d
        }
    })
}

/// Corner offset grids for `boxes`; divided by the grid extent when `normalize`.
pub fn corner_offsets<T: Scalar>(boxes: &[BBox<T>], grid: GridSize, normalize: bool) -> OffsetGrid<T> {
    let mut og = OffsetGrid {
        k: boxes.len(),
        grid,
        dx1: Vec::with_capacity(boxes.len() * grid.w),
        dx2: Vec::with_capacity(boxes.len() * grid.w),
        dy1: Vec::with_capacity(boxes.len() * grid.h),
        dy2: Vec::with_capacity(boxes.len() * grid.h),
        normalized: normalize,
    };
    for b in boxes {
        let [x1, y1, x2, y2] = b.corners();
        og.dx1.extend(axis_offsets(x1, grid.w, normalize));
        og.dx2.extend(axis_offsets(x2, grid.w, normalize));
        og.dy1.extend(axis_offsets(y1, grid.h, normalize));
        og.dy2.extend(axis_offsets(y2, grid.h, normalize));
    }
    og
}

/// Center offsets: `k × w` horizontal and `k × h` vertical.
pub fn center_offsets<T: Scalar>(boxes: &[BBox<T>], grid: GridSize, normalize: bool) -> (Vec<T>, Vec<T>) {
    let dcx = boxes
        .iter()
        .flat_map(|b| axis_offsets(b.cx, grid.w, normalize))
        .collect();
    let dcy = boxes
        .iter()
        .flat_map(|b| axis_offsets(b.cy, grid.h, normalize))
        .collect();
    (dcx, dcy)
}

/// Differentiable box arithmetic on `[n, 4]` tensors of `(cx, cy, w, h)` rows.
pub mod diff {
    use super::*;

    /// Records boxes as a constant `[n, 4]` tensor.
    pub fn boxes_constant<T: Scalar>(tape: &mut Tape<T>, boxes: &[BBox<T>]) -> Result<Var> {
        let data = boxes.iter().flat_map(|b| b.to_array()).collect();
        tape.constant(vec![boxes.len(), 4], data)
    }

    /// Reads `[n, 4]` values back into boxes.
    pub fn boxes_value<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<Vec<BBox<T>>> {
        tape.value(v)
            .chunks(4)
            .map(|c| BBox::from_array([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn columns<T: Scalar>(tape: &mut Tape<T>, b: Var) -> Result<[Var; 4]> {
        Ok([
            tape.slice_last(b, 0, 1)?,
            tape.slice_last(b, 1, 1)?,
            tape.slice_last(b, 2, 1)?,
            tape.slice_last(b, 3, 1)?,
        ])
    }

    /// `[n, 1]` corner columns `(x1, y1, x2, y2)`.
    pub fn corners<T: Scalar>(tape: &mut Tape<T>, b: Var) -> Result<[Var; 4]> {
        let [cx, cy, w, h] = columns(tape, b)?;
        let hw = tape.scale(w, T::lit(0.5))?;
        let hh = tape.scale(h, T::lit(0.5))?;
        Ok([
            tape.sub(cx, hw)?,
            tape.sub(cy, hh)?,
            tape.add(cx, hw)?,
            tape.add(cy, hh)?,
        ])
    }

    /// `[n, 1]` column of row-aligned IoU and GIoU between `a` and `b`.
    pub fn iou_giou<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<(Var, Var)> {
        let [ax1, ay1, ax2, ay2] = corners(tape, a)?;
        let [bx1, by1, bx2, by2] = corners(tape, b)?;
        let [_, _, aw, ah] = columns(tape, a)?;
        let [_, _, bw, bh] = columns(tape, b)?;
        let area_a = tape.mul(aw, ah)?;
        let area_b = tape.mul(bw, bh)?;
        let ix1 = tape.maximum(ax1, bx1)?;
        let iy1 = tape.maximum(ay1, by1)?;
        let ix2 = tape.minimum(ax2, bx2)?;
        let iy2 = tape.minimum(ay2, by2)?;
        let iw = tape.sub(ix2, ix1)?;
        let iw = tape.clamp(iw, T::zero(), T::infinity())?;
        let ih = tape.sub(iy2, iy1)?;
        let ih = tape.clamp(ih, T::zero(), T::infinity())?;
        let inter = tape.mul(iw, ih)?;
        let sum = tape.add(area_a, area_b)?;
        let union = tape.sub(sum, inter)?;
        let iou = tape.div(inter, union)?;
        let ex1 = tape.minimum(ax1, bx1)?;
        let ey1 = tape.minimum(ay1, by1)?;
        let ex2 = tape.maximum(ax2, bx2)?;
        let ey2 = tape.maximum(ay2, by2)?;
        let ew = tape.sub(ex2, ex1)?;
        let eh = tape.sub(ey2, ey1)?;
        let enc = tape.mul(ew, eh)?;
        let gap = tape.sub(enc, union)?;
        let frac = tape.div(gap, enc)?;
        let giou = tape.sub(iou, frac)?;
        Ok((iou, giou))
    }

    pub fn giou<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        iou_giou(tape, a, b).map(|r| r.1)
    }

    /// Applies `[n, 4]` deltas to reference boxes, clamping into `grid`.
    pub fn apply_deltas<T: Scalar>(tape: &mut Tape<T>, p: Var, t: Var, grid: GridSize) -> Result<Var> {
        let [cx, cy, w, h] = columns(tape, p)?;
        let [tx, ty, tw, th] = columns(tape, t)?;
        let cap = T::max_value().sqrt();
        for (name, v, ext) in [("tw", tw, w), ("th", th, h)] {
            let (vals, exts) = (tape.value(v), tape.value(ext));
            if let Some(i) = (0..vals.len()).find(|&i| !(exts[i] * vals[i].exp() <= cap)) {
                return Err(Error::Overflow(format!("exp of delta {name} = {}", vals[i])));
            }
        }
        let dx = tape.mul(tx, w)?;
        let ncx = tape.add(cx, dx)?;
        let dy = tape.mul(ty, h)?;
        let ncy = tape.add(cy, dy)?;
        let ew = tape.exp(tw)?;
        let nw = tape.mul(w, ew)?;
        let eh = tape.exp(th)?;
        let nh = tape.mul(h, eh)?;
        clamp_cxcywh(tape, [ncx, ncy, nw, nh], grid)
    }

    /// Clamps `[n, 1]` box columns into the grid; same rule as [`BBox::clamp_to_grid`].
    pub fn clamp_cxcywh<T: Scalar>(tape: &mut Tape<T>, cols: [Var; 4], grid: GridSize) -> Result<Var> {
        let [cx, cy, w, h] = cols;
        let eps = T::lit(MIN_SIZE);
        let (gw, gh) = (T::from_usize(grid.w).unwrap(), T::from_usize(grid.h).unwrap());
        let hw = tape.scale(w, T::lit(0.5))?;
        let hh = tape.scale(h, T::lit(0.5))?;
        let x1 = tape.sub(cx, hw)?;
        let x2 = tape.add(cx, hw)?;
        let y1 = tape.sub(cy, hh)?;
        let y2 = tape.add(cy, hh)?;
        let x1 = tape.clamp(x1, T::zero(), gw - eps)?;
        let y1 = tape.clamp(y1, T::zero(), gh - eps)?;
        let x2 = tape.clamp(x2, eps, gw)?;
        let y2 = tape.clamp(y2, eps, gh)?;
        let w = tape.sub(x2, x1)?;
        let w = tape.clamp(w, eps, gw)?;
        let h = tape.sub(y2, y1)?;
        let h = tape.clamp(h, eps, gh)?;
        let hw = tape.scale(w, T::lit(0.5))?;
        let hh = tape.scale(h, T::lit(0.5))?;
        let cx = tape.add(x1, hw)?;
        let cy = tape.add(y1, hh)?;
        tape.concat(&[cx, cy, w, h], 1)
    }

    /// `[n, 4]` deltas carrying reference boxes `p` onto targets `g`.
    pub fn reparam_deltas<T: Scalar>(tape: &mut Tape<T>, g: Var, p: Var) -> Result<Var> {
        let [gx, gy, gw, gh] = columns(tape, g)?;
        let [px, py, pw, ph] = columns(tape, p)?;
        let dx = tape.sub(gx, px)?;
        let tx = tape.div(dx, pw)?;
        let dy = tape.sub(gy, py)?;
        let ty = tape.div(dy, ph)?;
        let rw = tape.div(gw, pw)?;
        let tw = tape.log(rw)?;
        let rh = tape.div(gh, ph)?;
        let th = tape.log(rh)?;
        tape.concat(&[tx, ty, tw, th], 1)
    }

    /// Boxes divided by the grid extents, so coordinates lie in `[0, 1]`.
    pub fn normalize<T: Scalar>(tape: &mut Tape<T>, b: Var, grid: GridSize) -> Result<Var> {
        let [cx, cy, w, h] = columns(tape, b)?;
        let sx = T::one() / T::from_usize(grid.w).unwrap();
        let sy = T::one() / T::from_usize(grid.h).unwrap();
        let cx = tape.scale(cx, sx)?;
        let cy = tape.scale(cy, sy)?;
        let w = tape.scale(w, sx)?;
        let h = tape.scale(h, sy)?;
        tape.concat(&[cx, cy, w, h], 1)
    }

    /// Refinement in normalized coordinates: `sigmoid(logit(p / grid) + t)` per
    /// coordinate, scaled back to grid units and clamped.
    pub fn apply_deltas_squashed<T: Scalar>(tape: &mut Tape<T>, p: Var, t: Var, grid: GridSize) -> Result<Var> {
        let eps = T::lit(1e-5);
        let np = normalize(tape, p, grid)?;
        let np = tape.clamp(np, eps, T::one() - eps)?;
        let lp = tape.log(np)?;
        let one_minus = tape.neg(np)?;
        let one_minus = tape.add_scalar(one_minus, T::one())?;
        let lq = tape.log(one_minus)?;
        let logit = tape.sub(lp, lq)?;
        let z = tape.add(logit, t)?;
        let s = tape.sigmoid(z)?;
        let [cx, cy, w, h] = columns(tape, s)?;
        let gw = T::from_usize(grid.w).unwrap();
        let gh = T::from_usize(grid.h).unwrap();
        let cols = [
            tape.scale(cx, gw)?,
            tape.scale(cy, gh)?,
            tape.scale(w, gw)?,
            tape.scale(h, gh)?,
        ];
        clamp_cxcywh(tape, cols, grid)
    }

    /// Differentiable counterpart of [`super::OffsetGrid`].
    #[derive(Clone, Copy, Debug)]
    pub struct OffsetVars {
        pub dx1: Var,
        pub dx2: Var,
        pub dy1: Var,
        pub dy2: Var,
    }

    fn axis<T: Scalar>(tape: &mut Tape<T>, coord: Var, n: usize, normalize: bool) -> Result<Var> {
        let k = tape.shape(coord)[0];
        let centers: Vec<T> = (0..k)
            .flat_map(|_| (0..n).map(|j| T::from_usize(j).unwrap() + T::lit(0.5)))
            .collect();
        let centers = tape.constant(vec![k, n], centers)?;
        let c = tape.expand(coord, vec![k, n])?;
        let d = tape.sub(centers, c)?;
        if normalize {
            tape.scale(d, T::one() / T::from_usize(n).unwrap())
        } else {
            Ok(d)
        }
    }

    /// Corner offsets, differentiable with respect to the box coordinates.
    pub fn corner_offsets<T: Scalar>(tape: &mut Tape<T>, boxes: Var, grid: GridSize, normalize: bool) -> Result<OffsetVars> {
        let [x1, y1, x2, y2] = corners(tape, boxes)?;
        Ok(OffsetVars {
            dx1: axis(tape, x1, grid.w, normalize)?,
            dx2: axis(tape, x2, grid.w, normalize)?,
            dy1: axis(tape, y1, grid.h, normalize)?,
            dy2: axis(tape, y2, grid.h, normalize)?,
        })
    }

    /// Center offsets `([k, w], [k, h])`.
    pub fn center_offsets<T: Scalar>(tape: &mut Tape<T>, boxes: Var, grid: GridSize, normalize: bool) -> Result<(Var, Var)> {
        let [cx, cy, _, _] = columns(tape, boxes)?;
        Ok((axis(tape, cx, grid.w, normalize)?, axis(tape, cy, grid.h, normalize)?))
    }
}
