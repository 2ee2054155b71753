//! Average precision with greedy matching and 101-point interpolation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection<T: Scalar = f64> {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox<T>,
    pub score: T,
}

impl<T: Scalar> Detection<T> {
    pub fn new(image: usize, class: usize, bbox: BBox<T>, score: T) -> Result<Self> {
        if !(score >= T::zero() && score <= T::one()) {
            return Err(Error::Domain(format!("confidence {score} outside [0, 1]")));
        }
        Ok(Self {
            image,
            class,
            bbox,
            score,
        })
    }
}

/// A ground-truth box tagged with its image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation<T: Scalar = f64> {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox<T>,
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Average precision of `dets` against `gts` at one IoU threshold, ignoring
/// class labels (callers split by class). Detections are ranked by
/// confidence, ties keeping input order; each takes the unmatched
/// ground truth of its image with the highest IoU at or above the threshold.
pub fn average_precision<T: Scalar>(dets: &[Detection<T>], gts: &[Annotation<T>], threshold: T) -> Result<T> {
    if !(threshold > T::zero() && threshold < T::one()) {
        return Err(Error::Domain(format!("IoU threshold {threshold} outside (0, 1)")));
    }
    if gts.is_empty() {
        return Err(Error::Domain("average precision needs at least one ground truth".into()));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(dets.len());
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, T)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.image != det.image {
                continue;
            }
            let o = iou(&det.bbox, &gt.bbox);
            if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        hits.push(best.is_some());
    }
    Ok(interpolated_ap(&hits, gts.len()))
}

/// 101-point interpolated AP of a ranked hit list.
pub fn interpolated_ap<T: Scalar>(hits: &[bool], num_gts: usize) -> T {
    let n = T::from_usize(num_gts).unwrap();
    let mut tp = 0usize;
    let mut curve: Vec<(T, T)> = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        let recall = T::from_usize(tp).unwrap() / n;
        let precision = T::from_usize(tp).unwrap() / T::from_usize(i + 1).unwrap();
        curve.push((recall, precision));
    }
    // precision envelope: best precision at this recall or beyond
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut sum = T::zero();
    let mut j = 0;
    for r in 0..=100 {
        let level = T::from_usize(r).unwrap() / T::lit(100.0);
        while j < curve.len() && curve[j].0 < level {
            j += 1;
        }
        if j < curve.len() {
            sum += curve[j].1;
        }
    }
    sum / T::lit(101.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

/// COCO-style summary: per class, AP averaged over IoU 0.50:0.05:0.95 plus
/// AP at 0.5 and 0.75; then the mean over classes that have ground truths.
/// Images without ground truths are left out.
pub fn map_range<T: Scalar>(dets: &[Detection<T>], gts: &[Annotation<T>]) -> Result<Metrics> {
    let images: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.image).collect();
    let mut classes: BTreeMap<usize, (Vec<Detection<T>>, Vec<Annotation<T>>)> = BTreeMap::new();
    for g in gts {
        classes.entry(g.class).or_default().1.push(*g);
    }
    for d in dets.iter().filter(|d| images.contains(&d.image)) {
        if let Some(entry) = classes.get_mut(&d.class) {
            entry.0.push(*d);
        }
    }
    let mut per_class = BTreeMap::new();
    for (class, (cd, cg)) in &classes {
        let mut aps = Vec::with_capacity(IOU_THRESHOLDS.len());
        for &t in &IOU_THRESHOLDS {
            aps.push(average_precision(cd, cg, T::lit(t))?.to_f64_lossy());
        }
        per_class.insert(
            class.to_string(),
            ClassMetrics {
                ap: aps.iter().sum::<f64>() / aps.len() as f64,
                ap50: aps[0],
                ap75: aps[5],
            },
        );
    }
    let n = per_class.len().max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / n;
    Ok(Metrics {
        ap: mean(|c| c.ap),
        ap50: mean(|c| c.ap50),
        ap75: mean(|c| c.ap75),
        per_class,
    })
}
