//! Teacher post-processing: IoU, class-specific and class-agnostic NMS, and
//! the dual-threshold split of detections into hard pseudo-labels, implicit
//! foreground candidates and discards.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::worldgen::BBox;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Descending score, ties by ascending proposal index.
fn rank(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Greedy NMS within each class. A detection survives iff no higher-ranked
/// survivor of the same class overlaps it with IoU >= `nms_iou`.
/// Output is sorted by descending score.
pub fn nms_class_specific(dets: &[Detection], nms_iou: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank((a.score, a.proposal), (b.score, b.proposal)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) >= nms_iou);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub delta_upper: f64,
    pub delta_lower: f64,
    pub nms_iou: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { delta_upper: 0.9, delta_lower: 0.7, nms_iou: 0.5 }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        let ThresholdConfig { delta_upper, delta_lower, nms_iou } = *self;
        if !(0.0 < delta_lower && delta_lower < delta_upper && delta_upper <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < delta_lower < delta_upper <= 1, got lower={delta_lower} upper={delta_upper}"
            )));
        }
        if !(nms_iou > 0.0 && nms_iou <= 1.0) {
            return Err(Error::Config(format!("nms_iou must lie in (0, 1], got {nms_iou}")));
        }
        Ok(())
    }
}

/// A teacher detection in `[delta_lower, delta_upper)` with its class
/// label removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitCandidate {
    pub bbox: BBox,
    pub feature: Vec<f64>,
    pub score: f64,
    pub proposal: usize,
}

impl From<&Detection> for ImplicitCandidate {
    fn from(d: &Detection) -> Self {
        ImplicitCandidate { bbox: d.bbox, feature: d.feature.clone(), score: d.score, proposal: d.proposal }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    /// Score >= delta_upper; class kept.
    pub hard: Vec<Detection>,
    /// delta_lower <= score < delta_upper; class stripped.
    pub implicit: Vec<ImplicitCandidate>,
    pub discarded_count: usize,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.hard.len() + self.implicit.len() + self.discarded_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits class-specific-NMS'd detections by score. Input order is kept
/// within each group.
pub fn partition_pseudo(dets: &[Detection], cfg: &ThresholdConfig) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    let mut out = PseudoLabelSet::default();
    for d in dets {
        if d.score >= cfg.delta_upper {
            out.hard.push(d.clone());
        } else if d.score >= cfg.delta_lower {
            out.implicit.push(ImplicitCandidate::from(d));
        } else {
            out.discarded_count += 1;
        }
    }
    Ok(out)
}

/// Class-blind suppression of implicit candidates. A candidate is dropped if
/// it overlaps any hard pseudo-label, or any higher-ranked surviving
/// candidate, with IoU >= `nms_iou`. Survivors come back in rank order.
pub fn nms_class_agnostic(
    implicit: &[ImplicitCandidate],
    hard: &[Detection],
    nms_iou: f64,
) -> Vec<ImplicitCandidate> {
    let mut order: Vec<&ImplicitCandidate> = implicit.iter().collect();
    order.sort_by(|a, b| rank((a.score, a.proposal), (b.score, b.proposal)));
    let mut kept: Vec<ImplicitCandidate> = Vec::new();
    for c in order {
        let by_hard = hard.iter().any(|h| iou(&h.bbox, &c.bbox) >= nms_iou);
        let by_kept = kept.iter().any(|k| iou(&k.bbox, &c.bbox) >= nms_iou);
        if !by_hard && !by_kept {
            kept.push(c.clone());
        }
    }
    kept
}
