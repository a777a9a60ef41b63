//! AP50 evaluation with all-point interpolation, reported per class and
//! averaged over novel, base and all classes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::postprocess::iou;
use crate::worldgen::{ClassId, GroundTruthObject, Scene, SplitSpec};

/// Detections emitted for one test scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePredictions {
    pub scene_id: u64,
    pub detections: Vec<Detection>,
}

/// Greedy matching in the given order (callers pass detections sorted by
/// descending score). A detection is a true positive if some unmatched
/// ground truth of its class overlaps it with IoU >= `iou_thresh`; it then
/// claims the highest-IoU such ground truth.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthObject], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class_id != d.class_id {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApValue {
    pub ap: f64,
    /// Set when the class has no ground truth, in which case `ap` is 0.
    pub undefined: bool,
}

/// Area under the precision envelope over recall for ranked TP/FP flags.
pub fn ap50(flags: &[bool], num_gt: usize) -> ApValue {
    if num_gt == 0 {
        return ApValue { ap: 0.0, undefined: true };
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ApValue { ap: ap.clamp(0.0, 1.0), undefined: false }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: ClassId,
    pub novel: bool,
    pub ap50: f64,
    pub undefined: bool,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_thresh: f64,
    pub classes: Vec<ClassMetrics>,
    pub n_ap50: f64,
    pub b_ap50: f64,
    pub m_ap50: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates `predictions` against the test scenes. Every test scene needs
/// exactly one prediction entry, in the same order.
pub fn report(
    predictions: &[ScenePredictions],
    d_test: &[Scene],
    split: &SplitSpec,
    iou_thresh: f64,
) -> Result<MetricsReport> {
    if predictions.len() != d_test.len() {
        let i = predictions.len().min(d_test.len());
        return Err(Error::SceneMismatch {
            expected: d_test.get(i).map_or(u64::MAX, |s| s.id),
            found: predictions.get(i).map_or(u64::MAX, |p| p.scene_id),
        });
    }
    for (p, s) in predictions.iter().zip(d_test) {
        if p.scene_id != s.id {
            return Err(Error::SceneMismatch { expected: s.id, found: p.scene_id });
        }
    }
    let classes = split.all_classes();
    let mut per_class: BTreeMap<ClassId, Vec<(f64, usize, &Detection)>> = BTreeMap::new();
    for (si, p) in predictions.iter().enumerate() {
        for d in &p.detections {
            per_class.entry(d.class_id).or_default().push((d.score, si, d));
        }
    }

    let mut out = Vec::with_capacity(classes.len());
    for &c in &classes {
        let mut dets = per_class.remove(&c).unwrap_or_default();
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.proposal.cmp(&b.2.proposal)));
        let gts: Vec<Vec<GroundTruthObject>> = d_test
            .iter()
            .map(|s| s.objects.iter().filter(|o| o.class_id == c).cloned().collect())
            .collect();
        let num_gt = gts.iter().map(Vec::len).sum();
        // matching is per scene, so rank order within each scene suffices
        let mut by_scene: Vec<Vec<usize>> = vec![Vec::new(); d_test.len()];
        for (rank, (_, si, _)) in dets.iter().enumerate() {
            by_scene[*si].push(rank);
        }
        let mut flags = vec![false; dets.len()];
        for (si, ranks) in by_scene.iter().enumerate() {
            let scene_dets: Vec<Detection> = ranks.iter().map(|&r| dets[r].2.clone()).collect();
            for (&r, f) in ranks.iter().zip(match_detections(&scene_dets, &gts[si], iou_thresh)) {
                flags[r] = f;
            }
        }
        let ap = ap50(&flags, num_gt);
        out.push(ClassMetrics {
            class_id: c,
            novel: split.is_novel(c),
            ap50: ap.ap,
            undefined: ap.undefined,
            num_gt,
            num_detections: dets.len(),
        });
    }
    Ok(MetricsReport {
        iou_thresh,
        n_ap50: mean(out.iter().filter(|m| m.novel).map(|m| m.ap50)),
        b_ap50: mean(out.iter().filter(|m| !m.novel).map(|m| m.ap50)),
        m_ap50: mean(out.iter().map(|m| m.ap50)),
        classes: out,
    })
}

impl MetricsReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `class,split,ap50,num_gt,num_detections`, one row per class.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        writeln!(buf, "class,split,ap50,num_gt,num_detections").unwrap();
        for m in &self.classes {
            let split = if m.novel { "novel" } else { "base" };
            writeln!(buf, "{},{},{},{},{}", m.class_id, split, m.ap50, m.num_gt, m.num_detections).unwrap();
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

pub fn save_predictions(path: impl AsRef<Path>, preds: &[ScenePredictions]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for p in preds {
        crate::worldgen::write_json_line(&mut buf, p).map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<ScenePredictions>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::BBox;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(b: BBox, c: ClassId) -> GroundTruthObject {
        GroundTruthObject { bbox: b, class_id: c, latent_feature: vec![] }
    }

    fn det(b: BBox, c: ClassId, score: f64, proposal: usize) -> Detection {
        Detection { bbox: b, class_id: c, score, feature: vec![], proposal }
    }

    #[test]
    fn single_match_rule() {
        let b = bx(0.1, 0.1, 0.4, 0.4);
        assert_eq!(match_detections(&[det(b, 0, 0.9, 0)], &[gt(b, 0)], 0.5), vec![true]);
        let flags = match_detections(&[det(b, 0, 0.9, 0), det(b, 0, 0.8, 1)], &[gt(b, 0)], 0.5);
        assert_eq!(flags, vec![true, false]);
        // wrong class never matches
        assert_eq!(match_detections(&[det(b, 1, 0.9, 0)], &[gt(b, 0)], 0.5), vec![false]);
    }

    #[test]
    fn ap_cases() {
        assert_eq!(ap50(&[true, true], 2).ap, 1.0);
        assert_eq!(ap50(&[false, false], 2).ap, 0.0);
        assert!((ap50(&[true, false, true], 2).ap - 5.0 / 6.0).abs() < 1e-12);
        let none = ap50(&[], 0);
        assert!(none.undefined && none.ap == 0.0);
        assert_eq!(ap50(&[], 3).ap, 0.0);
    }

    fn split() -> SplitSpec {
        SplitSpec { base_classes: vec![0], novel_classes: vec![1], shots: 1, test_scenes: 2, order_seed: 0 }
    }

    fn scenes() -> Vec<Scene> {
        vec![
            Scene { id: 4, objects: vec![gt(bx(0.1, 0.1, 0.4, 0.4), 0), gt(bx(0.5, 0.5, 0.9, 0.9), 1)], proposals: vec![] },
            Scene { id: 9, objects: vec![gt(bx(0.2, 0.2, 0.6, 0.6), 1)], proposals: vec![] },
        ]
    }

    #[test]
    fn empty_and_perfect_predictions() {
        let s = scenes();
        let empty: Vec<_> = s.iter().map(|s| ScenePredictions { scene_id: s.id, detections: vec![] }).collect();
        let r = report(&empty, &s, &split(), 0.5).unwrap();
        assert!(r.classes.iter().all(|c| c.ap50 == 0.0));
        let perfect: Vec<_> = s
            .iter()
            .map(|s| ScenePredictions {
                scene_id: s.id,
                detections: s.objects.iter().enumerate().map(|(i, o)| det(o.bbox, o.class_id, 1.0, i)).collect(),
            })
            .collect();
        let r = report(&perfect, &s, &split(), 0.5).unwrap();
        assert_eq!((r.n_ap50, r.b_ap50, r.m_ap50), (1.0, 1.0, 1.0));
        assert_eq!(r.classes[1].num_gt, 2);
    }

    #[test]
    fn scene_mismatch_is_an_error() {
        let s = scenes();
        let preds = vec![
            ScenePredictions { scene_id: 9, detections: vec![] },
            ScenePredictions { scene_id: 4, detections: vec![] },
        ];
        assert!(matches!(report(&preds, &s, &split(), 0.5), Err(Error::SceneMismatch { expected: 4, found: 9 })));
        assert!(report(&preds[..1], &s, &split(), 0.5).is_err());
    }

    #[test]
    fn files_round_trip() {
        let s = scenes();
        let preds: Vec<_> = s
            .iter()
            .map(|s| ScenePredictions { scene_id: s.id, detections: vec![det(s.objects[0].bbox, 1, 0.3, 0)] })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("preds.jsonl");
        save_predictions(&p, &preds).unwrap();
        assert_eq!(load_predictions(&p).unwrap(), preds);
        let r = report(&preds, &s, &split(), 0.5).unwrap();
        r.write_csv(dir.path().join("r.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
