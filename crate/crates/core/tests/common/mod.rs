//! Independent reference implementations shared by the integration and
//! acceptance tests. Written for obviousness, not speed.
#![allow(dead_code)]

use psttl::detector::{DetectorParams, Detection};
use psttl::losses::KlTerm;
use psttl::postprocess::{ImplicitCandidate, PseudoLabelSet};
use psttl::prototypes::SoftLabel;
use psttl::worldgen::{generate_scene, BBox, ClassId, GeneratorConfig, GroundTruthObject, Scene, WorldParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Intersection-over-union from the overlap of the two intervals on each axis.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| (hi1.min(hi2) - lo1.max(lo2)).max(0.0);
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 { 0.0 } else { inter / union }
}

pub fn random_box(rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(0.02..0.5);
    let h = rng.random_range(0.02..0.5);
    let x1 = rng.random_range(0.0..1.0 - w);
    let y1 = rng.random_range(0.0..1.0 - h);
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// Boxes clustered around a few centers so that NMS has real overlaps to
/// resolve. Scores are drawn from a small grid to produce ties.
pub fn random_detections(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<Detection> {
    let centers: Vec<BBox> = (0..rng.random_range(1..=4)).map(|_| random_box(rng)).collect();
    (0..n)
        .map(|i| {
            let c = centers[rng.random_range(0..centers.len())];
            let dx = rng.random_range(-0.05..0.05);
            let dy = rng.random_range(-0.05..0.05);
            let bbox = BBox::from_center_clipped(
                c.center().0 + dx,
                c.center().1 + dy,
                c.width() * rng.random_range(0.7..1.3),
                c.height() * rng.random_range(0.7..1.3),
            )
            .unwrap_or(c);
            Detection {
                bbox,
                class_id: rng.random_range(0..classes),
                score: rng.random_range(0..20) as f64 / 20.0,
                feature: vec![],
                proposal: i,
            }
        })
        .collect()
}

fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Textbook NMS: repeatedly take the best remaining detection and delete
/// every remaining one of the same class that overlaps it. Returns the
/// proposal indices of the survivors in selection order.
pub fn oracle_nms(dets: &[Detection], thresh: f64) -> Vec<usize> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| better((dets[i].score, dets[i].proposal), (dets[b].score, dets[b].proposal))) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(dets[b].proposal);
        for j in 0..dets.len() {
            if alive[j] && dets[j].class_id == dets[b].class_id && oracle_iou(&dets[j].bbox, &dets[b].bbox) >= thresh {
                alive[j] = false;
            }
        }
    }
    out
}

/// Same deletion scheme with class ignored, after first deleting every
/// candidate that overlaps a hard label.
pub fn oracle_nms_agnostic(cands: &[ImplicitCandidate], hard: &[Detection], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = cands
        .iter()
        .map(|c| hard.iter().all(|h| oracle_iou(&h.bbox, &c.bbox) < thresh))
        .collect();
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..cands.len() {
            if alive[i] && best.is_none_or(|b| better((cands[i].score, cands[i].proposal), (cands[b].score, cands[b].proposal))) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(cands[b].proposal);
        for j in 0..cands.len() {
            if alive[j] && oracle_iou(&cands[j].bbox, &cands[b].bbox) >= thresh {
                alive[j] = false;
            }
        }
    }
    out
}

/// All-point AP written per true positive: each TP adds `1/num_gt` recall at
/// the best precision reached at or after its rank.
pub fn oracle_ap(flags: &[bool], num_gt: usize) -> f64 {
    let prec: Vec<f64> = (0..flags.len())
        .map(|k| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            let envelope = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += envelope / num_gt as f64;
        }
    }
    ap
}

/// Greedy matching over detections in descending score order; each takes
/// the unclaimed same-class GT of highest IoU if that IoU reaches `thresh`.
pub fn oracle_match(dets: &[Detection], gts: &[GroundTruthObject], thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut claimed = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if claimed[j] || g.class_id != dets[i].class_id {
                continue;
            }
            let v = oracle_iou(&dets[i].bbox, &g.bbox);
            if v >= thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            claimed[j] = true;
            tp[i] = true;
        }
    }
    tp
}

/// A small random loss instance: parameters, scenes, pseudo-labels aligned
/// with the scenes and KL terms.
pub struct GradInstance {
    pub params: DetectorParams,
    pub scenes: Vec<Scene>,
    pub pseudo: Vec<PseudoLabelSet>,
    pub kl_terms: Vec<KlTerm>,
}

pub fn grad_instance(seed: u64) -> GradInstance {
    let mut rng = rng(seed);
    let dim = rng.random_range(2..=8);
    let n = rng.random_range(1..=5);
    let world = WorldParams {
        dim,
        num_classes: n,
        min_class_angle_deg: 0.0,
        feature_noise_sigma: 0.5,
        background_feature_sigma: 0.5,
        objects_per_scene: rng.random_range(1..=3),
        proposals_per_gt: 2,
        background_proposals: 2,
        min_jitter_iou: 0.6,
        feature_scale: 1.0,
        seed,
    };
    let gen = GeneratorConfig::from_params(world).unwrap();
    let pool: Vec<ClassId> = (0..n).collect();
    let scenes: Vec<Scene> = (0..rng.random_range(1..=2)).map(|i| generate_scene(&gen, i, &pool).unwrap()).collect();

    let mut params = DetectorParams::random(dim, pool.clone(), 0.5, &mut rng);
    for (_, t) in params.tensors_mut() {
        for x in t.iter_mut() {
            *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let pseudo = scenes
        .iter()
        .map(|s| {
            let hard = s
                .objects
                .iter()
                .enumerate()
                .filter_map(|(i, o)| rng.random_bool(0.7).then_some((i, o)))
                .collect::<Vec<_>>()
                .into_iter()
                .map(|(i, o)| Detection {
                    bbox: BBox::from_center_clipped(
                        o.bbox.center().0 + rng.random_range(-0.02..0.02),
                        o.bbox.center().1 + rng.random_range(-0.02..0.02),
                        o.bbox.width(),
                        o.bbox.height(),
                    )
                    .unwrap_or(o.bbox),
                    class_id: rng.random_range(0..n),
                    score: 0.95,
                    feature: o.latent_feature.clone(),
                    proposal: i,
                })
                .collect();
            PseudoLabelSet { hard, implicit: vec![], discarded_count: 0 }
        })
        .collect();

    let kl_terms = (0..rng.random_range(1..=4))
        .map(|_| {
            let feature: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let mut probs: Vec<f64> = (0..n)
                .map(|_| if n > 1 && rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.05..1.0) })
                .collect();
            if probs.iter().all(|&p| p == 0.0) {
                probs[0] = 1.0;
            }
            let s: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= s);
            probs.push(0.0);
            KlTerm { feature, label: SoftLabel { probs } }
        })
        .collect();

    GradInstance { params, scenes, pseudo, kl_terms }
}

/// Central finite differences of `f` with respect to every parameter.
pub fn fd_grad(params: &DetectorParams, h: f64, f: impl Fn(&DetectorParams) -> f64) -> DetectorParams {
    let mut g = params.zeros_like();
    let mut p = params.clone();
    for t in 0..params.tensors().len() {
        for i in 0..params.tensors()[t].1.len() {
            let x0 = params.tensors()[t].1[i];
            p.tensors_mut()[t].1[i] = x0 + h;
            let up = f(&p);
            p.tensors_mut()[t].1[i] = x0 - h;
            let down = f(&p);
            p.tensors_mut()[t].1[i] = x0;
            g.tensors_mut()[t].1[i] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// Floor of the relative-error denominator; entries whose true gradient is
/// this small are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-5;

pub fn max_rel_err(analytic: &DetectorParams, numeric: &DetectorParams) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, a), (_, n)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        for (x, y) in a.iter().zip(n) {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}
