//! Training objectives and their analytic gradients.
//!
//! Reduction is a mean over proposals per head (over foreground proposals
//! for the regression heads), then a sum over heads. Regression uses
//! smooth-L1 with transition point 1 in delta space.
//!
//! The RoI regression target is the ground truth encoded against the box
//! *after* proposal refinement, so the RoI regression term also depends on
//! the proposal-refinement head; its gradient is carried through.

use serde::{Deserialize, Serialize};

use crate::detector::{
    apply_deltas, encode, log_softmax, sigmoid, softmax, BoxGeom, Deltas, DetectorParams, Target,
    LOG_SIZE_CLAMP,
};
use crate::detector::{assign_labels, assign_targets};
use crate::error::{Error, Result};
use crate::postprocess::PseudoLabelSet;
use crate::prototypes::SoftLabel;
use crate::worldgen::{Proposal, Scene};

/// Floor applied to student probabilities inside the KL term.
pub const KL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.5, lambda2: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupParts {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

impl SupParts {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnsupParts {
    pub rpn_cls: f64,
    pub roi_cls: f64,
}

impl UnsupParts {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.roi_cls
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupLoss {
    pub parts: SupParts,
    pub grads: DetectorParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnsupLoss {
    pub parts: UnsupParts,
    pub grads: DetectorParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlLoss {
    pub value: f64,
    /// Student probabilities that fell below [`KL_EPS`] on the soft label's support.
    pub clamped: usize,
    pub grads: DetectorParams,
}

impl SupLoss {
    pub fn zero(params: &DetectorParams) -> Self {
        SupLoss { parts: SupParts::default(), grads: params.zeros_like() }
    }
}

impl UnsupLoss {
    pub fn zero(params: &DetectorParams) -> Self {
        UnsupLoss { parts: UnsupParts::default(), grads: params.zeros_like() }
    }
}

impl KlLoss {
    pub fn zero(params: &DetectorParams) -> Self {
        KlLoss { value: 0.0, clamped: 0, grads: params.zeros_like() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_kl: f64,
    pub l_total: f64,
    pub sup: SupParts,
    pub unsup: UnsupParts,
    pub kl_clamped: usize,
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// `softplus(z) - y z`, the logistic loss on a logit.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Adds one proposal's upstream gradients to the parameter gradients.
fn accumulate(g: &mut DetectorParams, f: &[f64], d_obj: f64, d_logits: &[f64], d_rpn: &Deltas, d_roi: &Deltas) {
    let d = g.dim;
    if d_obj != 0.0 {
        g.b_obj += d_obj;
        g.w_obj.iter_mut().zip(f).for_each(|(w, x)| *w += d_obj * x);
    }
    for (r, &dz) in d_logits.iter().enumerate() {
        if dz != 0.0 {
            g.b_cls[r] += dz;
            g.w_cls[r * d..(r + 1) * d].iter_mut().zip(f).for_each(|(w, x)| *w += dz * x);
        }
    }
    for k in 0..4 {
        if d_rpn[k] != 0.0 {
            g.b_rpn_reg[k] += d_rpn[k];
            g.w_rpn_reg[k * d..(k + 1) * d].iter_mut().zip(f).for_each(|(w, x)| *w += d_rpn[k] * x);
        }
        if d_roi[k] != 0.0 {
            g.b_reg[k] += d_roi[k];
            g.w_reg[k * d..(k + 1) * d].iter_mut().zip(f).for_each(|(w, x)| *w += d_roi[k] * x);
        }
    }
}

/// RoI target after refinement and its Jacobian with respect to the
/// refinement deltas: `jac[k][j] = d target_k / d rpn_j`.
fn cascade_target(proposal: &BoxGeom, rpn: &Deltas, gt: &BoxGeom) -> (Deltas, [[f64; 4]; 4]) {
    let refined = apply_deltas(proposal, rpn);
    let t = encode(gt, &refined);
    let mut jac = [[0.0; 4]; 4];
    jac[0][0] = -proposal.w / refined.w;
    jac[1][1] = -proposal.h / refined.h;
    if rpn[2] < LOG_SIZE_CLAMP {
        jac[0][2] = -t[0];
        jac[2][2] = -1.0;
    }
    if rpn[3] < LOG_SIZE_CLAMP {
        jac[1][3] = -t[1];
        jac[3][3] = -1.0;
    }
    (t, jac)
}

fn check_dim(params: &DetectorParams, f: &[f64]) -> Result<()> {
    if f.len() != params.dim {
        return Err(Error::Dimension { what: "proposal feature", expected: params.dim, actual: f.len() });
    }
    Ok(())
}

/// Row index of each target's class, background row for negatives.
fn target_rows(params: &DetectorParams, targets: &[Target]) -> Result<Vec<Option<usize>>> {
    targets
        .iter()
        .map(|t| match t {
            Target::Background => Ok(None),
            Target::Foreground { class_id, .. } => {
                params.row_of(*class_id).map(Some).ok_or(Error::UnknownClass(*class_id))
            }
        })
        .collect()
}

/// Supervised detector loss on annotated scenes: objectness BCE and
/// proposal-refinement smooth-L1 for the RPN analog, softmax cross-entropy
/// and box smooth-L1 for the RoI analog.
pub fn l_sup<'a>(
    params: &DetectorParams,
    scenes: impl IntoIterator<Item = &'a Scene>,
    match_iou: f64,
) -> Result<SupLoss> {
    let mut items: Vec<(&Proposal, Target, Option<usize>)> = Vec::new();
    for s in scenes {
        let targets = assign_labels(&s.proposals, &s.objects, match_iou);
        let rows = target_rows(params, &targets)?;
        for ((p, t), r) in s.proposals.iter().zip(targets).zip(rows) {
            check_dim(params, &p.feature)?;
            items.push((p, t, r));
        }
    }
    let mut out = SupLoss::zero(params);
    if items.is_empty() {
        return Ok(out);
    }
    let n_all = items.len() as f64;
    let n_fg = items.iter().filter(|(_, t, _)| t.is_foreground()).count() as f64;
    let bg_row = params.num_classes();
    let mut d_logits = vec![0.0; bg_row + 1];

    for (p, t, row) in &items {
        let a = params.activations(&p.feature);
        let y = if row.is_some() { 1.0 } else { 0.0 };
        out.parts.rpn_cls += bce_with_logit(a.obj_logit, y) / n_all;
        let d_obj = (sigmoid(a.obj_logit) - y) / n_all;

        let label = row.unwrap_or(bg_row);
        let logp = log_softmax(&a.cls_logits);
        out.parts.roi_cls -= logp[label] / n_all;
        for (r, lp) in logp.iter().enumerate() {
            d_logits[r] = (lp.exp() - if r == label { 1.0 } else { 0.0 }) / n_all;
        }

        let mut d_rpn = [0.0; 4];
        let mut d_roi = [0.0; 4];
        if let Target::Foreground { gt, deltas, .. } = t {
            let pg = BoxGeom::from(&p.bbox);
            for k in 0..4 {
                let (l, dl) = smooth_l1(a.rpn_deltas[k] - deltas[k]);
                out.parts.rpn_reg += l / n_fg;
                d_rpn[k] += dl / n_fg;
            }
            let (t2, jac) = cascade_target(&pg, &a.rpn_deltas, gt);
            for k in 0..4 {
                let (l, dl) = smooth_l1(a.roi_deltas[k] - t2[k]);
                out.parts.roi_reg += l / n_fg;
                d_roi[k] = dl / n_fg;
                for j in 0..4 {
                    d_rpn[j] -= d_roi[k] * jac[k][j];
                }
            }
        }
        accumulate(&mut out.grads, &p.feature, d_obj, &d_logits, &d_rpn, &d_roi);
    }
    Ok(out)
}

/// Pseudo-label loss on test scenes, classification heads only.
///
/// Student proposals matching a hard pseudo box at IoU >= `match_iou` take
/// its class and count as objectness positives; all other proposals of the
/// scene are background. Scenes without hard pseudo-labels contribute
/// nothing.
pub fn l_unsup(
    params: &DetectorParams,
    scenes: &[Scene],
    pseudo: &[PseudoLabelSet],
    match_iou: f64,
) -> Result<UnsupLoss> {
    if scenes.len() != pseudo.len() {
        return Err(Error::Shape(format!("{} scenes but {} pseudo-label sets", scenes.len(), pseudo.len())));
    }
    let mut items: Vec<(&Proposal, Option<usize>)> = Vec::new();
    for (s, ps) in scenes.iter().zip(pseudo) {
        if ps.hard.is_empty() {
            continue;
        }
        let boxes: Vec<_> = ps.hard.iter().map(|d| (d.bbox, d.class_id)).collect();
        let targets = assign_targets(&s.proposals, &boxes, match_iou);
        let rows = target_rows(params, &targets)?;
        for (p, r) in s.proposals.iter().zip(rows) {
            check_dim(params, &p.feature)?;
            items.push((p, r));
        }
    }
    let mut out = UnsupLoss::zero(params);
    if items.is_empty() {
        return Ok(out);
    }
    let n_all = items.len() as f64;
    let bg_row = params.num_classes();
    let mut d_logits = vec![0.0; bg_row + 1];
    for (p, row) in &items {
        let a = params.activations(&p.feature);
        let y = if row.is_some() { 1.0 } else { 0.0 };
        out.parts.rpn_cls += bce_with_logit(a.obj_logit, y) / n_all;
        let d_obj = (sigmoid(a.obj_logit) - y) / n_all;
        let label = row.unwrap_or(bg_row);
        let logp = log_softmax(&a.cls_logits);
        out.parts.roi_cls -= logp[label] / n_all;
        for (r, lp) in logp.iter().enumerate() {
            d_logits[r] = (lp.exp() - if r == label { 1.0 } else { 0.0 }) / n_all;
        }
        accumulate(&mut out.grads, &p.feature, d_obj, &d_logits, &[0.0; 4], &[0.0; 4]);
    }
    Ok(out)
}

/// One implicit-foreground candidate: the proposal feature and its soft label.
#[derive(Clone, Debug, PartialEq)]
pub struct KlTerm {
    pub feature: Vec<f64>,
    pub label: SoftLabel,
}

/// Mean over candidates of `KL(u || v)`, `v` the student class distribution.
/// Entries with `u = 0` contribute nothing; the logit gradient is
/// `v * sum(u) - u`.
pub fn l_kl(params: &DetectorParams, terms: &[KlTerm]) -> Result<KlLoss> {
    let mut out = KlLoss::zero(params);
    if terms.is_empty() {
        return Ok(out);
    }
    let m = terms.len() as f64;
    let rows = params.num_classes() + 1;
    let ln_eps = KL_EPS.ln();
    let mut d_logits = vec![0.0; rows];
    for term in terms {
        check_dim(params, &term.feature)?;
        let u = &term.label.probs;
        if u.len() != rows {
            return Err(Error::Dimension { what: "soft label", expected: rows, actual: u.len() });
        }
        let a = params.activations(&term.feature);
        let logv = log_softmax(&a.cls_logits);
        let mass: f64 = u.iter().sum();
        for c in 0..rows {
            if u[c] > 0.0 {
                let lv = if logv[c] < ln_eps {
                    out.clamped += 1;
                    ln_eps
                } else {
                    logv[c]
                };
                out.value += u[c] * (u[c].ln() - lv) / m;
            }
        }
        let v = softmax(&a.cls_logits);
        for c in 0..rows {
            d_logits[c] = (v[c] * mass - u[c]) / m;
        }
        accumulate(&mut out.grads, &term.feature, 0.0, &d_logits, &[0.0; 4], &[0.0; 4]);
    }
    Ok(out)
}

/// `l_sup + lambda1 * l_unsup + lambda2 * l_kl`, and the same combination
/// of gradients.
pub fn l_total(
    sup: &SupLoss,
    unsup: &UnsupLoss,
    kl: &KlLoss,
    weights: &LossWeights,
) -> Result<(LossBreakdown, DetectorParams)> {
    let l_sup = sup.parts.total();
    let l_unsup = unsup.parts.total();
    let breakdown = LossBreakdown {
        l_sup,
        l_unsup,
        l_kl: kl.value,
        l_total: l_sup + weights.lambda1 * l_unsup + weights.lambda2 * kl.value,
        sup: sup.parts,
        unsup: unsup.parts,
        kl_clamped: kl.clamped,
    };
    let mut grads = sup.grads.clone();
    grads.add_scaled(&unsup.grads, weights.lambda1)?;
    grads.add_scaled(&kl.grads, weights.lambda2)?;
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detection;
    use crate::worldgen::{BBox, GroundTruthObject};

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn empty_batch_is_zero() {
        let p = DetectorParams::zeros(3, vec![0, 1]);
        let l = l_sup(&p, &[], 0.5).unwrap();
        assert_eq!(l.parts.total(), 0.0);
        assert_eq!(l.grads, p.zeros_like());
    }

    #[test]
    fn uniform_classifier_cross_entropy() {
        let p = DetectorParams::zeros(2, (0..19).collect());
        let scene = Scene {
            id: 0,
            objects: vec![GroundTruthObject { bbox: bx(0.1, 0.1, 0.5, 0.5), class_id: 4, latent_feature: vec![0.0; 2] }],
            proposals: vec![
                Proposal { bbox: bx(0.1, 0.1, 0.5, 0.5), feature: vec![1.0, 0.0], parent: Some(0) },
                Proposal { bbox: bx(0.7, 0.7, 0.9, 0.9), feature: vec![0.0, 1.0], parent: None },
            ],
        };
        let l = l_sup(&p, &[scene], 0.5).unwrap();
        assert!((l.parts.roi_cls - 20f64.ln()).abs() < 1e-12);
        assert!((l.parts.roi_cls - 2.9957).abs() < 1e-4);
        assert!((l.parts.rpn_cls - 2f64.ln()).abs() < 1e-12);
        // deltas are zero and the proposal equals the gt
        assert_eq!(l.parts.rpn_reg, 0.0);
        assert_eq!(l.parts.roi_reg, 0.0);
    }

    #[test]
    fn confident_correct_predictor_has_small_loss() {
        let mut p = DetectorParams::zeros(2, vec![0]);
        p.w_obj = vec![40.0, -40.0];
        p.w_cls = vec![40.0, -40.0, -40.0, 40.0];
        let scene = Scene {
            id: 0,
            objects: vec![GroundTruthObject { bbox: bx(0.1, 0.1, 0.5, 0.5), class_id: 0, latent_feature: vec![0.0; 2] }],
            proposals: vec![
                Proposal { bbox: bx(0.1, 0.1, 0.5, 0.5), feature: vec![1.0, 0.0], parent: Some(0) },
                Proposal { bbox: bx(0.7, 0.7, 0.9, 0.9), feature: vec![0.0, 1.0], parent: None },
            ],
        };
        let l = l_sup(&p, &[scene], 0.5).unwrap();
        assert!(l.parts.rpn_cls < 1e-15 && l.parts.roi_cls < 1e-15);
        assert_eq!(l.parts.rpn_reg + l.parts.roi_reg, 0.0);
    }

    #[test]
    fn empty_pseudo_set_is_zero() {
        let p = DetectorParams::zeros(2, vec![0]);
        let scene = Scene {
            id: 0,
            objects: vec![],
            proposals: vec![Proposal { bbox: bx(0.1, 0.1, 0.5, 0.5), feature: vec![1.0, 0.0], parent: None }],
        };
        let l = l_unsup(&p, &[scene], &[PseudoLabelSet::default()], 0.5).unwrap();
        assert_eq!(l.parts.total(), 0.0);
        assert_eq!(l.grads, p.zeros_like());
    }

    #[test]
    fn unsup_never_touches_regression() {
        let mut p = DetectorParams::zeros(2, vec![0, 1]);
        p.w_reg = vec![0.3; 8];
        p.w_rpn_reg = vec![-0.2; 8];
        let b = bx(0.1, 0.1, 0.5, 0.5);
        let scene = Scene {
            id: 0,
            objects: vec![],
            proposals: vec![
                Proposal { bbox: b, feature: vec![1.0, 0.5], parent: None },
                Proposal { bbox: bx(0.6, 0.6, 0.9, 0.9), feature: vec![-0.3, 0.5], parent: None },
            ],
        };
        let pseudo = PseudoLabelSet {
            hard: vec![Detection { bbox: b, class_id: 1, score: 0.95, feature: vec![1.0, 0.5], proposal: 0 }],
            ..Default::default()
        };
        let l = l_unsup(&p, &[scene], &[pseudo], 0.5).unwrap();
        assert!(l.parts.total() > 0.0);
        assert!(l.grads.w_reg.iter().chain(&l.grads.w_rpn_reg).all(|&g| g == 0.0));
        assert!(l.grads.b_reg.iter().chain(&l.grads.b_rpn_reg).all(|&g| g == 0.0));
    }

    #[test]
    fn kl_cases() {
        // v = u gives zero divergence
        let mut p = DetectorParams::zeros(1, vec![0, 1]);
        p.b_cls = vec![0.9f64.ln(), 0.1f64.ln(), f64::NEG_INFINITY];
        p.b_cls[2] = -800.0;
        let u = SoftLabel { probs: vec![0.9, 0.1, 0.0] };
        let l = l_kl(&p, &[KlTerm { feature: vec![0.0], label: u }]).unwrap();
        assert!(l.value.abs() < 1e-12);

        let u = SoftLabel { probs: vec![0.5, 0.5, 0.0] };
        let l = l_kl(&p, &[KlTerm { feature: vec![0.0], label: u }]).unwrap();
        let hand = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((l.value - hand).abs() < 1e-12);
        assert!((l.value - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_clamps_vanishing_probabilities() {
        let mut p = DetectorParams::zeros(1, vec![0, 1]);
        p.b_cls = vec![0.0, -100.0, 0.0];
        let u = SoftLabel { probs: vec![0.5, 0.5, 0.0] };
        let l = l_kl(&p, &[KlTerm { feature: vec![0.0], label: u }]).unwrap();
        assert_eq!(l.clamped, 1);
        assert!(l.value.is_finite());
    }

    #[test]
    fn total_weights() {
        let p = DetectorParams::zeros(1, vec![0]);
        let mut sup = SupLoss::zero(&p);
        sup.parts.roi_cls = 1.0;
        let mut unsup = UnsupLoss::zero(&p);
        unsup.parts.roi_cls = 2.0;
        let mut kl = KlLoss::zero(&p);
        kl.value = 3.0;
        let (b, _) = l_total(&sup, &unsup, &kl, &LossWeights::default()).unwrap();
        assert!((b.l_total - 2.3).abs() < 1e-12);
        let (b, _) = l_total(&sup, &unsup, &kl, &LossWeights { lambda1: 0.0, lambda2: 0.0 }).unwrap();
        assert_eq!(b.l_total, b.l_sup);
    }
}
