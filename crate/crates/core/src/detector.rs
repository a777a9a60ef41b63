//! Toy two-stage detector over proposal features.
//!
//! Four linear heads read the proposal feature `F`:
//! an objectness logit and a class-agnostic proposal refinement (the RPN
//! analog), and an `(N+1)`-way softmax classifier plus a class-agnostic box
//! regressor (the RoI analog). Row `N` of the classifier is background.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{iou, nms_class_specific};
use crate::worldgen::{BBox, ClassId, GroundTruthObject, Proposal, Scene};

/// Box deltas `(dx, dy, dlog w, dlog h)`.
pub type Deltas = [f64; 4];

/// Upper clamp for log-size deltas when decoding, ln(1000/16).
pub const LOG_SIZE_CLAMP: f64 = 4.135_166_556_742_356;

pub const TENSOR_NAMES: [&str; 8] =
    ["w_obj", "b_obj", "w_rpn_reg", "b_rpn_reg", "w_cls", "b_cls", "w_reg", "b_reg"];

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub dim: usize,
    /// Class id of each foreground classifier row.
    pub classes: Vec<ClassId>,
    pub w_obj: Vec<f64>,
    pub b_obj: f64,
    /// 4 x dim, row-major.
    pub w_rpn_reg: Vec<f64>,
    pub b_rpn_reg: Deltas,
    /// (N + 1) x dim, row-major; last row is background.
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    /// 4 x dim, row-major.
    pub w_reg: Vec<f64>,
    pub b_reg: Deltas,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub objectness: f64,
    pub class_probs: Vec<f64>,
    pub rpn_deltas: Deltas,
    pub roi_deltas: Deltas,
}

/// Raw head outputs before the logistic and softmax squashing.
#[derive(Clone, Debug)]
pub(crate) struct Activations {
    pub obj_logit: f64,
    pub cls_logits: Vec<f64>,
    pub rpn_deltas: Deltas,
    pub roi_deltas: Deltas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: ClassId,
    pub score: f64,
    pub feature: Vec<f64>,
    /// Index of the source proposal within its scene.
    pub proposal: usize,
}

impl std::fmt::Debug for DetectorParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DetectorParams")
            .field("dim", &self.dim)
            .field("classes", &self.classes)
            .field("fingerprint", &self.fingerprint())
            .finish()
    }
}

impl DetectorParams {
    pub fn zeros(dim: usize, classes: Vec<ClassId>) -> Self {
        let rows = classes.len() + 1;
        DetectorParams {
            dim,
            w_obj: vec![0.0; dim],
            b_obj: 0.0,
            w_rpn_reg: vec![0.0; 4 * dim],
            b_rpn_reg: [0.0; 4],
            w_cls: vec![0.0; rows * dim],
            b_cls: vec![0.0; rows],
            w_reg: vec![0.0; 4 * dim],
            b_reg: [0.0; 4],
            classes,
        }
    }

    /// Weights uniform in `[-scale, scale]`, biases zero.
    pub fn random(dim: usize, classes: Vec<ClassId>, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dim, classes);
        if scale > 0.0 {
            for w in [&mut p.w_obj, &mut p.w_rpn_reg, &mut p.w_cls, &mut p.w_reg] {
                w.iter_mut().for_each(|x| *x = rng.random_range(-scale..=scale));
            }
        }
        p
    }

    /// Same shape, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim, self.classes.clone())
    }

    /// Number of foreground classes `N`.
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn row_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 8] {
        [
            (TENSOR_NAMES[0], &self.w_obj),
            (TENSOR_NAMES[1], std::slice::from_ref(&self.b_obj)),
            (TENSOR_NAMES[2], &self.w_rpn_reg),
            (TENSOR_NAMES[3], &self.b_rpn_reg),
            (TENSOR_NAMES[4], &self.w_cls),
            (TENSOR_NAMES[5], &self.b_cls),
            (TENSOR_NAMES[6], &self.w_reg),
            (TENSOR_NAMES[7], &self.b_reg),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 8] {
        [
            (TENSOR_NAMES[0], &mut self.w_obj),
            (TENSOR_NAMES[1], std::slice::from_mut(&mut self.b_obj)),
            (TENSOR_NAMES[2], &mut self.w_rpn_reg),
            (TENSOR_NAMES[3], &mut self.b_rpn_reg),
            (TENSOR_NAMES[4], &mut self.w_cls),
            (TENSOR_NAMES[5], &mut self.b_cls),
            (TENSOR_NAMES[6], &mut self.w_reg),
            (TENSOR_NAMES[7], &mut self.b_reg),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Errors unless `other` has the same dimension and label space.
    pub fn check_same_shape(&self, other: &DetectorParams) -> Result<()> {
        if self.dim != other.dim || self.classes != other.classes {
            return Err(Error::Shape(format!(
                "dim {} classes {:?} vs dim {} classes {:?}",
                self.dim, self.classes, other.dim, other.classes
            )));
        }
        for ((name, a), (_, b)) in self.tensors().iter().zip(other.tensors().iter()) {
            if a.len() != b.len() {
                return Err(Error::Shape(format!("{name}: {} vs {}", a.len(), b.len())));
            }
        }
        Ok(())
    }

    fn check_layout(&self) -> std::result::Result<(), String> {
        let rows = self.classes.len() + 1;
        let expect = [
            self.dim,
            1,
            4 * self.dim,
            4,
            rows * self.dim,
            rows,
            4 * self.dim,
            4,
        ];
        for ((name, t), n) in self.tensors().iter().zip(expect) {
            if t.len() != n {
                return Err(format!("{name} has {} entries, expected {n}", t.len()));
            }
        }
        if !self.is_finite() {
            return Err("non-finite parameter".into());
        }
        Ok(())
    }

    /// Appends zero-initialized classifier rows for `novel`, keeping
    /// background last.
    pub fn extend_classes(&self, novel: &[ClassId]) -> Result<Self> {
        let mut classes = self.classes.clone();
        for &c in novel {
            if classes.contains(&c) {
                return Err(Error::Config(format!("class {c} already in the label space")));
            }
            classes.push(c);
        }
        let d = self.dim;
        let n_old = self.classes.len();
        let mut w_cls = self.w_cls[..n_old * d].to_vec();
        w_cls.extend(std::iter::repeat_n(0.0, novel.len() * d));
        w_cls.extend_from_slice(&self.w_cls[n_old * d..]);
        let mut b_cls = self.b_cls[..n_old].to_vec();
        b_cls.extend(std::iter::repeat_n(0.0, novel.len()));
        b_cls.push(self.b_cls[n_old]);
        Ok(DetectorParams { classes, w_cls, b_cls, ..self.clone() })
    }

    fn check_feature(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim {
            return Err(Error::Dimension { what: "proposal feature", expected: self.dim, actual: f.len() });
        }
        Ok(())
    }

    pub(crate) fn activations(&self, f: &[f64]) -> Activations {
        let d = self.dim;
        let obj_logit = dot(&self.w_obj, f) + self.b_obj;
        let cls_logits = self
            .b_cls
            .iter()
            .enumerate()
            .map(|(r, b)| dot(&self.w_cls[r * d..(r + 1) * d], f) + b)
            .collect();
        let mut rpn_deltas = self.b_rpn_reg;
        let mut roi_deltas = self.b_reg;
        for k in 0..4 {
            rpn_deltas[k] += dot(&self.w_rpn_reg[k * d..(k + 1) * d], f);
            roi_deltas[k] += dot(&self.w_reg[k * d..(k + 1) * d], f);
        }
        Activations { obj_logit, cls_logits, rpn_deltas, roi_deltas }
    }

    /// Softmax class probabilities for one feature.
    pub fn class_probs(&self, feature: &[f64]) -> Result<Vec<f64>> {
        self.check_feature(feature)?;
        Ok(softmax(&self.activations(feature).cls_logits))
    }

    pub fn forward_one(&self, feature: &[f64]) -> Result<HeadOutputs> {
        self.check_feature(feature)?;
        let a = self.activations(feature);
        Ok(HeadOutputs {
            objectness: sigmoid(a.obj_logit),
            class_probs: softmax(&a.cls_logits),
            rpn_deltas: a.rpn_deltas,
            roi_deltas: a.roi_deltas,
        })
    }

    pub fn forward(&self, proposals: &[Proposal]) -> Result<Vec<HeadOutputs>> {
        proposals.iter().map(|p| self.forward_one(&p.feature)).collect()
    }

    /// Runs the full inference path on one scene: refine every proposal
    /// with the proposal deltas, decode the RoI deltas on top, score by the
    /// best foreground probability, drop scores below `score_floor` and
    /// apply class-specific NMS. Sorted by descending score.
    pub fn detect(&self, scene: &Scene, score_floor: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let n = self.num_classes();
        let mut dets = Vec::with_capacity(scene.proposals.len());
        if n == 0 {
            return Ok(dets);
        }
        for (i, p) in scene.proposals.iter().enumerate() {
            let out = self.forward_one(&p.feature)?;
            let (row, score) = argmax(&out.class_probs[..n]);
            if score < score_floor {
                continue;
            }
            let refined = apply_deltas(&BoxGeom::from(&p.bbox), &out.rpn_deltas);
            let bbox = apply_deltas(&refined, &out.roi_deltas).to_bbox_clipped();
            dets.push(Detection { bbox, class_id: self.classes[row], score, feature: p.feature.clone(), proposal: i });
        }
        Ok(nms_class_specific(&dets, nms_iou))
    }

    /// Plain SGD: `theta -= lr * grad` for every tensor.
    pub fn sgd_step(&mut self, grads: &DetectorParams, lr: f64) -> Result<()> {
        self.check_same_shape(grads)?;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        for (name, g) in grads.tensors() {
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        for ((_, t), (_, g)) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            t.iter_mut().zip(g).for_each(|(x, gx)| *x -= lr * gx);
        }
        Ok(())
    }

    /// `self += scale * other`, element-wise.
    pub fn add_scaled(&mut self, other: &DetectorParams, scale: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for ((_, t), (_, o)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            t.iter_mut().zip(o).for_each(|(x, y)| *x += scale * y);
        }
        Ok(())
    }

    /// 64-bit FNV-1a digest of the parameter bits, for run logs.
    pub fn fingerprint(&self) -> String {
        let mut h = Fnv::default();
        for c in &self.classes {
            h.write(&(*c as u64).to_le_bytes());
        }
        for (_, t) in self.tensors() {
            for x in t {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        format!("{:016x}", h.0)
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `log(softmax(logits))` without forming the probabilities first.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Center/size form of a box; may leave the unit square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxGeom {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<&BBox> for BoxGeom {
    fn from(b: &BBox) -> Self {
        let (cx, cy) = b.center();
        BoxGeom { cx, cy, w: b.width(), h: b.height() }
    }
}

impl BoxGeom {
    /// Corner form without clipping.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)
    }

    /// Clips into the unit square, keeping a positive extent.
    pub fn to_bbox_clipped(&self) -> BBox {
        const EPS: f64 = 1e-6;
        let (x1, y1, x2, y2) = self.corners();
        let clip = |lo: f64, hi: f64| {
            let a = if lo.is_finite() { lo.clamp(0.0, 1.0 - EPS) } else { 0.0 };
            let b = if hi.is_finite() { hi.clamp(a + EPS, 1.0) } else { 1.0 };
            (a, b)
        };
        let (x1, x2) = clip(x1, x2);
        let (y1, y2) = clip(y1, y2);
        BBox { x1, y1, x2, y2 }
    }
}

/// Deltas that move `reference` onto `target`.
pub fn encode(target: &BoxGeom, reference: &BoxGeom) -> Deltas {
    [
        (target.cx - reference.cx) / reference.w,
        (target.cy - reference.cy) / reference.h,
        (target.w / reference.w).ln(),
        (target.h / reference.h).ln(),
    ]
}

/// Inverse of [`encode`]; log-size deltas are clamped at [`LOG_SIZE_CLAMP`].
pub fn apply_deltas(reference: &BoxGeom, d: &Deltas) -> BoxGeom {
    BoxGeom {
        cx: reference.cx + d[0] * reference.w,
        cy: reference.cy + d[1] * reference.h,
        w: reference.w * d[2].min(LOG_SIZE_CLAMP).exp(),
        h: reference.h * d[3].min(LOG_SIZE_CLAMP).exp(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Background,
    Foreground {
        /// Index of the matched box among the targets.
        matched: usize,
        class_id: ClassId,
        gt: BoxGeom,
        /// Deltas from the proposal to the matched box.
        deltas: Deltas,
    },
}

impl Target {
    pub fn is_foreground(&self) -> bool {
        matches!(self, Target::Foreground { .. })
    }
}

/// Matches every proposal to its highest-IoU box when that IoU reaches
/// `match_iou`; ties go to the lowest box index.
pub fn assign_targets(proposals: &[Proposal], boxes: &[(BBox, ClassId)], match_iou: f64) -> Vec<Target> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (b, _)) in boxes.iter().enumerate() {
                let v = iou(&p.bbox, b);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= match_iou => {
                    let gt = BoxGeom::from(&boxes[j].0);
                    Target::Foreground {
                        matched: j,
                        class_id: boxes[j].1,
                        gt,
                        deltas: encode(&gt, &BoxGeom::from(&p.bbox)),
                    }
                }
                _ => Target::Background,
            }
        })
        .collect()
}

pub fn assign_labels(proposals: &[Proposal], gts: &[GroundTruthObject], match_iou: f64) -> Vec<Target> {
    let boxes: Vec<_> = gts.iter().map(|g| (g.bbox, g.class_id)).collect();
    assign_targets(proposals, &boxes, match_iou)
}

const CHECKPOINT_FORMAT: &str = "psttl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    dim: usize,
    num_classes: usize,
    params: DetectorParams,
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &DetectorParams) -> Result<()> {
    let path = path.as_ref();
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dim: params.dim,
        num_classes: params.num_classes(),
        params: params.clone(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &ckpt).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DetectorParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let ckpt: Checkpoint =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| parse_err(e.line(), e.to_string()))?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(parse_err(1, format!("unsupported format {} v{}", ckpt.format, ckpt.version)));
    }
    if ckpt.dim != ckpt.params.dim || ckpt.num_classes != ckpt.params.num_classes() {
        return Err(parse_err(1, "shape header disagrees with parameters".into()));
    }
    ckpt.params.check_layout().map_err(|m| parse_err(1, m))?;
    Ok(ckpt.params)
}
