//! Per-class feature prototypes and the soft labels derived from them.
//!
//! Prototypes start as the mean of the K-shot instance features and are
//! pulled towards fresh evidence by a similarity-gated convex step:
//! `P_new = (1 - s) * P_old + s * F_avg` with `s = (cos(P_old, F_avg) + 1) / 2`.
//! Soft labels are a softmax over the raw cosine similarities of a feature to
//! every prototype, with zero background mass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::{dot, softmax, Detection, Fnv};
use crate::error::{Error, Result};
use crate::worldgen::ClassId;

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

const SNAP: f64 = 4294967296.0;

fn snap(cos: f64) -> f64 {
    (cos * SNAP).round() / SNAP
}

/// Divides by `sqrt(|a|^2 |b|^2)` rather than `|a| |b|`: for `b = ±a` that
/// square root is exact, so parallel vectors give exactly ±1.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let denom = match (aa * bb).sqrt() {
        d if d.is_finite() && d > 0.0 => d,
        _ => aa.sqrt() * bb.sqrt(),
    };
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Cosine similarity mapped affinely into `[0, 1]`.
pub fn normalized_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok((cosine_sim(a, b)? + 1.0) / 2.0)
}

/// One gated update step. Returns the new prototype and the gate `s`.
pub fn update_prototype(p_old: &[f64], f_avg: &[f64]) -> Result<(Vec<f64>, f64)> {
    let s = normalized_sim(p_old, f_avg)?;
    let p_new = p_old.iter().zip(f_avg).map(|(p, f)| p * (1.0 - s) + f * s).collect();
    Ok((p_new, s))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    /// Prototypes stay at their K-shot initialization.
    Static,
    /// `F_avg` is the mean of the current batch's evidence.
    PerBatch,
    /// `F_avg` is the mean of all evidence seen so far.
    #[default]
    Cumulative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    /// `N` foreground entries followed by the background entry, which is 0.
    pub probs: Vec<f64>,
}

impl SoftLabel {
    pub fn argmax(&self) -> usize {
        let fg = &self.probs[..self.probs.len() - 1];
        let mut best = 0;
        for (i, &x) in fg.iter().enumerate() {
            if x > fg[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    /// Same order as the detector's foreground classifier rows.
    classes: Vec<ClassId>,
    vectors: Vec<Vec<f64>>,
    update_counts: Vec<u64>,
    evidence_sum: Vec<Vec<f64>>,
    evidence_count: Vec<usize>,
}

/// Builds one prototype per class as the mean of exactly `shots` features.
pub fn init_prototypes(
    classes: &[ClassId],
    instances: &BTreeMap<ClassId, Vec<Vec<f64>>>,
    shots: usize,
) -> Result<PrototypeStore> {
    let mut vectors = Vec::with_capacity(classes.len());
    let mut dim = None;
    for &c in classes {
        let feats = instances.get(&c).filter(|v| !v.is_empty()).ok_or(Error::MissingClass(c))?;
        if feats.len() != shots {
            return Err(Error::ShotCount { class: c, expected: shots, actual: feats.len() });
        }
        let d = *dim.get_or_insert(feats[0].len());
        if let Some(f) = feats.iter().find(|f| f.len() != d) {
            return Err(Error::Dimension { what: "shot feature", expected: d, actual: f.len() });
        }
        let mean = mean_of(feats.iter().map(Vec::as_slice), d);
        if norm(&mean) == 0.0 || !mean.iter().all(|x| x.is_finite()) {
            return Err(Error::ZeroPrototype(c));
        }
        vectors.push(mean);
    }
    let d = dim.unwrap_or(0);
    Ok(PrototypeStore {
        classes: classes.to_vec(),
        update_counts: vec![0; classes.len()],
        evidence_sum: vec![vec![0.0; d]; classes.len()],
        evidence_count: vec![0; classes.len()],
        vectors,
    })
}

fn mean_of<'a>(feats: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for f in feats {
        sum.iter_mut().zip(f).for_each(|(s, x)| *s += x);
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    sum
}

impl PrototypeStore {
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn prototype(&self, class: ClassId) -> Option<&[f64]> {
        self.index_of(class).map(|i| self.vectors[i].as_slice())
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn update_count(&self, class: ClassId) -> Option<u64> {
        self.index_of(class).map(|i| self.update_counts[i])
    }

    fn index_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Applies one gated update to `class`. A zero `f_avg` carries no
    /// evidence and leaves the store untouched.
    pub fn update(&mut self, class: ClassId, f_avg: &[f64]) -> Result<()> {
        let i = self.index_of(class).ok_or(Error::UnknownClass(class))?;
        if norm(f_avg) == 0.0 {
            return Ok(());
        }
        let (p_new, _) = update_prototype(&self.vectors[i], f_avg)?;
        self.vectors[i] = p_new;
        self.update_counts[i] += 1;
        Ok(())
    }

    /// Soft label over all foreground classes: `softmax(cos / temperature)`,
    /// background entry fixed at 0.
    ///
    /// Each cosine is snapped to a multiple of 2^-32 first. Rescaling a
    /// feature perturbs its cosines by an ulp or so, and the snap absorbs
    /// that, so the label does not depend on the feature's magnitude.
    pub fn make_soft_label(&self, feature: &[f64], temperature: f64) -> Result<SoftLabel> {
        let mut logits = Vec::with_capacity(self.vectors.len());
        for p in &self.vectors {
            logits.push(snap(cosine_sim(feature, p)?) / temperature);
        }
        let mut probs = softmax(&logits);
        probs.push(0.0);
        Ok(SoftLabel { probs })
    }

    /// Updates every class that has evidence in this batch: the features of
    /// high-confidence detections plus the supervised shot features.
    pub fn batch_update(
        &mut self,
        high_conf: &[Detection],
        shot_features: &[(ClassId, Vec<f64>)],
        mode: PrototypeMode,
    ) -> Result<()> {
        if mode == PrototypeMode::Static {
            return Ok(());
        }
        let mut evidence: BTreeMap<ClassId, Vec<&[f64]>> = BTreeMap::new();
        for d in high_conf {
            evidence.entry(d.class_id).or_default().push(&d.feature);
        }
        for (c, f) in shot_features {
            evidence.entry(*c).or_default().push(f);
        }
        for (class, feats) in evidence {
            let Some(i) = self.index_of(class) else { continue };
            let d = self.vectors[i].len();
            let f_avg = match mode {
                PrototypeMode::PerBatch => mean_of(feats.iter().copied(), d),
                _ => {
                    for f in &feats {
                        self.evidence_sum[i].iter_mut().zip(f.iter()).for_each(|(s, x)| *s += x);
                    }
                    self.evidence_count[i] += feats.len();
                    let n = self.evidence_count[i] as f64;
                    self.evidence_sum[i].iter().map(|s| s / n).collect()
                }
            };
            self.update(class, &f_avg)?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Fnv::default();
        for v in &self.vectors {
            for x in v {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        format!("{:016x}", h.0)
    }
}
