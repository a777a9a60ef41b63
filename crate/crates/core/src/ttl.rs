//! The three training stages: base training, few-shot fine-tuning and
//! mean-teacher test-time learning.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detector::{Detection, DetectorParams};
use crate::error::{Error, Result};
use crate::eval::{MetricsReport, ScenePredictions};
use crate::losses::{l_kl, l_sup, l_total, l_unsup, KlLoss, KlTerm, LossBreakdown, LossWeights, SupLoss};
use crate::postprocess::{nms_class_agnostic, partition_pseudo, PseudoLabelSet, ThresholdConfig};
use crate::prototypes::{init_prototypes, PrototypeMode, PrototypeStore};
use crate::worldgen::{ClassId, Scene};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Fine-tune over the whole stream, then re-predict it with the final teacher.
    #[default]
    OneEpoch,
    /// Predict each batch with the current teacher, then update on it.
    OneBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtlConfig {
    pub delta_upper: f64,
    pub delta_lower: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub ema_alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub strategy: Strategy,
    pub epochs: usize,
    pub seed: u64,
    /// Gaussian noise added to proposal features during adaptation.
    pub feature_jitter_sigma: f64,
    /// Include the balanced-set supervised loss.
    pub use_sup: bool,
    pub prototype_mode: PrototypeMode,
    pub soft_label_temperature: f64,
    /// Detections scoring below this are dropped at inference.
    pub score_floor: f64,
    /// Number of evenly spaced teacher snapshots kept during the run.
    pub eval_checkpoints: usize,
}

impl Default for TtlConfig {
    fn default() -> Self {
        TtlConfig {
            delta_upper: 0.9,
            delta_lower: 0.7,
            lambda1: 0.5,
            lambda2: 0.1,
            ema_alpha: 0.9996,
            lr: 0.00125,
            batch_size: 2,
            nms_iou: 0.5,
            match_iou: 0.5,
            strategy: Strategy::OneEpoch,
            epochs: 1,
            seed: 0,
            feature_jitter_sigma: 0.0,
            use_sup: true,
            prototype_mode: PrototypeMode::Cumulative,
            soft_label_temperature: 0.1,
            score_floor: 0.05,
            eval_checkpoints: 0,
        }
    }
}

impl TtlConfig {
    pub fn thresholds(&self) -> ThresholdConfig {
        ThresholdConfig { delta_upper: self.delta_upper, delta_lower: self.delta_lower, nms_iou: self.nms_iou }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2 }
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds().validate()?;
        self.weights().validate()?;
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha must lie in [0, 1], got {}", self.ema_alpha)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            return Err(Error::Config(format!("match_iou must lie in (0, 1], got {}", self.match_iou)));
        }
        if !(self.feature_jitter_sigma >= 0.0 && self.feature_jitter_sigma.is_finite()) {
            return Err(Error::Config("feature_jitter_sigma must be finite and >= 0".into()));
        }
        if !(self.soft_label_temperature > 0.0 && self.soft_label_temperature.is_finite()) {
            return Err(Error::Config("soft_label_temperature must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::Config(format!("score_floor must lie in [0, 1), got {}", self.score_floor)));
        }
        Ok(())
    }
}

/// Settings for the two supervised stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Half-width of the uniform initialization.
    pub init_scale: f64,
    pub base_epochs: usize,
    pub base_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub match_iou: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            init_scale: 0.01,
            base_epochs: 30,
            base_lr: 0.0009,
            finetune_epochs: 3000,
            finetune_lr: 0.00027,
            batch_size: 2,
            match_iou: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        for (name, lr) in [("base_lr", self.base_lr), ("finetune_lr", self.finetune_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            return Err(Error::Config(format!("match_iou must lie in (0, 1], got {}", self.match_iou)));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Minibatch SGD on the supervised loss with a fresh shuffle per epoch.
#[allow(clippy::too_many_arguments)]
fn fit(
    mut params: DetectorParams,
    scenes: &[Scene],
    epochs: usize,
    lr: f64,
    batch: usize,
    match_iou: f64,
    rng: &mut ChaCha8Rng,
    stage: &'static str,
) -> Result<DetectorParams> {
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            step += 1;
            let loss = l_sup(&params, chunk.iter().map(|&i| &scenes[i]), match_iou)?;
            if !loss.parts.total().is_finite() {
                return Err(Error::Diverged { stage, step, last_finite: Box::new(params) });
            }
            let prev = params.clone();
            params.sgd_step(&loss.grads, lr)?;
            if !params.is_finite() {
                return Err(Error::Diverged { stage, step, last_finite: Box::new(prev) });
            }
        }
    }
    Ok(params)
}

fn check_labels(scenes: &[Scene], classes: &[ClassId]) -> Result<()> {
    for s in scenes {
        if let Some(o) = s.objects.iter().find(|o| !classes.contains(&o.class_id)) {
            return Err(Error::UnknownClass(o.class_id));
        }
    }
    Ok(())
}

/// M_init -> M_base: a seeded random detector trained on base classes only.
pub fn train_base(cfg: &TrainConfig, d_base: &[Scene], base_classes: &[ClassId], dim: usize) -> Result<DetectorParams> {
    cfg.validate()?;
    if d_base.is_empty() {
        return Err(Error::Config("base training set is empty".into()));
    }
    check_labels(d_base, base_classes)?;
    let mut rng = stream_rng(cfg.seed, 10);
    let init = DetectorParams::random(dim, base_classes.to_vec(), cfg.init_scale, &mut rng);
    fit(init, d_base, cfg.base_epochs, cfg.base_lr, cfg.batch_size, cfg.match_iou, &mut rng, "base training")
}

/// M_base -> M_novel: zero-initialized novel rows, then all heads tuned on
/// the balanced set.
pub fn finetune_novel(
    cfg: &TrainConfig,
    m_base: &DetectorParams,
    d_balanced: &[Scene],
    novel_classes: &[ClassId],
) -> Result<DetectorParams> {
    cfg.validate()?;
    if d_balanced.is_empty() {
        return Err(Error::Config("balanced set is empty".into()));
    }
    let params = m_base.extend_classes(novel_classes)?;
    check_labels(d_balanced, &params.classes)?;
    let mut rng = stream_rng(cfg.seed, 11);
    fit(params, d_balanced, cfg.finetune_epochs, cfg.finetune_lr, cfg.batch_size, cfg.match_iou, &mut rng, "fine-tuning")
}

/// `teacher = alpha * teacher + (1 - alpha) * student`, element-wise.
pub fn ema_update(teacher: &mut DetectorParams, student: &DetectorParams, alpha: f64) -> Result<()> {
    teacher.check_same_shape(student)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ema_alpha must lie in [0, 1], got {alpha}")));
    }
    for ((_, t), (_, s)) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        t.iter_mut().zip(s).for_each(|(x, y)| *x = alpha * *x + (1.0 - alpha) * y);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub scene_ids: Vec<u64>,
    pub balanced_ids: Vec<u64>,
    pub loss: LossBreakdown,
    pub hard: usize,
    pub implicit: usize,
    /// Implicit candidates left after class-agnostic suppression.
    pub implicit_kept: usize,
    pub discarded: usize,
    pub prototype_hash: String,
    pub teacher_hash: String,
    pub student_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<IterationRecord>,
    pub report: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub teacher: DetectorParams,
}

#[derive(Clone, Debug)]
pub struct TtlOutcome {
    pub teacher: DetectorParams,
    pub student: DetectorParams,
    pub prototypes: PrototypeStore,
    /// One entry per test scene, in stream order.
    pub predictions: Vec<ScenePredictions>,
    pub log: RunLog,
    pub snapshots: Vec<Snapshot>,
}

/// Frozen inference over a scene list.
pub fn predict(params: &DetectorParams, scenes: &[Scene], score_floor: f64, nms_iou: f64) -> Result<Vec<ScenePredictions>> {
    scenes
        .iter()
        .map(|s| Ok(ScenePredictions { scene_id: s.id, detections: params.detect(s, score_floor, nms_iou)? }))
        .collect()
}

/// K-shot prototypes from the ground-truth features of the balanced set.
pub fn balanced_prototypes(classes: &[ClassId], d_balanced: &[Scene]) -> Result<PrototypeStore> {
    let mut instances: BTreeMap<ClassId, Vec<Vec<f64>>> = BTreeMap::new();
    for o in d_balanced.iter().flat_map(|s| &s.objects) {
        instances.entry(o.class_id).or_default().push(o.latent_feature.clone());
    }
    let shots = classes.first().and_then(|c| instances.get(c)).map_or(0, Vec::len);
    init_prototypes(classes, &instances, shots)
}

fn jittered<'a>(scenes: &'a [Scene], sigma: f64, rng: &mut ChaCha8Rng) -> Cow<'a, [Scene]> {
    if sigma == 0.0 {
        return Cow::Borrowed(scenes);
    }
    let mut out = scenes.to_vec();
    for p in out.iter_mut().flat_map(|s| s.proposals.iter_mut()) {
        for x in &mut p.feature {
            let z: f64 = rng.sample(StandardNormal);
            *x += sigma * z;
        }
    }
    Cow::Owned(out)
}

fn snapshot_iterations(total: usize, k: usize) -> Vec<usize> {
    let mut its: Vec<usize> = (1..=k).map(|j| (total * j).div_ceil(k)).filter(|&i| i > 0).collect();
    its.dedup();
    its
}

/// Mean-teacher test-time learning.
///
/// Each iteration takes one test batch: the teacher predicts it, the
/// predictions split into hard pseudo-labels and implicit candidates, the
/// student takes one SGD step on the supervised loss (a sampled balanced
/// batch), the pseudo-label loss and the prototype KL term, and the teacher
/// follows by EMA.
pub fn run_ttl(m_novel: &DetectorParams, d_test: &[Scene], d_balanced: &[Scene], cfg: &TtlConfig) -> Result<TtlOutcome> {
    cfg.validate()?;
    if cfg.use_sup && d_balanced.is_empty() {
        return Err(Error::Config("supervised term needs a non-empty balanced set".into()));
    }
    let thresholds = cfg.thresholds();
    let weights = cfg.weights();
    let mut student = m_novel.clone();
    let mut teacher = m_novel.clone();
    let mut prototypes = balanced_prototypes(&m_novel.classes, d_balanced)?;
    let mut bal_rng = stream_rng(cfg.seed, 1);
    let mut jit_rng = stream_rng(cfg.seed, 2);

    let per_epoch = d_test.len().div_ceil(cfg.batch_size);
    let checkpoints = snapshot_iterations(per_epoch * cfg.epochs, cfg.eval_checkpoints);
    let mut snapshots = Vec::new();
    let mut records = Vec::with_capacity(per_epoch * cfg.epochs);
    let mut predictions = Vec::new();
    let mut iteration = 0;

    for epoch in 0..cfg.epochs {
        let record_stream = cfg.strategy == Strategy::OneBatch && epoch + 1 == cfg.epochs;
        for chunk in d_test.chunks(cfg.batch_size) {
            iteration += 1;
            if record_stream {
                predictions.extend(predict(&teacher, chunk, cfg.score_floor, cfg.nms_iou)?);
            }
            let batch = jittered(chunk, cfg.feature_jitter_sigma, &mut jit_rng);

            let mut pseudo: Vec<PseudoLabelSet> = Vec::with_capacity(batch.len());
            let mut kl_features: Vec<Vec<f64>> = Vec::new();
            let mut high_conf: Vec<Detection> = Vec::new();
            let (mut n_implicit, mut n_kept, mut n_discarded) = (0, 0, 0);
            for s in batch.iter() {
                let dets = teacher.detect(s, cfg.score_floor, cfg.nms_iou)?;
                let set = partition_pseudo(&dets, &thresholds)?;
                let kept = nms_class_agnostic(&set.implicit, &set.hard, cfg.nms_iou);
                n_implicit += set.implicit.len();
                n_kept += kept.len();
                n_discarded += set.discarded_count;
                high_conf.extend(set.hard.iter().cloned());
                kl_features.extend(kept.into_iter().map(|c| c.feature));
                pseudo.push(set);
            }

            let picked: Vec<&Scene> = if d_balanced.is_empty() {
                Vec::new()
            } else {
                let n = cfg.batch_size.min(d_balanced.len());
                index::sample(&mut bal_rng, d_balanced.len(), n).into_iter().map(|i| &d_balanced[i]).collect()
            };
            let sup = if cfg.use_sup {
                l_sup(&student, picked.iter().copied(), cfg.match_iou)?
            } else {
                SupLoss::zero(&student)
            };
            let unsup = l_unsup(&student, &batch, &pseudo, cfg.match_iou)?;

            prototypes.batch_update(&high_conf, &[], cfg.prototype_mode)?;
            let terms = kl_features
                .into_iter()
                .map(|feature| {
                    let label = prototypes.make_soft_label(&feature, cfg.soft_label_temperature)?;
                    Ok(KlTerm { feature, label })
                })
                .collect::<Result<Vec<_>>>()?;
            let kl = if terms.is_empty() { KlLoss::zero(&student) } else { l_kl(&student, &terms)? };

            let (loss, grads) = l_total(&sup, &unsup, &kl, &weights)?;
            let diverged = || Error::Diverged { stage: "test-time learning", step: iteration, last_finite: Box::new(teacher.clone()) };
            if !loss.l_total.is_finite() {
                return Err(diverged());
            }
            match student.sgd_step(&grads, cfg.lr) {
                Err(Error::NonFiniteGradient(_)) => return Err(diverged()),
                r => r?,
            }
            if !student.is_finite() {
                return Err(diverged());
            }
            ema_update(&mut teacher, &student, cfg.ema_alpha)?;

            records.push(IterationRecord {
                iteration,
                epoch: epoch + 1,
                scene_ids: chunk.iter().map(|s| s.id).collect(),
                balanced_ids: picked.iter().map(|s| s.id).collect(),
                loss,
                hard: high_conf.len(),
                implicit: n_implicit,
                implicit_kept: n_kept,
                discarded: n_discarded,
                prototype_hash: prototypes.fingerprint(),
                teacher_hash: teacher.fingerprint(),
                student_hash: student.fingerprint(),
            });
            if checkpoints.contains(&iteration) {
                snapshots.push(Snapshot { iteration, teacher: teacher.clone() });
            }
        }
    }
    if cfg.strategy == Strategy::OneEpoch {
        predictions = predict(&teacher, d_test, cfg.score_floor, cfg.nms_iou)?;
    }
    Ok(TtlOutcome {
        teacher,
        student,
        prototypes,
        predictions,
        log: RunLog { records, report: None },
        snapshots,
    })
}
