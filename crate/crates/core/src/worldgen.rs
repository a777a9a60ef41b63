//! Synthetic detection world.
//!
//! A scene is a handful of ground-truth boxes with latent class features plus
//! the proposals a region proposer would emit for it: a few jittered boxes
//! around every object and some background boxes that overlap no object.
//! Every proposal carries an observed feature vector, which is all the toy
//! detector ever looks at.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::iou;

pub type ClassId = usize;

/// Background proposals must overlap every object less than this.
pub const BACKGROUND_MAX_IOU: f64 = 0.3;

const JITTER_ATTEMPTS: usize = 2_000;
const BACKGROUND_ATTEMPTS: usize = 10_000;
const MEAN_ATTEMPTS: usize = 100_000;

/// Axis-aligned box in normalized scene coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.x1)
            && in_unit(self.y1)
            && in_unit(self.x2)
            && in_unit(self.y2)
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    /// Builds a box from center and size, clipped to the unit square.
    pub fn from_center_clipped(cx: f64, cy: f64, w: f64, h: f64) -> Option<Self> {
        let b = BBox {
            x1: (cx - 0.5 * w).max(0.0),
            y1: (cy - 0.5 * h).max(0.0),
            x2: (cx + 0.5 * w).min(1.0),
            y2: (cy + 0.5 * h).min(1.0),
        };
        b.is_valid().then_some(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub bbox: BBox,
    pub class_id: ClassId,
    pub latent_feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub feature: Vec<f64>,
    /// Index of the object this proposal was jittered from; `None` for
    /// background proposals. Generator bookkeeping only, never read by the
    /// detector.
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<GroundTruthObject>,
    pub proposals: Vec<Proposal>,
}

/// Scalar knobs of the world. Class means are derived from these by
/// [`GeneratorConfig::from_params`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub dim: usize,
    pub num_classes: usize,
    pub min_class_angle_deg: f64,
    pub feature_noise_sigma: f64,
    pub background_feature_sigma: f64,
    pub objects_per_scene: usize,
    pub proposals_per_gt: usize,
    pub background_proposals: usize,
    pub min_jitter_iou: f64,
    /// Multiplies every feature vector (class means and noise alike).
    pub feature_scale: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            dim: 16,
            num_classes: 20,
            min_class_angle_deg: 45.0,
            feature_noise_sigma: 0.35,
            background_feature_sigma: 0.2,
            objects_per_scene: 3,
            proposals_per_gt: 3,
            background_proposals: 6,
            min_jitter_iou: 0.75,
            feature_scale: 20.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub params: WorldParams,
    /// One unit-norm mean per class id.
    pub class_means: Vec<Vec<f64>>,
}

impl GeneratorConfig {
    /// Validates `params` and samples the class means from its seed.
    pub fn from_params(params: WorldParams) -> Result<Self> {
        validate_params(&params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(u64::MAX);
        let min_cos = params.min_class_angle_deg.to_radians().cos();
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(params.num_classes);
        let mut attempts = 0;
        while means.len() < params.num_classes {
            attempts += 1;
            if attempts > MEAN_ATTEMPTS {
                return Err(Error::Config(format!(
                    "cannot place {} class means {} degrees apart in {} dimensions",
                    params.num_classes, params.min_class_angle_deg, params.dim
                )));
            }
            let v = unit_gaussian(&mut rng, params.dim);
            if means.iter().all(|m| dot(m, &v) < min_cos) {
                means.push(v);
            }
        }
        Ok(GeneratorConfig { params, class_means: means })
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }
}

fn validate_params(p: &WorldParams) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(m.to_string()));
    if p.dim == 0 {
        return bad("dim must be positive");
    }
    if p.num_classes == 0 {
        return bad("num_classes must be positive");
    }
    if !(p.feature_noise_sigma >= 0.0 && p.feature_noise_sigma.is_finite()) {
        return bad("feature_noise_sigma must be finite and >= 0");
    }
    if !(p.background_feature_sigma >= 0.0 && p.background_feature_sigma.is_finite()) {
        return bad("background_feature_sigma must be finite and >= 0");
    }
    if !(p.feature_scale > 0.0 && p.feature_scale.is_finite()) {
        return bad("feature_scale must be finite and > 0");
    }
    if !(p.min_jitter_iou > 0.0 && p.min_jitter_iou < 1.0) {
        return bad("min_jitter_iou must lie in (0, 1)");
    }
    if !(p.min_class_angle_deg >= 0.0 && p.min_class_angle_deg < 180.0) {
        return bad("min_class_angle_deg must lie in [0, 180)");
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy(rng: &mut impl Rng, mean: Option<&[f64]>, p: &WorldParams, sigma: f64) -> Vec<f64> {
    (0..p.dim)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            p.feature_scale * (mean.map_or(0.0, |m| m[i]) + sigma * z)
        })
        .collect()
}

/// RNG for one scene: same seed and scene id always give the same stream.
pub fn scene_rng(seed: u64, scene_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_id);
    rng
}

pub fn generate_scene(cfg: &GeneratorConfig, scene_id: u64, class_pool: &[ClassId]) -> Result<Scene> {
    if class_pool.is_empty() {
        return Err(Error::EmptyClassPool);
    }
    if let Some(&c) = class_pool.iter().find(|&&c| c >= cfg.params.num_classes) {
        return Err(Error::UnknownClass(c));
    }
    let p = &cfg.params;
    let mut rng = scene_rng(p.seed, scene_id);

    let mut objects = Vec::with_capacity(p.objects_per_scene);
    for _ in 0..p.objects_per_scene {
        let class_id = class_pool[rng.random_range(0..class_pool.len())];
        let w = rng.random_range(0.15..0.4);
        let h = rng.random_range(0.15..0.4);
        let x1 = rng.random_range(0.0..1.0 - w);
        let y1 = rng.random_range(0.0..1.0 - h);
        let bbox = BBox::new(x1, y1, x1 + w, y1 + h)?;
        let latent_feature = noisy(&mut rng, Some(&cfg.class_means[class_id]), p, p.feature_noise_sigma);
        objects.push(GroundTruthObject { bbox, class_id, latent_feature });
    }

    let mut proposals =
        Vec::with_capacity(p.objects_per_scene * p.proposals_per_gt + p.background_proposals);
    for (gi, obj) in objects.iter().enumerate() {
        for _ in 0..p.proposals_per_gt {
            let bbox = jitter_box(&mut rng, &obj.bbox, p.min_jitter_iou);
            let feature = noisy(&mut rng, Some(&cfg.class_means[obj.class_id]), p, p.feature_noise_sigma);
            proposals.push(Proposal { bbox, feature, parent: Some(gi) });
        }
    }
    for _ in 0..p.background_proposals {
        let bbox = background_box(&mut rng, &objects).ok_or(Error::Placement {
            what: "background",
            scene: scene_id,
            attempts: BACKGROUND_ATTEMPTS,
        })?;
        let feature = noisy(&mut rng, None, p, p.background_feature_sigma);
        proposals.push(Proposal { bbox, feature, parent: None });
    }

    Ok(Scene { id: scene_id, objects, proposals })
}

fn jitter_box(rng: &mut impl Rng, gt: &BBox, min_iou: f64) -> BBox {
    let (cx, cy) = gt.center();
    let (w, h) = (gt.width(), gt.height());
    let mut scale = 0.3;
    for attempt in 0..JITTER_ATTEMPTS {
        if attempt > 0 && attempt % 100 == 0 {
            scale *= 0.7;
        }
        let ncx = cx + rng.random_range(-scale..scale) * w;
        let ncy = cy + rng.random_range(-scale..scale) * h;
        let nw = w * rng.random_range(-scale..scale).exp();
        let nh = h * rng.random_range(-scale..scale).exp();
        if let Some(b) = BBox::from_center_clipped(ncx, ncy, nw, nh) {
            if iou(&b, gt) >= min_iou {
                return b;
            }
        }
    }
    *gt
}

fn background_box(rng: &mut impl Rng, objects: &[GroundTruthObject]) -> Option<BBox> {
    for _ in 0..BACKGROUND_ATTEMPTS {
        let w = rng.random_range(0.05..0.4);
        let h = rng.random_range(0.05..0.4);
        let x1 = rng.random_range(0.0..1.0 - w);
        let y1 = rng.random_range(0.0..1.0 - h);
        let b = BBox { x1, y1, x2: x1 + w, y2: y1 + h };
        if b.is_valid() && objects.iter().all(|o| iou(&b, &o.bbox) < BACKGROUND_MAX_IOU) {
            return Some(b);
        }
    }
    None
}

/// Generates scenes `first_id .. first_id + count`.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    first_id: u64,
    count: usize,
    class_pool: &[ClassId],
) -> Result<Vec<Scene>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(cfg, first_id + i, class_pool))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: Vec<ClassId>,
    pub novel_classes: Vec<ClassId>,
    /// Shots per class in the balanced set.
    pub shots: usize,
    /// The last `test_scenes` scenes of the dataset are held out for testing.
    pub test_scenes: usize,
    /// Seeds shot selection and the test stream order.
    pub order_seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        let base: BTreeSet<_> = self.base_classes.iter().collect();
        if base.len() != self.base_classes.len() {
            return Err(Error::Config("duplicate base class".into()));
        }
        let novel: BTreeSet<_> = self.novel_classes.iter().collect();
        if novel.len() != self.novel_classes.len() {
            return Err(Error::Config("duplicate novel class".into()));
        }
        if let Some(c) = base.intersection(&novel).next() {
            return Err(Error::Config(format!("class {c} is both base and novel")));
        }
        if base.is_empty() {
            return Err(Error::Config("no base classes".into()));
        }
        Ok(())
    }

    /// Base classes followed by novel classes; the classifier row order.
    pub fn all_classes(&self) -> Vec<ClassId> {
        self.base_classes.iter().chain(&self.novel_classes).copied().collect()
    }

    pub fn is_novel(&self, class: ClassId) -> bool {
        self.novel_classes.contains(&class)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub base: Vec<Scene>,
    pub balanced: Vec<Scene>,
    /// Test scenes in stream order.
    pub test: Vec<Scene>,
    /// Scene ids of `test` in stream order (the recorded permutation).
    pub test_order: Vec<u64>,
}

/// Partitions `dataset` into the base-training, balanced few-shot and test sets.
///
/// The trailing `split.test_scenes` scenes are held out and shuffled into a
/// seeded stream order. Base training keeps the remaining scenes that contain
/// no novel object at all. The balanced set takes exactly `split.shots`
/// instances per class, scanning the remaining scenes in a seeded order; a
/// balanced scene keeps only its selected objects, their proposals and the
/// background proposals.
pub fn make_splits(dataset: &[Scene], split: &SplitSpec) -> Result<Splits> {
    split.validate()?;
    if split.test_scenes > dataset.len() {
        return Err(Error::Config(format!(
            "test_scenes {} exceeds dataset size {}",
            split.test_scenes,
            dataset.len()
        )));
    }
    let known: BTreeSet<ClassId> = split.all_classes().into_iter().collect();
    for s in dataset {
        if let Some(o) = s.objects.iter().find(|o| !known.contains(&o.class_id)) {
            return Err(Error::UnknownClass(o.class_id));
        }
    }

    let (pool, held_out) = dataset.split_at(dataset.len() - split.test_scenes);
    let mut rng = ChaCha8Rng::seed_from_u64(split.order_seed);

    let mut test = held_out.to_vec();
    test.shuffle(&mut rng);
    let test_order = test.iter().map(|s| s.id).collect();

    let base = pool
        .iter()
        .filter(|s| s.objects.iter().all(|o| !split.is_novel(o.class_id)))
        .cloned()
        .collect();

    let mut scan: Vec<usize> = (0..pool.len()).collect();
    scan.shuffle(&mut rng);
    let mut need: BTreeMap<ClassId, usize> = known.iter().map(|&c| (c, split.shots)).collect();
    let mut balanced = Vec::new();
    for &si in &scan {
        let scene = &pool[si];
        let mut keep = Vec::new();
        for (oi, o) in scene.objects.iter().enumerate() {
            let n = need.get_mut(&o.class_id).expect("class checked above");
            if *n > 0 {
                *n -= 1;
                keep.push(oi);
            }
        }
        if !keep.is_empty() {
            balanced.push(subset_scene(scene, &keep));
        }
        if need.values().all(|&n| n == 0) {
            break;
        }
    }
    if let Some((&class, &missing)) = need.iter().find(|(_, &n)| n > 0) {
        return Err(Error::InsufficientInstances {
            class,
            available: split.shots - missing,
            required: split.shots,
        });
    }
    balanced.sort_by_key(|s: &Scene| s.id);

    Ok(Splits { base, balanced, test, test_order })
}

fn subset_scene(scene: &Scene, keep: &[usize]) -> Scene {
    let remap: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let objects = keep.iter().map(|&i| scene.objects[i].clone()).collect();
    let proposals = scene
        .proposals
        .iter()
        .filter_map(|p| match p.parent {
            None => Some(p.clone()),
            Some(g) => remap.get(&g).map(|&ng| Proposal { parent: Some(ng), ..p.clone() }),
        })
        .collect();
    Scene { id: scene.id, objects, proposals }
}

const DATASET_FORMAT: &str = "psttl-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    scenes: usize,
}

/// Writes one JSON header line followed by one scene per line.
pub fn save_dataset(path: impl AsRef<Path>, dataset: &[Scene]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = DatasetHeader { format: DATASET_FORMAT.into(), version: DATASET_VERSION, scenes: dataset.len() };
    write_json_line(&mut w, &header).map_err(|e| Error::io(path, e))?;
    for scene in dataset {
        write_json_line(&mut w, scene).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };

    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }

    let mut scenes = Vec::with_capacity(header.scenes);
    let mut dim = None;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)
            .map_err(|e| parse_err(lineno, format!("record {}: {e}", scenes.len())))?;
        check_scene(&scene, &mut dim).map_err(|m| parse_err(lineno, format!("record {}: {m}", scenes.len())))?;
        scenes.push(scene);
    }
    if scenes.len() != header.scenes {
        return Err(parse_err(
            scenes.len() + 1,
            format!("header announces {} scenes, found {}", header.scenes, scenes.len()),
        ));
    }
    Ok(scenes)
}

fn check_scene(scene: &Scene, dim: &mut Option<usize>) -> std::result::Result<(), String> {
    let mut check_dim = |n: usize| match *dim {
        None => {
            *dim = Some(n);
            Ok(())
        }
        Some(d) if d == n => Ok(()),
        Some(d) => Err(format!("feature dimension {n}, expected {d}")),
    };
    for o in &scene.objects {
        if !o.bbox.is_valid() {
            return Err(format!("invalid object box {:?}", o.bbox));
        }
        check_dim(o.latent_feature.len())?;
    }
    for p in &scene.proposals {
        if !p.bbox.is_valid() {
            return Err(format!("invalid proposal box {:?}", p.bbox));
        }
        if p.parent.is_some_and(|g| g >= scene.objects.len()) {
            return Err("proposal parent out of range".into());
        }
        check_dim(p.feature.len())?;
    }
    Ok(())
}

pub(crate) fn write_json_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(std::io::Error::other)?;
    w.write_all(b"\n")
}
