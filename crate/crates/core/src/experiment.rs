//! Flat experiment configuration, the end-to-end pipeline and the ablation
//! harness.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::eval::{report, MetricsReport, ScenePredictions};
use crate::prototypes::PrototypeMode;
use crate::ttl::{finetune_novel, predict, run_ttl, train_base, Strategy, TrainConfig, TtlConfig, TtlOutcome};
use crate::worldgen::{generate_dataset, make_splits, GeneratorConfig, SplitSpec, Splits, WorldParams};

/// Every knob of an experiment as one flat record. Field names of the
/// test-time stage match [`TtlConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub dim: usize,
    pub num_classes: usize,
    /// The last `num_novel` class ids are novel.
    pub num_novel: usize,
    pub min_class_angle_deg: f64,
    pub feature_noise_sigma: f64,
    pub background_feature_sigma: f64,
    pub objects_per_scene: usize,
    pub proposals_per_gt: usize,
    pub background_proposals: usize,
    pub min_jitter_iou: f64,
    pub feature_scale: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub shots: usize,

    pub init_scale: f64,
    pub base_epochs: usize,
    pub base_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub train_batch_size: usize,

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
    pub feature_jitter_sigma: f64,
    pub use_sup: bool,
    pub prototype_mode: PrototypeMode,
    pub soft_label_temperature: f64,
    pub score_floor: f64,
    pub eval_checkpoints: usize,
    /// IoU threshold of the AP evaluation.
    pub eval_iou: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = WorldParams::default();
        let t = TrainConfig::default();
        let c = TtlConfig::default();
        ExperimentConfig {
            seed: 0,
            dim: w.dim,
            num_classes: w.num_classes,
            num_novel: 5,
            min_class_angle_deg: w.min_class_angle_deg,
            feature_noise_sigma: w.feature_noise_sigma,
            background_feature_sigma: w.background_feature_sigma,
            objects_per_scene: w.objects_per_scene,
            proposals_per_gt: w.proposals_per_gt,
            background_proposals: w.background_proposals,
            min_jitter_iou: w.min_jitter_iou,
            feature_scale: w.feature_scale,
            train_scenes: 2000,
            test_scenes: 5000,
            shots: 1,
            init_scale: t.init_scale,
            base_epochs: t.base_epochs,
            base_lr: t.base_lr,
            finetune_epochs: t.finetune_epochs,
            finetune_lr: t.finetune_lr,
            train_batch_size: t.batch_size,
            delta_upper: c.delta_upper,
            delta_lower: c.delta_lower,
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            ema_alpha: c.ema_alpha,
            lr: c.lr,
            batch_size: c.batch_size,
            nms_iou: c.nms_iou,
            match_iou: c.match_iou,
            strategy: c.strategy,
            epochs: c.epochs,
            feature_jitter_sigma: c.feature_jitter_sigma,
            use_sup: c.use_sup,
            prototype_mode: c.prototype_mode,
            soft_label_temperature: c.soft_label_temperature,
            score_floor: c.score_floor,
            eval_checkpoints: c.eval_checkpoints,
            eval_iou: 0.5,
        }
    }
}

/// SplitMix64 finalizer; gives each pipeline stage its own seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn world_params(&self) -> WorldParams {
        WorldParams {
            dim: self.dim,
            num_classes: self.num_classes,
            min_class_angle_deg: self.min_class_angle_deg,
            feature_noise_sigma: self.feature_noise_sigma,
            background_feature_sigma: self.background_feature_sigma,
            objects_per_scene: self.objects_per_scene,
            proposals_per_gt: self.proposals_per_gt,
            background_proposals: self.background_proposals,
            min_jitter_iou: self.min_jitter_iou,
            feature_scale: self.feature_scale,
            seed: derive_seed(self.seed, 1),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        let n_base = self.num_classes.saturating_sub(self.num_novel);
        SplitSpec {
            base_classes: (0..n_base).collect(),
            novel_classes: (n_base..self.num_classes).collect(),
            shots: self.shots,
            test_scenes: self.test_scenes,
            order_seed: derive_seed(self.seed, 2),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            init_scale: self.init_scale,
            base_epochs: self.base_epochs,
            base_lr: self.base_lr,
            finetune_epochs: self.finetune_epochs,
            finetune_lr: self.finetune_lr,
            batch_size: self.train_batch_size,
            match_iou: self.match_iou,
            seed: derive_seed(self.seed, 3),
        }
    }

    pub fn ttl_config(&self) -> TtlConfig {
        TtlConfig {
            delta_upper: self.delta_upper,
            delta_lower: self.delta_lower,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            ema_alpha: self.ema_alpha,
            lr: self.lr,
            batch_size: self.batch_size,
            nms_iou: self.nms_iou,
            match_iou: self.match_iou,
            strategy: self.strategy,
            epochs: self.epochs,
            seed: derive_seed(self.seed, 4),
            feature_jitter_sigma: self.feature_jitter_sigma,
            use_sup: self.use_sup,
            prototype_mode: self.prototype_mode,
            soft_label_temperature: self.soft_label_temperature,
            score_floor: self.score_floor,
            eval_checkpoints: self.eval_checkpoints,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_novel == 0 || self.num_novel >= self.num_classes {
            return Err(Error::Config(format!(
                "num_novel must lie in [1, num_classes), got {} of {}",
                self.num_novel, self.num_classes
            )));
        }
        if self.test_scenes == 0 || self.train_scenes == 0 {
            return Err(Error::Config("train_scenes and test_scenes must be >= 1".into()));
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return Err(Error::Config(format!("eval_iou must lie in (0, 1], got {}", self.eval_iou)));
        }
        GeneratorConfig::from_params(self.world_params())?;
        self.split_spec().validate()?;
        self.train_config().validate()?;
        self.ttl_config().validate()
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        GeneratorConfig::from_params(self.world_params())
    }

    /// The full scene list: training scenes followed by test scenes.
    pub fn dataset(&self) -> Result<Vec<crate::worldgen::Scene>> {
        let gen = self.generator()?;
        let pool: Vec<usize> = (0..self.num_classes).collect();
        generate_dataset(&gen, 0, self.train_scenes + self.test_scenes, &pool)
    }
}

/// Everything up to the test-time stage.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub split: SplitSpec,
    pub splits: Splits,
    pub m_base: DetectorParams,
    pub m_novel: DetectorParams,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let split = cfg.split_spec();
    let splits = make_splits(&cfg.dataset()?, &split)?;
    let train = cfg.train_config();
    let m_base = train_base(&train, &splits.base, &split.base_classes, cfg.dim)?;
    let m_novel = finetune_novel(&train, &m_base, &splits.balanced, &split.novel_classes)?;
    Ok(Prepared { config: cfg.clone(), split, splits, m_base, m_novel })
}

impl Prepared {
    pub fn evaluate(&self, predictions: &[ScenePredictions]) -> Result<MetricsReport> {
        report(predictions, &self.splits.test, &self.split, self.config.eval_iou)
    }

    /// Frozen inference with `params` over the test stream.
    pub fn evaluate_params(&self, params: &DetectorParams) -> Result<MetricsReport> {
        let preds = predict(params, &self.splits.test, self.config.score_floor, self.config.nms_iou)?;
        self.evaluate(&preds)
    }

    pub fn run_ttl(&self, cfg: &TtlConfig) -> Result<TtlRun> {
        let mut outcome = run_ttl(&self.m_novel, &self.splits.test, &self.splits.balanced, cfg)?;
        let report = self.evaluate(&outcome.predictions)?;
        outcome.log.report = Some(report.clone());
        let snapshot_reports = outcome
            .snapshots
            .iter()
            .map(|s| Ok((s.iteration, self.evaluate_params(&s.teacher)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TtlRun { outcome, report, snapshot_reports })
    }
}

pub struct TtlRun {
    pub outcome: TtlOutcome,
    pub report: MetricsReport,
    /// Frozen evaluation of each teacher snapshot, by iteration.
    pub snapshot_reports: Vec<(usize, MetricsReport)>,
}

/// One row of an ablation grid. `ttl = None` is the frozen M_novel baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub ttl: Option<TtlConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    /// nAP50 in points (0 to 100).
    pub n_ap50: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub name: String,
    pub cells: Vec<Cell>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Mean over seeds of (variant - baseline), when a baseline row exists.
    pub mean_improvement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Runs every (variant, seed) cell. The pre-adaptation pipeline is built
/// once per seed from `base.with_seed(seed)`; the TTL config of each
/// variant gets the seed-derived TTL seed. Failures stay in their cell.
pub fn ablate(base: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    base.validate()?;
    for v in variants {
        if let Some(t) = &v.ttl {
            t.validate().map_err(|e| Error::Config(format!("variant {}: {e}", v.name)))?;
        }
    }
    let prepared: Vec<Result<Prepared, String>> =
        seeds.par_iter().map(|&s| prepare(&base.with_seed(s)).map_err(|e| e.to_string())).collect();

    let jobs: Vec<(usize, usize)> = (0..variants.len()).flat_map(|v| (0..seeds.len()).map(move |s| (v, s))).collect();
    let results: Vec<Cell> = jobs
        .par_iter()
        .map(|&(vi, si)| {
            let seed = seeds[si];
            let outcome = prepared[si].as_ref().map_err(Clone::clone).and_then(|prep| {
                let report = match &variants[vi].ttl {
                    None => prep.evaluate_params(&prep.m_novel),
                    Some(t) => {
                        let cfg = TtlConfig { seed: prep.config.ttl_config().seed, ..t.clone() };
                        prep.run_ttl(&cfg).map(|r| r.report)
                    }
                };
                report.map(|r| 100.0 * r.n_ap50).map_err(|e| e.to_string())
            });
            match outcome {
                Ok(x) => Cell { seed, n_ap50: Some(x), error: None },
                Err(e) => Cell { seed, n_ap50: None, error: Some(e) },
            }
        })
        .collect();

    let baseline = variants.iter().position(|v| v.ttl.is_none());
    let cells_of = |vi: usize| &results[vi * seeds.len()..(vi + 1) * seeds.len()];
    let rows = variants
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let cells = cells_of(vi).to_vec();
            let ok: Vec<f64> = cells.iter().filter_map(|c| c.n_ap50).collect();
            let (mean, std) = if ok.is_empty() { (None, None) } else {
                let (m, s) = mean_std(&ok);
                (Some(m), Some(s))
            };
            let mean_improvement = baseline.filter(|&b| b != vi).and_then(|b| {
                let diffs: Vec<f64> = cells
                    .iter()
                    .zip(cells_of(b))
                    .filter_map(|(c, base)| Some(c.n_ap50? - base.n_ap50?))
                    .collect();
                (!diffs.is_empty()).then(|| mean_std(&diffs).0)
            });
            VariantRow { name: v.name.clone(), cells, mean, std, mean_improvement }
        })
        .collect();
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.4}"))
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// `variant,mean,std,mean_improvement,seed_<s>...`; failed cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        write!(out, "variant,mean_nap50,std_nap50,mean_improvement").unwrap();
        for s in &self.seeds {
            write!(out, ",seed_{s}").unwrap();
        }
        writeln!(out).unwrap();
        for r in &self.rows {
            write!(out, "{},{},{},{}", r.name, opt(r.mean), opt(r.std), opt(r.mean_improvement)).unwrap();
            for c in &r.cells {
                write!(out, ",{}", opt(c.n_ap50)).unwrap();
            }
            writeln!(out).unwrap();
        }
        String::from_utf8(out).expect("ascii table")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
