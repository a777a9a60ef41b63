use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use psttl::detector::{load_checkpoint, save_checkpoint, DetectorParams};
use psttl::eval::{load_predictions, report, save_predictions, MetricsReport};
use psttl::experiment::{ablate, ExperimentConfig};
use psttl::ttl::{finetune_novel, predict, run_ttl, train_base, Strategy};
use psttl::worldgen::{load_dataset, make_splits, save_dataset, SplitSpec, Splits};
use serde::Serialize;

use crate::config::{load_config, load_grid};
use crate::manifest::Manifest;
use crate::{AblateArgs, Cli, Command, Common, DataArgs, EvalArgs, Failure, InitArgs, StrategyArg, TtlArgs};

pub const DATASET_FILE: &str = "dataset.jsonl";

/// Config keys that shape the generated data; a data directory is only
/// usable with a config that agrees on all of them.
const DATA_KEYS: &[&str] = &[
    "seed",
    "dim",
    "num_classes",
    "num_novel",
    "min_class_angle_deg",
    "feature_noise_sigma",
    "background_feature_sigma",
    "objects_per_scene",
    "proposals_per_gt",
    "background_proposals",
    "min_jitter_iou",
    "feature_scale",
    "train_scenes",
    "test_scenes",
    "shots",
];

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new("io", format!("{}: {e}", path.display()))
}

/// Collects output file names so the manifest can list them.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).expect("serializable output") + "\n";
        fs::write(&path, text).map_err(|e| io_fail(&path, e))
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_fail(&path, e))
    }

    fn report(&mut self, rep: &MetricsReport) -> Result<(), Failure> {
        rep.write_json(self.path("report.json"))?;
        rep.write_csv(self.path("report.csv"))?;
        Ok(())
    }

    fn finish(self, mut manifest: Manifest) -> Result<(), Failure> {
        manifest.outputs = self.files;
        manifest.write(&self.dir)
    }
}

struct Data {
    split: SplitSpec,
    splits: Splits,
}

fn load_data(dir: &Path, cfg: &ExperimentConfig) -> Result<Data, Failure> {
    let m = Manifest::read(dir)?;
    if m.command != "gen-data" {
        return Err(Failure::new("input", format!("{} was written by `{}`, not `gen-data`", dir.display(), m.command)));
    }
    let ours = serde_json::to_value(cfg).expect("config serializes");
    let theirs = serde_json::to_value(&m.config).expect("config serializes");
    if let Some(k) = DATA_KEYS.iter().find(|k| ours[**k] != theirs[**k]) {
        return Err(Failure::new(
            "config",
            format!("`{k}` is {} but the data in {} was generated with {}", ours[*k], dir.display(), theirs[*k]),
        ));
    }
    let dataset = load_dataset(dir.join(DATASET_FILE))?;
    let split = cfg.split_spec();
    let splits = make_splits(&dataset, &split)?;
    Ok(Data { split, splits })
}

fn load_init(path: &Path, classes: &[usize], what: &str) -> Result<DetectorParams, Failure> {
    let params = load_checkpoint(path)?;
    if params.classes != classes {
        return Err(Failure::new(
            "input",
            format!("{}: expected a {what} checkpoint with classes {classes:?}, found {:?}", path.display(), params.classes),
        ));
    }
    Ok(params)
}

fn manifest(name: &str, cfg: &ExperimentConfig, common: &Common) -> Manifest {
    Manifest { config_path: common.config.clone(), ..Manifest::new(name, cfg, &common.out) }
}

fn gen_data(args: &Common) -> Result<String, Failure> {
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let dataset = cfg.dataset()?;
    let splits = make_splits(&dataset, &cfg.split_spec())?;
    let mut out = Outputs::create(&args.out)?;
    save_dataset(out.path(DATASET_FILE), &dataset)?;
    out.finish(manifest("gen-data", &cfg, args))?;
    Ok(format!(
        "{} scenes: {} base, {} balanced, {} test",
        dataset.len(),
        splits.base.len(),
        splits.balanced.len(),
        splits.test.len()
    ))
}

fn train_base_cmd(args: &DataArgs) -> Result<String, Failure> {
    let cfg = load_config(args.common.config.as_deref(), args.common.seed)?;
    let data = load_data(&args.data, &cfg)?;
    let m_base = train_base(&cfg.train_config(), &data.splits.base, &data.split.base_classes, cfg.dim)?;
    let mut out = Outputs::create(&args.common.out)?;
    save_checkpoint(out.path("m_base.json"), &m_base)?;
    out.finish(Manifest { data: Some(args.data.clone()), ..manifest("train-base", &cfg, &args.common) })?;
    Ok(format!("M_base trained on {} scenes", data.splits.base.len()))
}

fn finetune_cmd(args: &InitArgs) -> Result<String, Failure> {
    let common = &args.data.common;
    let cfg = load_config(common.config.as_deref(), common.seed)?;
    let data = load_data(&args.data.data, &cfg)?;
    let m_base = load_init(&args.init, &data.split.base_classes, "base")?;
    let m_novel = finetune_novel(&cfg.train_config(), &m_base, &data.splits.balanced, &data.split.novel_classes)?;
    let mut out = Outputs::create(&common.out)?;
    save_checkpoint(out.path("m_novel.json"), &m_novel)?;
    out.finish(Manifest {
        data: Some(args.data.data.clone()),
        init: Some(args.init.clone()),
        ..manifest("finetune", &cfg, common)
    })?;
    Ok(format!("M_novel fine-tuned on {} scenes", data.splits.balanced.len()))
}

#[derive(Serialize)]
struct SnapshotSummary {
    iteration: usize,
    n_ap50: f64,
    b_ap50: f64,
    m_ap50: f64,
}

#[derive(Serialize)]
struct TtlSummary {
    strategy: Strategy,
    iterations: usize,
    test_scenes: usize,
    report: MetricsReport,
    snapshots: Vec<SnapshotSummary>,
}

fn ttl_cmd(args: &TtlArgs) -> Result<String, Failure> {
    let common = &args.init.data.common;
    let mut cfg = load_config(common.config.as_deref(), common.seed)?;
    if let Some(s) = args.strategy {
        cfg.strategy = match s {
            StrategyArg::OneEpoch => Strategy::OneEpoch,
            StrategyArg::OneBatch => Strategy::OneBatch,
        };
    }
    let data = load_data(&args.init.data.data, &cfg)?;
    let m_novel = load_init(&args.init.init, &data.split.all_classes(), "fine-tuned")?;
    let outcome = run_ttl(&m_novel, &data.splits.test, &data.splits.balanced, &cfg.ttl_config())?;
    let evaluate = |preds: &[_]| report(preds, &data.splits.test, &data.split, cfg.eval_iou);
    let rep = evaluate(&outcome.predictions)?;
    let mut snapshots = Vec::with_capacity(outcome.snapshots.len());
    for s in &outcome.snapshots {
        let r = evaluate(&predict(&s.teacher, &data.splits.test, cfg.score_floor, cfg.nms_iou)?)?;
        snapshots.push(SnapshotSummary { iteration: s.iteration, n_ap50: r.n_ap50, b_ap50: r.b_ap50, m_ap50: r.m_ap50 });
    }

    let mut out = Outputs::create(&common.out)?;
    save_predictions(out.path("predictions.jsonl"), &outcome.predictions)?;
    let log_path = out.path("runlog.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| io_fail(&log_path, e))?;
    let mut w = BufWriter::new(file);
    for r in &outcome.log.records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_fail(&log_path, e))?;
        w.write_all(b"\n").map_err(|e| io_fail(&log_path, e))?;
    }
    w.flush().map_err(|e| io_fail(&log_path, e))?;
    out.report(&rep)?;
    save_checkpoint(out.path("teacher.json"), &outcome.teacher)?;
    save_checkpoint(out.path("student.json"), &outcome.student)?;
    for s in &outcome.snapshots {
        save_checkpoint(out.path(&format!("teacher_iter_{:06}.json", s.iteration)), &s.teacher)?;
    }
    if !snapshots.is_empty() {
        let mut csv = String::from("iteration,n_ap50,b_ap50,m_ap50\n");
        for s in &snapshots {
            csv += &format!("{},{:.6},{:.6},{:.6}\n", s.iteration, s.n_ap50, s.b_ap50, s.m_ap50);
        }
        out.text("trend.csv", &csv)?;
    }
    let summary = TtlSummary {
        strategy: cfg.strategy,
        iterations: outcome.log.records.len(),
        test_scenes: data.splits.test.len(),
        report: rep.clone(),
        snapshots,
    };
    out.json("summary.json", &summary)?;
    out.finish(Manifest {
        data: Some(args.init.data.data.clone()),
        init: Some(args.init.init.clone()),
        ..manifest("ttl", &cfg, common)
    })?;
    Ok(format!("nAP50 {:.2} bAP50 {:.2} after {} iterations", 100.0 * rep.n_ap50, 100.0 * rep.b_ap50, summary.iterations))
}

fn eval_cmd(args: &EvalArgs) -> Result<String, Failure> {
    let common = &args.data.common;
    let cfg = load_config(common.config.as_deref(), common.seed)?;
    let data = load_data(&args.data.data, &cfg)?;
    let preds = match (&args.init, &args.predictions) {
        (Some(ckpt), _) => {
            let params = load_checkpoint(ckpt)?;
            predict(&params, &data.splits.test, cfg.score_floor, cfg.nms_iou)?
        }
        (None, Some(p)) => load_predictions(p)?,
        (None, None) => return Err(Failure::new("usage", "eval needs --init or --predictions")),
    };
    let rep = report(&preds, &data.splits.test, &data.split, cfg.eval_iou)?;
    let mut out = Outputs::create(&common.out)?;
    out.report(&rep)?;
    out.finish(Manifest {
        data: Some(args.data.data.clone()),
        init: args.init.clone(),
        predictions: args.predictions.clone(),
        ..manifest("eval", &cfg, common)
    })?;
    Ok(format!("nAP50 {:.2} bAP50 {:.2} mAP50 {:.2}", 100.0 * rep.n_ap50, 100.0 * rep.b_ap50, 100.0 * rep.m_ap50))
}

fn ablate_cmd(args: &AblateArgs) -> Result<String, Failure> {
    let cfg = load_config(args.config.as_deref(), None)?;
    let variants = load_grid(&args.grid, &cfg)?;
    if args.seeds.is_empty() {
        return Err(Failure::new("usage", "--seeds is empty"));
    }
    let table = ablate(&cfg, &variants, &args.seeds)?;
    let mut out = Outputs::create(&args.out)?;
    out.text("table.csv", &table.to_csv())?;
    out.json("table.json", &table)?;
    out.finish(Manifest {
        config_path: args.config.clone(),
        grid: Some(args.grid.clone()),
        seeds: args.seeds.clone(),
        ..Manifest::new("ablate", &cfg, &args.out)
    })?;
    let failed = table.rows.iter().flat_map(|r| &r.cells).filter(|c| c.error.is_some()).count();
    Ok(format!("{} variants x {} seeds, {failed} failed cells", table.rows.len(), table.seeds.len()))
}

/// Runs one parsed command line and returns a one-line summary for stdout.
pub fn run(cli: &Cli) -> Result<String, Failure> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainBase(a) => train_base_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Ttl(a) => ttl_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}
