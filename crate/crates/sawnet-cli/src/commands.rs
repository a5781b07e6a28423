//! The five experiment commands. Each is a pure function of (config,
//! seed, input files): rerunning writes byte-identical artifacts. Nothing
//! here prints timestamps or machine state into an output file.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use sawnet_core::data::{subsample, Dataset};
use sawnet_core::rng::{rng_from, SALT_SUBSAMPLE};
use sawnet_core::sawnet::{EmbeddingKind, EmbeddingSpec, Model, ModelSpec, Task, Variant};
use sawnet_core::train::{
    evaluate, evaluate_segmentation, load_checkpoint, save_checkpoint, train_epoch, Adam, Metrics,
    SegMetrics, TrainSettings,
};
use sawnet_core::verify::{all_passed, run_all, CheckOutcome};
use sawnet_core::error::named_io;
use sawnet_core::{Error, Result};

use crate::config::RunConfig;
use crate::report::{ResultRow, ResultWriter};

pub const METRICS_CSV: &str = "metrics.csv";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const EVAL_JSON: &str = "eval.json";

/// Landmarks of the usual accuracy-versus-points sweep.
pub const DEFAULT_ROBUSTNESS_COUNTS: [usize; 5] = [1024, 512, 384, 256, 128];

/// Row label for a model: the trunk variant, or the embedding baseline.
fn variant_name(spec: &ModelSpec) -> String {
    match &spec.embedding {
        Some(e) => format!("embedding_{}", e.kind.name()),
        None => spec.config.variant.name().to_string(),
    }
}

/// Evaluation summary for either task, serialized without a wrapper so
/// `eval.json` reads as plain metrics.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum EvalReport {
    Classify(Metrics),
    Segment(SegMetrics),
}

impl EvalReport {
    /// (primary, secondary) metric values for one-line summaries.
    pub fn headline(&self) -> (f64, f64) {
        match self {
            EvalReport::Classify(m) => (m.instance_accuracy, m.class_accuracy),
            EvalReport::Segment(m) => (m.point_accuracy, m.overall_miou),
        }
    }

    fn metric_names(&self) -> (&'static str, &'static str) {
        match self {
            EvalReport::Classify(_) => ("instance_accuracy", "class_accuracy"),
            EvalReport::Segment(_) => ("point_accuracy", "overall_miou"),
        }
    }
}

fn eval_model(model: &mut Model<f32>, ds: &Dataset, batch: usize) -> Result<EvalReport> {
    match model.task() {
        Task::Classify => Ok(EvalReport::Classify(evaluate(model, ds, batch)?)),
        Task::Segment => Ok(EvalReport::Segment(evaluate_segmentation(model, ds, batch)?)),
    }
}

fn eval_rows(
    cfg: &RunConfig,
    variant: &str,
    epoch: usize,
    split: &'static str,
    report: &EvalReport,
) -> [ResultRow; 2] {
    let (primary, secondary) = report.headline();
    let (pname, sname) = report.metric_names();
    let row = |metric, value| ResultRow {
        experiment: cfg.experiment.clone(),
        variant: variant.to_string(),
        points: cfg.dataset.points(),
        epoch,
        split,
        metric,
        value,
    };
    [row(pname, primary), row(sname, secondary)]
}

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub train: EvalReport,
    pub test: EvalReport,
}

/// Trains per the config, appending per-epoch rows (train loss, then both
/// splits' metrics) and saving the final checkpoint. `epochs: 0` writes a
/// checkpoint of the initialized model and its evaluation only.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| named_io(out_dir, e))?;
    let (train_ds, test_ds) = cfg.build_datasets()?;
    let (mut model, spec) = Model::<f32>::from_spec(&cfg.model_spec(), cfg.seed)?;
    let mut adam = Adam::new(&mut model, cfg.optim.clone())?;
    let settings = TrainSettings {
        batch_size: cfg.batch_size,
        augment: cfg.augment,
    };
    let variant = variant_name(&spec);
    let mut csv = ResultWriter::create(&out_dir.join(METRICS_CSV))?;

    let evaluate_epoch = |model: &mut Model<f32>,
                              csv: &mut ResultWriter,
                              epoch: usize|
     -> Result<(EvalReport, EvalReport)> {
        let train = eval_model(model, &train_ds, cfg.batch_size)?;
        let test = eval_model(model, &test_ds, cfg.batch_size)?;
        for row in eval_rows(cfg, &variant, epoch, "train", &train) {
            csv.write(&row)?;
        }
        for row in eval_rows(cfg, &variant, epoch, "test", &test) {
            csv.write(&row)?;
        }
        Ok((train, test))
    };

    let mut last = None;
    for epoch in 0..cfg.epochs {
        let loss = train_epoch(&mut model, &mut adam, &train_ds, &settings, cfg.seed, epoch)?;
        csv.write(&ResultRow {
            experiment: cfg.experiment.clone(),
            variant: variant.clone(),
            points: cfg.dataset.points(),
            epoch,
            split: "train",
            metric: "loss",
            value: loss,
        })?;
        let (train, test) = evaluate_epoch(&mut model, &mut csv, epoch)?;
        info!(
            "epoch {epoch}: loss {loss:.4}, train {:.4}, test {:.4}",
            train.headline().0,
            test.headline().0
        );
        last = Some((train, test));
    }
    let (train, test) = match last {
        Some(pair) => pair,
        None => evaluate_epoch(&mut model, &mut csv, 0)?,
    };
    csv.finish()?;
    save_checkpoint(out_dir, &mut model, &spec, Some(&adam), cfg.epochs)?;

    let (pname, sname) = train.metric_names();
    let (tp, ts) = train.headline();
    let (ep, es) = test.headline();
    println!("{variant} after {} epochs:", cfg.epochs);
    println!("  train: {pname} {tp:.4}, {sname} {ts:.4}");
    println!("  test:  {pname} {ep:.4}, {sname} {es:.4}");
    Ok(TrainOutcome {
        out_dir: out_dir.to_path_buf(),
        train,
        test,
    })
}

/// Evaluates the checkpoint in `out_dir` on the config's held-out split
/// and writes `eval.json`.
pub fn cmd_eval(cfg: &RunConfig, out_dir: &Path) -> Result<EvalReport> {
    let mut ckpt = load_checkpoint::<f32>(out_dir)?;
    let (_, test_ds) = cfg.build_datasets()?;
    match ckpt.spec.config.task {
        Task::Classify => {
            let have = ckpt.spec.config.num_classes.unwrap_or(0);
            if have != test_ds.num_classes() {
                return Err(Error::Config(format!(
                    "checkpoint classifies {have} classes but the dataset has {}",
                    test_ds.num_classes()
                )));
            }
        }
        Task::Segment => {
            let have = ckpt.spec.config.parts.unwrap_or(0);
            let need = test_ds
                .part_ranges
                .as_ref()
                .and_then(|r| r.iter().map(|&(_, hi)| hi).max())
                .unwrap_or(0);
            if have < need {
                return Err(Error::Config(format!(
                    "checkpoint scores {have} parts but the dataset labels up to {need}"
                )));
            }
        }
    }
    let report = eval_model(&mut ckpt.model, &test_ds, cfg.batch_size)?;
    let json = serde_json::to_string_pretty(&report)?;
    let json_path = out_dir.join(EVAL_JSON);
    fs::write(&json_path, format!("{json}\n")).map_err(|e| named_io(&json_path, e))?;
    let (pname, sname) = report.metric_names();
    let (p, s) = report.headline();
    println!("{pname} {p:.4}, {sname} {s:.4}");
    Ok(report)
}

/// Accuracy versus point count: subsamples every held-out cloud to each
/// requested size and evaluates the checkpoint on it. The full count is
/// evaluated on the clouds untouched, so that row matches `eval` exactly.
pub fn cmd_robustness(cfg: &RunConfig, out_dir: &Path, counts: &[usize]) -> Result<Vec<ResultRow>> {
    if counts.is_empty() {
        return Err(Error::Config("robustness needs at least one point count".into()));
    }
    let n = cfg.dataset.points();
    if let Some(&m) = counts.iter().find(|&&m| m == 0 || m > n) {
        return Err(Error::Config(format!(
            "cannot subsample {m} of {n} points per cloud"
        )));
    }
    let mut ckpt = load_checkpoint::<f32>(out_dir)?;
    let (_, test_ds) = cfg.build_datasets()?;
    let variant = variant_name(&ckpt.spec);
    let mut csv = ResultWriter::create(&out_dir.join(ROBUSTNESS_CSV))?;
    let mut rows = Vec::with_capacity(counts.len());
    for &m in counts {
        let ds = if m == n {
            test_ds.clone()
        } else {
            let items = test_ds
                .items
                .iter()
                .enumerate()
                .map(|(i, cloud)| {
                    let mut rng = rng_from(cfg.seed, &[SALT_SUBSAMPLE, m as u64, i as u64]);
                    subsample(cloud, m, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Dataset {
                items,
                ..test_ds.clone()
            }
        };
        let report = eval_model(&mut ckpt.model, &ds, cfg.batch_size)?;
        let row = ResultRow {
            experiment: cfg.experiment.clone(),
            variant: variant.clone(),
            points: m,
            epoch: ckpt.epoch,
            split: "test",
            metric: report.metric_names().0,
            value: report.headline().0,
        };
        println!("{m} points: {:.4}", row.value);
        csv.write(&row)?;
        rows.push(row);
    }
    csv.finish()?;
    Ok(rows)
}

/// Trains every trunk variant and every embedding baseline under the one
/// budget in the config, sequentially, and records one final-accuracy row
/// per variant.
pub fn cmd_ablate(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<ResultRow>> {
    if cfg.model.task != Task::Classify {
        return Err(Error::Config("the ablation grid is classification-only".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| named_io(out_dir, e))?;
    let (train_ds, test_ds) = cfg.build_datasets()?;

    let mut specs = Vec::new();
    for variant in [
        Variant::Sawnet,
        Variant::CombineAtEnd,
        Variant::CombinePerLayerNoResidual,
    ] {
        let mut config = cfg.model.clone();
        config.variant = variant;
        specs.push(ModelSpec {
            config,
            embedding: None,
        });
    }
    for kind in [
        EmbeddingKind::Shared,
        EmbeddingKind::Grouped,
        EmbeddingKind::Depthwise,
        EmbeddingKind::Residual,
    ] {
        specs.push(ModelSpec {
            config: cfg.model.clone(),
            embedding: Some(EmbeddingSpec {
                kind,
                groups: cfg.embedding_groups,
                n_points: cfg.dataset.points(),
            }),
        });
    }

    let settings = TrainSettings {
        batch_size: cfg.batch_size,
        augment: cfg.augment,
    };
    let mut csv = ResultWriter::create(&out_dir.join(ABLATION_CSV))?;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in &specs {
        let (mut model, spec) = Model::<f32>::from_spec(spec, cfg.seed)?;
        let mut adam = Adam::new(&mut model, cfg.optim.clone())?;
        for epoch in 0..cfg.epochs {
            train_epoch(&mut model, &mut adam, &train_ds, &settings, cfg.seed, epoch)?;
        }
        let report = eval_model(&mut model, &test_ds, cfg.batch_size)?;
        let row = ResultRow {
            experiment: cfg.experiment.clone(),
            variant: variant_name(&spec),
            points: cfg.dataset.points(),
            epoch: cfg.epochs,
            split: "test",
            metric: report.metric_names().0,
            value: report.headline().0,
        };
        println!("{}: {:.4}", row.variant, row.value);
        csv.write(&row)?;
        rows.push(row);
    }
    csv.finish()?;
    Ok(rows)
}

/// Runs the invariant suite, printing one line per check. Any failure
/// becomes a verification error so the process exits nonzero.
pub fn cmd_verify(seed: u64) -> Result<Vec<CheckOutcome>> {
    let outcomes = run_all(seed);
    for o in &outcomes {
        println!("{o}");
    }
    if all_passed(&outcomes) {
        println!("all {} checks passed", outcomes.len());
        Ok(outcomes)
    } else {
        let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
        Err(Error::Verification(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            outcomes.len(),
            failed.join(", ")
        )))
    }
}
