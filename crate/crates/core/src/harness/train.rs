//! Per-fold training, cross-validation, summaries and result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::model::Model;
use crate::datakit::{kfold_split, Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::fusion::Task;
use crate::losses::{
    cross_entropy, nll_survival, survival_risk, total_loss, SurvivalBins, SurvivalTarget,
};
use crate::metrics::{
    accuracy, concordance_index, roc_auc_report, roc_points, time_dependent_auc, write_curve_csv,
    EvalRecord, Outcome, TdAucPoint, ROC_DECIMALS, TD_AUC_DECIMALS,
};
use crate::numkit::{Tape, Tensor};

pub const SUMMARY_FILE: &str = "summary.json";
pub const RECORDS_FILE: &str = "records.json";
const EVAL_GRID: usize = 10;

/// Metrics of one held-out fold, all recomputable from `records`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub values: BTreeMap<String, f64>,
    /// One-vs-rest AUC per class; `None` where undefined on this fold.
    pub class_auc: Vec<Option<f64>>,
    pub td_auc: Vec<TdAucPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub metrics: FoldMetrics,
    pub records: Vec<EvalRecord>,
    /// Epoch (1-based) whose parameters produced `records`; always the last.
    pub final_epoch: usize,
    /// Mean training loss per epoch.
    pub loss_trajectory: Vec<f64>,
}

/// Evaluation times for time-dependent AUC: an even grid strictly inside
/// the range of the fold's observed times.
pub fn eval_grid(targets: &[SurvivalTarget]) -> Vec<f64> {
    let lo = targets.iter().map(|t| t.time).fold(f64::INFINITY, f64::min);
    let hi = targets
        .iter()
        .map(|t| t.time)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Vec::new();
    }
    (1..=EVAL_GRID)
        .map(|k| lo + (hi - lo) * k as f64 / (EVAL_GRID + 1) as f64)
        .collect()
}

pub fn compute_metrics(task: Task, records: &[EvalRecord]) -> Result<FoldMetrics> {
    let mut values = BTreeMap::new();
    if task.is_diagnosis() {
        values.insert("Acc".to_string(), accuracy(records)?);
        let report = roc_auc_report(records)?;
        values.insert("AUC".to_string(), report.macro_auc);
        Ok(FoldMetrics {
            values,
            class_auc: report.per_class,
            td_auc: Vec::new(),
        })
    } else {
        values.insert("C-Index".to_string(), concordance_index(records)?);
        let targets: Vec<SurvivalTarget> = records
            .iter()
            .filter_map(|r| match &r.outcome {
                Outcome::Survival { target, .. } => Some(*target),
                Outcome::Class { .. } => None,
            })
            .collect();
        Ok(FoldMetrics {
            values,
            class_auc: Vec::new(),
            td_auc: time_dependent_auc(records, &eval_grid(&targets))?,
        })
    }
}

fn softmax(logits: &Tensor) -> Vec<f64> {
    let max = logits
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// A training or test sample with its task target resolved.
struct Item<'a> {
    sample: &'a SampleRecord,
    target: SurvivalTarget,
}

impl<'a> Item<'a> {
    fn new(sample: &'a SampleRecord, bins: Option<&SurvivalBins>) -> Self {
        let mut target = sample.survival;
        if let Some(b) = bins {
            target.bin = b.bin(target.time);
        }
        Self { sample, target }
    }
}

fn check_finite(value: f64, term: &'static str, epoch: usize, id: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            term,
            value,
            epoch,
            sample: id.to_string(),
        })
    }
}

fn check_dataset(dataset: &Dataset, config: &RunConfig) -> Result<()> {
    dataset.validate()?;
    if dataset.patch_dim() != config.d {
        return Err(Error::Config(format!(
            "model width d = {} but patch features have width {}",
            config.d,
            dataset.patch_dim()
        )));
    }
    let groups = dataset.gene_shape().0;
    if groups != config.gene_groups {
        return Err(Error::Config(format!(
            "config expects {} gene groups but the dataset has {groups}",
            config.gene_groups
        )));
    }
    Ok(())
}

/// Trains one fold and evaluates its held-out split after the last epoch.
/// Also returns the trained model.
pub fn train_fold_with_model(
    dataset: &Dataset,
    config: &RunConfig,
    fold: usize,
) -> Result<(FoldResult, Model)> {
    let config = config.resolved()?;
    check_dataset(dataset, &config)?;
    let (train_ids, test_ids) = kfold_split(&dataset.ids(), config.folds, fold, config.split_seed)?;
    let lookup = |ids: &[String]| -> Vec<&SampleRecord> {
        ids.iter()
            .map(|id| dataset.find(id).expect("split id"))
            .collect()
    };
    let (train, test) = (lookup(&train_ids), lookup(&test_ids));

    let task = config.task;
    let bins = if task == Task::Survival {
        let times: Vec<f64> = train
            .iter()
            .filter(|s| !s.survival.censored)
            .map(|s| s.survival.time)
            .collect();
        Some(SurvivalBins::from_event_times(
            &times,
            config.survival_bins,
        )?)
    } else {
        None
    };
    let train: Vec<Item> = train
        .into_iter()
        .map(|s| Item::new(s, bins.as_ref()))
        .collect();
    let test: Vec<Item> = test
        .into_iter()
        .map(|s| Item::new(s, bins.as_ref()))
        .collect();
    let outputs = match &bins {
        Some(b) => b.n_bins(),
        None => dataset.n_classes,
    };

    let seed = config.seed_offset + fold as u64;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let gene_width = dataset.gene_shape().1;
    let mut model = Model::init(&config, gene_width, outputs, &mut init_rng);

    let lr = config.learning_rate();
    let epochs = config.epoch_count();
    let mut loss_trajectory = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for &i in &order {
            let it = &train[i];
            let id = &it.sample.id;
            let mut tape = Tape::new();
            let fwd = model.forward(
                &mut tape,
                &it.sample.patch_features,
                &it.sample.gene_groups,
                &config,
            )?;
            let objective = if task.is_diagnosis() {
                cross_entropy(&mut tape, fwd.logits, it.sample.label(task))?
            } else {
                nll_survival(&mut tape, fwd.logits, &it.target, config.uncensored_weight)?
            };
            check_finite(tape.value(objective).item(), "task", epoch, id)?;
            let loss = match fwd.modularity {
                Some(m) => {
                    check_finite(tape.value(m).item(), "modularity", epoch, id)?;
                    total_loss(&mut tape, objective, m, config.gamma)?
                }
                None => objective,
            };
            let value = tape.value(loss).item();
            check_finite(value, "total", epoch, id)?;
            let grads = tape.backward(loss, &model.store)?;
            if !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "gradient",
                    value: grads.l2_norm(),
                    epoch,
                    sample: id.clone(),
                });
            }
            model.store.sgd_step(&grads, lr, config.weight_decay);
            total += value;
        }
        loss_trajectory.push(total / train.len().max(1) as f64);
    }

    let records = evaluate(&model, &config, &test)?;
    let metrics = compute_metrics(task, &records)?;
    Ok((
        FoldResult {
            fold,
            seed,
            metrics,
            records,
            final_epoch: epochs,
            loss_trajectory,
        },
        model,
    ))
}

fn evaluate(model: &Model, config: &RunConfig, items: &[Item]) -> Result<Vec<EvalRecord>> {
    items
        .iter()
        .map(|it| {
            let mut tape = Tape::new();
            let fwd = model.forward(
                &mut tape,
                &it.sample.patch_features,
                &it.sample.gene_groups,
                config,
            )?;
            let logits = tape.value(fwd.logits);
            let outcome = if config.task.is_diagnosis() {
                Outcome::Class {
                    probs: softmax(logits),
                    label: it.sample.label(config.task),
                }
            } else {
                Outcome::Survival {
                    risk: survival_risk(logits),
                    target: it.target,
                }
            };
            Ok(EvalRecord {
                sample_id: it.sample.id.clone(),
                outcome,
            })
        })
        .collect()
}

pub fn train_fold(dataset: &Dataset, config: &RunConfig, fold: usize) -> Result<FoldResult> {
    train_fold_with_model(dataset, config, fold).map(|(r, _)| r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population standard deviation over folds.
    pub sd: f64,
    pub per_fold: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            sd: var.sqrt(),
            per_fold: values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: Task,
    pub variant: Variant,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub config_echo: RunConfig,
}

impl Summary {
    pub fn from_folds(config: &RunConfig, folds: &[FoldResult]) -> Self {
        let mut metrics = BTreeMap::new();
        if let Some(first) = folds.first() {
            for name in first.metrics.values.keys() {
                let values = folds.iter().map(|f| f.metrics.values[name]).collect();
                metrics.insert(name.clone(), MetricSummary::from_values(values));
            }
        }
        Self {
            task: config.task,
            variant: config.variant,
            metrics,
            config_echo: config.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.get(name)
    }

    /// The headline metric: accuracy for diagnosis, C-index for survival.
    pub fn primary(&self) -> &MetricSummary {
        let name = if self.task.is_diagnosis() {
            "Acc"
        } else {
            "C-Index"
        };
        &self.metrics[name]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult {
    pub summary: Summary,
    pub folds: Vec<FoldResult>,
}

/// Runs every fold (optionally in parallel) and summarizes them.
pub fn run_cv(dataset: &Dataset, config: &RunConfig, parallel: bool) -> Result<CvResult> {
    let config = config.resolved()?;
    check_dataset(dataset, &config)?;
    let folds: Vec<FoldResult> = if parallel {
        (0..config.folds)
            .into_par_iter()
            .map(|f| train_fold(dataset, &config, f))
            .collect::<Result<_>>()?
    } else {
        (0..config.folds)
            .map(|f| train_fold(dataset, &config, f))
            .collect::<Result<_>>()?
    };
    Ok(CvResult {
        summary: Summary::from_folds(&config, &folds),
        folds,
    })
}

/// Runs a baseline variant; the same protocol as [`run_cv`].
pub fn run_baseline(dataset: &Dataset, config: &RunConfig, parallel: bool) -> Result<CvResult> {
    if !config.variant.is_baseline() {
        return Err(Error::Config(format!(
            "{} is not a baseline variant",
            config.variant
        )));
    }
    run_cv(dataset, config, parallel)
}

/// Runs each variant with otherwise identical settings.
pub fn run_variants(
    dataset: &Dataset,
    base: &RunConfig,
    variants: &[Variant],
    parallel: bool,
) -> Result<Vec<CvResult>> {
    variants
        .iter()
        .map(|&variant| {
            run_cv(
                dataset,
                &RunConfig {
                    variant,
                    ..base.clone()
                },
                parallel,
            )
        })
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn fold_dir(root: &Path, fold: usize) -> PathBuf {
    root.join(format!("fold{fold}"))
}

/// ROC point files (diagnosis) or the time-dependent AUC file (survival)
/// for one fold's records. Returns the written paths.
pub fn write_curves(dir: &Path, task: Task, records: &[EvalRecord]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = compute_metrics(task, records)?;
    let mut written = Vec::new();
    if task.is_diagnosis() {
        for (class, auc) in metrics.class_auc.iter().enumerate() {
            if auc.is_none() {
                continue;
            }
            let path = dir.join(format!("roc_class{class}.csv"));
            write_curve_csv(
                &path,
                ("fpr", "tpr"),
                &roc_points(records, class)?,
                ROC_DECIMALS,
            )?;
            written.push(path);
        }
    } else {
        let path = dir.join("td_auc.csv");
        let pts: Vec<(f64, f64)> = metrics.td_auc.iter().map(|p| (p.time, p.auc)).collect();
        write_curve_csv(&path, ("time", "auc"), &pts, TD_AUC_DECIMALS)?;
        written.push(path);
    }
    Ok(written)
}

fn predictions_csv(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    match records.first().map(|r| &r.outcome) {
        Some(Outcome::Class { probs, .. }) => {
            out.push_str("sample_id,label,prediction");
            for c in 0..probs.len() {
                write!(out, ",prob_{c}").unwrap();
            }
        }
        _ => out.push_str("sample_id,time,censored,bin,risk"),
    }
    out.push('\n');
    for r in records {
        match &r.outcome {
            Outcome::Class { probs, label } => {
                write!(
                    out,
                    "{},{label},{}",
                    r.sample_id,
                    crate::metrics::argmax(probs)
                )
                .unwrap();
                for p in probs {
                    write!(out, ",{p}").unwrap();
                }
            }
            Outcome::Survival { risk, target } => {
                write!(
                    out,
                    "{},{},{},{},{risk}",
                    r.sample_id,
                    target.time,
                    u8::from(target.censored),
                    target.bin
                )
                .unwrap();
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `summary.json`, `folds.csv` and per-fold records, predictions,
/// loss curves, metrics and curve point files under `out`.
pub fn write_results(out: &Path, result: &CvResult) -> Result<()> {
    let summary = &result.summary;
    write(&out.join(SUMMARY_FILE), &summary.to_json()?)?;

    let names: Vec<&String> = summary.metrics.keys().collect();
    let mut folds_csv = String::from("fold,seed");
    for n in &names {
        write!(folds_csv, ",{n}").unwrap();
    }
    folds_csv.push_str(",final_epoch,final_train_loss\n");
    for f in &result.folds {
        write!(folds_csv, "{},{}", f.fold, f.seed).unwrap();
        for n in &names {
            write!(folds_csv, ",{}", f.metrics.values[*n]).unwrap();
        }
        let last = f.loss_trajectory.last().copied().unwrap_or(f64::NAN);
        writeln!(folds_csv, ",{},{last}", f.final_epoch).unwrap();
    }
    write(&out.join("folds.csv"), &folds_csv)?;

    for f in &result.folds {
        let dir = fold_dir(out, f.fold);
        write(
            &dir.join(RECORDS_FILE),
            &(serde_json::to_string_pretty(&f.records)? + "\n"),
        )?;
        write(
            &dir.join("metrics.json"),
            &(serde_json::to_string_pretty(&f.metrics)? + "\n"),
        )?;
        write(&dir.join("predictions.csv"), &predictions_csv(&f.records))?;
        let mut loss = String::from("epoch,mean_train_loss\n");
        for (e, l) in f.loss_trajectory.iter().enumerate() {
            writeln!(loss, "{},{l}", e + 1).unwrap();
        }
        write(&dir.join("loss.csv"), &loss)?;
        write_curves(&dir, summary.task, &f.records)?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Regenerates curve point files from a results directory written by
/// [`write_results`].
pub fn curves_from_results(results: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let summary = read_summary(&results.join(SUMMARY_FILE))?;
    let mut written = Vec::new();
    for fold in 0..summary.config_echo.folds {
        let records = read_records(&fold_dir(results, fold).join(RECORDS_FILE))?;
        written.extend(write_curves(&fold_dir(out, fold), summary.task, &records)?);
    }
    Ok(written)
}

/// Plain-text table with one row per summary: `variant  metric mean ± sd ...`.
pub fn format_table(summaries: &[&Summary]) -> String {
    let mut out = String::new();
    let Some(first) = summaries.first() else {
        return out;
    };
    let names: Vec<&String> = first.metrics.keys().collect();
    write!(out, "{:<14}", "variant").unwrap();
    for n in &names {
        write!(out, "  {n:>17}").unwrap();
    }
    out.push('\n');
    for s in summaries {
        write!(out, "{:<14}", s.variant.name()).unwrap();
        for n in &names {
            let m = &s.metrics[*n];
            write!(out, "  {:>8.4} ± {:<6.4}", m.mean, m.sd).unwrap();
        }
        out.push('\n');
    }
    out
}

/// CSV with one row per summary: `variant,task,<metric>_mean,<metric>_sd,...`.
pub fn table_csv(summaries: &[&Summary]) -> String {
    let mut out = String::from("variant,task");
    let Some(first) = summaries.first() else {
        return out + "\n";
    };
    let names: Vec<&String> = first.metrics.keys().collect();
    for n in &names {
        write!(out, ",{n}_mean,{n}_sd").unwrap();
    }
    out.push('\n');
    for s in summaries {
        write!(out, "{},{}", s.variant, s.task).unwrap();
        for n in &names {
            let m = &s.metrics[*n];
            write!(out, ",{},{}", m.mean, m.sd).unwrap();
        }
        out.push('\n');
    }
    out
}
