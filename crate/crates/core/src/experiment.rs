//! Cross-validation, the ablation matrix and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_patient_disjoint, BatchLabels, FeatureRecord, TaskData};
use crate::error::{Error, Result};
use crate::eval::{roc_curve, FoldMetrics, FoldReport, RocPoint, Summary};
use crate::model::Task;
use crate::seed::{self, stream};
use crate::tensor::Matrix;
use crate::trainer::{evaluate, fit, fit_single_task, EpochRecord, Predictor, TrainConfig};

/// Environment variable capping the worker threads used for folds.
pub const THREADS_ENV: &str = "SFCS_THREADS";

/// Model variants compared by the ablation matrix, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoDep,
    NoDepTemp,
    NoDepTempSel,
    SingleTask,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoDep,
        Variant::NoDepTemp,
        Variant::NoDepTempSel,
        Variant::SingleTask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDep => "-dep",
            Variant::NoDepTemp => "-dep-temp",
            Variant::NoDepTempSel => "-dep-temp-sel",
            Variant::SingleTask => "single-task",
        }
    }

    /// `base` with this variant's components switched off.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full | Variant::SingleTask => {}
            Variant::NoDep => cfg.use_dep = false,
            Variant::NoDepTemp => {
                cfg.use_dep = false;
                cfg.use_temp = false;
            }
            Variant::NoDepTempSel => {
                cfg.use_dep = false;
                cfg.use_temp = false;
                cfg.use_sel = false;
            }
        }
        cfg
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Fold worker pool, sized by `SFCS_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// One held-out fold of a cross-validation run.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub round: usize,
    pub metrics: FoldMetrics,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Indices into the record list of the test samples.
    pub test_indices: Vec<usize>,
    /// Test-set probabilities per task, rows aligned with `test_indices`.
    pub probabilities: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct CrossValRun {
    pub variant: Variant,
    pub seed: u64,
    pub folds: Vec<FoldRun>,
}

impl CrossValRun {
    pub fn report(&self) -> FoldReport {
        FoldReport {
            model: self.variant.name().to_string(),
            folds: self.folds.iter().map(|f| f.metrics.clone()).collect(),
        }
    }

    /// Out-of-fold probabilities for every record, in record order.
    pub fn pooled(&self, records: &[FeatureRecord]) -> Result<(Vec<Matrix>, BatchLabels)> {
        let n = records.len();
        let mut probs: Vec<Matrix> = Task::ALL.iter().map(|t| Matrix::zeros(n, t.class_count())).collect();
        let mut seen = vec![false; n];
        for fold in &self.folds {
            for (row, &idx) in fold.test_indices.iter().enumerate() {
                seen[idx] = true;
                for t in Task::ALL {
                    let src = fold.probabilities[t.index()].row(row).to_vec();
                    probs[t.index()].row_mut(idx).copy_from_slice(&src);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invariant("a record was never held out".into()));
        }
        Ok((probs, TaskData::from_records(records).labels))
    }
}

/// Patient-disjoint `fold_count`-fold cross-validation of one variant.
///
/// The split and the per-fold initialization depend only on `seed`, so
/// different variants see identical folds and starting weights.
pub fn crossval(
    records: &[FeatureRecord],
    base: &TrainConfig,
    variant: Variant,
    fold_count: usize,
    seed: u64,
) -> Result<CrossValRun> {
    let assignment = split_patient_disjoint(records, fold_count, seed::derive(seed, &[stream::SPLIT]))?;
    let data = TaskData::from_records(records);
    let cfg = variant.apply(base);
    cfg.validate()?;
    let pool = thread_pool()?;
    let folds: Vec<Result<FoldRun>> = pool.install(|| {
        (0..fold_count)
            .into_par_iter()
            .map(|round| {
                let (train_idx, val_idx, test_idx) = assignment.split_indices(round);
                let train = data.subset(&train_idx);
                let val = data.subset(&val_idx);
                let test = data.subset(&test_idx);
                let fold_cfg = TrainConfig {
                    seed: seed::derive(seed, &[stream::FOLD, round as u64]),
                    ..cfg.clone()
                };
                let (predictor, best_epoch, history): (Box<dyn Predictor + Send>, usize, Vec<EpochRecord>) =
                    match variant {
                        Variant::SingleTask => {
                            let model = fit_single_task(&fold_cfg, &train, &val)?;
                            (Box::new(model), 0, Vec::new())
                        }
                        _ => {
                            let result = fit(&fold_cfg, &train, &val)?;
                            (Box::new(result.network), result.best_epoch, result.history)
                        }
                    };
                let probabilities = predictor.predict_proba(&test.x)?;
                let metrics = evaluate(predictor.as_ref(), &test)?;
                info!(
                    "{} seed {seed} fold {round}: mean F1 {:.4}",
                    variant.name(),
                    metrics.mean_f1()
                );
                Ok(FoldRun {
                    round,
                    metrics,
                    best_epoch,
                    history,
                    test_indices: test_idx,
                    probabilities,
                })
            })
            .collect()
    });
    Ok(CrossValRun {
        variant,
        seed,
        folds: folds.into_iter().collect::<Result<_>>()?,
    })
}

/// Runs `variants` over every seed; fold metrics of all seeds are pooled
/// into one report per variant, in the order given.
pub fn run_ablation_matrix(
    records: &[FeatureRecord],
    base: &TrainConfig,
    variants: &[Variant],
    fold_count: usize,
    seeds: &[u64],
) -> Result<Vec<FoldReport>> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    variants
        .iter()
        .map(|&variant| {
            let mut folds = Vec::new();
            for &seed in seeds {
                folds.extend(crossval(records, base, variant, fold_count, seed)?.report().folds);
            }
            Ok(FoldReport {
                model: variant.name().to_string(),
                folds,
            })
        })
        .collect()
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub task: Task,
    pub f1: Summary,
    pub auc_macro: Option<f64>,
}

pub fn report_rows(reports: &[FoldReport]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for report in reports {
        for task in Task::ALL {
            rows.push(ReportRow {
                model: report.model.clone(),
                task,
                f1: report.f1_summary(task)?,
                auc_macro: report.auc_macro(task),
            });
        }
    }
    Ok(rows)
}

pub const REPORT_CSV_HEADER: &str = "model,task,f1_mean,f1_median,f1_std,auc_macro";

pub fn render_report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let auc = r.auc_macro.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{}",
            r.model,
            r.task.name(),
            r.f1.mean,
            r.f1.median,
            r.f1.std,
            auc
        );
    }
    out
}

/// Models as rows, tasks as columns, cells `mean (median) ± std`.
pub fn render_report_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::from("| Model |");
    for t in Task::ALL {
        let _ = write!(out, " {} |", t.name());
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(Task::COUNT));
    out.push('\n');
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    for model in models {
        let _ = write!(out, "| {model} |");
        for t in Task::ALL {
            match rows.iter().find(|r| r.model == model && r.task == t) {
                Some(r) => {
                    let _ = write!(out, " {:.4} ({:.4}) ± {:.4} |", r.f1.mean, r.f1.median, r.f1.std);
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

/// One-vs-rest ROC points per task and class from pooled probabilities.
pub fn render_roc_csv(probabilities: &[Matrix], truth: &BatchLabels) -> String {
    let mut out = String::from("task,class,threshold,fpr,tpr\n");
    for t in Task::ALL {
        let p = &probabilities[t.index()];
        for class in 0..t.class_count() {
            let scores: Vec<f64> = (0..p.rows()).map(|r| p.get(r, class)).collect();
            let positive: Vec<bool> = truth[t.index()].iter().map(|&y| y == class).collect();
            for RocPoint { threshold, fpr, tpr } in roc_curve(&scores, &positive) {
                let _ = writeln!(out, "{},{class},{threshold},{fpr:.6},{tpr:.6}", t.name());
            }
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fold reports as JSON, the input of the `report` command.
pub fn save_reports(path: &Path, reports: &[FoldReport]) -> Result<()> {
    let text = serde_json::to_string_pretty(reports).map_err(|e| Error::Invariant(e.to_string()))?;
    write_text(path, &text)
}

pub fn load_reports(path: &Path) -> Result<Vec<FoldReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
