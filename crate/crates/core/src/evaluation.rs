//! Confusion matrices, support-weighted metrics, fold aggregation and the
//! CSV/JSON files consumed by the plotting tools.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{EpochLog, Prediction};
use crate::dataset::BinaryLabel;
use crate::error::{Error, Result};

/// 2×2 counts with Abnormal as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix2 {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix2 {
    pub fn new(tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        Self { tp, fn_, fp, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn record(&mut self, truth: BinaryLabel, predicted: BinaryLabel) {
        use BinaryLabel::*;
        match (truth, predicted) {
            (Abnormal, Abnormal) => self.tp += 1,
            (Abnormal, Normal) => self.fn_ += 1,
            (Normal, Abnormal) => self.fp += 1,
            (Normal, Normal) => self.tn += 1,
        }
    }

    pub fn merged(&self, other: &Self) -> Self {
        Self::new(
            self.tp + other.tp,
            self.fn_ + other.fn_,
            self.fp + other.fp,
            self.tn + other.tn,
        )
    }
}

/// Counts predictions against `truth` (looked up by sample id).
pub fn confusion<'a>(
    predictions: &[Prediction],
    truth: impl Fn(&str) -> Option<BinaryLabel> + 'a,
) -> Result<ConfusionMatrix2> {
    let mut m = ConfusionMatrix2::default();
    for p in predictions {
        let t = truth(&p.id).ok_or_else(|| Error::InvalidArgument(format!("no ground truth for {}", p.id)))?;
        m.record(t, p.predicted);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub normal: ClassMetrics,
    pub abnormal: ClassMetrics,
    /// Set when some ratio was 0/0 and taken as 0.
    pub undefined_ratio: bool,
}

/// The four headline metrics, in report order.
pub const METRIC_NAMES: [&str; 4] = ["accuracy", "precision", "recall", "f1"];

impl MetricsReport {
    pub fn headline(&self) -> [f64; 4] {
        [
            self.accuracy,
            self.precision_weighted,
            self.recall_weighted,
            self.f1_weighted,
        ]
    }
}

fn ratio(num: u64, den: u64, undefined: &mut bool) -> f64 {
    if den == 0 {
        *undefined = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(tp: u64, fn_: u64, fp: u64, undefined: &mut bool) -> ClassMetrics {
    let precision = ratio(tp, tp + fp, undefined);
    let recall = ratio(tp, tp + fn_, undefined);
    // F1 as 2tp / (2tp + fp + fn), which equals the harmonic mean and is 0/0 only
    // when the class is absent from both truth and predictions
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_, undefined);
    ClassMetrics {
        precision,
        recall,
        f1,
        support: tp + fn_,
    }
}

/// Per-class and support-weighted metrics; 0/0 ratios count as 0.
pub fn metrics_from_matrix(m: &ConfusionMatrix2) -> Result<MetricsReport> {
    let n = m.total();
    if n == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let mut undefined = false;
    let abnormal = class_metrics(m.tp, m.fn_, m.fp, &mut undefined);
    // Normal as positive: its true positives are tn
    let normal = class_metrics(m.tn, m.fp, m.fn_, &mut undefined);
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        (f(&normal) * normal.support as f64 + f(&abnormal) * abnormal.support as f64) / n as f64
    };
    Ok(MetricsReport {
        accuracy: (m.tp + m.tn) as f64 / n as f64,
        precision_weighted: weighted(|c| c.precision),
        // Σ support_c · (correct_c / support_c) / n, with the supports cancelled
        // exactly so the identity with accuracy survives floating point
        recall_weighted: (m.tp + m.tn) as f64 / n as f64,
        f1_weighted: weighted(|c| c.f1),
        normal,
        abnormal,
        undefined_ratio: undefined,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Raw,
    Segmented,
}

impl PipelineMode {
    pub fn name(self) -> &'static str {
        match self {
            PipelineMode::Raw => "raw",
            PipelineMode::Segmented => "segmented",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub confusion: ConfusionMatrix2,
    pub metrics: MetricsReport,
    pub predictions: Vec<Prediction>,
    /// Mean held-out Dice of the fold's U-Net (segmented mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unet_val_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: PipelineMode,
    pub fold_plan_seed: u64,
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub pooled_confusion: ConfusionMatrix2,
    pub pooled: MetricsReport,
    pub averaged: MetricsReport,
    pub epochs: Vec<EpochLog>,
}

impl RunReport {
    /// Mean of the per-fold U-Net Dice values, when present.
    pub fn unet_val_dice(&self) -> Option<f64> {
        let v: Vec<f64> = self.folds.iter().filter_map(|f| f.unet_val_dice).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn mean_report(reports: &[&MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let avg_class = |pick: &dyn Fn(&MetricsReport) -> ClassMetrics| ClassMetrics {
        precision: avg(&|r| pick(r).precision),
        recall: avg(&|r| pick(r).recall),
        f1: avg(&|r| pick(r).f1),
        support: reports.iter().map(|r| pick(r).support).sum(),
    };
    MetricsReport {
        accuracy: avg(&|r| r.accuracy),
        precision_weighted: avg(&|r| r.precision_weighted),
        recall_weighted: avg(&|r| r.recall_weighted),
        f1_weighted: avg(&|r| r.f1_weighted),
        normal: avg_class(&|r| r.normal),
        abnormal: avg_class(&|r| r.abnormal),
        undefined_ratio: reports.iter().any(|r| r.undefined_ratio),
    }
}

/// Pooled (summed matrix) and fold-averaged (unweighted mean) metrics.
/// Averaged class supports are totals, not means.
pub fn aggregate(
    mode: PipelineMode,
    fold_plan_seed: u64,
    mut folds: Vec<FoldReport>,
    epochs: Vec<EpochLog>,
) -> Result<RunReport> {
    if folds.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate zero folds".into()));
    }
    folds.sort_by_key(|f| f.fold);
    let pooled_confusion = folds
        .iter()
        .fold(ConfusionMatrix2::default(), |acc, f| acc.merged(&f.confusion));
    let pooled = metrics_from_matrix(&pooled_confusion)?;
    let averaged = mean_report(&folds.iter().map(|f| &f.metrics).collect::<Vec<_>>());
    Ok(RunReport {
        mode,
        fold_plan_seed,
        k: folds.len(),
        folds,
        pooled_confusion,
        pooled,
        averaged,
        epochs,
    })
}

/// `seg − raw` in percentage points for each headline metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pooled: [f64; 4],
    pub averaged: [f64; 4],
}

pub fn compare_metrics(raw: &MetricsReport, seg: &MetricsReport) -> [f64; 4] {
    let (r, s) = (raw.headline(), seg.headline());
    std::array::from_fn(|i| 100.0 * (s[i] - r[i]))
}

pub fn compare_runs(raw: &RunReport, seg: &RunReport) -> Comparison {
    Comparison {
        pooled: compare_metrics(&raw.pooled, &seg.pooled),
        averaged: compare_metrics(&raw.averaged, &seg.averaged),
    }
}

/// Percentage truncated (not rounded) to two decimals, e.g. 743/917 → `81.02`.
pub fn percent(v: f64) -> String {
    let hundredths = (v * 10_000.0 + 1e-9).floor() as i64;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// Exact version of [`percent`] for a ratio of counts.
pub fn percent_of(num: u64, den: u64) -> Result<String> {
    if den == 0 {
        return Err(Error::InvalidArgument("percentage of an empty total".into()));
    }
    let hundredths = (num as u128 * 10_000) / den as u128;
    Ok(format!("{}.{:02}", hundredths / 100, hundredths % 100))
}

pub const REPORT_FILE: &str = "report.json";
pub const CONFUSION_FILE: &str = "confusion_pooled.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

pub fn confusion_csv(m: &ConfusionMatrix2) -> String {
    format!(
        "truth,pred_normal,pred_abnormal\nnormal,{},{}\nabnormal,{},{}\n",
        m.tn, m.fp, m.fn_, m.tp
    )
}

pub fn epochs_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from("fold,epoch,train_loss,train_acc,val_acc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.fold, r.epoch, r.train_loss, r.train_accuracy, r.val_accuracy
        );
    }
    s
}

pub fn metrics_csv(report: &RunReport) -> String {
    let mut s = String::from("variant,metric,value\n");
    for (variant, m) in [("pooled", &report.pooled), ("averaged", &report.averaged)] {
        for (name, v) in METRIC_NAMES.iter().zip(m.headline()) {
            let _ = writeln!(s, "{variant},{name},{v}");
        }
    }
    s
}

pub fn comparison_csv(c: &Comparison) -> String {
    let mut s = String::from("metric,pooled_delta_pp,averaged_delta_pp\n");
    for (i, name) in METRIC_NAMES.iter().enumerate() {
        let _ = writeln!(s, "{name},{:.2},{:.2}", c.pooled[i], c.averaged[i]);
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes report.json plus the CSVs of [`write_run_csvs`].
pub fn write_run_files(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join(REPORT_FILE), &(serde_json::to_string_pretty(report)? + "\n"))?;
    write_run_csvs(report, dir)
}

/// Writes confusion_pooled.csv, epochs.csv and metrics.csv.
pub fn write_run_csvs(report: &RunReport, dir: &Path) -> Result<()> {
    write_text(&dir.join(CONFUSION_FILE), &confusion_csv(&report.pooled_confusion))?;
    write_text(&dir.join(EPOCHS_FILE), &epochs_csv(&report.epochs))?;
    write_text(&dir.join(METRICS_FILE), &metrics_csv(report))
}

pub fn write_comparison(c: &Comparison, dir: &Path) -> Result<()> {
    write_text(&dir.join(COMPARISON_FILE), &comparison_csv(c))
}

pub fn read_run_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
