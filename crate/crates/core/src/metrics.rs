//! ROC AUC, threshold selection, fold aggregation and paired t-tests.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Criterion used to pick the decision threshold when none is given.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    #[default]
    F1,
    Accuracy,
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| cmp(scores[a], scores[b]));
    // sum of mid-ranks of positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub acc: f64,
    pub f1: f64,
    pub threshold: f64,
}

/// Accuracy and F1 with `score >= threshold` predicting the positive class.
/// Without a threshold, every midpoint between adjacent distinct scores is
/// tried and the best by `rule` wins, ties going to the lower threshold.
pub fn classification_metrics(
    scores: &[f64],
    labels: &[bool],
    threshold: Option<f64>,
    rule: ThresholdRule,
) -> Result<ClassMetrics> {
    check_lengths(scores, labels)?;
    if !labels.iter().any(|&l| l) {
        return Err(Error::UndefinedMetric("F1 needs at least one positive label".into()));
    }
    let t = match threshold {
        Some(t) => t,
        None => select_threshold(scores, labels, rule),
    };
    let (acc, f1) = acc_f1(scores, labels, t);
    Ok(ClassMetrics { acc, f1, threshold: t })
}

/// Midpoints between adjacent distinct scores. A single distinct score
/// yields 0.5.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(|a, b| cmp(*a, *b));
    u.dedup();
    if u.len() < 2 {
        return vec![0.5];
    }
    u.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
}

fn select_threshold(scores: &[f64], labels: &[bool], rule: ThresholdRule) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.5);
    for t in candidate_thresholds(scores) {
        let (acc, f1) = acc_f1(scores, labels, t);
        let v = match rule {
            ThresholdRule::F1 => f1,
            ThresholdRule::Accuracy => acc,
        };
        if v > best.0 {
            best = (v, t);
        }
    }
    best.1
}

fn acc_f1(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= t, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let acc = (tp + tn) as f64 / scores.len() as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    (acc, f1)
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    Ok(())
}

fn cmp(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "paired series of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::Degenerate("differences have zero variance".into()));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = (n - 1) as f64;
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        p,
        df: n - 1,
        mean_diff: mean,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub cases: usize,
}

impl FoldMetrics {
    pub fn evaluate(scores: &[f64], labels: &[bool], threshold: Option<f64>, rule: ThresholdRule) -> Result<Self> {
        let auc = roc_auc(scores, labels)?;
        let m = classification_metrics(scores, labels, threshold, rule)?;
        Ok(FoldMetrics {
            acc: m.acc,
            auc,
            f1: m.f1,
            threshold: m.threshold,
            cases: scores.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (`n - 1`); a single value has sd 0.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSd {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanSd { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub acc: MeanSd,
    pub auc: MeanSd,
    pub f1: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub per_fold: Vec<FoldMetrics>,
    pub mean_sd: Aggregate,
}

impl MetricsReport {
    /// Top-level values are the fold means; `threshold` is the mean threshold.
    pub fn from_folds(mode: impl Into<String>, per_fold: Vec<FoldMetrics>) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(Error::Input("report needs at least one fold".into()));
        }
        let col = |f: fn(&FoldMetrics) -> f64| per_fold.iter().map(f).collect::<Vec<_>>();
        let mean_sd = Aggregate {
            acc: MeanSd::of(&col(|m| m.acc)),
            auc: MeanSd::of(&col(|m| m.auc)),
            f1: MeanSd::of(&col(|m| m.f1)),
        };
        let threshold = MeanSd::of(&col(|m| m.threshold)).mean;
        Ok(MetricsReport {
            mode: mode.into(),
            acc: mean_sd.acc.mean,
            auc: mean_sd.auc.mean,
            f1: mean_sd.f1.mean,
            threshold,
            per_fold,
            mean_sd,
        })
    }
}

/// Trains on all folds but one and evaluates on the held-out fold, for each
/// fold in turn. `eval` returns `(score, positive)` per held-out case.
pub fn cross_validate<M, T, E>(
    folds: &[Vec<String>],
    mode: &str,
    rule: ThresholdRule,
    mut train: T,
    mut eval: E,
) -> Result<MetricsReport>
where
    T: FnMut(usize, &[String]) -> Result<M>,
    E: FnMut(&M, &[String]) -> Result<Vec<(f64, bool)>>,
{
    if folds.len() < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    let mut per_fold = Vec::with_capacity(folds.len());
    for (k, held_out) in folds.iter().enumerate() {
        let train_ids: Vec<String> = folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        let model = train(k, &train_ids)?;
        let preds = eval(&model, held_out)?;
        let (scores, labels): (Vec<f64>, Vec<bool>) = preds.into_iter().unzip();
        per_fold.push(FoldMetrics::evaluate(&scores, &labels, None, rule)?);
    }
    MetricsReport::from_folds(mode, per_fold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub test: TTest,
}

type MetricFn = fn(&FoldMetrics) -> f64;

/// Paired t-tests per metric across the folds of two reports.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Result<Vec<SignificanceRow>> {
    if a.per_fold.len() != b.per_fold.len() {
        return Err(Error::Input(format!(
            "reports have {} and {} folds",
            a.per_fold.len(),
            b.per_fold.len()
        )));
    }
    let metrics: [(&str, MetricFn); 3] = [("acc", |m| m.acc), ("auc", |m| m.auc), ("f1", |m| m.f1)];
    metrics
        .iter()
        .map(|(name, f)| {
            let xa: Vec<f64> = a.per_fold.iter().map(f).collect();
            let xb: Vec<f64> = b.per_fold.iter().map(f).collect();
            Ok(SignificanceRow {
                metric: name.to_string(),
                mean_a: MeanSd::of(&xa).mean,
                mean_b: MeanSd::of(&xb).mean,
                test: paired_ttest(&xa, &xb)?,
            })
        })
        .collect()
}

fn pct(m: MeanSd) -> String {
    format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.sd)
}

/// Plain-text table, one row per report, values in percent as mean±sd.
pub fn render_table(reports: &[&MetricsReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>14} {:>14} {:>14} {:>6}",
        "Mode", "ACC (%)", "AUC (%)", "F1 (%)", "Folds"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>14} {:>14} {:>6}",
            r.mode,
            pct(r.mean_sd.acc),
            pct(r.mean_sd.auc),
            pct(r.mean_sd.f1),
            r.per_fold.len()
        );
    }
    s
}

pub fn render_significance(rows: &[SignificanceRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6} {:>10} {:>10} {:>10} {:>10}",
        "Metric", "Mean A", "Mean B", "t", "p"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.metric, r.mean_a, r.mean_b, r.test.t, r.test.p
        );
    }
    s
}
