//! Multi-class evaluation: accuracy, one-vs-rest ROC/AUC, macro-F1 and
//! true-class-probability box-plot statistics.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::backbone::argmax;
use crate::error::{Error, Result};

/// False-positive rates at which sensitivity is reported.
pub const LOW_FPR_POINTS: [f64; 3] = [0.01, 0.05, 0.1];

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Score at or above which samples are called positive. The opening
    /// (0, 0) point uses +∞.
    #[serde(with = "extended_f64")]
    pub threshold: f64,
}

/// Tie-grouped ROC curve from (0, 0) to (1, 1), ascending in fpr.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("ROC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold,
        });
    }
    Ok(curve)
}

pub fn auc_trapezoid(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Sensitivity at a given false-positive rate, linearly interpolated along
/// the curve (the upper value is taken on vertical segments).
pub fn tpr_at_fpr(curve: &[RocPoint], fpr: f64) -> f64 {
    let mut best = 0.0;
    for w in curve.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.fpr <= fpr {
            best = b.tpr;
        } else if a.fpr <= fpr {
            let t = (fpr - a.fpr) / (b.fpr - a.fpr);
            return a.tpr + t * (b.tpr - a.tpr);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroAuc {
    pub macro_auc: f64,
    /// `None` for classes lacking positives or negatives.
    pub per_class: Vec<Option<f64>>,
    pub curves: Vec<Option<Vec<RocPoint>>>,
    pub skipped: Vec<usize>,
}

fn check_probs(probs: &Mat, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::Metric(format!("{} rows for {} labels", probs.nrows(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.ncols()) {
        return Err(Error::LabelOutOfRange(bad));
    }
    Ok(())
}

pub fn macro_auc_ovr(probs: &Mat, labels: &[usize]) -> Result<MacroAuc> {
    check_probs(probs, labels)?;
    let mut per_class = Vec::with_capacity(probs.ncols());
    let mut curves = Vec::with_capacity(probs.ncols());
    let mut skipped = Vec::new();
    for k in 0..probs.ncols() {
        let binary: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        if binary.iter().all(|&b| b) || !binary.iter().any(|&b| b) {
            skipped.push(k);
            per_class.push(None);
            curves.push(None);
            continue;
        }
        let curve = roc_points(&probs.column(k).to_vec(), &binary)?;
        per_class.push(Some(auc_trapezoid(&curve)));
        curves.push(Some(curve));
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Metric("macro AUC needs at least two classes present".into()));
    }
    Ok(MacroAuc {
        macro_auc: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
        curves,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroF1 {
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
    /// Classes neither present in labels nor predicted.
    pub absent: Vec<usize>,
}

pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<MacroF1> {
    if preds.len() != labels.len() {
        return Err(Error::Metric("preds and labels differ in length".into()));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::LabelOutOfRange(bad));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut absent = Vec::new();
    for c in 0..k {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if tp + fp + fneg == 0 {
            absent.push(c);
            per_class.push(0.0);
        } else {
            per_class.push(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64);
        }
    }
    Ok(MacroF1 {
        macro_f1: per_class.iter().sum::<f64>() / k.max(1) as f64,
        per_class,
        absent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Lower whisker: smallest value within `q1 - 1.5·IQR`.
    pub lo: f64,
    /// Upper whisker: largest value within `q3 + 1.5·IQR`.
    pub hi: f64,
    pub outliers: Vec<f64>,
}

/// Linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.75));
    let iqr = q3 - q1;
    let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = v.iter().copied().filter(|x| (fence_lo..=fence_hi).contains(x)).collect();
    Some(BoxStats {
        n: v.len(),
        median,
        q1,
        q3,
        lo: inside.first().copied().unwrap_or(q1),
        hi: inside.last().copied().unwrap_or(q3),
        outliers: v.iter().copied().filter(|x| !(fence_lo..=fence_hi).contains(x)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueClassProbStats {
    pub overall: Option<BoxStats>,
    /// `None` for classes with no samples.
    pub per_class: Vec<Option<BoxStats>>,
}

pub fn true_class_prob_stats(probs: &Mat, labels: &[usize]) -> Result<TrueClassProbStats> {
    check_probs(probs, labels)?;
    let p: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| probs[[i, l]]).collect();
    let per_class = (0..probs.ncols())
        .map(|k| {
            let vals: Vec<f64> = p.iter().zip(labels).filter(|(_, &l)| l == k).map(|(&v, _)| v).collect();
            box_stats(&vals)
        })
        .collect();
    Ok(TrueClassProbStats {
        overall: box_stats(&p),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowFprSensitivity {
    pub fpr: f64,
    pub tpr: f64,
}

/// Everything reported for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub macro_auc: f64,
    pub macro_f1: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub auc_skipped_classes: Vec<usize>,
    pub per_class_f1: Vec<f64>,
    pub f1_absent_classes: Vec<usize>,
    pub roc: Vec<Option<Vec<RocPoint>>>,
    pub low_fpr_tpr: Vec<Option<Vec<LowFprSensitivity>>>,
    pub boxplot: TrueClassProbStats,
}

pub fn evaluate(probs: &Mat, labels: &[usize]) -> Result<EvalResult> {
    check_probs(probs, labels)?;
    let preds: Vec<usize> = probs.rows().into_iter().map(|r| argmax(&r.to_vec())).collect();
    let acc = accuracy(&preds, labels)?;
    let auc = macro_auc_ovr(probs, labels)?;
    let f1 = macro_f1(&preds, labels, probs.ncols())?;
    let low_fpr_tpr = auc
        .curves
        .iter()
        .map(|c| {
            c.as_ref().map(|curve| {
                LOW_FPR_POINTS
                    .iter()
                    .map(|&fpr| LowFprSensitivity {
                        fpr,
                        tpr: tpr_at_fpr(curve, fpr),
                    })
                    .collect()
            })
        })
        .collect();
    Ok(EvalResult {
        accuracy: acc,
        macro_auc: auc.macro_auc,
        macro_f1: f1.macro_f1,
        per_class_auc: auc.per_class,
        auc_skipped_classes: auc.skipped,
        per_class_f1: f1.per_class,
        f1_absent_classes: f1.absent,
        roc: auc.curves,
        low_fpr_tpr,
        boxplot: true_class_prob_stats(probs, labels)?,
    })
}

/// JSON has no infinities; they travel as the strings "inf" / "-inf".
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad number {other:?}"))),
            },
        }
    }
}
