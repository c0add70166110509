//! Classification metrics, threshold selection and the metrics report.

use serde::Serialize;

use crate::data::Label;
use crate::error::{contract_err, Result};
use crate::model::Task;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(F_beta, G_beta)`; zero denominators give 0.
pub fn fbeta_gbeta(c: &Confusion, beta: f64) -> (f64, f64) {
    let (p, r) = (c.precision(), c.sensitivity());
    let b2 = beta * beta;
    let f = if b2 * p + r == 0.0 { 0.0 } else { (1.0 + b2) * p * r / (b2 * p + r) };
    let gd = c.tp as f64 + c.fp as f64 + beta * c.fn_ as f64;
    let g = if gd == 0.0 { 0.0 } else { c.tp as f64 / gd };
    (f, g)
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(contract_err!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(contract_err!("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(contract_err!("AUROC/AUPRC undefined with a single class ({pos} of {} positive)", labels.len()));
    }
    Ok(pos)
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = check_binary(scores, labels)?;
    let neg = labels.len() - pos;
    let idx = descending(scores);
    // Walk tie groups from the top, counting negatives strictly below each positive.
    let mut negs_above = 0u64;
    let mut wins = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let (gp, gn) = idx[i..j].iter().fold((0u64, 0u64), |(p, n), &k| if labels[k] { (p + 1, n) } else { (p, n + 1) });
        let below = neg as u64 - negs_above - gn;
        wins += gp as f64 * (below as f64 + 0.5 * gn as f64);
        negs_above += gn;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision: sum over thresholds of `precision * Δrecall`, one
/// threshold per distinct score.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = check_binary(scores, labels)? as f64;
    let idx = descending(scores);
    let (mut tp, mut fp, mut prev_recall, mut area) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let recall = tp / pos;
        area += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

pub fn auroc_auprc(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    Ok((auroc(scores, labels)?, auprc(scores, labels)?))
}

/// `C x C` confusion matrix, rows are truth.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], c: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != truth.len() {
        return Err(contract_err!("{} predictions vs {} labels", pred.len(), truth.len()));
    }
    let mut m = vec![vec![0u64; c]; c];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= c || t >= c {
            return Err(contract_err!("class index out of range for {c} classes"));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Cohen's kappa from a confusion matrix; 0 when chance agreement is 1.
pub fn kappa_from_matrix(m: &[Vec<u64>]) -> f64 {
    let n: u64 = m.iter().flatten().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let p_o = (0..m.len()).map(|i| m[i][i] as f64).sum::<f64>() / n;
    let p_e = (0..m.len())
        .map(|k| {
            let row: u64 = m[k].iter().sum();
            let col: u64 = m.iter().map(|r| r[k]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if p_e == 1.0 {
        0.0
    } else {
        (p_o - p_e) / (1.0 - p_e)
    }
}

pub fn cohen_kappa(pred: &[usize], truth: &[usize], c: usize) -> Result<f64> {
    Ok(kappa_from_matrix(&confusion_matrix(pred, truth, c)?))
}

/// F1-maximizing cutoff over midpoints of consecutive distinct scores,
/// predicting positive for `score >= cutoff`; the lowest cutoff wins ties.
/// With a single distinct score the cutoff is that score.
pub fn threshold_select(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(contract_err!("threshold_select needs aligned, non-empty inputs"));
    }
    let idx = descending(scores);
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best: Option<(f64, f64)> = None;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if j < idx.len() {
            let cut = 0.5 * (scores[idx[i]] + scores[idx[j]]);
            let f1 = fbeta_gbeta(&Confusion { tp, fp, fn_: pos - tp, tn: 0 }, 1.0).0;
            // Cutoffs descend, so `>=` keeps the lowest on ties.
            if best.map_or(true, |(b, _)| f1 >= b) {
                best = Some((f1, cut));
            }
        }
        i = j;
    }
    Ok(best.map_or(scores[idx[0]], |(_, cut)| cut))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auprc: Option<f64>,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub task: Task,
    pub n: usize,
    /// The model-selection metric: AUROC (binary), macro-F1 (multiclass) or macro-AUROC (multilabel).
    pub primary: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auprc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specificity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_auprc: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<ClassMetrics>,
    /// Binary: `[[tn, fp], [fn, tp]]`; multiclass: rows are truth.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<f64>,
}

impl MetricsReport {
    fn empty(task: Task, n: usize) -> Self {
        Self {
            task,
            n,
            primary: 0.0,
            auroc: None,
            auprc: None,
            f1: None,
            f2: None,
            g2: None,
            sensitivity: None,
            specificity: None,
            kappa: None,
            accuracy: None,
            macro_f1: None,
            macro_auroc: None,
            macro_auprc: None,
            per_class: Vec::new(),
            confusion: Vec::new(),
            thresholds: Vec::new(),
        }
    }
}

/// Decision thresholds for binary and multilabel tasks, picked on
/// validation scores. Multiclass uses argmax and needs none.
pub fn select_thresholds(task: Task, scores: &[Vec<f64>], labels: &[Label]) -> Result<Vec<f64>> {
    match task {
        Task::Multiclass => Ok(Vec::new()),
        Task::Binary | Task::Multilabel => {
            let c = scores.first().map_or(0, Vec::len);
            (0..c)
                .map(|k| {
                    let s: Vec<f64> = scores.iter().map(|v| v[k]).collect();
                    let y = class_truth(labels, k)?;
                    threshold_select(&s, &y)
                })
                .collect()
        }
    }
}

fn class_truth(labels: &[Label], k: usize) -> Result<Vec<bool>> {
    labels
        .iter()
        .map(|l| match l {
            Label::Class(c) => Ok(*c == 1),
            Label::Multi(bits) => bits.get(k).copied().ok_or_else(|| contract_err!("label has no class {k}")),
        })
        .collect()
}

/// Full report from probability scores (one row per record). Binary and
/// multilabel decisions use `thresholds` (0.5 when empty).
pub fn evaluate(task: Task, scores: &[Vec<f64>], labels: &[Label], thresholds: &[f64]) -> Result<MetricsReport> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(contract_err!("{} score rows vs {} labels", scores.len(), labels.len()));
    }
    let n = scores.len();
    let c = scores[0].len();
    let mut rep = MetricsReport::empty(task, n);
    match task {
        Task::Binary => {
            let s: Vec<f64> = scores.iter().map(|v| v[0]).collect();
            let y = class_truth(labels, 0)?;
            let cut = thresholds.first().copied().unwrap_or(0.5);
            let conf = Confusion::from_predictions(&s.iter().map(|&v| v >= cut).collect::<Vec<_>>(), &y);
            let (auroc, auprc) = auroc_auprc(&s, &y)?;
            let m = vec![vec![conf.tn, conf.fp], vec![conf.fn_, conf.tp]];
            rep.primary = auroc;
            rep.auroc = Some(auroc);
            rep.auprc = Some(auprc);
            rep.f1 = Some(fbeta_gbeta(&conf, 1.0).0);
            let (f2, g2) = fbeta_gbeta(&conf, 2.0);
            rep.f2 = Some(f2);
            rep.g2 = Some(g2);
            rep.sensitivity = Some(conf.sensitivity());
            rep.specificity = Some(conf.specificity());
            rep.kappa = Some(kappa_from_matrix(&m));
            rep.accuracy = Some((conf.tp + conf.tn) as f64 / n as f64);
            rep.confusion = m;
            rep.thresholds = vec![cut];
        }
        Task::Multiclass => {
            let pred: Vec<usize> = scores.iter().map(|v| argmax(v)).collect();
            let truth: Vec<usize> = labels
                .iter()
                .map(|l| l.class().ok_or_else(|| contract_err!("multiclass needs class labels")))
                .collect::<Result<_>>()?;
            let m = confusion_matrix(&pred, &truth, c)?;
            for k in 0..c {
                let conf = Confusion::from_predictions(
                    &pred.iter().map(|&p| p == k).collect::<Vec<_>>(),
                    &truth.iter().map(|&t| t == k).collect::<Vec<_>>(),
                );
                rep.per_class.push(ClassMetrics {
                    class: k,
                    auroc: None,
                    auprc: None,
                    f1: fbeta_gbeta(&conf, 1.0).0,
                    sensitivity: conf.sensitivity(),
                    specificity: conf.specificity(),
                    threshold: None,
                });
            }
            let macro_f1 = rep.per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64;
            rep.primary = macro_f1;
            rep.macro_f1 = Some(macro_f1);
            rep.kappa = Some(kappa_from_matrix(&m));
            rep.accuracy = Some((0..c).map(|k| m[k][k]).sum::<u64>() as f64 / n as f64);
            rep.confusion = m;
        }
        Task::Multilabel => {
            let (mut aurocs, mut auprcs) = (Vec::new(), Vec::new());
            for k in 0..c {
                let s: Vec<f64> = scores.iter().map(|v| v[k]).collect();
                let y = class_truth(labels, k)?;
                let cut = thresholds.get(k).copied().unwrap_or(0.5);
                let conf = Confusion::from_predictions(&s.iter().map(|&v| v >= cut).collect::<Vec<_>>(), &y);
                let both = y.iter().any(|&b| b) && y.iter().any(|&b| !b);
                let (au, ap) = if both { (Some(auroc(&s, &y)?), Some(auprc(&s, &y)?)) } else { (None, None) };
                aurocs.extend(au);
                auprcs.extend(ap);
                rep.per_class.push(ClassMetrics {
                    class: k,
                    auroc: au,
                    auprc: ap,
                    f1: fbeta_gbeta(&conf, 1.0).0,
                    sensitivity: conf.sensitivity(),
                    specificity: conf.specificity(),
                    threshold: Some(cut),
                });
                rep.thresholds.push(cut);
            }
            if aurocs.is_empty() {
                return Err(contract_err!("macro-AUROC undefined: no class has both positives and negatives"));
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            rep.primary = mean(&aurocs);
            rep.macro_auroc = Some(rep.primary);
            rep.macro_auprc = Some(mean(&auprcs));
            rep.macro_f1 = Some(rep.per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64);
        }
    }
    Ok(rep)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fbeta_examples() {
        let c = Confusion { tp: 6, fp: 2, fn_: 4, tn: 0 };
        let (f2, g2) = fbeta_gbeta(&c, 2.0);
        assert!((f2 - 0.625).abs() < 1e-15);
        assert!((g2 - 0.375).abs() < 1e-15);
        for beta in [0.5, 1.0, 2.0, 7.0] {
            assert_eq!(fbeta_gbeta(&Confusion { tp: 10, fp: 0, fn_: 0, tn: 3 }, beta), (1.0, 1.0));
            assert_eq!(fbeta_gbeta(&Confusion { tp: 0, fp: 3, fn_: 2, tn: 3 }, beta), (0.0, 0.0));
        }
        assert_eq!(fbeta_gbeta(&Confusion::default(), 1.0), (0.0, 0.0));
    }

    #[test]
    fn auroc_conventions() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &y).unwrap(), 0.0);
        assert_eq!(auroc(&[0.3; 4], &y).unwrap(), 0.5);
        assert_eq!(auprc(&[0.1, 0.2, 0.8, 0.9], &y).unwrap(), 1.0);
        assert_eq!(auprc(&[0.3; 4], &y).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auprc(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn auprc_hand_case() {
        // Ranking P N P N: precision 1 at recall 1/2, 2/3 at recall 1.
        let v = auprc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((v - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn kappa_hand_case() {
        let m = vec![vec![45, 5], vec![15, 35]];
        assert!((kappa_from_matrix(&m) - 0.6).abs() < 1e-12);
        assert_eq!(cohen_kappa(&[1, 0, 2], &[1, 0, 2], 3).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[0, 0, 0], &[0, 0, 0], 2).unwrap(), 0.0);
    }

    #[test]
    fn threshold_tie_rule() {
        let t = threshold_select(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert!((t - 0.5).abs() < 1e-15);
        // F1 = 2/3 at cutoffs 0.8 and 0.2; the lower one wins.
        let t = threshold_select(&[0.9, 0.7, 0.5, 0.3, 0.1], &[true, false, false, true, false]).unwrap();
        assert!((t - 0.2).abs() < 1e-15);
        assert_eq!(threshold_select(&[0.4, 0.4], &[true, false]).unwrap(), 0.4);
    }

    #[test]
    fn report_binary_and_multiclass() {
        let scores = vec![vec![0.1], vec![0.7], vec![0.8], vec![0.4]];
        let labels = vec![Label::Class(0), Label::Class(0), Label::Class(1), Label::Class(1)];
        let r = evaluate(Task::Binary, &scores, &labels, &[0.5]).unwrap();
        assert_eq!(r.auroc, Some(0.75));
        assert_eq!(r.confusion, vec![vec![1, 1], vec![1, 1]]);
        assert_eq!(r.primary, 0.75);

        let scores = vec![vec![0.8, 0.1, 0.1], vec![0.2, 0.7, 0.1], vec![0.2, 0.2, 0.6], vec![0.5, 0.4, 0.1]];
        let labels = vec![Label::Class(0), Label::Class(1), Label::Class(2), Label::Class(1)];
        let r = evaluate(Task::Multiclass, &scores, &labels, &[]).unwrap();
        assert_eq!(r.accuracy, Some(0.75));
        let expect = (2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 3.0;
        assert!((r.macro_f1.unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn multilabel_thresholds_are_per_class() {
        let scores = vec![vec![0.1, 0.9], vec![0.3, 0.2], vec![0.6, 0.8], vec![0.9, 0.1]];
        let labels: Vec<Label> = [[false, true], [false, false], [true, true], [true, false]]
            .iter()
            .map(|b| Label::Multi(b.to_vec()))
            .collect();
        let th = select_thresholds(Task::Multilabel, &scores, &labels).unwrap();
        assert!((th[0] - 0.45).abs() < 1e-15);
        assert!((th[1] - 0.5).abs() < 1e-15);
        let r = evaluate(Task::Multilabel, &scores, &labels, &th).unwrap();
        assert_eq!(r.macro_auroc, Some(1.0));
        assert_eq!(r.macro_f1, Some(1.0));
    }
}
