//! Task losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::data::SurvivalRecord;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Diagnosis,
    Grading,
    Survival,
}

impl Task {
    pub fn default_epochs(self) -> usize {
        match self {
            Task::Diagnosis | Task::Grading => 20,
            Task::Survival => 10,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Diagnosis => "diagnosis",
            Task::Grading => "grading",
            Task::Survival => "survival",
        })
    }
}

/// Weight `alpha` on the tumour consistency term; TME gets `1 - alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
        }
        Ok(LossWeights { alpha })
    }

    pub fn alpha(self) -> f64 {
        self.alpha
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Contract(format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn matrix_dims(v: &Var<'_>, what: &str) -> Result<(usize, usize)> {
    match v.shape()[..] {
        [b, k] => Ok((b, k)),
        ref s => Err(Error::Dimension(format!("{what} must be [B,K], got {s:?}"))),
    }
}

/// Mean cross-entropy of `[B, K]` logits against class labels.
pub fn ce_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (b, k) = matrix_dims(&logits, "logits")?;
    check_labels(labels, b, k)?;
    let onehot = Tensor::from_fn(&[b, k], |i| if labels[i / k] == i % k { 1.0 } else { 0.0 });
    logits
        .log_softmax()?
        .mul(logits.tape().constant(onehot))?
        .sum()?
        .scale(-1.0 / b as f64)
}

/// Discrete-time survival negative log-likelihood.
///
/// Column `j` of `hazard_logits` parameterizes `h_j = sigmoid(logit_j)`, the
/// probability of the event in bin `j` given survival to it. An event in bin
/// `j` costs `-log S_{j-1} - log h_j`; censoring in bin `j` costs `-log S_j`,
/// with `S_j = prod_{m<=j} (1 - h_m)`. Uses `-log h = softplus(-x)` and
/// `-log(1 - h) = softplus(x)`.
pub fn nll_survival_loss<'t>(hazard_logits: Var<'t>, records: &[SurvivalRecord]) -> Result<Var<'t>> {
    let (b, k) = matrix_dims(&hazard_logits, "hazard logits")?;
    if records.len() != b {
        return Err(Error::Contract(format!("{} records for batch of {b}", records.len())));
    }
    let mut survived = vec![0.0; b * k];
    let mut hit = vec![0.0; b * k];
    for (i, r) in records.iter().enumerate() {
        if r.bin >= k {
            return Err(Error::Contract(format!("survival bin {} out of range for {k} bins", r.bin)));
        }
        let last = if r.event { r.bin } else { r.bin + 1 };
        survived[i * k..i * k + last].iter_mut().for_each(|v| *v = 1.0);
        if r.event {
            hit[i * k + r.bin] = 1.0;
        }
    }
    let tape = hazard_logits.tape();
    let survive_term = hazard_logits
        .softplus()?
        .mul(tape.constant(Tensor::from_parts(vec![b, k], survived)))?
        .sum()?;
    let event_term = hazard_logits
        .scale(-1.0)?
        .softplus()?
        .mul(tape.constant(Tensor::from_parts(vec![b, k], hit)))?
        .sum()?;
    survive_term.add(event_term)?.scale(1.0 / b as f64)
}

/// `task + alpha * tumour_consistency + (1 - alpha) * tme_consistency`.
pub fn total_loss<'t>(
    task_loss: Var<'t>,
    ge_con_t: Var<'t>,
    ge_con_e: Var<'t>,
    weights: LossWeights,
) -> Result<Var<'t>> {
    let a = weights.alpha();
    task_loss
        .add(ge_con_t.scale(a)?)?
        .add(ge_con_e.scale(1.0 - a)?)
}

/// Per-bin hazards of one logit row.
pub fn hazards(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()
}

/// Risk score `sum_j (1 - S_j)`: expected number of bins spent after the
/// event. Unlike `1 - S_last` alone it does not saturate when the open-ended
/// last bin's hazard approaches one.
pub fn risk_score(logits: &[f64]) -> f64 {
    let mut survival = 1.0;
    hazards(logits)
        .iter()
        .map(|h| {
            survival *= 1.0 - h;
            1.0 - survival
        })
        .sum()
}

/// Row-wise softmax of a `[B, K]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = e.iter().sum();
            e.iter().map(|v| v / total).collect()
        })
        .collect()
}

/// Harrell's concordance index. A pair is comparable when the earlier time is
/// an observed event; a higher risk for the earlier time is concordant and
/// tied risks count one half. Returns 0.5 when no pair is comparable.
pub fn c_index(risks: &[f64], records: &[SurvivalRecord]) -> f64 {
    assert_eq!(risks.len(), records.len(), "c_index length mismatch");
    // Doubled counts keep the half-credit for ties exact.
    let (mut numer, mut denom) = (0u64, 0u64);
    for (i, ri) in records.iter().enumerate() {
        if !ri.event {
            continue;
        }
        for (j, rj) in records.iter().enumerate() {
            if ri.time < rj.time {
                denom += 2;
                if risks[i] > risks[j] {
                    numer += 2;
                } else if risks[i] == risks[j] {
                    numer += 1;
                }
            }
        }
    }
    if denom == 0 {
        0.5
    } else {
        numer as f64 / denom as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spec: Option<f64>,
    pub f1: Option<f64>,
    pub c_index: Option<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "epoch,split,auc,acc,sen,spec,f1,cindex";

    /// One `metrics.csv` row; absent metrics are empty cells.
    pub fn csv_row(&self, epoch: usize, split: &str) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{epoch},{split},{},{},{},{},{},{}",
            cell(self.auc),
            cell(self.acc),
            cell(self.sen),
            cell(self.spec),
            cell(self.f1),
            cell(self.c_index)
        )
    }
}

/// Mann-Whitney AUC of `scores` for the positive set; `None` if either class
/// is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the number of (positive, negative) pairs ranked correctly.
    let (mut doubled, mut neg_below) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos_tied, mut neg_tied) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                pos_tied += 1;
            } else {
                neg_tied += 1;
            }
            j += 1;
        }
        doubled += pos_tied * (2 * neg_below + neg_tied);
        neg_below += neg_tied;
        i = j;
    }
    Some(doubled as f64 / (2 * n_pos * n_neg) as f64)
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Macro-averaged one-vs-rest AUC, accuracy and macro sensitivity,
/// specificity and F1. Predictions are the row argmax (lowest index on ties).
/// Per-class ratios with a zero denominator are left out of the averages.
pub fn classification_metrics(probs: &[Vec<f64>], labels: &[usize]) -> Result<MetricReport> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Contract(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let k = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.len() != k || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("probability row {i} does not sum to 1")));
        }
    }
    check_labels(labels, probs.len(), k)?;
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::Contract("AUC undefined: only one class present in labels".into()));
    }

    let predicted: Vec<usize> = probs
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                .0
        })
        .collect();
    let n = labels.len();
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();

    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let mut sen = Vec::with_capacity(k);
    let mut spec = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    let mut auc = Vec::with_capacity(k);
    for class in 0..k {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &l) in predicted.iter().zip(labels) {
            match (p == class, l == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        sen.push(ratio(tp, tp + fn_));
        spec.push(ratio(tn, tn + fp));
        f1.push(ratio(2 * tp, 2 * tp + fp + fn_));
        let scores: Vec<f64> = probs.iter().map(|r| r[class]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        auc.push(binary_auc(&scores, &positive));
    }
    Ok(MetricReport {
        auc: macro_mean(auc.into_iter()),
        acc: Some(correct as f64 / n as f64),
        sen: macro_mean(sen.into_iter()),
        spec: macro_mean(spec.into_iter()),
        f1: macro_mean(f1.into_iter()),
        c_index: None,
    })
}
