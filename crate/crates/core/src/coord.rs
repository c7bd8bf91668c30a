//! Confidence-guided gradient coordination between the two subspace branches.
//!
//! When the classifier gradients induced by the tumour and TME branches point
//! in opposing directions (negative cosine), the gradient of the branch with
//! the lower summed confidence is replaced by its component orthogonal to the
//! other branch's gradient. The more confident branch is never modified.

use crate::data::{Subspace, SurvivalRecord};
use crate::error::{Error, Result};
use crate::objectives::{c_index, softmax_rows};
use crate::tensor::{cosine_similarity, Tensor};

/// Flattened classifier gradients of both branches with their confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchGradients {
    pub grad_t: Vec<f64>,
    pub grad_e: Vec<f64>,
    pub conf_t: f64,
    pub conf_e: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinated {
    pub grad_t: Vec<f64>,
    pub grad_e: Vec<f64>,
    /// Branch whose gradient was projected, if any.
    pub adjusted: Option<Subspace>,
}

impl Coordinated {
    pub fn applied(&self) -> bool {
        self.adjusted.is_some()
    }

    /// `g̃_t + g̃_e`.
    pub fn combined(&self) -> Vec<f64> {
        self.grad_t.iter().zip(&self.grad_e).map(|(a, b)| a + b).collect()
    }
}

/// Sum over the batch of the softmax probability assigned to the true label.
pub fn branch_confidence_cls(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let &[b, k] = logits.shape() else {
        return Err(Error::Dimension(format!("logits must be [B,K], got {:?}", logits.shape())));
    };
    if labels.len() != b {
        return Err(Error::Contract(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    Ok(softmax_rows(logits)
        .iter()
        .zip(labels)
        .map(|(row, &l)| row[l])
        .sum())
}

/// Mini-batch concordance of branch risk scores; 0.5 without comparable pairs.
pub fn branch_confidence_surv(risks: &[f64], records: &[SurvivalRecord]) -> f64 {
    c_index(risks, records)
}

/// `x1 - (<x1,x2>/<x2,x2>) x2`; returns `x1` unchanged when `x2` is zero.
pub fn project_perpendicular(x1: &[f64], x2: &[f64]) -> Vec<f64> {
    assert_eq!(x1.len(), x2.len(), "project_perpendicular length mismatch");
    let norm2: f64 = x2.iter().map(|v| v * v).sum();
    if norm2 == 0.0 {
        return x1.to_vec();
    }
    let coef = x1.iter().zip(x2).map(|(a, b)| a * b).sum::<f64>() / norm2;
    x1.iter().zip(x2).map(|(a, b)| a - coef * b).collect()
}

pub fn coordinate(bg: &BranchGradients) -> Result<Coordinated> {
    if bg.grad_t.len() != bg.grad_e.len() {
        return Err(Error::Contract(format!(
            "branch gradient lengths differ: {} vs {}",
            bg.grad_t.len(),
            bg.grad_e.len()
        )));
    }
    if !bg.grad_t.iter().chain(&bg.grad_e).all(|v| v.is_finite())
        || !bg.conf_t.is_finite()
        || !bg.conf_e.is_finite()
    {
        return Err(Error::Contract("non-finite branch gradient or confidence".into()));
    }
    let mut out = Coordinated {
        grad_t: bg.grad_t.clone(),
        grad_e: bg.grad_e.clone(),
        adjusted: None,
    };
    let conflict = cosine_similarity(&bg.grad_t, &bg.grad_e).is_some_and(|c| c < 0.0);
    if !conflict {
        return Ok(out);
    }
    if bg.conf_t < bg.conf_e {
        out.grad_t = project_perpendicular(&bg.grad_t, &bg.grad_e);
        out.adjusted = Some(Subspace::Tumour);
    } else if bg.conf_e < bg.conf_t {
        out.grad_e = project_perpendicular(&bg.grad_e, &bg.grad_t);
        out.adjusted = Some(Subspace::Tme);
    }
    Ok(out)
}
