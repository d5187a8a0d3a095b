//! Cross-entropy, self-distillation and their weighted sum.
//!
//! Both losses are batch means, so `lambda` keeps the same meaning at any
//! batch size.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Gradient w.r.t. the loss's direct input (logits or student features).
    pub grad: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::Shape {
                op: "labeled batch",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Shape {
                op: "labeled batch",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn check_labels(labels: &[usize], rows: usize, num_classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "labels",
            left: vec![rows],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::param(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossValue> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let (b, k) = (logits.rows(), logits.cols());
    if k < 2 {
        return Err(Error::param(format!("cross-entropy needs K >= 2, got {k}")));
    }
    check_labels(labels, b, k)?;

    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum_exp = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        total += log_sum_exp - row[y];
        grad.extend(row.iter().enumerate().map(|(c, &z)| {
            let p = (z - log_sum_exp).exp();
            let target = if c == y { 1.0 } else { 0.0 };
            (p - target) * inv_b
        }));
    }
    Ok(LossValue {
        // log-sum-exp of a row is never below the row's entries, but rounding
        // can leave a tiny negative residue on saturated rows
        value: (total * inv_b).max(0.0),
        grad: Tensor::new(vec![b, k], grad)?,
    })
}

/// Mean squared Euclidean distance between student and (constant) teacher
/// features.
pub fn self_distillation_loss(student: &Tensor, teacher: &Tensor) -> Result<LossValue> {
    if student.shape() != teacher.shape() || student.shape().len() != 2 {
        return Err(Error::Shape {
            op: "self_distillation_loss",
            left: student.shape().to_vec(),
            right: teacher.shape().to_vec(),
        });
    }
    let inv_b = 1.0 / student.rows() as f64;
    let diff = student.sub(teacher)?;
    let value = diff.squared_norm() * inv_b;
    let grad = diff.map(|d| 2.0 * d * inv_b);
    Ok(LossValue { value, grad })
}

pub fn total_loss(ce: f64, sd: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(ce + lambda * sd)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::param(format!(
            "lambda must be finite and nonnegative, got {lambda}"
        )));
    }
    Ok(())
}
