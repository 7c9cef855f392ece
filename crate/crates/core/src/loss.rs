//! Training losses and their derivatives with respect to the model output.
//!
//! Labels are scalars: a real target for [`LossKind::Squared`], `±1` for
//! [`LossKind::Logistic`] and a class index for [`LossKind::CrossEntropy`].
//! The `surrogate_*` functions score an output against another model's output
//! instead of a label; they are what the RKHS projection fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, sigmoid, softmax, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½(a − b)²`
    Squared,
    /// `log(1 + exp(−y·a))`, `y ∈ {−1, +1}`
    Logistic,
    /// softmax + negative log-likelihood over `c ≥ 2` logits
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Squared => "squared",
            LossKind::Logistic => "logistic",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }

    /// Checks that a model with `outputs` outputs can be trained with this loss.
    pub fn check_outputs(self, outputs: usize) -> Result<()> {
        match self {
            LossKind::Squared | LossKind::Logistic if outputs != 1 => Err(Error::InvalidConfig(
                format!("{} loss needs a scalar output, model has {outputs}", self.name()),
            )),
            LossKind::CrossEntropy if outputs < 2 => Err(Error::InvalidConfig(
                "cross_entropy loss needs at least two outputs".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn check_label(self, label: f64, outputs: usize, index: usize) -> Result<()> {
        let ok = match self {
            LossKind::Squared => label.is_finite(),
            LossKind::Logistic => label == 1.0 || label == -1.0,
            LossKind::CrossEntropy => {
                label >= 0.0 && label.fract() == 0.0 && (label as usize) < outputs
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidLabel {
                kind: self.name(),
                label,
                index,
            })
        }
    }
}

pub fn loss(output: &[f64], label: f64, kind: LossKind) -> Result<f64> {
    kind.check_label(label, output.len(), 0)?;
    Ok(match kind {
        LossKind::Squared => {
            let r = output[0] - label;
            0.5 * r * r
        }
        LossKind::Logistic => softplus(-label * output[0]),
        LossKind::CrossEntropy => log_sum_exp(output) - output[label as usize],
    })
}

/// `∂L/∂f` at `output`.
pub fn loss_grad_output(output: &[f64], label: f64, kind: LossKind) -> Result<Vec<f64>> {
    kind.check_label(label, output.len(), 0)?;
    Ok(match kind {
        LossKind::Squared => vec![output[0] - label],
        LossKind::Logistic => vec![-label * sigmoid(-label * output[0])],
        LossKind::CrossEntropy => {
            let mut p = softmax(output);
            p[label as usize] -= 1.0;
            p
        }
    })
}

/// `(∂²L/∂f²) · u` at `output`; the label drops out for all three losses.
pub fn loss_hessian_output_vec(output: &[f64], kind: LossKind, u: &[f64]) -> Vec<f64> {
    match kind {
        LossKind::Squared => u.to_vec(),
        LossKind::Logistic => {
            let s = sigmoid(output[0]);
            vec![s * (1.0 - s) * u[0]]
        }
        LossKind::CrossEntropy => {
            let p = softmax(output);
            let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
            p.iter().zip(u).map(|(pi, ui)| pi * (ui - pu)).collect()
        }
    }
}

/// Loss of a surrogate output `a` against a reference output `b`.
///
/// Squared uses `b` directly; Logistic and CrossEntropy use the reference's
/// predicted probabilities as soft labels, so the loss is minimised at `a = b`.
pub fn surrogate_loss(a: &[f64], b: &[f64], kind: LossKind) -> f64 {
    match kind {
        LossKind::Squared => a.iter().zip(b).map(|(x, y)| 0.5 * (x - y) * (x - y)).sum(),
        LossKind::Logistic => softplus(a[0]) - sigmoid(b[0]) * a[0],
        LossKind::CrossEntropy => {
            let q = softmax(b);
            log_sum_exp(a) - q.iter().zip(a).map(|(qi, ai)| qi * ai).sum::<f64>()
        }
    }
}

pub fn surrogate_loss_grad(a: &[f64], b: &[f64], kind: LossKind) -> Vec<f64> {
    match kind {
        LossKind::Squared => a.iter().zip(b).map(|(x, y)| x - y).collect(),
        LossKind::Logistic => vec![sigmoid(a[0]) - sigmoid(b[0])],
        LossKind::CrossEntropy => {
            let p = softmax(a);
            let q = softmax(b);
            p.iter().zip(&q).map(|(x, y)| x - y).collect()
        }
    }
}
