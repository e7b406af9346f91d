//! Softmax linear classifier over frozen embeddings.
//!
//! The classifier starts from class prototypes (`W_c = 2μ_c`, `b_c = -|μ_c|²`),
//! which makes its argmax identical to nearest-prototype assignment, and is
//! then refined per task by full-batch gradient steps on a support
//! cross-entropy plus an optional label-free term over the unlabeled set.

mod optim;
mod terms;
mod train;

pub use optim::{optimizers, Adam, GradientDescent, OptimState, UpdateRule};
pub use terms::{
    losses, ConditionalEntropy, CrossEntropyOnly, DependencyMaximization, PreparedTerm, TermEval,
    UnlabeledLoss,
};
pub use train::{
    conditional_entropy_and_grad, cross_entropy_and_grad, objective_and_grad, train, EvalTarget,
    Objective, TrainConfig, TrainTrace,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    /// `d x N`, one column per class.
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

impl SoftmaxClassifier {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::Shape(format!(
                "weights have {} columns but bias has {} entries",
                weights.ncols(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "non-finite classifier parameter".into(),
            ));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(dim: usize, n_way: usize) -> Self {
        Self {
            weights: DMatrix::zeros(dim, n_way),
            bias: DVector::zeros(n_way),
        }
    }

    /// Prototype initialization from labeled rows; labels must cover `0..n_way`.
    pub fn prototype_init(features: &DMatrix<f64>, labels: &[usize], n_way: usize) -> Result<Self> {
        let protos = class_prototypes(features, labels, n_way)?;
        let weights = &protos * 2.0;
        let bias = DVector::from_iterator(n_way, protos.column_iter().map(|c| -c.norm_squared()));
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_way(&self) -> usize {
        self.weights.ncols()
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.weights.as_mut_slice(), self.bias.as_mut_slice())
    }

    /// `V x N` scores `Wᵀz + b`, one row per input row.
    pub fn logits(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = features * &self.weights;
        for (mut col, &b) in out.column_iter_mut().zip(self.bias.iter()) {
            col.add_scalar_mut(b);
        }
        out
    }

    pub fn predict_proba(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        log_softmax_rows(&self.logits(features)).map(f64::exp)
    }

    /// Argmax class and its probability per row; ties go to the lowest class index.
    pub fn pseudo_label(&self, features: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
        argmax_rows(&self.predict_proba(features))
    }
}

/// `d x N` matrix of per-class mean rows.
pub fn class_prototypes(
    features: &DMatrix<f64>,
    labels: &[usize],
    n_way: usize,
) -> Result<DMatrix<f64>> {
    if labels.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            features.nrows()
        )));
    }
    let mut sums = DMatrix::zeros(features.ncols(), n_way);
    let mut counts = vec![0usize; n_way];
    for (row, &label) in labels.iter().enumerate() {
        if label >= n_way {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: n_way,
            });
        }
        counts[label] += 1;
        let mut col = sums.column_mut(label);
        col += features.row(row).transpose();
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass { class });
        }
        sums.column_mut(class).scale_mut(1.0 / count as f64);
    }
    Ok(sums)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.add_scalar_mut(-lse);
    }
    out
}

pub fn argmax_rows(probs: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    probs
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            (best, row[best])
        })
        .unzip()
}
