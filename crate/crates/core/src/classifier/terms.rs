use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;

use super::TrainConfig;
use crate::error::Result;
use crate::kernels::{double_center, gaussian_gram};
use crate::registry::{Named, Registry};

/// Result of evaluating a label-free term on the current predictions.
#[derive(Debug, Clone)]
pub struct TermEval {
    /// Unweighted statistic (HSIC estimate, mean entropy, ...).
    pub value: f64,
    /// Signed, weighted contribution to the minimized objective.
    pub loss: f64,
    /// Gradient of `loss` w.r.t. the unlabeled logits, `U x N`.
    pub grad_logits: DMatrix<f64>,
    /// Set when the term could not be formed (too few unlabeled rows).
    pub skipped: bool,
}

impl TermEval {
    fn skipped(u: usize, n: usize) -> Self {
        Self {
            value: 0.0,
            loss: 0.0,
            grad_logits: DMatrix::zeros(u, n),
            skipped: true,
        }
    }
}

/// Episode-specific state of a label-free term (e.g. the fixed feature Gram matrix).
pub trait PreparedTerm: Send + Sync {
    fn evaluate(&self, probs: &DMatrix<f64>, log_probs: &DMatrix<f64>) -> TermEval;

    /// False when the term ignores the predictions (its gradient is always zero).
    fn is_active(&self) -> bool {
        true
    }
}

/// A training objective: support cross-entropy plus a term over the unlabeled rows.
pub trait UnlabeledLoss: Named {
    fn prepare(&self, unlabeled: &DMatrix<f64>, cfg: &TrainConfig)
        -> Result<Box<dyn PreparedTerm>>;
}

/// Built-in objectives: `ce`, `ce+dm`, `ce+cond-ent`.
pub fn losses() -> &'static Registry<dyn UnlabeledLoss> {
    static REG: OnceLock<Registry<dyn UnlabeledLoss>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn UnlabeledLoss> = Registry::new("loss");
        reg.register(Arc::new(CrossEntropyOnly))
            .register(Arc::new(DependencyMaximization))
            .register(Arc::new(ConditionalEntropy));
        reg
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropyOnly;

struct NoTerm;

impl PreparedTerm for NoTerm {
    fn evaluate(&self, probs: &DMatrix<f64>, _: &DMatrix<f64>) -> TermEval {
        TermEval {
            value: 0.0,
            loss: 0.0,
            grad_logits: DMatrix::zeros(probs.nrows(), probs.ncols()),
            skipped: false,
        }
    }

    fn is_active(&self) -> bool {
        false
    }
}

impl Named for CrossEntropyOnly {
    fn name(&self) -> &'static str {
        "ce"
    }
    fn summary(&self) -> &'static str {
        "support cross-entropy only"
    }
}

impl UnlabeledLoss for CrossEntropyOnly {
    fn prepare(&self, _: &DMatrix<f64>, _: &TrainConfig) -> Result<Box<dyn PreparedTerm>> {
        Ok(Box::new(NoTerm))
    }
}

/// Maximizes the HSIC estimate between unlabeled features and their softmax predictions.
#[derive(Debug, Clone, Copy, Default)]
pub struct DependencyMaximization;

struct DependencyTerm {
    centered_k: DMatrix<f64>,
    norm: f64,
    lambda: f64,
    prediction_sigma: f64,
}

impl Named for DependencyMaximization {
    fn name(&self) -> &'static str {
        "ce+dm"
    }
    fn summary(&self) -> &'static str {
        "cross-entropy minus lambda * HSIC(features, predictions) over the unlabeled set"
    }
}

impl UnlabeledLoss for DependencyMaximization {
    fn prepare(
        &self,
        unlabeled: &DMatrix<f64>,
        cfg: &TrainConfig,
    ) -> Result<Box<dyn PreparedTerm>> {
        let u = unlabeled.nrows();
        if u < 2 {
            if cfg.lambda > 0.0 {
                log::warn!("dependency term skipped: {u} unlabeled rows");
            }
            return Ok(Box::new(SkippedTerm));
        }
        let k = gaussian_gram(unlabeled, cfg.feature_sigma)?;
        Ok(Box::new(DependencyTerm {
            centered_k: double_center(k.matrix()),
            norm: 1.0 / ((u - 1) * (u - 1)) as f64,
            lambda: cfg.lambda,
            prediction_sigma: cfg.prediction_sigma,
        }))
    }
}

struct SkippedTerm;

impl PreparedTerm for SkippedTerm {
    fn evaluate(&self, probs: &DMatrix<f64>, _: &DMatrix<f64>) -> TermEval {
        TermEval::skipped(probs.nrows(), probs.ncols())
    }

    fn is_active(&self) -> bool {
        false
    }
}

impl PreparedTerm for DependencyTerm {
    fn evaluate(&self, probs: &DMatrix<f64>, _: &DMatrix<f64>) -> TermEval {
        let (u, n) = probs.shape();
        // one sample per column so pair distances read contiguous memory
        let pt = probs.transpose();
        let scale = -1.0 / (2.0 * self.prediction_sigma * self.prediction_sigma);
        let kc = &self.centered_k;

        // With A = Kc ∘ L: trace(Kc L) = Σ_ij A_ij and dL_ij/dy_i = L_ij (y_j - y_i)/σ²,
        // so the gradient row i is proportional to Σ_j A_ij (y_j - y_i).
        let mut trace = 0.0;
        let mut pull = vec![0.0; n * u];
        let y = pt.as_slice();
        for i in 0..u {
            let kc_col = kc.column(i);
            trace += kc_col[i];
            let yi = &y[i * n..(i + 1) * n];
            for j in (i + 1)..u {
                let yj = &y[j * n..(j + 1) * n];
                let d2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                let a = kc_col[j] * (scale * d2).exp();
                trace += 2.0 * a;
                let (head, tail) = pull.split_at_mut(j * n);
                let pi = &mut head[i * n..(i + 1) * n];
                let pj = &mut tail[..n];
                for c in 0..n {
                    let diff = a * (yj[c] - yi[c]);
                    pi[c] += diff;
                    pj[c] -= diff;
                }
            }
        }
        let pull = DMatrix::from_vec(n, u, pull);
        let hsic = self.norm * trace;
        let coef = -self.lambda * self.norm * 2.0 / (self.prediction_sigma * self.prediction_sigma);
        let grad_y = pull.transpose() * coef;
        TermEval {
            value: hsic,
            loss: -self.lambda * hsic,
            grad_logits: softmax_backward(probs, &grad_y),
            skipped: false,
        }
    }
}

/// Mean Shannon entropy of the unlabeled predictions, weighted by `entropy_weight`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConditionalEntropy;

struct EntropyTerm {
    weight: f64,
}

impl Named for ConditionalEntropy {
    fn name(&self) -> &'static str {
        "ce+cond-ent"
    }
    fn summary(&self) -> &'static str {
        "cross-entropy plus mean prediction entropy over the unlabeled set"
    }
}

impl UnlabeledLoss for ConditionalEntropy {
    fn prepare(
        &self,
        unlabeled: &DMatrix<f64>,
        cfg: &TrainConfig,
    ) -> Result<Box<dyn PreparedTerm>> {
        if unlabeled.nrows() == 0 {
            return Ok(Box::new(SkippedTerm));
        }
        Ok(Box::new(EntropyTerm {
            weight: cfg.entropy_weight,
        }))
    }
}

impl PreparedTerm for EntropyTerm {
    fn evaluate(&self, probs: &DMatrix<f64>, log_probs: &DMatrix<f64>) -> TermEval {
        let (value, grad) = mean_entropy_and_grad(probs, log_probs);
        TermEval {
            value,
            loss: self.weight * value,
            grad_logits: grad * self.weight,
            skipped: false,
        }
    }
}

/// Mean row entropy and its gradient w.r.t. the logits.
pub(crate) fn mean_entropy_and_grad(
    probs: &DMatrix<f64>,
    log_probs: &DMatrix<f64>,
) -> (f64, DMatrix<f64>) {
    let (u, n) = probs.shape();
    let inv = 1.0 / u as f64;
    let mut total = 0.0;
    let mut grad = DMatrix::zeros(u, n);
    for i in 0..u {
        let h: f64 = -(0..n)
            .map(|c| probs[(i, c)] * log_probs[(i, c)])
            .sum::<f64>();
        total += h;
        for c in 0..n {
            grad[(i, c)] = -inv * probs[(i, c)] * (log_probs[(i, c)] + h);
        }
    }
    (total * inv, grad)
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits: `y ⊙ (g - <y, g>)`.
fn softmax_backward(probs: &DMatrix<f64>, grad_y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = grad_y.clone();
    for i in 0..probs.nrows() {
        let dot = probs.row(i).dot(&grad_y.row(i));
        for c in 0..probs.ncols() {
            out[(i, c)] = probs[(i, c)] * (grad_y[(i, c)] - dot);
        }
    }
    out
}
