use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::terms::{losses, mean_entropy_and_grad, PreparedTerm};
use super::{log_softmax_rows, optimizers, OptimState, SoftmaxClassifier};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Registered objective name: `ce`, `ce+dm` or `ce+cond-ent`.
    pub loss: String,
    /// Weight of the dependency term.
    pub lambda: f64,
    /// Weight of the conditional-entropy term.
    pub entropy_weight: f64,
    /// Gaussian bandwidth of the feature Gram matrix.
    pub feature_sigma: f64,
    /// Gaussian bandwidth of the prediction Gram matrix.
    pub prediction_sigma: f64,
    pub lr: f64,
    pub iters: usize,
    /// Registered update rule name: `adam` or `gd`.
    pub optimizer: String,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: "ce+dm".into(),
            lambda: 0.01,
            entropy_weight: 1.0,
            feature_sigma: 0.5,
            prediction_sigma: 0.5,
            lr: 1e-4,
            iters: 1000,
            optimizer: "adam".into(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.entropy_weight >= 0.0) {
            return bad(format!(
                "entropy weight must be >= 0, got {}",
                self.entropy_weight
            ));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.feature_sigma > 0.0 && self.prediction_sigma > 0.0) {
            return bad("kernel bandwidths must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return bad("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into());
        }
        losses().get(&self.loss)?;
        optimizers().get(&self.optimizer)?;
        Ok(())
    }
}

/// Objective value with its parameter gradients.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: f64,
    pub cross_entropy: f64,
    /// Unweighted label-free statistic (HSIC for `ce+dm`, entropy for `ce+cond-ent`).
    pub unlabeled_value: f64,
    pub grad_weights: DMatrix<f64>,
    pub grad_bias: DVector<f64>,
    /// The label-free term was dropped because the unlabeled set was too small.
    pub term_skipped: bool,
}

/// Mean support cross-entropy and its gradient w.r.t. the logits, `(ŷ - onehot) / n`.
pub fn cross_entropy_and_grad(
    clf: &SoftmaxClassifier,
    features: &DMatrix<f64>,
    labels: &[usize],
) -> Result<(f64, DMatrix<f64>)> {
    let n = features.nrows();
    if n == 0 || labels.len() != n {
        return Err(Error::Shape(format!(
            "cross-entropy needs a nonempty support with one label per row ({} rows, {} labels)",
            n,
            labels.len()
        )));
    }
    let log_probs = log_softmax_rows(&clf.logits(features));
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = log_probs.map(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        if y >= clf.n_way() {
            return Err(Error::LabelOutOfRange {
                row: i,
                label: y,
                classes: clf.n_way(),
            });
        }
        loss -= log_probs[(i, y)];
        grad[(i, y)] -= 1.0;
    }
    grad *= inv;
    Ok((loss * inv, grad))
}

fn accumulate(
    grad_w: &mut DMatrix<f64>,
    grad_b: &mut DVector<f64>,
    features: &DMatrix<f64>,
    g_logits: &DMatrix<f64>,
) {
    grad_w.gemm_tr(1.0, features, g_logits, 1.0);
    for row in g_logits.row_iter() {
        *grad_b += row.transpose();
    }
}

pub(crate) fn evaluate(
    clf: &SoftmaxClassifier,
    support: &DMatrix<f64>,
    labels: &[usize],
    unlabeled: &DMatrix<f64>,
    term: &dyn PreparedTerm,
) -> Result<Objective> {
    let (ce, g_ce) = cross_entropy_and_grad(clf, support, labels)?;
    let mut grad_w = DMatrix::zeros(clf.dim(), clf.n_way());
    let mut grad_b = DVector::zeros(clf.n_way());
    accumulate(&mut grad_w, &mut grad_b, support, &g_ce);

    let eval = if term.is_active() && unlabeled.nrows() > 0 {
        let log_probs = log_softmax_rows(&clf.logits(unlabeled));
        let probs = log_probs.map(f64::exp);
        let eval = term.evaluate(&probs, &log_probs);
        accumulate(&mut grad_w, &mut grad_b, unlabeled, &eval.grad_logits);
        eval
    } else {
        let empty = DMatrix::zeros(0, clf.n_way());
        term.evaluate(&empty, &empty)
    };
    Ok(Objective {
        total: ce + eval.loss,
        cross_entropy: ce,
        unlabeled_value: eval.value,
        grad_weights: grad_w,
        grad_bias: grad_b,
        term_skipped: eval.skipped,
    })
}

/// Full objective `CE(support) + term(unlabeled)` for the loss named in `cfg`.
pub fn objective_and_grad(
    clf: &SoftmaxClassifier,
    support: &DMatrix<f64>,
    labels: &[usize],
    unlabeled: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<Objective> {
    cfg.validate()?;
    let term = losses().get(&cfg.loss)?.prepare(unlabeled, cfg)?;
    evaluate(clf, support, labels, unlabeled, term.as_ref())
}

/// Mean prediction entropy over `unlabeled` with gradients (unweighted).
pub fn conditional_entropy_and_grad(
    clf: &SoftmaxClassifier,
    unlabeled: &DMatrix<f64>,
) -> Result<(f64, DMatrix<f64>, DVector<f64>)> {
    if unlabeled.nrows() == 0 {
        return Err(Error::InvalidParameter(
            "conditional entropy needs at least one row".into(),
        ));
    }
    let log_probs = log_softmax_rows(&clf.logits(unlabeled));
    let (h, g) = mean_entropy_and_grad(&log_probs.map(f64::exp), &log_probs);
    let mut grad_w = DMatrix::zeros(clf.dim(), clf.n_way());
    let mut grad_b = DVector::zeros(clf.n_way());
    accumulate(&mut grad_w, &mut grad_b, unlabeled, &g);
    Ok((h, grad_w, grad_b))
}

/// Held-out rows scored at every iteration of [`train`].
#[derive(Debug, Clone, Copy)]
pub struct EvalTarget<'a> {
    pub features: &'a DMatrix<f64>,
    pub labels: &'a [usize],
}

impl EvalTarget<'_> {
    fn accuracy(&self, clf: &SoftmaxClassifier) -> f64 {
        let (pred, _) = clf.pseudo_label(self.features);
        let hits = pred.iter().zip(self.labels).filter(|(a, b)| a == b).count();
        hits as f64 / self.labels.len().max(1) as f64
    }
}

/// Per-iteration record; entry 0 is the initial state, entry `iters` the final one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub cross_entropy: Vec<f64>,
    pub unlabeled_value: Vec<f64>,
    pub total: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Vec<f64>>,
    pub term_skipped: bool,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    fn push(&mut self, obj: &Objective, acc: Option<f64>) {
        self.cross_entropy.push(obj.cross_entropy);
        self.unlabeled_value.push(obj.unlabeled_value);
        self.total.push(obj.total);
        if let (Some(a), Some(v)) = (acc, self.accuracy.as_mut()) {
            v.push(a);
        }
        self.term_skipped |= obj.term_skipped;
    }
}

/// Full-batch training from `init`; deterministic in its inputs.
pub fn train(
    init: &SoftmaxClassifier,
    support: &DMatrix<f64>,
    labels: &[usize],
    unlabeled: &DMatrix<f64>,
    cfg: &TrainConfig,
    eval: Option<EvalTarget<'_>>,
) -> Result<(SoftmaxClassifier, TrainTrace)> {
    cfg.validate()?;
    let term = losses().get(&cfg.loss)?.prepare(unlabeled, cfg)?;
    let rule = optimizers().get(&cfg.optimizer)?;
    let mut clf = init.clone();
    let mut trace = TrainTrace {
        accuracy: eval.map(|_| Vec::with_capacity(cfg.iters + 1)),
        ..TrainTrace::default()
    };
    let mut w_state = OptimState::new(clf.dim() * clf.n_way());
    let mut b_state = OptimState::new(clf.n_way());

    for iteration in 0..=cfg.iters {
        let obj = evaluate(&clf, support, labels, unlabeled, term.as_ref())?;
        if !obj.total.is_finite() {
            return Err(Error::Diverged {
                iteration,
                loss: obj.total,
            });
        }
        trace.push(&obj, eval.map(|e| e.accuracy(&clf)));
        if iteration == cfg.iters {
            break;
        }
        let (w, b) = clf.params_mut();
        rule.step(&mut w_state, w, obj.grad_weights.as_slice(), cfg);
        rule.step(&mut b_state, b, obj.grad_bias.as_slice(), cfg);
    }
    Ok((clf, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn zero_iterations_returns_init() {
        let support = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let init = SoftmaxClassifier::prototype_init(&support, &[0, 1], 2).unwrap();
        let cfg = TrainConfig {
            iters: 0,
            ..TrainConfig::default()
        };
        let unl = DMatrix::from_row_slice(3, 2, &[0.9, 0.1, 0.2, 0.8, 0.5, 0.5]);
        let (clf, trace) = train(&init, &support, &[0, 1], &unl, &cfg, None).unwrap();
        assert_eq!(clf, init);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn trace_length_is_iters_plus_one() {
        let support = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let init = SoftmaxClassifier::prototype_init(&support, &[0, 1], 2).unwrap();
        let cfg = TrainConfig {
            iters: 7,
            ..TrainConfig::default()
        };
        let unl = DMatrix::from_row_slice(3, 2, &[0.9, 0.1, 0.2, 0.8, 0.5, 0.5]);
        let target = EvalTarget {
            features: &unl,
            labels: &[0, 1, 0],
        };
        let (_, trace) = train(&init, &support, &[0, 1], &unl, &cfg, Some(target)).unwrap();
        assert_eq!(trace.len(), 8);
        assert_eq!(trace.accuracy.as_ref().unwrap().len(), 8);
    }

    #[test]
    fn lambda_zero_is_plain_cross_entropy() {
        let support = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.3, 1.0, 0.4, 0.4]);
        let labels = [0, 1, 2];
        let clf = SoftmaxClassifier::prototype_init(&support, &labels, 3).unwrap();
        let unl = DMatrix::from_row_slice(4, 2, &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6, -0.7, 0.8]);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let obj = objective_and_grad(&clf, &support, &labels, &unl, &cfg).unwrap();
        // classic form: Σ_s z_s (ŷ_s - onehot_s)ᵀ / n
        let probs = clf.predict_proba(&support);
        let mut want = DMatrix::zeros(2, 3);
        for s in 0..3 {
            for c in 0..3 {
                let r = probs[(s, c)] - if c == labels[s] { 1.0 } else { 0.0 };
                for k in 0..2 {
                    want[(k, c)] += support[(s, k)] * r / 3.0;
                }
            }
        }
        assert!((obj.grad_weights - want).amax() < 1e-15);
        assert!((obj.total - obj.cross_entropy).abs() < 1e-15);
    }

    #[test]
    fn dependency_skipped_with_one_unlabeled_row() {
        let support = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let clf = SoftmaxClassifier::prototype_init(&support, &[0, 1], 2).unwrap();
        let unl = DMatrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let obj =
            objective_and_grad(&clf, &support, &[0, 1], &unl, &TrainConfig::default()).unwrap();
        assert!(obj.term_skipped);
    }

    #[test]
    fn separable_one_dimensional_classes_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Normal::new(-2.0, 0.3).unwrap();
        let b = Normal::new(2.0, 0.3).unwrap();
        let mut vals = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            if i % 2 == 0 {
                vals.push(a.sample(&mut rng));
                labels.push(0);
            } else {
                vals.push(b.sample(&mut rng));
                labels.push(1);
            }
        }
        let support = DMatrix::from_column_slice(20, 1, &vals);
        let init = SoftmaxClassifier::zeros(1, 2);
        let cfg = TrainConfig {
            loss: "ce".into(),
            lr: 0.05,
            iters: 3000,
            ..TrainConfig::default()
        };
        let (clf, trace) =
            train(&init, &support, &labels, &DMatrix::zeros(0, 1), &cfg, None).unwrap();
        let (pred, _) = clf.pseudo_label(&support);
        assert_eq!(pred, labels);
        assert!(*trace.cross_entropy.last().unwrap() < 1e-3);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = [
            TrainConfig {
                lambda: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                feature_sigma: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                optimizer: "sgdm".into(),
                ..TrainConfig::default()
            },
            TrainConfig {
                loss: "tim".into(),
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn divergence_is_reported() {
        let support = DMatrix::from_row_slice(2, 1, &[1e200, -1e200]);
        let init = SoftmaxClassifier::zeros(1, 2);
        let cfg = TrainConfig {
            loss: "ce".into(),
            optimizer: "gd".into(),
            lr: 1e200,
            iters: 5,
            ..TrainConfig::default()
        };
        let err = train(&init, &support, &[0, 1], &DMatrix::zeros(0, 1), &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }
}
