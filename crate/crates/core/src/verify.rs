//! Self-checks on random instances: gradients against central differences, the
//! HSIC estimator against its brute-force sum, fast IDA against the naive path,
//! and the two singular-value inequalities the IDA bound is built on.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::classifier::{objective_and_grad, SoftmaxClassifier, TrainConfig};
use crate::ida::{ida_all_fast, ida_exact_naive, MeanConvention};
use crate::kernels::{gaussian_gram, hsic_brute_force, hsic_estimate};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Negative control: perturbs the analytic gradient so the gradient check must fail.
    pub inject_gradient_fault: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub instances: usize,
    /// Largest observed error (or violation) over all instances.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

pub fn run_all(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    vec![
        check_hsic(opts.seed),
        check_gradients(opts.seed, opts.inject_gradient_fault),
        check_ida(opts.seed),
        check_singular_value_decay(opts.seed),
        check_trace_inequality(opts.seed),
    ]
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

/// Labels in `0..n` with every class present; `rows >= n`.
fn covering_labels(
    rng: &mut ChaCha8Rng,
    rows: usize,
    n: usize,
    min_per_class: usize,
) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..rows)
        .map(|i| {
            if i < n * min_per_class {
                i % n
            } else {
                rng.random_range(0..n)
            }
        })
        .collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    labels
}

/// Estimator vs brute-force triple sum on Gaussian Gram pairs, plus the `U = 2` closed form.
pub fn check_hsic(seed: u64) -> CheckOutcome {
    let tol = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4853_4943);
    let mut worst: f64 = 0.0;
    let instances = 100;
    for _ in 0..instances {
        let u = rng.random_range(2..=50);
        let (dz, dy) = (rng.random_range(1..=8), rng.random_range(1..=5));
        let z = randn(&mut rng, u, dz);
        let y = randn(&mut rng, u, dy);
        let k = gaussian_gram(&z, rng.random_range(0.3..3.0)).expect("positive bandwidth");
        let l = gaussian_gram(&y, rng.random_range(0.3..3.0)).expect("positive bandwidth");
        let fast = hsic_estimate(k.matrix(), l.matrix()).expect("matching sizes");
        let slow = hsic_brute_force(k.matrix(), l.matrix()).expect("matching sizes");
        worst = worst.max((fast - slow).abs());
    }
    for _ in 0..20 {
        let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let k = DMatrix::from_row_slice(2, 2, &[1.0, a, a, 1.0]);
        let l = DMatrix::from_row_slice(2, 2, &[1.0, b, b, 1.0]);
        let got = hsic_estimate(&k, &l).expect("matching sizes");
        worst = worst.max((got - (1.0 - a) * (1.0 - b)).abs());
    }
    CheckOutcome {
        name: "hsic-oracle",
        passed: worst <= tol,
        instances: instances + 20,
        worst,
        tolerance: tol,
        detail: "estimator vs brute-force sum; U=2 closed form (1-a)(1-b)".into(),
    }
}

/// Largest element-wise relative error between `analytic` and central differences of `value`.
pub fn gradient_error(
    params: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
    mut value: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = value(&p);
        p[i] = orig - h;
        let down = value(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = numeric.abs().max(analytic[i].abs());
        if scale > floor {
            worst = worst.max((numeric - analytic[i]).abs() / scale);
        }
    }
    worst
}

/// Full-objective gradients of every registered loss on random 5-way instances (d=8, U=12).
pub fn check_gradients(seed: u64, inject_fault: bool) -> CheckOutcome {
    let tol = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4752_4144);
    let (n, d, u) = (5, 8, 12);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for inst in 0..20 {
        let k_shot = 1 + inst % 3;
        let support = randn(&mut rng, n * k_shot, d) * 0.5;
        let labels: Vec<usize> = (0..n * k_shot).map(|i| i % n).collect();
        let unlabeled = randn(&mut rng, u, d) * 0.5;
        let w = randn(&mut rng, d, n);
        let b = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let clf = SoftmaxClassifier::new(w, b).expect("finite parameters");
        for loss in ["ce", "ce+dm", "ce+cond-ent"] {
            let cfg = TrainConfig {
                loss: loss.into(),
                lambda: [0.01, 1.0, 10.0][inst % 3],
                entropy_weight: 0.5 + inst as f64 / 20.0,
                feature_sigma: 0.5 + 0.1 * (inst % 4) as f64,
                prediction_sigma: 0.5,
                ..TrainConfig::default()
            };
            let obj = objective_and_grad(&clf, &support, &labels, &unlabeled, &cfg)
                .expect("valid instance");
            let mut analytic: Vec<f64> = obj
                .grad_weights
                .iter()
                .chain(obj.grad_bias.iter())
                .cloned()
                .collect();
            if inject_fault {
                analytic[0] += 1e-2 * (1.0 + analytic[0].abs());
            }
            let params: Vec<f64> = clf
                .weights()
                .iter()
                .chain(clf.bias().iter())
                .cloned()
                .collect();
            let err = gradient_error(&params, &analytic, 1e-5, 1e-8, |p| {
                let w = DMatrix::from_column_slice(d, n, &p[..d * n]);
                let b = DVector::from_column_slice(&p[d * n..]);
                let c = SoftmaxClassifier::new(w, b).expect("finite parameters");
                objective_and_grad(&c, &support, &labels, &unlabeled, &cfg)
                    .expect("valid instance")
                    .total
            });
            worst = worst.max(err);
            instances += 1;
        }
    }
    CheckOutcome {
        name: "gradient-check",
        passed: worst < tol,
        instances,
        worst,
        tolerance: tol,
        detail: "ce, ce+dm, ce+cond-ent vs central differences (h=1e-5)".into(),
    }
}

/// Fast leave-one-out scores vs recomputation from scratch (fixed-mean convention).
pub fn check_ida(seed: u64) -> CheckOutcome {
    let tol = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4944_4121);
    let (u, d, n) = (40, 6, 5);
    let mut worst: f64 = 0.0;
    let mut rank_mismatches = 0;
    let instances = 50;
    for _ in 0..instances {
        let labels = covering_labels(&mut rng, u, n, 2);
        let centers = randn(&mut rng, n, d) * 2.0;
        let mut f = randn(&mut rng, u, d);
        for (i, &y) in labels.iter().enumerate() {
            let mut row = f.row_mut(i);
            row += centers.row(y);
        }
        let rho = 1e-3 * rng.random_range(0.1..10.0);
        let fast = ida_all_fast(&f, &labels, rho).expect("valid instance");
        let mut pairs = Vec::with_capacity(u);
        for (i, score) in fast.iter().enumerate() {
            let naive = ida_exact_naive(&f, &labels, i, rho, MeanConvention::Fixed);
            match (score, naive) {
                (Ok(s), Ok(v)) => {
                    worst = worst.max((s.d_psi - v).abs() / v.abs().max(1.0));
                    pairs.push((i, s.d_psi, v));
                }
                (Err(_), Err(_)) => {}
                _ => worst = f64::INFINITY,
            }
        }
        let order = |key: fn(&(usize, f64, f64)) -> f64| {
            let mut idx: Vec<usize> = (0..pairs.len()).collect();
            idx.sort_by(|&a, &b| key(&pairs[b]).total_cmp(&key(&pairs[a])).then(a.cmp(&b)));
            idx
        };
        if order(|p| p.1) != order(|p| p.2) {
            rank_mismatches += 1;
        }
    }
    CheckOutcome {
        name: "ida-fast-vs-naive",
        passed: worst <= tol && rank_mismatches == 0,
        instances,
        worst,
        tolerance: tol,
        detail: format!("U={u}, d={d}, N={n}; {rank_mismatches} ranking mismatches"),
    }
}

/// `σ_i(M) <= ‖M‖_F / √i` on random matrices.
pub fn check_singular_value_decay(seed: u64) -> CheckOutcome {
    let tol = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c45_4d31);
    let mut worst = f64::NEG_INFINITY;
    let instances = 200;
    for _ in 0..instances {
        let (a, b, scale) = (
            rng.random_range(1..=9),
            rng.random_range(1..=9),
            rng.random_range(0.01..10.0),
        );
        let m = randn(&mut rng, a, b) * scale;
        let fro = m.norm();
        let mut sv: Vec<f64> = m.singular_values().iter().cloned().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (i, s) in sv.iter().enumerate() {
            worst = worst.max(s - fro / ((i + 1) as f64).sqrt());
        }
    }
    CheckOutcome {
        name: "singular-value-decay",
        passed: worst <= tol,
        instances,
        worst,
        tolerance: tol,
        detail: "largest sigma_i - ||M||_F/sqrt(i)".into(),
    }
}

/// `trace(M Nᵀ) <= Σ σ_i(M) σ_i(N)` on random equal-shape pairs.
pub fn check_trace_inequality(seed: u64) -> CheckOutcome {
    let tol = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c45_4d32);
    let mut worst = f64::NEG_INFINITY;
    let instances = 200;
    for i in 0..instances {
        let (a, b) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let m = randn(&mut rng, a, b);
        // every fourth pair is nearly aligned, where the inequality is close to tight
        let n = if i % 4 == 0 {
            &m * 2.0 + randn(&mut rng, a, b) * 1e-3
        } else {
            randn(&mut rng, a, b)
        };
        let mut sm: Vec<f64> = m.singular_values().iter().cloned().collect();
        let mut sn: Vec<f64> = n.singular_values().iter().cloned().collect();
        sm.sort_by(|x, y| y.total_cmp(x));
        sn.sort_by(|x, y| y.total_cmp(x));
        let rhs: f64 = sm.iter().zip(&sn).map(|(x, y)| x * y).sum();
        let lhs = (&m * n.transpose()).trace();
        worst = worst.max((lhs - rhs) / rhs.max(1.0));
    }
    CheckOutcome {
        name: "trace-inequality",
        passed: worst <= tol,
        instances,
        worst,
        tolerance: tol,
        detail: "largest trace(MN^T) - sum sigma_i(M) sigma_i(N), relative".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for outcome in run_all(&VerifyOptions::default()) {
            assert!(outcome.passed, "{outcome:?}");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let out = check_gradients(3, true);
        assert!(!out.passed, "{out:?}");
    }

    #[test]
    fn gradient_error_on_a_known_function() {
        let f = |p: &[f64]| p[0] * p[0] + 3.0 * p[1];
        assert!(gradient_error(&[2.0, 1.0], &[4.0, 3.0], 1e-5, 1e-8, f) < 1e-8);
        assert!(gradient_error(&[2.0, 1.0], &[4.0, 3.3], 1e-5, 1e-8, f) > 0.05);
    }
}
