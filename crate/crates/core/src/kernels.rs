//! Gaussian Gram matrices and the empirical Hilbert-Schmidt dependence estimate
//! `(U-1)^-2 trace(K H L H)`, with `H = I - 11ᵀ/U` applied as mean subtraction.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Symmetric Gaussian kernel matrix over a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    bandwidth: f64,
}

impl GramMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }
}

impl AsRef<DMatrix<f64>> for GramMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

/// `exp(-|r_i - r_j|² / 2σ²)` for every pair of rows.
pub fn gaussian_gram(rows: &DMatrix<f64>, sigma: f64) -> Result<GramMatrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    let n = rows.nrows();
    let scale = -1.0 / (2.0 * sigma * sigma);
    let mut entries = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for k in 0..rows.ncols() {
                let diff = rows[(i, k)] - rows[(j, k)];
                d2 += diff * diff;
            }
            let v = (scale * d2).exp();
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(GramMatrix {
        entries,
        bandwidth: sigma,
    })
}

/// `H M H` computed by subtracting row means, column means and adding back the grand mean.
pub fn double_center(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let inv = 1.0 / n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| m.row(i).sum() * inv).collect();
    let col_means: Vec<f64> = (0..n).map(|j| m.column(j).sum() * inv).collect();
    let grand = row_means.iter().sum::<f64>() * inv;
    DMatrix::from_fn(n, n, |i, j| m[(i, j)] - row_means[i] - col_means[j] + grand)
}

fn check_pair(k: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<usize> {
    let u = k.nrows();
    if !k.is_square() || !l.is_square() || l.nrows() != u {
        return Err(Error::Shape(format!(
            "HSIC needs two square matrices of equal size, got {}x{} and {}x{}",
            k.nrows(),
            k.ncols(),
            l.nrows(),
            l.ncols()
        )));
    }
    if u < 2 {
        return Err(Error::InvalidParameter(format!(
            "HSIC needs at least 2 samples, got {u}"
        )));
    }
    Ok(u)
}

/// Empirical dependence `(U-1)^-2 trace(K H L H)`.
///
/// Small negative values from round-off are returned as-is.
pub fn hsic_estimate(k: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<f64> {
    let u = check_pair(k, l)?;
    let kc = double_center(k);
    Ok(centered_hsic(&kc, l) / ((u - 1) * (u - 1)) as f64)
}

/// `trace(Kc L)` for an already centered `Kc`; both symmetric in practice.
pub(crate) fn centered_hsic(kc: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
    // trace(Kc L) = sum_ij Kc_ij L_ji
    kc.iter()
        .zip(l.transpose().iter())
        .map(|(a, b)| a * b)
        .sum()
}

/// Triple-loop expansion of the same estimator, with no matrix products.
///
/// `(U-1)^-2 [ Σ_ij K_ij L_ji - (2/U) Σ_ijl K_ij L_jl + (1/U²) ΣK ΣL ]`
pub fn hsic_brute_force(k: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<f64> {
    let u = check_pair(k, l)?;
    let n = u as f64;
    let mut first = 0.0;
    let mut second = 0.0;
    let mut sum_k = 0.0;
    let mut sum_l = 0.0;
    for i in 0..u {
        for j in 0..u {
            first += k[(i, j)] * l[(j, i)];
            sum_k += k[(i, j)];
            sum_l += l[(i, j)];
            for m in 0..u {
                second += k[(i, j)] * l[(j, m)];
            }
        }
    }
    let second_sym = {
        // Σ_ijm K_ij L_mi: the mirrored cross term of trace(KHLH)
        let mut s = 0.0;
        for i in 0..u {
            for j in 0..u {
                for m in 0..u {
                    s += k[(i, j)] * l[(m, i)];
                }
            }
        }
        s
    };
    let trace = first - (second + second_sym) / n + sum_k * sum_l / (n * n);
    Ok(trace / ((u - 1) * (u - 1)) as f64)
}

/// Fraction of row-permuted HSIC values that reach the unpermuted one.
///
/// Small when `z` and `y` are dependent; close to 1 when `y` carries no variation.
pub fn permutation_independence_check<R: Rng + ?Sized>(
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    sigma: f64,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if trials < 100 {
        return Err(Error::InvalidParameter(format!(
            "permutation check needs at least 100 trials, got {trials}"
        )));
    }
    if z.nrows() != y.nrows() {
        return Err(Error::Shape(format!(
            "{} feature rows vs {} label rows",
            z.nrows(),
            y.nrows()
        )));
    }
    let k = gaussian_gram(z, sigma)?.into_matrix();
    let l = gaussian_gram(y, sigma)?.into_matrix();
    let u = check_pair(&k, &l)?;
    let kc = double_center(&k);
    let observed = centered_hsic(&kc, &l);
    let tol = 1e-12 * (1.0 + observed.abs());
    let mut perm: Vec<usize> = (0..u).collect();
    let mut reached = 0usize;
    for _ in 0..trials {
        perm.shuffle(rng);
        let lp = DMatrix::from_fn(u, u, |i, j| l[(perm[i], perm[j])]);
        if centered_hsic(&kc, &lp) >= observed - tol {
            reached += 1;
        }
    }
    Ok(reached as f64 / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn identical_rows_give_all_ones() {
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let g = gaussian_gram(&rows, 0.5).unwrap();
        assert!(g.matrix().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn distance_sqrt2_sigma_gives_inverse_e() {
        let sigma = 0.7;
        let rows = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, sigma, sigma]);
        let g = gaussian_gram(&rows, sigma).unwrap();
        assert!((g.matrix()[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn gram_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = randn(&mut rng, 8, 3);
        let g = gaussian_gram(&rows, 0.9).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let d2: f64 = (0..3).map(|k| (rows[(i, k)] - rows[(j, k)]).powi(2)).sum();
                let want = (-d2 / (2.0 * 0.81)).exp();
                assert!((g.matrix()[(i, j)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gram_rejects_bad_sigma() {
        let rows = DMatrix::zeros(2, 2);
        assert!(gaussian_gram(&rows, 0.0).is_err());
        assert!(gaussian_gram(&rows, -1.0).is_err());
    }

    #[test]
    fn gram_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = randn(&mut rng, 10, 4);
        let shifted = rows.map(|v| v + 3.25);
        let a = gaussian_gram(&rows, 1.0).unwrap();
        let b = gaussian_gram(&shifted, 1.0).unwrap();
        assert!((a.matrix() - b.matrix()).amax() < 1e-12);
    }

    #[test]
    fn constant_l_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = gaussian_gram(&randn(&mut rng, 6, 2), 1.0)
            .unwrap()
            .into_matrix();
        let l = DMatrix::from_element(6, 6, 1.0);
        assert!(hsic_estimate(&k, &l).unwrap().abs() < 1e-14);
        assert!(hsic_brute_force(&k, &l).unwrap().abs() < 1e-14);
    }

    #[test]
    fn two_sample_closed_form() {
        let (a, b) = (0.3, -0.45);
        let k = DMatrix::from_row_slice(2, 2, &[1.0, a, a, 1.0]);
        let l = DMatrix::from_row_slice(2, 2, &[1.0, b, b, 1.0]);
        let want = (1.0 - a) * (1.0 - b);
        assert!((hsic_estimate(&k, &l).unwrap() - want).abs() < 1e-15);
        assert!((hsic_brute_force(&k, &l).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn size_errors() {
        let k = DMatrix::from_element(3, 3, 1.0);
        let l = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(hsic_estimate(&k, &l), Err(Error::Shape(_))));
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            hsic_estimate(&one, &one),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn symmetric_in_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = gaussian_gram(&randn(&mut rng, 15, 3), 1.0)
            .unwrap()
            .into_matrix();
        let l = gaussian_gram(&randn(&mut rng, 15, 2), 0.5)
            .unwrap()
            .into_matrix();
        let a = hsic_estimate(&k, &l).unwrap();
        let b = hsic_estimate(&l, &k).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn permutation_check_dependent_vs_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = randn(&mut rng, 40, 3);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 0.8, 0.2, -1.0]);
        let y = &z * &a;
        let p = permutation_independence_check(&z, &y, 1.0, 200, &mut rng).unwrap();
        assert!(p < 0.05, "dependent rank {p}");

        let y_const = DMatrix::from_element(40, 2, 0.3);
        let p = permutation_independence_check(&z, &y_const, 1.0, 200, &mut rng).unwrap();
        assert!(p > 0.99, "constant rank {p}");

        assert!(permutation_independence_check(&z, &y, 1.0, 50, &mut rng).is_err());
    }
}
