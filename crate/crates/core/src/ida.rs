//! Fisher-criterion separability and per-instance discriminant analysis.
//!
//! For pseudo-labeled rows `f_u` with global mean `μ` and class means `μ_c`:
//!
//! * `S̄  = Σ_u (f_u - μ)(f_u - μ)ᵀ`
//! * `S_B = Σ_c M_c (μ_c - μ)(μ_c - μ)ᵀ`
//! * `ψ   = trace((S̄ + ρI)⁻¹ S_B)`
//!
//! The instance score `dψ_u` is the drop in `ψ` when row `u` is removed. The
//! fast path keeps `μ` fixed under removal, so `S̄` loses exactly the rank-one
//! term `g gᵀ` (`g = f_u - μ`) and the inverse is downdated by Sherman-Morrison;
//! `S_B` changes by the closed-form `E_B` of the shrunken class. The naive path
//! recomputes everything from scratch and can also re-estimate the mean.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::top_per_class;

/// `Σ_{k=1}^{4} k^{-1/2}`.
pub const HARMONIC_4_HALF: f64 =
    1.0 + std::f64::consts::FRAC_1_SQRT_2 + 0.577_350_269_189_625_8 + 0.5;

const CONDITION_LIMIT: f64 = 1e12;
const DOWNDATE_FLOOR: f64 = 1e-12;

/// How the global mean is treated when an instance is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanConvention {
    /// Keep the full-set mean (matches the rank-one downdate exactly).
    #[default]
    Fixed,
    /// Re-estimate the mean on the reduced set.
    Recomputed,
}

/// Ridge added to `S̄` before inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ridge {
    Absolute(f64),
    /// `factor * trace(S̄) / d`.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(10.0)
    }
}

impl Ridge {
    pub fn validate(&self) -> Result<()> {
        let (Ridge::Absolute(v) | Ridge::Relative(v)) = *self;
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "ridge must be positive, got {self}"
            )))
        }
    }

    pub fn resolve(&self, scatter: &DMatrix<f64>) -> Result<f64> {
        self.resolve_from_trace(scatter.trace(), scatter.nrows())
    }

    /// Resolves against the scatter of `features` without forming the `d x d` matrix.
    pub fn resolve_for(&self, features: &DMatrix<f64>) -> Result<f64> {
        let mean = column_mean(features);
        let trace: f64 = features
            .row_iter()
            .map(|r| (r.transpose() - &mean).norm_squared())
            .sum();
        self.resolve_from_trace(trace, features.ncols())
    }

    fn resolve_from_trace(&self, trace: f64, dim: usize) -> Result<f64> {
        let rho = match *self {
            Ridge::Absolute(v) => v,
            Ridge::Relative(f) => f * trace / dim.max(1) as f64,
        };
        if rho > 0.0 && rho.is_finite() {
            Ok(rho)
        } else {
            Err(Error::InvalidParameter(format!(
                "ridge must be positive, resolved to {rho} from {self:?}"
            )))
        }
    }
}

impl fmt::Display for Ridge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ridge::Absolute(v) => write!(f, "abs:{v}"),
            Ridge::Relative(v) => write!(f, "rel:{v}"),
        }
    }
}

/// `abs:V`, `rel:F`, or a bare number (absolute).
impl FromStr for Ridge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("invalid ridge value {s:?}")))
        };
        let ridge = match s.split_once(':') {
            Some(("abs", v)) => Ridge::Absolute(parse(v)?),
            Some(("rel", v)) => Ridge::Relative(parse(v)?),
            Some(_) => {
                return Err(Error::InvalidParameter(format!(
                    "invalid ridge {s:?}, expected abs:V or rel:F"
                )))
            }
            None => Ridge::Absolute(parse(s)?),
        };
        ridge.validate()?;
        Ok(ridge)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPair {
    pub scatter: DMatrix<f64>,
    pub between: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// `d x C`; columns of empty classes are zero.
    pub class_means: DMatrix<f64>,
    pub class_counts: Vec<usize>,
}

fn check_inputs(features: &DMatrix<f64>, labels: &[usize], min_rows: usize) -> Result<usize> {
    if labels.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            features.nrows()
        )));
    }
    if features.nrows() < min_rows {
        return Err(Error::InvalidParameter(format!(
            "need at least {min_rows} rows, got {}",
            features.nrows()
        )));
    }
    Ok(labels.iter().max().map_or(0, |&m| m + 1))
}

fn column_mean(features: &DMatrix<f64>) -> DVector<f64> {
    features.row_mean().transpose()
}

fn class_stats(
    features: &DMatrix<f64>,
    labels: &[usize],
    classes: usize,
) -> (DMatrix<f64>, Vec<usize>) {
    let mut means = DMatrix::zeros(features.ncols(), classes);
    let mut counts = vec![0usize; classes];
    for (row, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        let mut col = means.column_mut(c);
        col += features.row(row).transpose();
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            means.column_mut(c).scale_mut(1.0 / n as f64);
        }
    }
    (means, counts)
}

/// Scatter pair about an explicitly given mean.
pub fn scatter_about(
    features: &DMatrix<f64>,
    labels: &[usize],
    mean: &DVector<f64>,
) -> Result<ScatterPair> {
    let classes = check_inputs(features, labels, 1)?;
    let d = features.ncols();
    if mean.len() != d {
        return Err(Error::Shape(format!(
            "mean has {} entries, features {d}",
            mean.len()
        )));
    }
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let scatter = centered.tr_mul(&centered);
    let (class_means, class_counts) = class_stats(features, labels, classes);
    let mut between = DMatrix::zeros(d, d);
    for (c, &n) in class_counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let diff = class_means.column(c) - mean;
        between.ger(n as f64, &diff, &diff, 1.0);
    }
    Ok(ScatterPair {
        scatter,
        between,
        mean: mean.clone(),
        class_means,
        class_counts,
    })
}

/// Scatter and between-class scatter about the empirical mean.
pub fn scatter_matrices(features: &DMatrix<f64>, labels: &[usize]) -> Result<ScatterPair> {
    check_inputs(features, labels, 2)?;
    scatter_about(features, labels, &column_mean(features))
}

fn regularized_cholesky(scatter: &DMatrix<f64>, ridge: f64) -> Result<Cholesky<f64, Dyn>> {
    if !(ridge > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "ridge must be > 0, got {ridge}"
        )));
    }
    let d = scatter.nrows();
    let a = scatter + DMatrix::identity(d, d) * ridge;
    let chol = Cholesky::new(a).ok_or(Error::IllConditioned {
        condition: f64::INFINITY,
    })?;
    // (max L_ii / min L_ii)² never exceeds the true 2-norm condition number.
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let condition = (hi / lo).powi(2);
    if condition > CONDITION_LIMIT {
        return Err(Error::IllConditioned { condition });
    }
    Ok(chol)
}

/// `ψ = trace((S̄ + ρI)⁻¹ S_B)`.
pub fn fisher_criterion(sp: &ScatterPair, ridge: f64) -> Result<f64> {
    let chol = regularized_cholesky(&sp.scatter, ridge)?;
    Ok(chol.solve(&sp.between).trace())
}

/// Fisher criterion of a labeling, with the ridge resolved on that labeling's scatter.
pub fn fisher_of_labels(features: &DMatrix<f64>, labels: &[usize], ridge: Ridge) -> Result<f64> {
    let sp = scatter_matrices(features, labels)?;
    let rho = ridge.resolve(&sp.scatter)?;
    fisher_criterion(&sp, rho)
}

/// Same value as [`fisher_of_labels`], computed through the shared factorization
/// used by [`ida_all_fast`] (cheaper when rows are fewer than dimensions).
pub fn fisher_fast(features: &DMatrix<f64>, labels: &[usize], ridge: Ridge) -> Result<f64> {
    let rho = ridge.resolve_for(features)?;
    Ok(Shared::new(features, labels, rho)?.psi())
}

fn check_removable(labels: &[usize], u: usize) -> Result<usize> {
    let class = labels[u];
    let members = labels.iter().filter(|&&l| l == class).count();
    if members < 2 {
        return Err(Error::ClassWouldVanish { index: u, class });
    }
    Ok(members)
}

/// `dψ_u` recomputed from scratch on the set without row `u`.
pub fn ida_exact_naive(
    features: &DMatrix<f64>,
    labels: &[usize],
    u: usize,
    ridge: f64,
    convention: MeanConvention,
) -> Result<f64> {
    check_inputs(features, labels, 3)?;
    if u >= labels.len() {
        return Err(Error::InvalidParameter(format!(
            "instance {u} out of range"
        )));
    }
    check_removable(labels, u)?;
    let full = scatter_matrices(features, labels)?;
    let psi = fisher_criterion(&full, ridge)?;

    let keep: Vec<usize> = (0..labels.len()).filter(|&v| v != u).collect();
    let reduced = crate::embedding::gather_rows(features, &keep);
    let reduced_labels: Vec<usize> = keep.iter().map(|&v| labels[v]).collect();
    let mean = match convention {
        MeanConvention::Fixed => full.mean.clone(),
        MeanConvention::Recomputed => column_mean(&reduced),
    };
    let without = scatter_about(&reduced, &reduced_labels, &mean)?;
    Ok(psi - fisher_criterion(&without, ridge)?)
}

/// Per-instance discriminant score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdaScore {
    pub index: usize,
    pub pseudo_label: usize,
    pub d_psi: f64,
    /// Closed-form upper bound, when its preconditions hold.
    pub bound: Option<f64>,
}

/// Applies `(GᵀG + ρI)⁻¹` for centered rows `G` (`U x d`).
///
/// With fewer rows than dimensions the dual form
/// `(I - Gᵀ(ρI + GGᵀ)⁻¹G) / ρ` only factors a `U x U` matrix.
enum RegularizedInverse {
    Primal(Cholesky<f64, Dyn>),
    Dual {
        rows: DMatrix<f64>,
        gram: Cholesky<f64, Dyn>,
        ridge: f64,
    },
}

impl RegularizedInverse {
    fn new(centered: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let (u, d) = centered.shape();
        if u >= d {
            return Ok(Self::Primal(regularized_cholesky(
                &centered.tr_mul(centered),
                ridge,
            )?));
        }
        if !(ridge > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ridge must be > 0, got {ridge}"
            )));
        }
        let gram = centered * centered.transpose() + DMatrix::identity(u, u) * ridge;
        // the full matrix also has eigenvalue ρ, so max diag / ρ bounds the condition from below
        let condition = gram.diagonal().max() / ridge;
        if condition > CONDITION_LIMIT {
            return Err(Error::IllConditioned { condition });
        }
        let gram = Cholesky::new(gram).ok_or(Error::IllConditioned {
            condition: f64::INFINITY,
        })?;
        Ok(Self::Dual {
            rows: centered.clone(),
            gram,
            ridge,
        })
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Primal(chol) => chol.solve(v),
            Self::Dual { rows, gram, ridge } => {
                let inner = gram.solve(&(rows * v));
                (v - rows.tr_mul(&inner)) / *ridge
            }
        }
    }
}

/// Inputs shared by every instance of one fast IDA pass.
struct Shared {
    centered: DMatrix<f64>,
    /// Centered class means, `d x C`.
    class_means: DMatrix<f64>,
    counts: Vec<usize>,
    inverse: RegularizedInverse,
    /// `(S̄+ρI)⁻¹ m_c` per class.
    inv_means: DMatrix<f64>,
    psi: f64,
    delta: f64,
}

impl Shared {
    fn new(features: &DMatrix<f64>, labels: &[usize], ridge: f64) -> Result<Self> {
        let classes = check_inputs(features, labels, 2)?;
        let mean = column_mean(features);
        let mut centered = features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let inverse = RegularizedInverse::new(&centered, ridge)?;
        let (mut class_means, counts) = class_stats(features, labels, classes);
        for (c, mut col) in class_means.column_iter_mut().enumerate() {
            if counts[c] > 0 {
                col -= &mean;
            }
        }
        let mut inv_means = DMatrix::zeros(class_means.nrows(), classes);
        let mut psi = 0.0;
        let mut delta = 0.0;
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let m = class_means.column(c).into_owned();
            let im = inverse.apply(&m);
            psi += n as f64 * m.dot(&im);
            delta += n as f64 * m.norm_squared();
            inv_means.set_column(c, &im);
        }
        Ok(Self {
            centered,
            class_means,
            counts,
            inverse,
            inv_means,
            psi,
            delta,
        })
    }

    fn psi(&self) -> f64 {
        self.psi
    }

    /// `dψ_u` under the fixed-mean convention, or `None` when the downdate is singular.
    fn d_psi(&self, u: usize, class: usize) -> Option<f64> {
        let g = self.centered.row(u).transpose();
        let m = self.class_means.column(class);
        let big_m = self.counts[class] as f64;
        let a = self.inverse.apply(&g);
        let s = g.dot(&a);
        let denom = 1.0 - s;
        if denom.abs() < DOWNDATE_FLOOR {
            return None;
        }
        let m_inv_m = m.dot(&self.inv_means.column(class));
        let m_inv_g = self.inv_means.column(class).dot(&g);
        let trace_inv_eb = (big_m * m_inv_m - 2.0 * big_m * m_inv_g + s) / (big_m - 1.0);

        let mut a_sb_a = 0.0;
        for (c, &n) in self.counts.iter().enumerate() {
            if n > 0 {
                let t = a.dot(&self.class_means.column(c));
                a_sb_a += n as f64 * t * t;
            }
        }
        let a_m = a.dot(&m);
        let a_eb_a = (big_m * a_m * a_m - 2.0 * big_m * a_m * s + s * s) / (big_m - 1.0);
        Some(-trace_inv_eb - (a_sb_a + a_eb_a) / denom)
    }

    fn bound(&self, u: usize, class: usize, ridge: f64) -> Result<f64> {
        let g = self.centered.row(u).transpose();
        let m = self.class_means.column(class);
        bound_from_parts(
            u,
            &g,
            &m.into_owned(),
            self.counts[class],
            self.delta,
            ridge,
        )
    }
}

fn bound_from_parts(
    index: usize,
    g: &DVector<f64>,
    m: &DVector<f64>,
    members: usize,
    delta: f64,
    ridge: f64,
) -> Result<f64> {
    let ff = g.norm_squared();
    if ff <= ridge {
        return Err(Error::BoundUndefined {
            index,
            norm_sq: ff,
            ridge,
        });
    }
    let mm = m.norm_squared();
    let mf = m.dot(g);
    let radicand = mm * mm - 4.0 * mm * mf + 2.0 * ff * mm + 2.0 * mf * mf;
    let nu = members as f64 * radicand.max(0.0).sqrt();
    let mu1 = (members - 1) as f64;
    Ok(delta * ff / (ridge * (ff - ridge))
        + HARMONIC_4_HALF * (nu + ff) / (ridge * mu1)
        + ff * (nu + ff) / (ridge * (ff - ridge) * mu1))
}

/// `dψ_u` for every row via one factorization and a rank-one downdate per row.
///
/// Rows whose class would vanish yield [`Error::ClassWouldVanish`]. A singular
/// downdate falls back to [`ida_exact_naive`] for that row.
pub fn ida_all_fast(
    features: &DMatrix<f64>,
    labels: &[usize],
    ridge: f64,
) -> Result<Vec<Result<IdaScore>>> {
    check_inputs(features, labels, 3)?;
    let shared = Shared::new(features, labels, ridge)?;
    let scores = (0..labels.len())
        .into_par_iter()
        .map(|u| {
            let class = labels[u];
            check_removable(labels, u)?;
            let d_psi = match shared.d_psi(u, class) {
                Some(v) => v,
                None => ida_exact_naive(features, labels, u, ridge, MeanConvention::Fixed)?,
            };
            Ok(IdaScore {
                index: u,
                pseudo_label: class,
                d_psi,
                bound: shared.bound(u, class, ridge).ok(),
            })
        })
        .collect();
    Ok(scores)
}

/// Closed-form upper bound on `dψ_u` built from inner products only.
pub fn ida_upper_bound(
    u: usize,
    features: &DMatrix<f64>,
    labels: &[usize],
    ridge: f64,
) -> Result<f64> {
    check_inputs(features, labels, 2)?;
    if u >= labels.len() {
        return Err(Error::InvalidParameter(format!(
            "instance {u} out of range"
        )));
    }
    let members = check_removable(labels, u)?;
    let sp = scatter_matrices(features, labels)?;
    let g = features.row(u).transpose() - &sp.mean;
    let mut delta = 0.0;
    for (c, &n) in sp.class_counts.iter().enumerate() {
        if n > 0 {
            delta += n as f64 * (sp.class_means.column(c) - &sp.mean).norm_squared();
        }
    }
    let m = sp.class_means.column(labels[u]) - &sp.mean;
    bound_from_parts(u, &g, &m, members, delta, ridge)
}

/// Top `k_per_class` indices of each pseudo-class by descending `dψ_u`, ties to the lower index.
pub fn rank_and_select(scores: &[IdaScore], k_per_class: usize) -> Vec<usize> {
    top_per_class(
        scores.iter().map(|s| (s.index, s.pseudo_label, s.d_psi)),
        k_per_class,
    )
}
