//! Pseudo-label selectors: which unlabeled rows join the support set.
//!
//! Every selector scores the rows still in the pool and keeps the top
//! `k_per_class` of each pseudo-class (ties to the lower index).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rand::{Rng, RngCore};

use crate::error::Result;
use crate::ida::{ida_all_fast, Ridge};
use crate::registry::{Named, Registry};

/// Everything a selector may look at for one episode iteration.
pub struct SelectionContext<'a> {
    /// `U x d`, all unlabeled rows (including already selected ones).
    pub unlabeled: &'a DMatrix<f64>,
    pub pseudo_labels: &'a [usize],
    /// `U x N` softmax outputs of the current classifier.
    pub probs: &'a DMatrix<f64>,
    /// `d x N` prototypes of the current augmented support set.
    pub prototypes: &'a DMatrix<f64>,
    /// Row positions still available for selection.
    pub candidates: &'a [usize],
    pub k_per_class: usize,
    pub ridge: Ridge,
}

pub trait Selector: Named {
    /// Positions (into `ctx.unlabeled`) to merge into the support set, ascending.
    fn select(&self, ctx: &SelectionContext<'_>, rng: &mut dyn RngCore) -> Result<Vec<usize>>;
}

pub fn selectors() -> &'static Registry<dyn Selector> {
    static REG: OnceLock<Registry<dyn Selector>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn Selector> = Registry::new("selector");
        reg.register(Arc::new(NoSelection))
            .register(Arc::new(RandomSelector))
            .register(Arc::new(NearestPrototypeSelector))
            .register(Arc::new(ConfidenceSelector))
            .register(Arc::new(IdaSelector))
            .register(Arc::new(IdaBoundSelector));
        reg
    })
}

/// Top `k` entries per class by descending score; NaN scores are never chosen.
///
/// Returns the chosen indices in ascending order.
pub fn top_per_class(
    entries: impl IntoIterator<Item = (usize, usize, f64)>,
    k: usize,
) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut by_class: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for (index, class, score) in entries {
        if !score.is_nan() {
            by_class.entry(class).or_default().push((index, score));
        }
    }
    let mut out = Vec::new();
    for (_, mut rows) in by_class {
        rows.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        out.extend(rows.into_iter().take(k).map(|(i, _)| i));
    }
    out.sort_unstable();
    out
}

fn select_by(ctx: &SelectionContext<'_>, score: impl Fn(usize) -> f64) -> Vec<usize> {
    top_per_class(
        ctx.candidates
            .iter()
            .map(|&u| (u, ctx.pseudo_labels[u], score(u))),
        ctx.k_per_class,
    )
}

/// Never selects; the loop trains once.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoSelection;

impl Named for NoSelection {
    fn name(&self) -> &'static str {
        "none"
    }
    fn summary(&self) -> &'static str {
        "no pseudo-label selection"
    }
}

impl Selector for NoSelection {
    fn select(&self, _: &SelectionContext<'_>, _: &mut dyn RngCore) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomSelector;

impl Named for RandomSelector {
    fn name(&self) -> &'static str {
        "rand"
    }
    fn summary(&self) -> &'static str {
        "uniformly random rows per pseudo-class (seeded)"
    }
}

impl Selector for RandomSelector {
    fn select(&self, ctx: &SelectionContext<'_>, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        let draws: Vec<f64> = ctx.candidates.iter().map(|_| rng.random::<f64>()).collect();
        Ok(top_per_class(
            ctx.candidates
                .iter()
                .zip(&draws)
                .map(|(&u, &r)| (u, ctx.pseudo_labels[u], r)),
            ctx.k_per_class,
        ))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NearestPrototypeSelector;

impl Named for NearestPrototypeSelector {
    fn name(&self) -> &'static str {
        "nn"
    }
    fn summary(&self) -> &'static str {
        "rows closest to their pseudo-class prototype"
    }
}

impl Selector for NearestPrototypeSelector {
    fn select(&self, ctx: &SelectionContext<'_>, _: &mut dyn RngCore) -> Result<Vec<usize>> {
        Ok(select_by(ctx, |u| {
            let proto = ctx.prototypes.column(ctx.pseudo_labels[u]);
            -(ctx.unlabeled.row(u).transpose() - proto).norm_squared()
        }))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ConfidenceSelector;

impl Named for ConfidenceSelector {
    fn name(&self) -> &'static str {
        "confid"
    }
    fn summary(&self) -> &'static str {
        "rows with the largest maximum class probability"
    }
}

impl Selector for ConfidenceSelector {
    fn select(&self, ctx: &SelectionContext<'_>, _: &mut dyn RngCore) -> Result<Vec<usize>> {
        Ok(select_by(ctx, |u| ctx.probs[(u, ctx.pseudo_labels[u])]))
    }
}

/// Scores every unlabeled row by its instance discriminant value; rows whose
/// removal would empty their pseudo-class are not selectable.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdaSelector;

impl Named for IdaSelector {
    fn name(&self) -> &'static str {
        "ida"
    }
    fn summary(&self) -> &'static str {
        "largest drop in Fisher separability when the row is removed"
    }
}

fn ida_scores(ctx: &SelectionContext<'_>, use_bound: bool) -> Result<Option<Vec<f64>>> {
    if ctx.unlabeled.nrows() < 3 {
        return Ok(None);
    }
    let rho = ctx.ridge.resolve_for(ctx.unlabeled)?;
    let scores = ida_all_fast(ctx.unlabeled, ctx.pseudo_labels, rho)?;
    Ok(Some(
        scores
            .into_iter()
            .map(|s| match s {
                Ok(s) if use_bound => s.bound.unwrap_or(f64::NAN),
                Ok(s) => s.d_psi,
                Err(_) => f64::NAN,
            })
            .collect(),
    ))
}

impl Selector for IdaSelector {
    fn select(&self, ctx: &SelectionContext<'_>, _: &mut dyn RngCore) -> Result<Vec<usize>> {
        Ok(match ida_scores(ctx, false)? {
            Some(scores) => select_by(ctx, |u| scores[u]),
            None => Vec::new(),
        })
    }
}

/// Ranks by the closed-form upper bound instead of the exact score.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdaBoundSelector;

impl Named for IdaBoundSelector {
    fn name(&self) -> &'static str {
        "ida-bound"
    }
    fn summary(&self) -> &'static str {
        "largest closed-form upper bound of the instance discriminant value"
    }
}

impl Selector for IdaBoundSelector {
    fn select(&self, ctx: &SelectionContext<'_>, _: &mut dyn RngCore) -> Result<Vec<usize>> {
        Ok(match ida_scores(ctx, true)? {
            Some(scores) => select_by(ctx, |u| scores[u]),
            None => Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{class_prototypes, SoftmaxClassifier};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    struct Fixture {
        unlabeled: DMatrix<f64>,
        pseudo: Vec<usize>,
        probs: DMatrix<f64>,
        protos: DMatrix<f64>,
        candidates: Vec<usize>,
    }

    impl Fixture {
        fn ctx(&self, k: usize) -> SelectionContext<'_> {
            SelectionContext {
                unlabeled: &self.unlabeled,
                pseudo_labels: &self.pseudo,
                probs: &self.probs,
                prototypes: &self.protos,
                candidates: &self.candidates,
                k_per_class: k,
                ridge: Ridge::default(),
            }
        }
    }

    fn fixture(seed: u64) -> (Fixture, SoftmaxClassifier) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = DMatrix::from_fn(3, 4, |_, _| StandardNormal.sample(&mut rng));
        let clf = SoftmaxClassifier::prototype_init(&support, &[0, 1, 2], 3).unwrap();
        let unlabeled = DMatrix::from_fn(24, 4, |_, _| StandardNormal.sample(&mut rng));
        let probs = clf.predict_proba(&unlabeled);
        let (pseudo, _) = clf.pseudo_label(&unlabeled);
        let protos = class_prototypes(&support, &[0, 1, 2], 3).unwrap();
        (
            Fixture {
                unlabeled,
                pseudo,
                probs,
                protos,
                candidates: (0..24).collect(),
            },
            clf,
        )
    }

    #[test]
    fn top_per_class_matches_sort_then_take() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let entries: Vec<(usize, usize, f64)> = (0..30)
                .map(|i| (i, rng.random_range(0..4), rng.random::<f64>()))
                .collect();
            let got = top_per_class(entries.clone(), 3);
            let mut want = Vec::new();
            for c in 0..4 {
                let mut rows: Vec<_> = entries.iter().filter(|e| e.1 == c).collect();
                rows.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
                want.extend(rows.iter().take(3).map(|e| e.0));
            }
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn top_per_class_skips_nan() {
        let got = top_per_class(vec![(0, 0, f64::NAN), (1, 0, 0.1), (2, 1, f64::NAN)], 2);
        assert_eq!(got, vec![1]);
    }

    #[test]
    fn confidence_picks_saturated_rows() {
        let mut probs = DMatrix::from_element(6, 2, 0.5);
        probs[(1, 0)] = 0.999;
        probs[(1, 1)] = 0.001;
        probs[(4, 1)] = 0.999;
        probs[(4, 0)] = 0.001;
        let pseudo = vec![0, 0, 0, 1, 1, 1];
        let unlabeled = DMatrix::zeros(6, 2);
        let protos = DMatrix::zeros(2, 2);
        let candidates: Vec<usize> = (0..6).collect();
        let ctx = SelectionContext {
            unlabeled: &unlabeled,
            pseudo_labels: &pseudo,
            probs: &probs,
            prototypes: &protos,
            candidates: &candidates,
            k_per_class: 1,
            ridge: Ridge::default(),
        };
        let got = ConfidenceSelector
            .select(&ctx, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(got, vec![1, 4]);
    }

    #[test]
    fn nearest_prototype_agrees_with_initial_classifier_argmax() {
        for seed in 0..10 {
            let (fx, clf) = fixture(seed);
            // the pseudo-label of every row is its nearest prototype
            for u in 0..fx.unlabeled.nrows() {
                let z = fx.unlabeled.row(u).transpose();
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let da = (&z - fx.protos.column(a)).norm_squared();
                        let db = (&z - fx.protos.column(b)).norm_squared();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                assert_eq!(fx.pseudo[u], best);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let nn = NearestPrototypeSelector
                .select(&fx.ctx(2), &mut rng)
                .unwrap();
            let conf = ConfidenceSelector.select(&fx.ctx(2), &mut rng).unwrap();
            let class_counts = |sel: &[usize]| {
                let mut c = [0usize; 3];
                for &u in sel {
                    c[fx.pseudo[u]] += 1;
                }
                c
            };
            assert_eq!(class_counts(&nn), class_counts(&conf));
            let _ = clf;
        }
    }

    #[test]
    fn random_is_reproducible() {
        let (fx, _) = fixture(4);
        let a = RandomSelector
            .select(&fx.ctx(2), &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = RandomSelector
            .select(&fx.ctx(2), &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn selections_respect_candidates_and_quota() {
        let (mut fx, _) = fixture(5);
        fx.candidates = (0..24).filter(|u| u % 3 != 0).collect();
        for name in selectors().names() {
            let sel = selectors().get(name).unwrap();
            let got = sel
                .select(&fx.ctx(2), &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
            let mut per_class = [0usize; 3];
            for &u in &got {
                assert!(fx.candidates.contains(&u), "{name} picked {u}");
                per_class[fx.pseudo[u]] += 1;
            }
            assert!(per_class.iter().all(|&c| c <= 2), "{name}: {per_class:?}");
        }
    }

    #[test]
    fn zero_quota_selects_nothing() {
        let (fx, _) = fixture(6);
        for sel in selectors().iter() {
            assert!(sel
                .select(&fx.ctx(0), &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap()
                .is_empty());
        }
    }
}
