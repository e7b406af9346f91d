//! Iterated self-training: train, pseudo-label the unlabeled rows, select a
//! trusted subset, merge it into the support set with frozen labels, repeat.

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::classifier::{class_prototypes, train, SoftmaxClassifier, TrainConfig};
use crate::embedding::{gather_rows, EmbeddingSet};
use crate::error::{Error, Result};
use crate::harness::Episode;
use crate::ida::{fisher_fast, Ridge};
use crate::selection::{selectors, SelectionContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Rows merged per pseudo-class per round.
    pub k_per_class: usize,
    /// Upper bound on training passes.
    pub max_iterations: usize,
    /// Registered selector name.
    pub selector: String,
    pub ridge: Ridge,
    /// Run the label-free term over the remaining pool only instead of all unlabeled rows.
    pub dm_over_pool: bool,
    /// Record the separability of the pseudo-labeling after each pass.
    pub record_psi: bool,
    pub train: TrainConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            k_per_class: 5,
            max_iterations: 10,
            selector: "ida".into(),
            ridge: Ridge::default(),
            dm_over_pool: false,
            record_psi: true,
            train: TrainConfig::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "max_iterations must be >= 1".into(),
            ));
        }
        self.ridge.validate()?;
        selectors().get(&self.selector)?;
        self.train.validate()
    }
}

/// Why the loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Two consecutive pseudo-labelings were identical.
    Stabilized,
    MaxIterations,
    NoUnlabeled,
    PoolExhausted,
    /// The selector returned nothing (including `k_per_class = 0`).
    NothingSelected,
}

/// Loop bookkeeping. Positions refer to the episode's unlabeled list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    /// Merged `(position, frozen pseudo-label)` pairs, in merge order.
    pub selected: Vec<(usize, usize)>,
    /// Positions still available for selection, ascending.
    pub pool: Vec<usize>,
    pub iteration: usize,
    pub last_pseudo_labels: Option<Vec<usize>>,
}

impl EpisodeState {
    fn new(unlabeled: usize) -> Self {
        Self {
            pool: (0..unlabeled).collect(),
            ..Self::default()
        }
    }

    fn merge(&mut self, chosen: &[usize], pseudo: &[usize]) {
        self.selected.extend(chosen.iter().map(|&u| (u, pseudo[u])));
        self.pool.retain(|u| chosen.binary_search(u).is_err());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub support_size: usize,
    /// Pool size when the pass started.
    pub pool_size: usize,
    /// Fraction of unlabeled rows whose pseudo-label matches the ground truth.
    pub pseudo_accuracy: Option<f64>,
    /// Fisher separability of the unlabeled rows under the pseudo-labels.
    pub psi: Option<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub initial_unlabeled_value: f64,
    pub final_unlabeled_value: f64,
    /// Positions merged after this pass.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub classifier: SoftmaxClassifier,
    pub query_accuracy: f64,
    pub stop: StopReason,
    pub iterations: Vec<IterationRecord>,
    /// Last inferred labels for the unlabeled rows (empty when there are none).
    pub pseudo_labels: Vec<usize>,
    pub state: EpisodeState,
}

/// True iff both labelings agree element-wise.
pub fn stabilized(prev: &[usize], cur: &[usize]) -> Result<bool> {
    if prev.len() != cur.len() {
        return Err(Error::Shape(format!(
            "cannot compare {} pseudo-labels with {}",
            prev.len(),
            cur.len()
        )));
    }
    Ok(prev == cur)
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Runs the loop on one sampled episode of `set`.
pub fn run_episode(
    episode: &Episode,
    set: &EmbeddingSet,
    cfg: &LoopConfig,
    rng: &mut dyn RngCore,
) -> Result<EpisodeResult> {
    let features = set.features();
    let support = gather_rows(features, &episode.support);
    let query = gather_rows(features, &episode.query);
    let unlabeled = gather_rows(features, &episode.unlabeled);
    run_loop(
        &LoopInput {
            n_way: episode.n_way(),
            support: &support,
            support_labels: &episode.support_labels,
            query: &query,
            query_labels: &episode.query_labels,
            unlabeled: &unlabeled,
            unlabeled_labels: Some(&episode.unlabeled_labels),
        },
        cfg,
        rng,
    )
}

/// Materialized episode rows; labels are episode-local (`0..n_way`).
#[derive(Debug, Clone, Copy)]
pub struct LoopInput<'a> {
    pub n_way: usize,
    pub support: &'a DMatrix<f64>,
    pub support_labels: &'a [usize],
    pub query: &'a DMatrix<f64>,
    pub query_labels: &'a [usize],
    pub unlabeled: &'a DMatrix<f64>,
    /// Ground truth for the trace only; never used for training or selection.
    pub unlabeled_labels: Option<&'a [usize]>,
}

pub fn run_loop(
    input: &LoopInput<'_>,
    cfg: &LoopConfig,
    rng: &mut dyn RngCore,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let selector = selectors().get(&cfg.selector)?;
    let unlabeled = input.unlabeled;
    let u = unlabeled.nrows();
    let mut state = EpisodeState::new(u);
    let mut records = Vec::new();

    loop {
        state.iteration += 1;
        let rows: Vec<usize> = state.selected.iter().map(|&(p, _)| p).collect();
        let picked = gather_rows(unlabeled, &rows);
        let support = stack(input.support, &picked);
        let mut labels = input.support_labels.to_vec();
        labels.extend(state.selected.iter().map(|&(_, y)| y));

        let dm_rows = if cfg.dm_over_pool {
            gather_rows(unlabeled, &state.pool)
        } else {
            unlabeled.clone()
        };
        let init = SoftmaxClassifier::prototype_init(&support, &labels, input.n_way)?;
        let (clf, trace) = train(&init, &support, &labels, &dm_rows, &cfg.train, None)?;

        let mut record = IterationRecord {
            iteration: state.iteration,
            support_size: support.nrows(),
            pool_size: state.pool.len(),
            pseudo_accuracy: None,
            psi: None,
            initial_objective: trace.total[0],
            final_objective: *trace.total.last().expect("trace has an initial entry"),
            initial_unlabeled_value: trace.unlabeled_value[0],
            final_unlabeled_value: *trace
                .unlabeled_value
                .last()
                .expect("trace has an initial entry"),
            selected: Vec::new(),
        };

        let finish = |state: EpisodeState, records: Vec<IterationRecord>, stop, pseudo_labels| {
            let (pred, _) = clf.pseudo_label(input.query);
            Ok::<_, Error>(EpisodeResult {
                query_accuracy: accuracy(&pred, input.query_labels),
                classifier: clf.clone(),
                stop,
                iterations: records,
                pseudo_labels,
                state,
            })
        };

        if u == 0 {
            records.push(record);
            return finish(state, records, StopReason::NoUnlabeled, Vec::new());
        }

        let probs = clf.predict_proba(unlabeled);
        let (pseudo, _) = crate::classifier::argmax_rows(&probs);
        record.pseudo_accuracy = input.unlabeled_labels.map(|t| accuracy(&pseudo, t));
        if cfg.record_psi && u >= 2 {
            record.psi = fisher_fast(unlabeled, &pseudo, cfg.ridge).ok();
        }

        let stop = if let Some(prev) = &state.last_pseudo_labels {
            stabilized(prev, &pseudo)?.then_some(StopReason::Stabilized)
        } else {
            None
        }
        .or_else(|| (state.iteration >= cfg.max_iterations).then_some(StopReason::MaxIterations))
        .or_else(|| state.pool.is_empty().then_some(StopReason::PoolExhausted))
        .or_else(|| (cfg.k_per_class == 0).then_some(StopReason::NothingSelected));
        if let Some(stop) = stop {
            records.push(record);
            return finish(state, records, stop, pseudo);
        }

        let prototypes = class_prototypes(&support, &labels, input.n_way)?;
        let ctx = SelectionContext {
            unlabeled,
            pseudo_labels: &pseudo,
            probs: &probs,
            prototypes: &prototypes,
            candidates: &state.pool,
            k_per_class: cfg.k_per_class,
            ridge: cfg.ridge,
        };
        let chosen = selector.select(&ctx, rng)?;
        if chosen.is_empty() {
            records.push(record);
            return finish(state, records, StopReason::NothingSelected, pseudo);
        }
        state.merge(&chosen, &pseudo);
        record.selected = chosen;
        records.push(record);
        state.last_pseudo_labels = Some(pseudo);
    }
}

fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    if bottom.nrows() == 0 {
        return top.clone();
    }
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    out
}
