//! Episode sampling, synthetic Gaussian task sets, and benchmark runs.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::selftrain::{run_episode, LoopConfig, StopReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// The query rows double as the unlabeled rows.
    #[default]
    Transductive,
    /// A separate unlabeled pool, disjoint from support and query.
    Semi,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Transductive => "transductive",
            Mode::Semi => "semi",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(Mode::Transductive),
            "semi" => Ok(Mode::Semi),
            _ => Err(Error::InvalidParameter(format!(
                "unknown mode {s:?}, expected transductive or semi"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Query rows per class.
    pub q_per_class: usize,
    /// Unlabeled rows per class; only used in semi-supervised mode.
    pub u_per_class: usize,
    pub mode: Mode,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            q_per_class: 15,
            u_per_class: 50,
            mode: Mode::Transductive,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.q_per_class < 1 {
            return Err(Error::InvalidParameter(format!(
                "need n_way >= 2, k_shot >= 1, q_per_class >= 1 (got {}, {}, {})",
                self.n_way, self.k_shot, self.q_per_class
            )));
        }
        Ok(())
    }

    /// Members a class needs to be eligible.
    pub fn per_class(&self) -> usize {
        let extra = match self.mode {
            Mode::Transductive => 0,
            Mode::Semi => self.u_per_class,
        };
        self.k_shot + self.q_per_class + extra
    }
}

/// One sampled task. Indices are rows of the source set; labels are episode-local.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Source class of each episode label.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Ground truth of the unlabeled rows, for diagnostics only.
    pub unlabeled_labels: Vec<usize>,
    pub mode: Mode,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    rng: &mut R,
    set: &EmbeddingSet,
    spec: &TaskSpec,
) -> Result<Episode> {
    spec.validate()?;
    let needed = spec.per_class();
    let members = set.class_members();
    let eligible: Vec<usize> = (0..members.len())
        .filter(|&c| members[c].len() >= needed)
        .collect();
    if eligible.len() < spec.n_way {
        return Err(Error::InsufficientClasses {
            needed,
            eligible: eligible.len(),
            n_way: spec.n_way,
        });
    }

    let classes: Vec<usize> = sample(rng, eligible.len(), spec.n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut ep = Episode {
        classes: classes.clone(),
        support: Vec::new(),
        support_labels: Vec::new(),
        query: Vec::new(),
        query_labels: Vec::new(),
        unlabeled: Vec::new(),
        unlabeled_labels: Vec::new(),
        mode: spec.mode,
    };
    for (label, &class) in classes.iter().enumerate() {
        let pool = &members[class];
        let picked: Vec<usize> = sample(rng, pool.len(), needed)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let (support, rest) = picked.split_at(spec.k_shot);
        let (query, unlabeled) = rest.split_at(spec.q_per_class);
        ep.support.extend_from_slice(support);
        ep.support_labels
            .extend(std::iter::repeat_n(label, support.len()));
        ep.query.extend_from_slice(query);
        ep.query_labels
            .extend(std::iter::repeat_n(label, query.len()));
        if spec.mode == Mode::Semi {
            ep.unlabeled.extend_from_slice(unlabeled);
            ep.unlabeled_labels
                .extend(std::iter::repeat_n(label, unlabeled.len()));
        }
    }
    if spec.mode == Mode::Transductive {
        ep.unlabeled = ep.query.clone();
        ep.unlabeled_labels = ep.query_labels.clone();
    }
    Ok(ep)
}

/// Parameters of a Gaussian mixture stand-in for real embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub dim: usize,
    /// Radius of the sphere the class means are drawn on.
    pub separation: f64,
    /// Per-coordinate standard deviation around each mean.
    pub spread: f64,
    pub per_class: usize,
}

impl FromStr for SynthSpec {
    type Err = Error;

    /// `n_classes,dim,separation,spread,per_class`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || {
            Error::InvalidParameter(format!(
                "invalid synthetic spec {s:?}, expected n_classes,dim,separation,spread,per_class"
            ))
        };
        if parts.len() != 5 {
            return Err(bad());
        }
        let int = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        let real = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
        Ok(SynthSpec {
            n_classes: int(0)?,
            dim: int(1)?,
            separation: real(2)?,
            spread: real(3)?,
            per_class: int(4)?,
        })
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.n_classes, self.dim, self.separation, self.spread, self.per_class
        )
    }
}

/// Class means uniform on the sphere of radius `separation`; samples isotropic
/// with standard deviation `spread`. Rows are grouped by class.
pub fn synth_gaussian_tasks<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &SynthSpec,
) -> Result<EmbeddingSet> {
    let SynthSpec {
        n_classes,
        dim,
        separation,
        spread,
        per_class,
    } = *spec;
    if n_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidParameter(
            "synthetic set needs at least one class, dimension and row".into(),
        ));
    }
    if !(separation >= 0.0 && separation.is_finite() && spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "separation and spread must be finite and >= 0 (got {separation}, {spread})"
        )));
    }
    let mut randn = |n: usize| DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(&mut *rng));
    let means: Vec<DVector<f64>> = (0..n_classes)
        .map(|_| {
            let mut v = randn(dim);
            while v.norm() == 0.0 {
                v = randn(dim);
            }
            v.normalize() * separation
        })
        .collect();
    let mut features = DMatrix::zeros(n_classes * per_class, dim);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for i in 0..per_class {
            let row = mean + randn(dim) * spread;
            features
                .row_mut(c * per_class + i)
                .copy_from(&row.transpose());
            labels.push(c);
        }
    }
    let names = (0..n_classes).map(|c| format!("class{c}")).collect();
    EmbeddingSet::new(features, labels, Some(names))
}

/// Generator for episode `index` under master `seed`; independent of scheduling.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    pub episodes: usize,
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
    /// L2-normalize every row before sampling.
    pub normalize: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            episodes: 10_000,
            seed: 0,
            threads: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// `None` when the episode failed.
    pub accuracy: Option<f64>,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    /// Unlabeled rows merged into the support set.
    pub selected: usize,
    /// Accuracy of the final pseudo-labels on the unlabeled rows.
    pub pseudo_accuracy: Option<f64>,
    pub initial_unlabeled_value: Option<f64>,
    pub final_unlabeled_value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub source: String,
    pub task: TaskSpec,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub episodes: usize,
    pub seed: u64,
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub threads: usize,
    pub wall_seconds: f64,
    pub mean_episode_seconds: f64,
    pub max_episode_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub episodes: usize,
    pub completed: usize,
    pub failed: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub config: ConfigEcho,
    pub records: Vec<EpisodeRecord>,
    /// Wall-clock data; the only part that varies between identical runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl RunReport {
    /// Mean, sample standard deviation and CI over the successful episodes.
    fn summarize(config: ConfigEcho, records: Vec<EpisodeRecord>, timing: Option<Timing>) -> Self {
        let accs: Vec<f64> = records.iter().filter_map(|r| r.accuracy).collect();
        let n = accs.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            accs.iter().sum::<f64>() / n as f64
        };
        let sd = if n < 2 {
            0.0
        } else {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            episodes: records.len(),
            completed: n,
            failed: records.len() - n,
            mean_accuracy: mean,
            std_accuracy: sd,
            ci95: if n == 0 {
                f64::NAN
            } else {
                1.96 * sd / (n as f64).sqrt()
            },
            config,
            records,
            timing,
        }
    }

    pub fn without_timing(&self) -> Self {
        Self {
            timing: None,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per episode.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            episode: usize,
            accuracy: Option<f64>,
            iterations: usize,
            stop: Option<StopReason>,
            selected: usize,
            pseudo_accuracy: Option<f64>,
            initial_unlabeled_value: Option<f64>,
            final_unlabeled_value: Option<f64>,
            error: Option<&'a str>,
        }
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(Row {
                episode: r.episode,
                accuracy: r.accuracy,
                iterations: r.iterations,
                stop: r.stop,
                selected: r.selected,
                pseudo_accuracy: r.pseudo_accuracy,
                initial_unlabeled_value: r.initial_unlabeled_value,
                final_unlabeled_value: r.final_unlabeled_value,
                error: r.error.as_deref(),
            })?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Evaluates one episode; failures become records instead of errors.
pub fn evaluate_episode(
    set: &EmbeddingSet,
    spec: &TaskSpec,
    cfg: &LoopConfig,
    seed: u64,
    index: usize,
) -> EpisodeRecord {
    let mut rng = episode_rng(seed, index);
    let outcome =
        sample_episode(&mut rng, set, spec).and_then(|ep| run_episode(&ep, set, cfg, &mut rng));
    match outcome {
        Ok(res) => {
            let first = res.iterations.first();
            let last = res.iterations.last();
            EpisodeRecord {
                episode: index,
                accuracy: Some(res.query_accuracy),
                iterations: res.iterations.len(),
                stop: Some(res.stop),
                selected: res.state.selected.len(),
                pseudo_accuracy: last.and_then(|r| r.pseudo_accuracy),
                initial_unlabeled_value: first.map(|r| r.initial_unlabeled_value),
                final_unlabeled_value: last.map(|r| r.final_unlabeled_value),
                error: None,
            }
        }
        Err(e) => {
            let e = Error::Episode {
                episode: index,
                source: Box::new(e),
            };
            log::warn!("{e}");
            EpisodeRecord {
                episode: index,
                accuracy: None,
                iterations: 0,
                stop: None,
                selected: 0,
                pseudo_accuracy: None,
                initial_unlabeled_value: None,
                final_unlabeled_value: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Runs `opts.episodes` independent episodes in a worker pool.
///
/// Fails only on invalid configuration or when more than 1% of episodes fail.
pub fn run_benchmark(
    set: &EmbeddingSet,
    source: &str,
    spec: &TaskSpec,
    cfg: &LoopConfig,
    opts: &BenchmarkOptions,
) -> Result<RunReport> {
    spec.validate()?;
    cfg.validate()?;
    if opts.episodes == 0 {
        return Err(Error::InvalidParameter("episodes must be >= 1".into()));
    }
    let normalized;
    let set = if opts.normalize {
        normalized = set.l2_normalize()?;
        &normalized
    } else {
        set
    };

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = opts.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?;

    let start = Instant::now();
    let timed: Vec<(EpisodeRecord, f64)> = pool.install(|| {
        (0..opts.episodes)
            .into_par_iter()
            .map(|i| {
                let t = Instant::now();
                let rec = evaluate_episode(set, spec, cfg, opts.seed, i);
                (rec, t.elapsed().as_secs_f64())
            })
            .collect()
    });
    let wall = start.elapsed().as_secs_f64();

    let (records, secs): (Vec<EpisodeRecord>, Vec<f64>) = timed.into_iter().unzip();
    let failed: Vec<&EpisodeRecord> = records.iter().filter(|r| r.accuracy.is_none()).collect();
    if failed.len() * 100 > opts.episodes {
        return Err(Error::TooManyFailures {
            failed: failed.len(),
            total: opts.episodes,
            first: failed[0].error.clone().unwrap_or_default(),
        });
    }
    let timing = Timing {
        threads: pool.current_num_threads(),
        wall_seconds: wall,
        mean_episode_seconds: secs.iter().sum::<f64>() / secs.len() as f64,
        max_episode_seconds: secs.iter().cloned().fold(0.0, f64::max),
    };
    let config = ConfigEcho {
        source: source.to_string(),
        task: *spec,
        loop_config: cfg.clone(),
        episodes: opts.episodes,
        seed: opts.seed,
        normalize: opts.normalize,
    };
    Ok(RunReport::summarize(config, records, Some(timing)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::TrainConfig;
    use std::collections::HashSet;

    fn small_set(classes: usize, per_class: usize) -> EmbeddingSet {
        let spec = SynthSpec {
            n_classes: classes,
            dim: 4,
            separation: 3.0,
            spread: 0.3,
            per_class,
        };
        synth_gaussian_tasks(&mut ChaCha8Rng::seed_from_u64(1), &spec).unwrap()
    }

    fn quick_loop() -> LoopConfig {
        LoopConfig {
            max_iterations: 2,
            train: TrainConfig {
                lr: 0.05,
                iters: 20,
                ..TrainConfig::default()
            },
            ..LoopConfig::default()
        }
    }

    #[test]
    fn synth_spec_parses_and_prints() {
        let s: SynthSpec = "20, 128, 1.0, 0.28, 100".parse().unwrap();
        assert_eq!((s.n_classes, s.dim, s.per_class), (20, 128, 100));
        assert_eq!(s.to_string().parse::<SynthSpec>().unwrap(), s);
        assert!("1,2,3".parse::<SynthSpec>().is_err());
        assert!("a,2,3,4,5".parse::<SynthSpec>().is_err());
    }

    #[test]
    fn mode_round_trip() {
        for m in [Mode::Transductive, Mode::Semi] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("inductive".parse::<Mode>().is_err());
    }

    #[test]
    fn synth_rows_are_grouped_with_class_means_at_radius() {
        let spec = SynthSpec {
            n_classes: 3,
            dim: 5,
            separation: 2.0,
            spread: 1e-9,
            per_class: 4,
        };
        let set = synth_gaussian_tasks(&mut ChaCha8Rng::seed_from_u64(2), &spec).unwrap();
        assert_eq!(set.labels(), &[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        for row in set.features().row_iter() {
            assert!((row.norm() - 2.0).abs() < 1e-6);
        }
        assert_eq!(set.class_names().unwrap()[2], "class2");
    }

    #[test]
    fn transductive_episode_shape() {
        let set = small_set(8, 20);
        let spec = TaskSpec::default();
        let ep = sample_episode(&mut ChaCha8Rng::seed_from_u64(3), &set, &spec).unwrap();
        assert_eq!(ep.n_way(), 5);
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        assert_eq!(ep.unlabeled, ep.query);
        let support: HashSet<_> = ep.support.iter().collect();
        assert!(ep.query.iter().all(|q| !support.contains(q)));
        for (rows, labels) in [
            (&ep.support, &ep.support_labels),
            (&ep.query, &ep.query_labels),
        ] {
            for (&r, &y) in rows.iter().zip(labels.iter()) {
                assert_eq!(set.labels()[r], ep.classes[y]);
            }
        }
    }

    #[test]
    fn semi_episode_parts_are_disjoint() {
        let set = small_set(6, 30);
        let spec = TaskSpec {
            n_way: 3,
            k_shot: 2,
            q_per_class: 5,
            u_per_class: 7,
            mode: Mode::Semi,
        };
        let ep = sample_episode(&mut ChaCha8Rng::seed_from_u64(4), &set, &spec).unwrap();
        assert_eq!(
            (ep.support.len(), ep.query.len(), ep.unlabeled.len()),
            (6, 15, 21)
        );
        let all: HashSet<_> = ep
            .support
            .iter()
            .chain(&ep.query)
            .chain(&ep.unlabeled)
            .collect();
        assert_eq!(all.len(), 42);
        for (&r, &y) in ep.unlabeled.iter().zip(&ep.unlabeled_labels) {
            assert_eq!(set.labels()[r], ep.classes[y]);
        }
    }

    #[test]
    fn small_classes_are_skipped_or_reported() {
        // classes 0..3 have 20 rows, 3..5 have only 3
        let big = small_set(3, 20);
        let mut features = DMatrix::zeros(66, 4);
        features.rows_mut(0, 60).copy_from(big.features());
        for i in 60..66 {
            features[(i, 0)] = i as f64;
        }
        let mut labels = big.labels().to_vec();
        labels.extend([3, 3, 3, 4, 4, 4]);
        let set = EmbeddingSet::new(features, labels, None).unwrap();
        let spec = TaskSpec {
            n_way: 3,
            ..TaskSpec::default()
        };
        for seed in 0..20 {
            let ep = sample_episode(&mut ChaCha8Rng::seed_from_u64(seed), &set, &spec).unwrap();
            assert!(ep.classes.iter().all(|&c| c < 3));
        }
        let err = sample_episode(
            &mut ChaCha8Rng::seed_from_u64(0),
            &set,
            &TaskSpec::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientClasses { eligible: 3, .. }
        ));
    }

    #[test]
    fn class_frequencies_are_uniform() {
        let set = small_set(10, 20);
        let spec = TaskSpec {
            n_way: 2,
            q_per_class: 3,
            ..TaskSpec::default()
        };
        let mut counts = [0usize; 10];
        let draws = 5000;
        for i in 0..draws {
            let ep = sample_episode(&mut episode_rng(5, i), &set, &spec).unwrap();
            for &c in &ep.classes {
                counts[c] += 1;
            }
        }
        // each class expected 1000 times; 5 sigma is about 150
        for &c in &counts {
            assert!((c as i64 - 1000).abs() < 150, "{counts:?}");
        }
    }

    #[test]
    fn episode_streams_differ_and_repeat() {
        use rand::RngCore;
        assert_eq!(episode_rng(1, 7).next_u64(), episode_rng(1, 7).next_u64());
        assert_ne!(episode_rng(1, 7).next_u64(), episode_rng(1, 8).next_u64());
        assert_ne!(episode_rng(1, 7).next_u64(), episode_rng(2, 7).next_u64());
    }

    #[test]
    fn report_summary_matches_records() {
        let set = small_set(6, 25);
        let opts = BenchmarkOptions {
            episodes: 8,
            seed: 3,
            threads: Some(2),
            normalize: true,
        };
        let report =
            run_benchmark(&set, "unit", &TaskSpec::default(), &quick_loop(), &opts).unwrap();
        assert_eq!(
            (report.episodes, report.completed, report.failed),
            (8, 8, 0)
        );
        let accs: Vec<f64> = report.records.iter().map(|r| r.accuracy.unwrap()).collect();
        let mean = accs.iter().sum::<f64>() / 8.0;
        assert!((report.mean_accuracy - mean).abs() < 1e-15);
        let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 7.0).sqrt();
        assert!((report.ci95 - 1.96 * sd / 8f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            report.records.iter().map(|r| r.episode).collect::<Vec<_>>(),
            (0..8).collect::<Vec<_>>()
        );
        assert_eq!(report.timing.as_ref().unwrap().threads, 2);

        let json: serde_json::Value =
            serde_json::from_str(&report.without_timing().to_json().unwrap()).unwrap();
        assert!(json.get("timing").is_none());
        assert_eq!(json["config"]["loop"]["selector"], "ida");

        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.starts_with("episode,accuracy,"));
    }

    #[test]
    fn benchmark_rejects_bad_options() {
        let set = small_set(6, 25);
        let opts = BenchmarkOptions {
            episodes: 0,
            ..BenchmarkOptions::default()
        };
        assert!(run_benchmark(&set, "unit", &TaskSpec::default(), &quick_loop(), &opts).is_err());
        let opts = BenchmarkOptions {
            episodes: 2,
            ..BenchmarkOptions::default()
        };
        let spec = TaskSpec {
            n_way: 1,
            ..TaskSpec::default()
        };
        assert!(run_benchmark(&set, "unit", &spec, &quick_loop(), &opts).is_err());
    }

    #[test]
    fn impossible_tasks_fail_the_run() {
        let set = small_set(3, 25);
        let opts = BenchmarkOptions {
            episodes: 4,
            ..BenchmarkOptions::default()
        };
        let err =
            run_benchmark(&set, "unit", &TaskSpec::default(), &quick_loop(), &opts).unwrap_err();
        assert!(matches!(
            err,
            Error::TooManyFailures {
                failed: 4,
                total: 4,
                ..
            }
        ));
    }
}
