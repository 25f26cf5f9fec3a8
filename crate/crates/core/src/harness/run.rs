//! Per-seed training loops, aggregation across seeds and sweeps.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info};
use rayon::prelude::*;

use super::config::{DataSource, ExperimentConfig, Method, OptimizerKind, Scenario, Trick};
use super::metrics::{
    average_accuracy, average_forgetting, evaluate_task_accuracies, mean_std, AccuracyMatrix,
    Classifier,
};
use crate::batch::Batch;
use crate::error::{OclError, Result};
use crate::network::{cross_entropy, flatten, unflatten, GradsAndCaches, Network};
use crate::optim::{sgd_step, FisherKind, Kfac, KfacConfig, Optimizer, SgdConfig};
use crate::replay::{
    agem_project, gss_insert, mir_retrieve, ReplayBuffer, StrategyConfig, StrategyKind,
};
use crate::rng::Rng;
use crate::stream::{
    batches_from_tasks, build_tasks, make_synthetic, split_class_incremental, Dataset, TaskData,
    TaskKind, TaskSpec,
};
use crate::tricks::{
    build_prototypes, labels_trick_loss, present_classes, review_finetune, separated_softmax_loss,
    ClassPartition, ReviewConfig,
};

/// Sub-stream ids under each seed. The data stream depends only on the seed
/// and the data settings, so every cell of a sweep sees the same stream.
const DATA_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub final_accuracy: f64,
    /// `None` for single-task runs.
    pub final_forgetting: Option<f64>,
    /// Stream examples fed to the learner.
    pub examples_seen: usize,
    /// Training examples in the stream.
    pub stream_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
}

impl RunResult {
    pub fn from_seeds(config: ExperimentConfig, seeds: Vec<SeedResult>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(OclError::EmptyResults);
        }
        let acc: Vec<f64> = seeds.iter().map(|s| s.final_accuracy).collect();
        let (accuracy_mean, accuracy_std) = mean_std(&acc);
        let forg: Option<Vec<f64>> = seeds.iter().map(|s| s.final_forgetting).collect();
        let (forgetting_mean, forgetting_std) = match forg {
            Some(f) => {
                let (m, s) = mean_std(&f);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        Ok(Self {
            config,
            seeds,
            accuracy_mean,
            accuracy_std,
            forgetting_mean,
            forgetting_std,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.seeds[0].matrix.num_tasks()
    }
}

/// The dataset used by `seed`. Synthetic data is regenerated per seed.
pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic {
            classes,
            per_class,
            dim,
            separation,
        } => make_synthetic(
            *classes,
            *per_class,
            *dim,
            *separation,
            &mut Rng::with_stream(seed, DATA_STREAM),
        ),
        DataSource::File(path) => Dataset::load(path),
    }
}

pub fn build_spec(cfg: &ExperimentConfig, ds: &Dataset, rng: &mut Rng) -> Result<TaskSpec> {
    let mut spec = match cfg.scenario {
        Scenario::Class => split_class_incremental(ds, cfg.num_tasks, cfg.classes_per_task, rng)?,
        Scenario::Domain => {
            let mut spec = TaskSpec::domain_incremental(cfg.transform, cfg.image_width);
            if let TaskKind::DomainIncremental { strengths, .. } = &mut spec.kind {
                if cfg.num_tasks == 0 || cfg.num_tasks > strengths.len() {
                    return Err(OclError::InvalidConfig(format!(
                        "domain streams have between 1 and {} tasks",
                        strengths.len()
                    )));
                }
                strengths.truncate(cfg.num_tasks);
            }
            spec
        }
    };
    spec.batch_size = cfg.batch_size;
    Ok(spec)
}

/// The held-out task splits and the stream for one seed.
pub fn build_seed_tasks(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Vec<TaskData>)> {
    let ds = load_data(cfg, seed)?;
    let mut rng = Rng::with_stream(seed, SPLIT_STREAM);
    let spec = build_spec(cfg, &ds, &mut rng)?;
    let tasks = build_tasks(&ds, &spec, cfg.test_fraction, &mut rng)?;
    Ok((ds, tasks))
}

struct Learner<'a> {
    cfg: &'a ExperimentConfig,
    net: Network<f64>,
    opt: Optimizer<f64>,
    buffer: Option<ReplayBuffer<f64>>,
    strategy: StrategyConfig,
    rng: Rng,
    old_classes: BTreeSet<usize>,
    current_classes: BTreeSet<usize>,
    examples_seen: usize,
}

impl Learner<'_> {
    fn grads(&self, batch: &Batch<f64>) -> Result<GradsAndCaches<f64>> {
        let fwd = self.net.forward(&batch.x)?;
        let (_, dlogits) = match self.cfg.trick {
            Trick::Lb => labels_trick_loss(&fwd.logits, &batch.y, &present_classes(&batch.y))?,
            Trick::Ss => {
                let old = self
                    .old_classes
                    .difference(&self.current_classes)
                    .copied()
                    .collect();
                let part = ClassPartition::new(old, self.current_classes.clone())?;
                separated_softmax_loss(&fwd.logits, &batch.y, &part)?
            }
            _ => cross_entropy(&fwd.logits, &batch.y)?,
        };
        self.net.backward(fwd.caches, &dlogits)
    }

    fn replay_sample(&mut self) -> Result<Option<Batch<f64>>> {
        match &self.buffer {
            Some(buf) if !buf.is_empty() => {
                let k = self.strategy.replay_batch.min(buf.len());
                Ok(Some(buf.sample_uniform(k, &mut self.rng)?))
            }
            _ => Ok(None),
        }
    }

    fn with_replay(stream: &Batch<f64>, replay: Option<Batch<f64>>) -> Result<Batch<f64>> {
        match replay {
            Some(r) => stream.concat(&r),
            None => Ok(stream.clone()),
        }
    }

    fn train_batch(&mut self, stream: &Batch<f64>) -> Result<()> {
        self.examples_seen += stream.len();
        match self.cfg.method {
            Method::Finetune => {
                let (g, c) = self.grads(stream)?;
                self.opt.step(&mut self.net, &g, c)?;
            }
            Method::Er | Method::Gss => {
                let replay = self.replay_sample()?;
                let combined = Self::with_replay(stream, replay)?;
                let (g, c) = self.grads(&combined)?;
                self.opt.step(&mut self.net, &g, c)?;
            }
            Method::Agem => {
                let (g, c) = self.grads(stream)?;
                let g = match self.replay_sample()? {
                    Some(reference) => {
                        let (gr, _) = self.grads(&reference)?;
                        unflatten(&agem_project(&flatten(&g), &flatten(&gr))?, &g)?
                    }
                    None => g,
                };
                self.opt.step(&mut self.net, &g, c)?;
            }
            Method::Mir => {
                let (g, c) = self.grads(stream)?;
                match self.buffer.as_ref().filter(|b| !b.is_empty()) {
                    Some(buf) => {
                        let lr = self.opt.learning_rate();
                        let (_, replay) =
                            mir_retrieve(buf, &self.net, &g, &self.strategy, lr, &mut self.rng)?;
                        let (g, c) = self.grads(&stream.concat(&replay)?)?;
                        self.opt.step(&mut self.net, &g, c)?;
                    }
                    None => self.opt.step(&mut self.net, &g, c)?,
                }
            }
            Method::Offline => unreachable!("offline runs its own loop"),
        }
        if let Some(buf) = self.buffer.as_mut() {
            for i in 0..stream.len() {
                let (x, y) = stream.example(i);
                if self.cfg.method == Method::Gss {
                    gss_insert(buf, x, y, &self.net, &self.strategy, &mut self.rng)?;
                } else {
                    buf.reservoir_insert(x, y, &mut self.rng);
                }
            }
        }
        Ok(())
    }

    fn review(&mut self) -> Result<()> {
        let Some(buf) = &self.buffer else {
            return Ok(());
        };
        let cfg = ReviewConfig {
            steps: self.cfg.review_steps,
            learning_rate: self.cfg.review_rate(),
            quota_cap: self.cfg.review_quota,
            batch_size: self.cfg.batch_size,
        };
        review_finetune(&mut self.net, buf, &cfg, &mut self.rng)
    }

    fn evaluate(&self, tests: &[Batch<f64>], upto: usize) -> Result<Vec<f64>> {
        if self.cfg.trick == Trick::Ncm {
            let buf = self.buffer.as_ref().ok_or(OclError::EmptyBuffer)?;
            let table = build_prototypes(buf, &self.net)?;
            evaluate_task_accuracies(&Classifier::NearestMean(&self.net, &table), tests, upto)
        } else {
            evaluate_task_accuracies(&Classifier::Argmax(&self.net), tests, upto)
        }
    }
}

fn make_optimizer(cfg: &ExperimentConfig, net: &Network<f64>) -> Result<Optimizer<f64>> {
    Ok(match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(SgdConfig::new(cfg.learning_rate)?),
        OptimizerKind::Kfac => Optimizer::Kfac(Kfac::new(
            KfacConfig {
                learning_rate: cfg.learning_rate,
                damping: cfg.damping,
                ema_decay: cfg.ema_decay,
                fisher: FisherKind::Empirical,
            },
            net,
        )?),
    })
}

fn network_dims(cfg: &ExperimentConfig, ds: &Dataset) -> Vec<usize> {
    let mut dims = vec![ds.dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(ds.num_classes());
    dims
}

fn finish(
    seed: u64,
    matrix: AccuracyMatrix,
    examples_seen: usize,
    stream_size: usize,
) -> Result<SeedResult> {
    let t = matrix.num_tasks();
    let final_accuracy = average_accuracy(&matrix, t)?;
    let final_forgetting = if t >= 2 {
        Some(average_forgetting(&matrix, t)?)
    } else {
        None
    };
    Ok(SeedResult {
        seed,
        matrix,
        final_accuracy,
        final_forgetting,
        examples_seen,
        stream_size,
    })
}

/// Offline baseline: SGD over the shuffled union of all training data, then a
/// single evaluation that fills every row of the matrix.
fn run_offline(
    cfg: &ExperimentConfig,
    seed: u64,
    ds: &Dataset,
    tasks: &[TaskData],
) -> Result<SeedResult> {
    let mut net = Network::mlp(
        &network_dims(cfg, ds),
        &mut Rng::with_stream(seed, INIT_STREAM),
    )?;
    let mut rng = Rng::with_stream(seed, TRAIN_STREAM);
    let mut union = tasks[0].train.clone();
    for t in &tasks[1..] {
        union = union.concat(&t.train)?;
    }
    let sgd = SgdConfig::new(cfg.learning_rate)?;
    for _ in 0..cfg.offline_epochs {
        let order = rng.permutation(union.len());
        for chunk in order.chunks(cfg.offline_batch) {
            let b = union.select(chunk);
            let (g, _) = {
                let fwd = net.forward(&b.x)?;
                let (_, d) = cross_entropy(&fwd.logits, &b.y)?;
                net.backward(fwd.caches, &d)?
            };
            sgd_step(&mut net, &g, &sgd)?;
        }
    }
    let tests: Vec<Batch<f64>> = tasks.iter().map(|t| t.test.clone()).collect();
    let last = evaluate_task_accuracies(&Classifier::Argmax(&net), &tests, tasks.len())?;
    let mut matrix = AccuracyMatrix::new();
    for i in 0..tasks.len() {
        matrix.push_row(last[..=i].to_vec())?;
    }
    finish(seed, matrix, cfg.offline_epochs * union.len(), union.len())
}

/// One complete single-pass run under `seed`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let (ds, tasks) = build_seed_tasks(cfg, seed)?;
    if cfg.method == Method::Offline {
        return run_offline(cfg, seed, &ds, &tasks);
    }
    let net = Network::mlp(
        &network_dims(cfg, &ds),
        &mut Rng::with_stream(seed, INIT_STREAM),
    )?;
    let mut rng = Rng::with_stream(seed, TRAIN_STREAM);
    let batches = batches_from_tasks(&tasks, cfg.batch_size, &mut rng)?;
    let kind = match cfg.method {
        Method::Agem => StrategyKind::Agem,
        Method::Mir => StrategyKind::Mir,
        Method::Gss => StrategyKind::Gss,
        _ => StrategyKind::Er,
    };
    let strategy = StrategyConfig {
        kind,
        mir_candidate_count: cfg.mir_candidates,
        gss_ref_count: cfg.gss_refs,
        replay_batch: cfg.replay_batch,
    };
    strategy.validate()?;
    let buffer = if cfg.method.uses_buffer() {
        Some(ReplayBuffer::new(cfg.buffer_capacity)?)
    } else {
        None
    };
    let opt = make_optimizer(cfg, &net)?;
    let mut learner = Learner {
        cfg,
        net,
        opt,
        buffer,
        strategy,
        rng,
        old_classes: BTreeSet::new(),
        current_classes: BTreeSet::new(),
        examples_seen: 0,
    };
    let tests: Vec<Batch<f64>> = tasks.iter().map(|t| t.test.clone()).collect();
    let last_task = tasks.len() - 1;
    let mut matrix = AccuracyMatrix::new();
    let mut end_task = |learner: &mut Learner<'_>, t: usize| -> Result<()> {
        learner
            .old_classes
            .extend(learner.current_classes.iter().copied());
        if cfg.trick == Trick::Rv && (cfg.review_every_task || t == last_task) {
            learner.review()?;
        }
        let row = learner.evaluate(&tests, t + 1)?;
        debug!("seed {seed} task {t}: {row:?}");
        matrix.push_row(row)
    };
    let mut current: Option<usize> = None;
    for b in batches {
        if b.is_task_boundary {
            if let Some(t) = current {
                end_task(&mut learner, t)?;
            }
            current = Some(b.task_index);
            learner.current_classes = tasks[b.task_index].classes.clone();
        }
        learner.train_batch(&Batch { x: b.x, y: b.y })?;
    }
    end_task(&mut learner, current.ok_or(OclError::EmptyResults)?)?;
    if let (Some(dir), Some(buf)) = (&cfg.buffer_dump_dir, &learner.buffer) {
        std::fs::create_dir_all(dir).map_err(|e| OclError::io(dir, e))?;
        buf.dump(
            &dir.join(format!("buffer_seed_{seed}.ocld")),
            ds.num_classes(),
        )?;
    }
    if !learner.net.is_finite() {
        return Err(OclError::NonFinite(format!(
            "seed {seed} ended with non-finite weights"
        )));
    }
    let stream_size = tasks.iter().map(|t| t.train.len()).sum();
    finish(seed, matrix, learner.examples_seen, stream_size)
}

/// Runs every seed and aggregates. Any failing seed fails the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    info!(
        "running {} seeds of {} + {} (trick {})",
        cfg.seeds.len(),
        cfg.method,
        cfg.optimizer,
        cfg.trick
    );
    let seeds: Vec<SeedResult> = if cfg.parallel {
        cfg.seeds
            .par_iter()
            .map(|&s| run_seed(cfg, s))
            .collect::<Result<_>>()?
    } else {
        cfg.seeds
            .iter()
            .map(|&s| run_seed(cfg, s))
            .collect::<Result<_>>()?
    };
    RunResult::from_seeds(cfg.clone(), seeds)
}

/// One point of a sweep: the axis assignments and the resulting config.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub axes: Vec<(String, String)>,
    pub config: ExperimentConfig,
}

impl SweepCell {
    /// Directory-safe name such as `damping=0.001,method=er`.
    pub fn name(&self) -> String {
        if self.axes.is_empty() {
            return "base".into();
        }
        self.axes
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "=,._-".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }
}

/// Cartesian product of `axes` applied on top of `base`, first axis slowest.
pub fn expand_axes(
    base: &ExperimentConfig,
    axes: &[(String, Vec<String>)],
) -> Result<Vec<SweepCell>> {
    let mut cells = vec![SweepCell {
        axes: Vec::new(),
        config: base.clone(),
    }];
    for (key, values) in axes {
        if values.is_empty() {
            return Err(OclError::InvalidConfig(format!(
                "axis `{key}` has no values"
            )));
        }
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.config.set(key, v)?;
                c.axes.push((key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    Ok(cells)
}

/// Runs each cell in order. Two cells with the same name or the same
/// configuration are rejected before anything runs.
pub fn sweep(cells: &[SweepCell]) -> Result<Vec<(SweepCell, RunResult)>> {
    let mut names = BTreeMap::new();
    for (i, cell) in cells.iter().enumerate() {
        if names.insert(cell.name(), i).is_some() {
            return Err(OclError::DuplicateCell(cell.name()));
        }
        if cells[..i].iter().any(|c| c.config == cell.config) {
            return Err(OclError::DuplicateCell(cell.name()));
        }
    }
    cells
        .iter()
        .map(|c| Ok((c.clone(), run_experiment(&c.config)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            method,
            seeds: vec![0, 1],
            hidden: vec![8],
            data: DataSource::Synthetic {
                classes: 6,
                per_class: 30,
                dim: 6,
                separation: 6.0,
            },
            num_tasks: 3,
            classes_per_task: 2,
            buffer_capacity: 20,
            offline_epochs: 5,
            ..ExperimentConfig::default()
        };
        if method == Method::Gss {
            cfg.allow_gss_class_incremental = true;
        }
        cfg
    }

    #[test]
    fn every_method_runs_single_pass() {
        for method in [
            Method::Finetune,
            Method::Er,
            Method::Agem,
            Method::Mir,
            Method::Gss,
        ] {
            let r = run_experiment(&small(method)).unwrap();
            assert_eq!(r.num_tasks(), 3);
            for s in &r.seeds {
                assert_eq!(s.examples_seen, s.stream_size, "{method}");
                assert_eq!(s.stream_size, 3 * 48);
            }
        }
    }

    #[test]
    fn every_trick_runs() {
        for trick in [Trick::Lb, Trick::Ss, Trick::Rv, Trick::Ncm] {
            let mut cfg = small(Method::Er);
            cfg.trick = trick;
            let r = run_experiment(&cfg).unwrap();
            assert!(r.accuracy_mean > 0.0, "{trick}");
        }
    }

    #[test]
    fn domain_incremental_gss() {
        let cfg = ExperimentConfig {
            method: Method::Gss,
            scenario: Scenario::Domain,
            num_tasks: 4,
            seeds: vec![3],
            hidden: vec![],
            data: DataSource::Synthetic {
                classes: 3,
                per_class: 40,
                dim: 4,
                separation: 4.0,
            },
            buffer_capacity: 10,
            ..ExperimentConfig::default()
        };
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.num_tasks(), 4);
    }

    #[test]
    fn same_seed_stream_across_cells() {
        let a = build_seed_tasks(&small(Method::Er), 4).unwrap().1;
        let mut other = small(Method::Agem);
        other.optimizer = OptimizerKind::Sgd;
        other.damping = 1e-3;
        let b = build_seed_tasks(&other, 4).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn reruns_are_identical_and_parallel_matches_serial() {
        let cfg = small(Method::Mir);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        let serial = ExperimentConfig {
            parallel: false,
            ..cfg
        };
        assert_eq!(run_experiment(&serial).unwrap().seeds, a.seeds);
    }

    #[test]
    fn offline_beats_finetune() {
        let fine = run_experiment(&small(Method::Finetune)).unwrap();
        let off = run_experiment(&small(Method::Offline)).unwrap();
        assert!(off.accuracy_mean > fine.accuracy_mean);
        assert_eq!(off.forgetting_mean, Some(0.0));
    }

    #[test]
    fn sweep_cells() {
        let base = small(Method::Er);
        let axes = vec![(
            "damping".to_string(),
            vec!["0.001".into(), "0.1".into(), "1".into()],
        )];
        let cells = expand_axes(&base, &axes).unwrap();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[0].name(), "damping=0.001");
        let dup = vec![cells[0].clone(), cells[0].clone()];
        assert!(matches!(sweep(&dup), Err(OclError::DuplicateCell(_))));
        let single = sweep(&expand_axes(&base, &[]).unwrap()).unwrap();
        assert_eq!(single[0].1, run_experiment(&base).unwrap());
    }

    #[test]
    fn buffer_dump_writes_one_file_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            buffer_dump_dir: Some(dir.path().to_path_buf()),
            ..small(Method::Er)
        };
        run_experiment(&cfg).unwrap();
        for seed in [0, 1] {
            let path = dir.path().join(format!("buffer_seed_{seed}.ocld"));
            assert_eq!(Dataset::load(&path).unwrap().len(), 20);
            assert_eq!(
                std::fs::read_to_string(path.with_extension("ocld.scores"))
                    .unwrap()
                    .lines()
                    .count(),
                20
            );
        }
    }

    #[test]
    fn empty_results_rejected() {
        assert!(matches!(
            RunResult::from_seeds(small(Method::Er), vec![]),
            Err(OclError::EmptyResults)
        ));
    }
}
