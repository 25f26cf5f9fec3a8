//! Datasets and the construction of class- and domain-incremental streams.

mod dataset;
mod transform;

use std::collections::BTreeSet;

pub use dataset::{hex_sha256, make_synthetic, Dataset, DATASET_MAGIC, DATASET_VERSION};
pub use transform::{apply_nonstationarity, domain_schedule, Transform};

use crate::batch::Batch;
use crate::error::{OclError, Result};
use crate::linalg::DenseMatrix;
use crate::rng::Rng;

pub const DEFAULT_BATCH_SIZE: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub enum TaskKind {
    /// Each task owns a disjoint set of classes.
    ClassIncremental { class_subsets: Vec<Vec<usize>> },
    /// Every task sees all classes; task `t` gets `transform` at `strengths[t]`.
    /// `width` is the side of the square images when the transform needs it.
    DomainIncremental {
        transform: Transform,
        strengths: Vec<f64>,
        width: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub batch_size: usize,
}

impl TaskSpec {
    /// Domain-incremental spec over the standard strength schedule.
    pub fn domain_incremental(transform: Transform, width: Option<usize>) -> Self {
        Self {
            kind: TaskKind::DomainIncremental {
                transform,
                strengths: transform.schedule(),
                width,
            },
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn num_tasks(&self) -> usize {
        match &self.kind {
            TaskKind::ClassIncremental { class_subsets } => class_subsets.len(),
            TaskKind::DomainIncremental { strengths, .. } => strengths.len(),
        }
    }

    pub fn is_domain_incremental(&self) -> bool {
        matches!(self.kind, TaskKind::DomainIncremental { .. })
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let mismatch = |m: String| Err(OclError::SpecMismatch(m));
        if self.batch_size == 0 {
            return mismatch("batch size must be positive".into());
        }
        if self.num_tasks() == 0 {
            return mismatch("spec has no tasks".into());
        }
        match &self.kind {
            TaskKind::ClassIncremental { class_subsets } => {
                let mut seen = BTreeSet::new();
                for subset in class_subsets {
                    if subset.is_empty() {
                        return mismatch("empty class subset".into());
                    }
                    for &c in subset {
                        if c >= ds.num_classes() {
                            return mismatch(format!(
                                "class {c} outside [0, {})",
                                ds.num_classes()
                            ));
                        }
                        if !seen.insert(c) {
                            return mismatch(format!("class {c} appears in two tasks"));
                        }
                    }
                }
            }
            TaskKind::DomainIncremental {
                transform,
                strengths,
                width,
            } => {
                if strengths.windows(2).any(|p| p[0] > p[1]) {
                    return mismatch("strengths must be nondecreasing".into());
                }
                if strengths.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                    return mismatch("strengths must be finite and >= 0".into());
                }
                if transform.needs_geometry() {
                    let w =
                        width.ok_or_else(|| OclError::GeometryUnknown(transform.name().into()))?;
                    if w * w != ds.dim() {
                        return Err(OclError::GeometryUnknown(format!(
                            "{w}x{w} images vs {} features",
                            ds.dim()
                        )));
                    }
                }
                if ds.len() < strengths.len() {
                    return mismatch(format!(
                        "{} examples cannot fill {} tasks",
                        ds.len(),
                        strengths.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Shuffles the classes and cuts them into `num_tasks` disjoint groups.
pub fn split_class_incremental(
    ds: &Dataset,
    num_tasks: usize,
    classes_per_task: usize,
    rng: &mut Rng,
) -> Result<TaskSpec> {
    if num_tasks == 0 || classes_per_task == 0 {
        return Err(OclError::InvalidConfig(
            "tasks and classes per task must be positive".into(),
        ));
    }
    if num_tasks.saturating_mul(classes_per_task) > ds.num_classes() {
        return Err(OclError::TooManyTasks {
            requested: num_tasks,
            per_task: classes_per_task,
            available: ds.num_classes(),
        });
    }
    let order = rng.permutation(ds.num_classes());
    let class_subsets = order
        .chunks(classes_per_task)
        .take(num_tasks)
        .map(<[usize]>::to_vec)
        .collect();
    Ok(TaskSpec {
        kind: TaskKind::ClassIncremental { class_subsets },
        batch_size: DEFAULT_BATCH_SIZE,
    })
}

/// Example indices per task. Class-incremental tasks take every example of
/// their classes in dataset order; domain-incremental tasks take disjoint,
/// near-equal random slices of the whole dataset.
pub fn partition_tasks(ds: &Dataset, spec: &TaskSpec, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    spec.validate(ds)?;
    let parts: Vec<Vec<usize>> = match &spec.kind {
        TaskKind::ClassIncremental { class_subsets } => class_subsets
            .iter()
            .map(|s| {
                (0..ds.len())
                    .filter(|&i| s.contains(&ds.labels()[i]))
                    .collect()
            })
            .collect(),
        TaskKind::DomainIncremental { strengths, .. } => {
            let order = rng.permutation(ds.len());
            let t = strengths.len();
            (0..t)
                .map(|k| order[k * ds.len() / t..(k + 1) * ds.len() / t].to_vec())
                .collect()
        }
    };
    if let Some(t) = parts.iter().position(Vec::is_empty) {
        return Err(OclError::SpecMismatch(format!("task {t} has no examples")));
    }
    Ok(parts)
}

/// One task's held-out split and training examples, with any domain shift
/// already applied.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Batch<f64>,
    pub test: Batch<f64>,
    pub classes: BTreeSet<usize>,
}

/// Splits every task into train and test parts. `test_fraction` of each
/// task (rounded, at least one example when positive) is held out.
pub fn build_tasks(
    ds: &Dataset,
    spec: &TaskSpec,
    test_fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<TaskData>> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(OclError::InvalidConfig(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let parts = partition_tasks(ds, spec, rng)?;
    let mut tasks = Vec::with_capacity(parts.len());
    for (t, mut idx) in parts.into_iter().enumerate() {
        rng.shuffle(&mut idx);
        let n = idx.len();
        let mut n_test = (n as f64 * test_fraction).round() as usize;
        if test_fraction > 0.0 {
            n_test = n_test.max(1);
        }
        if n_test >= n {
            return Err(OclError::SpecMismatch(format!(
                "task {t} has too few examples ({n}) to hold out a test split"
            )));
        }
        let mut test = ds.select(&idx[..n_test]);
        let mut train = ds.select(&idx[n_test..]);
        let classes = match &spec.kind {
            TaskKind::ClassIncremental { class_subsets } => {
                class_subsets[t].iter().copied().collect()
            }
            TaskKind::DomainIncremental {
                transform,
                strengths,
                width,
            } => {
                test.x = apply_nonstationarity(&test.x, *transform, strengths[t], *width, rng)?;
                train.x = apply_nonstationarity(&train.x, *transform, strengths[t], *width, rng)?;
                (0..ds.num_classes()).collect()
            }
        };
        tasks.push(TaskData {
            train,
            test,
            classes,
        });
    }
    Ok(tasks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub x: DenseMatrix<f64>,
    pub y: Vec<usize>,
    pub task_index: usize,
    pub is_task_boundary: bool,
}

/// Shuffles each task once and cuts it into batches; the last batch of a
/// task may be short.
pub fn batches_from_tasks(
    tasks: &[TaskData],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<StreamBatch>> {
    if batch_size == 0 {
        return Err(OclError::SpecMismatch("batch size must be positive".into()));
    }
    let mut out = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let order = rng.permutation(task.train.len());
        for (k, chunk) in order.chunks(batch_size).enumerate() {
            let b = task.train.select(chunk);
            out.push(StreamBatch {
                x: b.x,
                y: b.y,
                task_index: t,
                is_task_boundary: k == 0,
            });
        }
    }
    Ok(out)
}

/// The full training stream over `ds`, with no held-out split.
pub fn stream_batches(ds: &Dataset, spec: &TaskSpec, rng: &mut Rng) -> Result<Vec<StreamBatch>> {
    let tasks = build_tasks(ds, spec, 0.0, rng)?;
    batches_from_tasks(&tasks, spec.batch_size, rng)
}
