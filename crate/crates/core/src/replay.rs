//! Bounded replay memory and the ER, A-GEM, MIR and GSS strategies.

use std::io::Write;
use std::path::Path;

use crate::batch::Batch;
use crate::error::{OclError, Result};
use crate::linalg::DenseMatrix;
use crate::network::{flatten, loss_and_grads, per_sample_cross_entropy, Network};
use crate::optim::{sgd_step, SgdConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::stream::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    Er,
    Agem,
    Mir,
    Gss,
}

impl std::str::FromStr for StrategyKind {
    type Err = OclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "er" => Ok(Self::Er),
            "agem" => Ok(Self::Agem),
            "mir" => Ok(Self::Mir),
            "gss" => Ok(Self::Gss),
            other => Err(OclError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub mir_candidate_count: usize,
    pub gss_ref_count: usize,
    pub replay_batch: usize,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            mir_candidate_count: 50,
            gss_ref_count: 10,
            replay_batch: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mir_candidate_count == 0 || self.gss_ref_count == 0 || self.replay_batch == 0 {
            return Err(OclError::InvalidConfig(
                "replay counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry<T> {
    pub x: Vec<T>,
    pub y: usize,
    /// GSS diversity score recorded at insertion; zero for other strategies.
    pub score: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    entries: Vec<BufferEntry<T>>,
    seen_count: usize,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(OclError::InvalidConfig(
                "buffer capacity must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            seen_count: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn seen_count(&self) -> usize {
        self.seen_count
    }

    pub fn entries(&self) -> &[BufferEntry<T>] {
        &self.entries
    }

    /// Reservoir sampling: after `n ≥ M` offers every offered example is
    /// resident with probability `M / n`.
    pub fn reservoir_insert(&mut self, x: &[T], y: usize, rng: &mut Rng) {
        self.seen_count += 1;
        let entry = BufferEntry {
            x: x.to_vec(),
            y,
            score: T::zero(),
        };
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            let j = rng.below(self.seen_count);
            if j < self.capacity {
                self.entries[j] = entry;
            }
        }
    }

    /// `k` entry indices, without replacement when `k ≤ len`, with replacement otherwise.
    pub fn sample_indices(&self, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return Err(OclError::EmptyBuffer);
        }
        if k <= self.entries.len() {
            Ok(rng.sample_without_replacement(self.entries.len(), k))
        } else {
            Ok((0..k).map(|_| rng.below(self.entries.len())).collect())
        }
    }

    pub fn sample_uniform(&self, k: usize, rng: &mut Rng) -> Result<Batch<T>> {
        let idx = self.sample_indices(k, rng)?;
        Ok(self.gather(&idx))
    }

    /// The listed entries as a batch, in the given order.
    pub fn gather(&self, idx: &[usize]) -> Batch<T> {
        let cols = self.entries.first().map_or(0, |e| e.x.len());
        let mut data = Vec::with_capacity(idx.len() * cols);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.entries[i].x);
            y.push(self.entries[i].y);
        }
        Batch {
            x: DenseMatrix::from_vec(idx.len(), cols, data).expect("uniform entry widths"),
            y,
        }
    }

    pub fn as_batch(&self) -> Batch<T> {
        let all: Vec<usize> = (0..self.entries.len()).collect();
        self.gather(&all)
    }

    /// Debug snapshot: entries in the `OCLD` dataset format at `path`, plus a
    /// `<path>.scores` text sidecar with one GSS score per line.
    pub fn dump(&self, path: &Path, num_classes: usize) -> Result<()> {
        if self.entries.is_empty() {
            return Err(OclError::EmptyBuffer);
        }
        let batch = self.as_batch();
        let ds = Dataset::new(batch.x.cast::<f64>(), batch.y, num_classes)?;
        ds.save(path)?;
        let mut side = path.as_os_str().to_owned();
        side.push(".scores");
        let side = std::path::PathBuf::from(side);
        let mut f = std::fs::File::create(&side).map_err(|e| OclError::io(&side, e))?;
        for e in &self.entries {
            writeln!(f, "{}", e.score.as_f64()).map_err(|err| OclError::io(&side, err))?;
        }
        Ok(())
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// A-GEM projection: keep `g_new` if it does not conflict with `g_ref`,
/// otherwise remove its component along `g_ref`.
pub fn agem_project<T: Scalar>(g_new: &[T], g_ref: &[T]) -> Result<Vec<T>> {
    if g_new.len() != g_ref.len() {
        return Err(OclError::shape(format!(
            "gradients of length {} and {}",
            g_new.len(),
            g_ref.len()
        )));
    }
    let inner = dot(g_new, g_ref);
    if inner >= T::zero() {
        return Ok(g_new.to_vec());
    }
    let ref_sq = dot(g_ref, g_ref);
    if ref_sq.sqrt() < T::lit(1e-12) {
        log::warn!("A-GEM reference gradient has zero norm; skipping projection");
        return Ok(g_new.to_vec());
    }
    let coef = inner / ref_sq;
    Ok(g_new
        .iter()
        .zip(g_ref)
        .map(|(&g, &r)| g - coef * r)
        .collect())
}

/// Loss increase of every candidate under a virtual SGD step of rate `lr`
/// along `step_grads`.
pub fn mir_scores<T: Scalar>(
    net: &Network<T>,
    step_grads: &[DenseMatrix<T>],
    lr: T,
    candidates: &Batch<T>,
) -> Result<Vec<T>> {
    let before = per_sample_cross_entropy(&net.forward(&candidates.x)?.logits, &candidates.y)?;
    let mut scratch = net.clone();
    sgd_step(&mut scratch, step_grads, &SgdConfig { learning_rate: lr })?;
    let after = per_sample_cross_entropy(&scratch.forward(&candidates.x)?.logits, &candidates.y)?;
    Ok(after.into_iter().zip(before).map(|(a, b)| a - b).collect())
}

/// Positions of the `k` largest scores; ties go to the smaller `ids` value.
pub fn top_k_by_score<T: Scalar>(scores: &[T], ids: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    order.truncate(k);
    order
}

/// Maximally interfered retrieval.
///
/// Samples `mir_candidate_count` candidates, scores each by its loss increase
/// under a virtual SGD step, and returns the buffer indices and batch of the
/// `replay_batch` highest-scoring ones.
pub fn mir_retrieve<T: Scalar>(
    buf: &ReplayBuffer<T>,
    net: &Network<T>,
    step_grads: &[DenseMatrix<T>],
    cfg: &StrategyConfig,
    lr: T,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Batch<T>)> {
    if buf.is_empty() {
        return Err(OclError::EmptyBuffer);
    }
    let mut ids = rng.sample_without_replacement(buf.len(), cfg.mir_candidate_count);
    ids.sort_unstable();
    if ids.len() <= cfg.replay_batch {
        let batch = buf.gather(&ids);
        return Ok((ids, batch));
    }
    let candidates = buf.gather(&ids);
    let scores = mir_scores(net, step_grads, lr, &candidates)?;
    let chosen: Vec<usize> = top_k_by_score(&scores, &ids, cfg.replay_batch)
        .into_iter()
        .map(|p| ids[p])
        .collect();
    let batch = buf.gather(&chosen);
    Ok((chosen, batch))
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

/// Maximum cosine similarity against the references; zero with no references.
pub fn gss_score<T: Scalar>(candidate: &[T], references: &[Vec<T>]) -> T {
    references
        .iter()
        .map(|r| cosine(candidate, r))
        .fold(None, |m: Option<T>, c| Some(m.map_or(c, |m| m.max(c))))
        .unwrap_or(T::zero())
}

/// Flattened cross-entropy gradient of a single example.
pub fn sample_gradient<T: Scalar>(net: &Network<T>, x: &[T], y: usize) -> Result<Vec<T>> {
    let xm = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
    let (_, grads, _) = loss_and_grads(net, &xm, &[y])?;
    Ok(flatten(&grads))
}

/// Gradient-based sample selection.
///
/// The candidate's score is its maximum gradient cosine against up to
/// `gss_ref_count` random buffer entries. A non-full buffer always accepts.
/// A full buffer draws one victim uniformly and replaces it only when the
/// candidate's score is lower (more diverse) than the victim's stored score.
pub fn gss_insert<T: Scalar>(
    buf: &mut ReplayBuffer<T>,
    x: &[T],
    y: usize,
    net: &Network<T>,
    cfg: &StrategyConfig,
    rng: &mut Rng,
) -> Result<()> {
    buf.seen_count += 1;
    let score = if buf.is_empty() {
        T::zero()
    } else {
        let candidate = sample_gradient(net, x, y)?;
        let refs = rng.sample_without_replacement(buf.len(), cfg.gss_ref_count);
        let ref_grads = refs
            .iter()
            .map(|&i| sample_gradient(net, &buf.entries[i].x, buf.entries[i].y))
            .collect::<Result<Vec<_>>>()?;
        gss_score(&candidate, &ref_grads)
    };
    let entry = BufferEntry {
        x: x.to_vec(),
        y,
        score,
    };
    if !buf.is_full() {
        buf.entries.push(entry);
    } else {
        let victim = rng.below(buf.len());
        if score < buf.entries[victim].score {
            buf.entries[victim] = entry;
        }
    }
    Ok(())
}
