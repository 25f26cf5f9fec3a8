//! Task-recency bias mitigations: labels trick, separated softmax,
//! nearest-class-mean classification and review fine-tuning.

use std::collections::{BTreeMap, BTreeSet};

use crate::batch::Batch;
use crate::error::{OclError, Result};
use crate::linalg::DenseMatrix;
use crate::network::{loss_and_grads, nearest_mean_predict, Network};
use crate::optim::{sgd_step, SgdConfig};
use crate::replay::ReplayBuffer;
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassPartition {
    pub old_classes: BTreeSet<usize>,
    pub new_classes: BTreeSet<usize>,
}

impl ClassPartition {
    pub fn new(old_classes: BTreeSet<usize>, new_classes: BTreeSet<usize>) -> Result<Self> {
        if let Some(&c) = old_classes.intersection(&new_classes).next() {
            return Err(OclError::InvalidConfig(format!(
                "class {c} is both old and new"
            )));
        }
        Ok(Self {
            old_classes,
            new_classes,
        })
    }
}

/// Cross-entropy where each row's softmax runs only over `active(row)`.
fn masked_cross_entropy<T: Scalar>(
    logits: &DenseMatrix<T>,
    labels: &[usize],
    active: impl Fn(usize) -> Result<Vec<bool>>,
) -> Result<(T, DenseMatrix<T>)> {
    let (n, c) = logits.shape();
    if labels.len() != n || n == 0 {
        return Err(OclError::shape("labels must match a nonempty batch"));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    let mut d = DenseMatrix::zeros(n, c);
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(OclError::LabelOutOfRange {
                label: y,
                classes: c,
            });
        }
        let mask = active(r)?;
        let row = logits.row(r);
        let max = (0..c)
            .filter(|&j| mask[j])
            .fold(T::neg_infinity(), |m, j| m.max(row[j]));
        let z: T = (0..c)
            .filter(|&j| mask[j])
            .map(|j| (row[j] - max).exp())
            .sum();
        let lse = max + z.ln();
        loss += lse - row[y];
        for j in (0..c).filter(|&j| mask[j]) {
            let p = (row[j] - lse).exp();
            d[(r, j)] = (p - if j == y { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss * inv_n, d))
}

fn mask_of(set: &BTreeSet<usize>, classes: usize) -> Vec<bool> {
    (0..classes).map(|j| set.contains(&j)).collect()
}

/// Cross-entropy restricted to the logits of `c_cur`; other columns of the
/// gradient are exactly zero.
pub fn labels_trick_loss<T: Scalar>(
    logits: &DenseMatrix<T>,
    labels: &[usize],
    c_cur: &BTreeSet<usize>,
) -> Result<(T, DenseMatrix<T>)> {
    if let Some(&bad) = labels.iter().find(|y| !c_cur.contains(y)) {
        return Err(OclError::LabelNotInCur(bad));
    }
    let mask = mask_of(c_cur, logits.cols());
    masked_cross_entropy(logits, labels, |_| Ok(mask.clone()))
}

/// Classes present in a label list.
pub fn present_classes(labels: &[usize]) -> BTreeSet<usize> {
    labels.iter().copied().collect()
}

/// Each sample's cross-entropy runs over the partition that holds its label.
pub fn separated_softmax_loss<T: Scalar>(
    logits: &DenseMatrix<T>,
    labels: &[usize],
    part: &ClassPartition,
) -> Result<(T, DenseMatrix<T>)> {
    let c = logits.cols();
    let old = mask_of(&part.old_classes, c);
    let new = mask_of(&part.new_classes, c);
    masked_cross_entropy(logits, labels, |r| {
        let y = labels[r];
        if part.old_classes.contains(&y) {
            Ok(old.clone())
        } else if part.new_classes.contains(&y) {
            Ok(new.clone())
        } else {
            Err(OclError::LabelUnpartitioned(y))
        }
    })
}

/// Per-class mean features.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTable<T> {
    pub means: BTreeMap<usize, Vec<T>>,
    pub counts: BTreeMap<usize, usize>,
}

impl<T: Scalar> PrototypeTable<T> {
    pub fn classes(&self) -> Vec<usize> {
        self.means.keys().copied().collect()
    }

    /// Nearest-mean labels for feature rows; ties go to the lowest class id.
    pub fn predict(&self, features: &DenseMatrix<T>) -> Result<Vec<usize>> {
        let classes = self.classes();
        let rows: Vec<&Vec<T>> = self.means.values().collect();
        let protos = if rows.is_empty() {
            DenseMatrix::zeros(0, features.cols())
        } else {
            DenseMatrix::from_rows(&rows)?
        };
        Ok(nearest_mean_predict(features, &protos)?
            .into_iter()
            .map(|i| classes[i])
            .collect())
    }
}

/// Class means of `φ(x)` over the buffer; classes absent from it are omitted.
pub fn build_prototypes<T: Scalar>(
    buf: &ReplayBuffer<T>,
    net: &Network<T>,
) -> Result<PrototypeTable<T>> {
    if buf.is_empty() {
        return Err(OclError::EmptyBuffer);
    }
    let batch = buf.as_batch();
    let feats = net.features(&batch.x)?;
    let mut sums: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (r, &y) in batch.y.iter().enumerate() {
        let acc = sums
            .entry(y)
            .or_insert_with(|| vec![T::zero(); feats.cols()]);
        for (a, &f) in acc.iter_mut().zip(feats.row(r)) {
            *a += f;
        }
        *counts.entry(y).or_insert(0) += 1;
    }
    let means = sums
        .into_iter()
        .map(|(y, s)| {
            let n = T::lit(counts[&y] as f64);
            (y, s.into_iter().map(|v| v / n).collect())
        })
        .collect();
    Ok(PrototypeTable { means, counts })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReviewConfig<T> {
    /// SGD steps; `None` means one pass over the balanced subset.
    pub steps: Option<usize>,
    pub learning_rate: T,
    pub quota_cap: usize,
    pub batch_size: usize,
}

/// Class-balanced subset of the buffer: `min(smallest class count, quota_cap)`
/// entries per class, chosen at random. Returned grouped by ascending class.
pub fn balanced_subset<T: Scalar>(
    buf: &ReplayBuffer<T>,
    quota_cap: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if buf.is_empty() {
        return Err(OclError::EmptyBuffer);
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in buf.entries().iter().enumerate() {
        by_class.entry(e.y).or_default().push(i);
    }
    let quota = by_class
        .values()
        .map(Vec::len)
        .min()
        .unwrap_or(0)
        .min(quota_cap);
    let mut out = Vec::with_capacity(quota * by_class.len());
    for members in by_class.values_mut() {
        rng.shuffle(members);
        out.extend_from_slice(&members[..quota]);
    }
    Ok(out)
}

/// Fine-tunes on a class-balanced subset of the buffer with plain SGD.
pub fn review_finetune<T: Scalar>(
    net: &mut Network<T>,
    buf: &ReplayBuffer<T>,
    cfg: &ReviewConfig<T>,
    rng: &mut Rng,
) -> Result<()> {
    let subset = balanced_subset(buf, cfg.quota_cap, rng)?;
    if subset.is_empty() || cfg.steps == Some(0) {
        return Ok(());
    }
    let batch_size = cfg.batch_size.max(1);
    let steps = cfg
        .steps
        .unwrap_or_else(|| subset.len().div_ceil(batch_size));
    let sgd = SgdConfig::new(cfg.learning_rate)?;
    let mut order = subset.clone();
    rng.shuffle(&mut order);
    let mut cursor = 0;
    for _ in 0..steps {
        if cursor >= order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(order.len());
        let Batch { x, y } = buf.gather(&order[cursor..end]);
        cursor = end;
        let (_, grads, _) = loss_and_grads(net, &x, &y)?;
        sgd_step(net, &grads, &sgd)?;
    }
    Ok(())
}
