//! In-memory datasets, the `OCLD` binary format and the synthetic generator.
//!
//! `OCLD` layout, all integers and floats little-endian:
//!
//! ```text
//! b"OCLD"  u8 version (=1)  u32 n  u32 d  u32 C
//! n*d f64 features (row-major)
//! n   u16 labels
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::batch::Batch;
use crate::error::{OclError, Result};
use crate::linalg::DenseMatrix;
use crate::network::ByteCursor;
use crate::rng::Rng;

pub const DATASET_MAGIC: [u8; 4] = *b"OCLD";
pub const DATASET_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: DenseMatrix<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: DenseMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(OclError::shape(format!(
                "{} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(OclError::InvalidConfig(
                "dataset must hold at least one example".into(),
            ));
        }
        if num_classes > usize::from(u16::MAX) + 1 {
            return Err(OclError::InvalidConfig(format!(
                "{num_classes} classes exceed the u16 label range"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(OclError::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &DenseMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false; kept for the `len`/`is_empty` pairing.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Batch<f64> {
        Batch {
            x: self.features.select_rows(idx),
            y: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.features.shape();
        let mut out = Vec::with_capacity(HEADER_LEN + n * d * 8 + n * 2);
        out.extend_from_slice(&DATASET_MAGIC);
        out.push(DATASET_VERSION);
        for v in [n, d, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u16).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(buf);
        let magic = cur.array::<4>()?;
        if magic != DATASET_MAGIC {
            return Err(OclError::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let version = cur.array::<1>()?[0];
        if version != DATASET_VERSION {
            return Err(OclError::BadVersion(version));
        }
        let n = cur.u32()? as usize;
        let d = cur.u32()? as usize;
        let classes = cur.u32()? as usize;
        if n == 0 {
            return Err(OclError::TruncatedFile(
                "dataset header declares zero examples".into(),
            ));
        }
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(8))
            .and_then(|b| b.checked_add(n * 2 + HEADER_LEN));
        if expected.is_none_or(|e| e > buf.len()) {
            return Err(OclError::TruncatedFile(format!(
                "{n}x{d} dataset needs more than {} bytes",
                buf.len()
            )));
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(cur.f64()?);
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(usize::from(cur.u16()?));
        }
        if cur.remaining() != 0 {
            return Err(OclError::shape(format!(
                "{} trailing bytes after dataset",
                cur.remaining()
            )));
        }
        Self::new(DenseMatrix::from_vec(n, d, data)?, labels, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| OclError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| OclError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Lowercase hex SHA-256 of the serialized bytes.
    pub fn checksum(&self) -> String {
        hex_sha256(&self.to_bytes())
    }
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Cluster centers at pairwise distance at least `separation`.
///
/// With `classes <= dim` the centers sit on a random orthonormal frame scaled
/// by `separation / sqrt(2)`, so every pair is exactly `separation` apart.
/// Otherwise they are drawn by rejection from a Gaussian cloud that widens
/// whenever placement stalls.
fn cluster_centers(classes: usize, dim: usize, separation: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    if separation == 0.0 {
        return vec![vec![0.0; dim]; classes];
    }
    if classes <= dim {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while basis.len() < classes {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            for q in &basis {
                let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                basis.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let r = separation / std::f64::consts::SQRT_2;
        return basis
            .into_iter()
            .map(|q| q.into_iter().map(|a| a * r).collect())
            .collect();
    }
    let mut spread = separation;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut misses = 0;
    while centers.len() < classes {
        let c: Vec<f64> = (0..dim).map(|_| spread * rng.normal()).collect();
        let ok = centers.iter().all(|o| {
            o.iter()
                .zip(&c)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= separation
        });
        if ok {
            centers.push(c);
            misses = 0;
        } else {
            misses += 1;
            if misses == 1000 {
                spread *= 1.5;
                misses = 0;
            }
        }
    }
    centers
}

/// Unit-covariance Gaussian clusters, one per class, stored class by class.
pub fn make_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(OclError::InvalidConfig(
            "classes, per_class and dim must be positive".into(),
        ));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(OclError::InvalidConfig(format!(
            "separation {separation} must be finite and >= 0"
        )));
    }
    let centers = cluster_centers(classes, dim, separation, rng);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (y, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|&c| c + rng.normal()));
            labels.push(y);
        }
    }
    Dataset::new(DenseMatrix::from_vec(n, dim, data)?, labels, classes)
}
