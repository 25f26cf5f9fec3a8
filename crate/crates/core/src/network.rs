//! Fully connected classifier with hand-written backpropagation.
//!
//! Every layer stores its bias as the last weight column and sees its input
//! with a trailing `1.0` appended (the homogeneous coordinate). The forward
//! pass records that augmented input `h`, and the backward pass fills in the
//! gradient `g` of the loss with respect to the layer's pre-activation outputs.
//! Those two matrices are exactly what the Kronecker-factored optimizer needs.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{OclError, Result};
use crate::linalg::DenseMatrix;
use crate::rng::Rng;
use crate::scalar::Scalar;

const CHECKPOINT_MAGIC: [u8; 4] = *b"OCLW";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            other => Err(OclError::UnknownKind(format!("activation code {other}"))),
        }
    }
}

/// Affine layer `y = act(W [x, 1])` with `W` of shape `(d_out, d_in + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: DenseMatrix<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: DenseMatrix<T>, activation: Activation) -> Result<Self> {
        if weights.cols() < 1 || weights.rows() < 1 {
            return Err(OclError::shape(
                "layer weights need at least one row and the bias column",
            ));
        }
        Ok(Self {
            weights,
            activation,
        })
    }

    /// Uniform initialization in `[-s, s]`, `s = sqrt(6 / (d_in + d_out))`, bias column included.
    pub fn glorot(d_in: usize, d_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let s = (6.0 / (d_in + d_out) as f64).sqrt();
        let weights =
            DenseMatrix::from_fn(d_out, d_in + 1, |_, _| T::lit(rng.uniform_range(-s, s)));
        Self {
            weights,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols() - 1
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Per-layer record of one forward/backward pair.
///
/// `input_h` is `(batch, d_in + 1)` with the homogeneous column; `outgrad_g`
/// is `(batch, d_out)` once backward has run. Consumers take the cache by
/// value, so a cache cannot be fed to an optimizer twice.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    pub input_h: DenseMatrix<T>,
    pub outgrad_g: Option<DenseMatrix<T>>,
    pre_activation: DenseMatrix<T>,
}

impl<T: Scalar> LayerCache<T> {
    /// Builds a completed cache directly, for callers that already hold `h` and `g`.
    pub fn from_parts(input_h: DenseMatrix<T>, outgrad_g: DenseMatrix<T>) -> Result<Self> {
        if input_h.rows() != outgrad_g.rows() {
            return Err(OclError::shape("h and g disagree on batch size"));
        }
        let pre_activation = DenseMatrix::zeros(outgrad_g.rows(), outgrad_g.cols());
        Ok(Self {
            input_h,
            outgrad_g: Some(outgrad_g),
            pre_activation,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.input_h.rows()
    }

    /// Returns `(h, g)` or [`OclError::CacheMissing`] if backward never ran.
    pub fn complete(&self) -> Result<(&DenseMatrix<T>, &DenseMatrix<T>)> {
        match &self.outgrad_g {
            Some(g) => Ok((&self.input_h, g)),
            None => Err(OclError::CacheMissing(
                "backward has not filled outgrad_g".into(),
            )),
        }
    }
}

/// Output of [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub logits: DenseMatrix<T>,
    /// Penultimate activations φ(x), without the homogeneous column.
    pub features: DenseMatrix<T>,
    pub caches: Vec<LayerCache<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    layers: Vec<DenseLayer<T>>,
}

fn append_ones<T: Scalar>(x: &DenseMatrix<T>) -> DenseMatrix<T> {
    let (n, d) = x.shape();
    DenseMatrix::from_fn(n, d + 1, |r, c| if c < d { x[(r, c)] } else { T::one() })
}

impl<T: Scalar> Network<T> {
    pub fn from_layers(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(OclError::shape("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(OclError::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// MLP with ReLU hidden layers and an identity output layer.
    ///
    /// `dims = [input, hidden.., classes]`.
    pub fn mlp(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(OclError::shape(format!("invalid layer dims {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Same architecture as [`mlp`](Self::mlp) with every weight zero.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let last = dims.len().saturating_sub(2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer {
                weights: DenseMatrix::zeros(w[1], w[0] + 1),
                activation: if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.is_finite())
    }

    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<ForwardPass<T>> {
        if x.cols() != self.input_dim() {
            return Err(OclError::shape(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        let mut features = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i + 1 == self.layers.len() {
                features = act.clone();
            }
            let h = append_ones(&act);
            let pre = h.matmul_t(&layer.weights)?;
            act = match layer.activation {
                Activation::Identity => pre.clone(),
                Activation::Relu => pre.map(|v| if v > T::zero() { v } else { T::zero() }),
            };
            caches.push(LayerCache {
                input_h: h,
                outgrad_g: None,
                pre_activation: pre,
            });
        }
        Ok(ForwardPass {
            logits: act,
            features,
            caches,
        })
    }

    /// Backpropagates `dlogits` (gradient w.r.t. the network outputs).
    ///
    /// Returns one gradient per layer, shaped like that layer's weights, and
    /// the caches with `outgrad_g` filled in. `grads[l] = g_lᵀ · h_l`; any batch
    /// averaging is already inside `dlogits`.
    pub fn backward(
        &self,
        mut caches: Vec<LayerCache<T>>,
        dlogits: &DenseMatrix<T>,
    ) -> Result<GradsAndCaches<T>> {
        if caches.len() != self.layers.len() {
            return Err(OclError::CacheMissing(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let batch = caches[0].input_h.rows();
        if dlogits.shape() != (batch, self.num_classes()) {
            return Err(OclError::shape(format!(
                "dlogits is {}x{}, expected {}x{}",
                dlogits.rows(),
                dlogits.cols(),
                batch,
                self.num_classes()
            )));
        }
        let mut grads = vec![DenseMatrix::zeros(0, 0); self.layers.len()];
        let mut upstream = dlogits.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let cache = &mut caches[l];
            let g = match layer.activation {
                Activation::Identity => upstream,
                Activation::Relu => {
                    DenseMatrix::from_fn(upstream.rows(), upstream.cols(), |r, c| {
                        if cache.pre_activation[(r, c)] > T::zero() {
                            upstream[(r, c)]
                        } else {
                            T::zero()
                        }
                    })
                }
            };
            grads[l] = g.t_matmul(&cache.input_h)?;
            if l > 0 {
                let full = g.matmul(&layer.weights)?;
                let d_in = layer.input_dim();
                upstream = DenseMatrix::from_fn(full.rows(), d_in, |r, c| full[(r, c)]);
            } else {
                upstream = DenseMatrix::zeros(0, 0);
            }
            cache.outgrad_g = Some(g);
        }
        Ok((grads, caches))
    }

    /// Argmax over logits, lowest index on ties.
    pub fn predict(&self, x: &DenseMatrix<T>) -> Result<Vec<usize>> {
        let logits = self.forward(x)?.logits;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    pub fn features(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        Ok(self.forward(x)?.features)
    }

    /// Plain gradient step `w ← w − lr · grad` on every layer.
    pub fn apply_update(&mut self, lr: T, directions: &[DenseMatrix<T>]) -> Result<()> {
        check_grad_shapes(self, directions)?;
        for (layer, d) in self.layers.iter_mut().zip(directions) {
            layer.weights.axpy(-lr, d)?;
        }
        if !self.is_finite() {
            return Err(OclError::NonFinite("weight update".into()));
        }
        Ok(())
    }

    /// Writes the `OCLW` checkpoint.
    ///
    /// Layout (little endian): magic `OCLW`, version `u8`, `u32` layer count,
    /// then per layer `u32` rows, `u32` cols, `u8` activation (0 identity,
    /// 1 relu), then every layer's weights as row-major `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            w.write_all(&(layer.weights.rows() as u32).to_le_bytes())?;
            w.write_all(&(layer.weights.cols() as u32).to_le_bytes())?;
            w.write_all(&[layer.activation.code()])?;
        }
        for layer in &self.layers {
            for v in layer.weights.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| OclError::io("<checkpoint>", e))?;
        let mut cur = ByteCursor::new(&buf);
        let magic = cur.array::<4>()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(OclError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = cur.array::<1>()?[0];
        if version != CHECKPOINT_VERSION {
            return Err(OclError::BadVersion(version));
        }
        let count = cur.u32()? as usize;
        let mut shapes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let act = Activation::from_code(cur.array::<1>()?[0])?;
            shapes.push((rows, cols, act));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (rows, cols, act) in shapes {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(T::lit(cur.f64()?));
            }
            layers.push(DenseLayer::new(
                DenseMatrix::from_vec(rows, cols, data)?,
                act,
            )?);
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| OclError::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file))
            .map_err(|e| OclError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| OclError::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

pub(crate) fn check_grad_shapes<T: Scalar>(
    net: &Network<T>,
    grads: &[DenseMatrix<T>],
) -> Result<()> {
    if grads.len() != net.layers.len() {
        return Err(OclError::shape(format!(
            "{} gradients for {} layers",
            grads.len(),
            net.layers.len()
        )));
    }
    for (i, (layer, g)) in net.layers.iter().zip(grads).enumerate() {
        if layer.weights.shape() != g.shape() {
            return Err(OclError::shape(format!(
                "gradient {i} is {:?}, weights are {:?}",
                g.shape(),
                layer.weights.shape()
            )));
        }
    }
    Ok(())
}

/// Little-endian reader over a byte slice; every short read is `TruncatedFile`.
pub(crate) struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self.buf.get(self.pos..end).ok_or_else(|| {
            OclError::TruncatedFile(format!("need {N} bytes at offset {}", self.pos))
        })?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length checked"))
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    row.iter().map(|&v| v - lse).collect()
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(OclError::shape(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if rows == 0 {
        return Err(OclError::shape("empty batch"));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(OclError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot) / batch`.
pub fn cross_entropy<T: Scalar>(
    logits: &DenseMatrix<T>,
    labels: &[usize],
) -> Result<(T, DenseMatrix<T>)> {
    let (n, c) = logits.shape();
    check_labels(labels, n, c)?;
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    let mut d = DenseMatrix::zeros(n, c);
    for (r, &y) in labels.iter().enumerate() {
        let ls = log_softmax_row(logits.row(r));
        loss -= ls[y];
        for (j, &l) in ls.iter().enumerate() {
            let p = l.exp();
            d[(r, j)] = (p - if j == y { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss * inv_n, d))
}

/// Unaveraged cross-entropy of each row.
pub fn per_sample_cross_entropy<T: Scalar>(
    logits: &DenseMatrix<T>,
    labels: &[usize],
) -> Result<Vec<T>> {
    let (n, c) = logits.shape();
    check_labels(labels, n, c)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -log_softmax_row(logits.row(r))[y])
        .collect())
}

/// Index of the Euclidean-nearest prototype row for every feature row.
/// Ties go to the lowest prototype index.
pub fn nearest_mean_predict<T: Scalar>(
    features: &DenseMatrix<T>,
    prototypes: &DenseMatrix<T>,
) -> Result<Vec<usize>> {
    if prototypes.rows() == 0 {
        return Err(OclError::EmptyPrototypes);
    }
    if features.cols() != prototypes.cols() {
        return Err(OclError::shape(format!(
            "features have dim {}, prototypes {}",
            features.cols(),
            prototypes.cols()
        )));
    }
    Ok((0..features.rows())
        .map(|r| {
            let f = features.row(r);
            let mut best = (0, T::infinity());
            for p in 0..prototypes.rows() {
                let d: T = f
                    .iter()
                    .zip(prototypes.row(p))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if d < best.1 {
                    best = (p, d);
                }
            }
            best.0
        })
        .collect())
}

/// Concatenates row-major layer matrices into one flat vector.
pub fn flatten<T: Scalar>(mats: &[DenseMatrix<T>]) -> Vec<T> {
    mats.iter().flat_map(|m| m.data().iter().copied()).collect()
}

/// Splits a flat vector back into matrices shaped like `like`.
pub fn unflatten<T: Scalar>(flat: &[T], like: &[DenseMatrix<T>]) -> Result<Vec<DenseMatrix<T>>> {
    let total: usize = like.iter().map(|m| m.data().len()).sum();
    if total != flat.len() {
        return Err(OclError::shape(format!(
            "flat vector has {} entries, expected {total}",
            flat.len()
        )));
    }
    let mut off = 0;
    like.iter()
        .map(|m| {
            let n = m.data().len();
            let out = DenseMatrix::from_vec(m.rows(), m.cols(), flat[off..off + n].to_vec());
            off += n;
            out
        })
        .collect()
}

/// Per-layer weight gradients with the caches that produced them.
pub type GradsAndCaches<T> = (Vec<DenseMatrix<T>>, Vec<LayerCache<T>>);

/// Mean cross-entropy gradient of `net` on a labelled batch.
#[allow(clippy::type_complexity)]
pub fn loss_and_grads<T: Scalar>(
    net: &Network<T>,
    x: &DenseMatrix<T>,
    labels: &[usize],
) -> Result<(T, Vec<DenseMatrix<T>>, Vec<LayerCache<T>>)> {
    let fwd = net.forward(x)?;
    let (loss, dlogits) = cross_entropy(&fwd.logits, labels)?;
    let (grads, caches) = net.backward(fwd.caches, &dlogits)?;
    Ok((loss, grads, caches))
}
