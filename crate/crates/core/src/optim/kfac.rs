//! Natural-gradient descent with a Kronecker-factored Fisher approximation.
//!
//! Each layer's Fisher block is approximated as `A ⊗ B` where `A` is the second
//! moment of the layer's augmented input `h` and `B` the second moment of the
//! gradient `g` w.r.t. its pre-activation outputs. Both factors are tracked as
//! exponential moving averages and damped with the trace-balanced Tikhonov
//! split
//!
//! ```text
//! (A + π·√λ·I) ⊗ (B + (1/π)·√λ·I),   π = sqrt( (tr A / dim A) / (tr B / dim B) )
//! ```
//!
//! Parameters are vectorized column-wise (`vec(W)[c·d_out + r] = W[r, c]`) so
//! that `(A ⊗ B)⁻¹ vec(G) = vec(B⁻¹ G A⁻¹)`. The update is therefore applied
//! in matrix form and the full Kronecker product is never built.

use crate::error::{OclError, Result};
use crate::linalg::{invert_spd, outer, trace, DenseMatrix};
use crate::network::{cross_entropy, LayerCache, Network};
use crate::scalar::Scalar;

/// Traces at or below this are treated as degenerate and π falls back to 1.
pub const DEGENERATE_TRACE: f64 = 1e-12;

/// Largest per-layer parameter count [`exact_empirical_fim`] accepts.
pub const EXACT_FIM_LIMIT: usize = 200;

/// Which labels the Fisher factors are computed with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FisherKind {
    /// Gradients at the true training labels.
    #[default]
    Empirical,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KfacConfig<T> {
    pub learning_rate: T,
    /// Tikhonov damping λ ≥ 0.
    pub damping: T,
    /// EMA decay ρ in `[0, 1)`.
    pub ema_decay: T,
    pub fisher: FisherKind,
}

impl<T: Scalar> Default for KfacConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::lit(0.1),
            damping: T::one(),
            ema_decay: T::lit(0.9),
            fisher: FisherKind::Empirical,
        }
    }
}

impl<T: Scalar> KfacConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > T::zero()) {
            return Err(OclError::InvalidConfig(
                "kfac learning rate must be positive".into(),
            ));
        }
        if !(self.damping >= T::zero()) {
            return Err(OclError::InvalidConfig(
                "damping must be nonnegative".into(),
            ));
        }
        if !(self.ema_decay >= T::zero() && self.ema_decay < T::one()) {
            return Err(OclError::InvalidConfig(
                "ema decay must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Curvature state of one layer.
#[derive(Clone, Debug)]
pub struct KfacLayerState<T> {
    /// `(d_in + 1) × (d_in + 1)` input second moment.
    pub a_ema: DenseMatrix<T>,
    /// `d_out × d_out` output-gradient second moment.
    pub b_ema: DenseMatrix<T>,
    pub a_damped: Option<DenseMatrix<T>>,
    pub b_damped: Option<DenseMatrix<T>>,
    pub a_damped_inv: Option<DenseMatrix<T>>,
    pub b_damped_inv: Option<DenseMatrix<T>>,
    pub pi: T,
    pub step_count: usize,
}

impl<T: Scalar> KfacLayerState<T> {
    pub fn new(input_dim_augmented: usize, output_dim: usize) -> Self {
        Self {
            a_ema: DenseMatrix::zeros(input_dim_augmented, input_dim_augmented),
            b_ema: DenseMatrix::zeros(output_dim, output_dim),
            a_damped: None,
            b_damped: None,
            a_damped_inv: None,
            b_damped_inv: None,
            pi: T::one(),
            step_count: 0,
        }
    }

    /// State with explicit factors, as if one update had happened.
    pub fn from_factors(a: DenseMatrix<T>, b: DenseMatrix<T>) -> Result<Self> {
        if !a.is_square() || !b.is_square() {
            return Err(OclError::shape("Kronecker factors must be square"));
        }
        let mut s = Self::new(a.rows(), b.rows());
        s.a_ema = a;
        s.b_ema = b;
        s.step_count = 1;
        Ok(s)
    }

    /// Folds one batch's factor estimates into the moving averages.
    ///
    /// `A_batch = hᵀh / n`. The cached `g` comes from a batch-mean loss and so
    /// carries a `1/n` factor; it is rescaled to per-sample gradients before
    /// forming `B_batch = (n·g)ᵀ(n·g) / n`, so that both factors estimate
    /// per-sample expectations (for `n = 1` this is just `gᵀg`). The first
    /// update assigns directly instead of averaging against zeros.
    pub fn update_factors(&mut self, cache: LayerCache<T>, cfg: &KfacConfig<T>) -> Result<()> {
        let (h, g) = cache.complete()?;
        if h.cols() != self.a_ema.rows() || g.cols() != self.b_ema.rows() {
            return Err(OclError::shape(format!(
                "cache is ({}, {}), state expects ({}, {})",
                h.cols(),
                g.cols(),
                self.a_ema.rows(),
                self.b_ema.rows()
            )));
        }
        let n = T::lit(h.rows() as f64);
        let a_batch = h.t_matmul(h)?.scale(T::one() / n);
        let b_batch = g.t_matmul(g)?.scale(n);
        if self.step_count == 0 {
            self.a_ema = a_batch;
            self.b_ema = b_batch;
        } else {
            let rho = cfg.ema_decay;
            let keep = T::one() - rho;
            self.a_ema = self.a_ema.scale(rho);
            self.a_ema.axpy(keep, &a_batch)?;
            self.b_ema = self.b_ema.scale(rho);
            self.b_ema.axpy(keep, &b_batch)?;
        }
        self.step_count += 1;
        Ok(())
    }

    /// Trace-balancing coefficient π; 1 when either trace is degenerate.
    pub fn compute_pi(&self) -> T {
        let tr_a = trace(&self.a_ema).unwrap_or_else(|_| T::zero());
        let tr_b = trace(&self.b_ema).unwrap_or_else(|_| T::zero());
        let floor = T::lit(DEGENERATE_TRACE);
        if tr_a <= floor || tr_b <= floor {
            log::debug!("degenerate Kronecker factor (tr A = {tr_a}, tr B = {tr_b}); using pi = 1");
            return T::one();
        }
        let norm_a = tr_a / T::lit(self.a_ema.rows() as f64);
        let norm_b = tr_b / T::lit(self.b_ema.rows() as f64);
        (norm_a / norm_b).sqrt()
    }

    /// Recomputes π, the damped factors and their inverses.
    pub fn damp_and_invert(&mut self, damping: T) -> Result<()> {
        if !(damping >= T::zero()) {
            return Err(OclError::InvalidConfig(
                "damping must be nonnegative".into(),
            ));
        }
        let pi = self.compute_pi();
        let root = damping.sqrt();
        let a_damped = self.a_ema.add_diag(pi * root)?;
        let b_damped = self.b_ema.add_diag(root / pi)?;
        self.a_damped_inv = Some(invert_spd(&a_damped)?);
        self.b_damped_inv = Some(invert_spd(&b_damped)?);
        self.a_damped = Some(a_damped);
        self.b_damped = Some(b_damped);
        self.pi = pi;
        Ok(())
    }

    /// Dense `(A + π√λI) ⊗ (B + √λ/π I)`; only sensible for tiny layers.
    pub fn damped_kron(&self) -> Result<DenseMatrix<T>> {
        match (&self.a_damped, &self.b_damped) {
            (Some(a), Some(b)) => Ok(crate::linalg::kron(a, b)),
            _ => Err(OclError::CacheMissing("damp_and_invert has not run".into())),
        }
    }

    /// `B⁻¹ G A⁻¹` using the damped inverses.
    pub fn precondition(&self, grad: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let (a_inv, b_inv) = match (&self.a_damped_inv, &self.b_damped_inv) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(OclError::CacheMissing("damp_and_invert has not run".into())),
        };
        b_inv.matmul(grad)?.matmul(a_inv)
    }
}

/// Natural-gradient directions `B⁻¹ G A⁻¹` for every layer.
pub fn natural_directions<T: Scalar>(
    grads: &[DenseMatrix<T>],
    states: &[KfacLayerState<T>],
) -> Result<Vec<DenseMatrix<T>>> {
    grads
        .iter()
        .enumerate()
        .map(|(l, g)| {
            let state = states.get(l).ok_or(OclError::StateMissing(l))?;
            state.precondition(g).map_err(|e| match e {
                OclError::CacheMissing(_) => OclError::StateMissing(l),
                other => other,
            })
        })
        .collect()
}

/// `w ← w − α · B⁻¹ G A⁻¹` per layer. States must already be refreshed.
pub fn kfac_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &[DenseMatrix<T>],
    states: &[KfacLayerState<T>],
    cfg: &KfacConfig<T>,
) -> Result<()> {
    crate::network::check_grad_shapes(net, grads)?;
    let dirs = natural_directions(grads, states)?;
    net.apply_update(cfg.learning_rate, &dirs)
}

/// Exact per-layer empirical Fisher, `mean_i vec(G_i) vec(G_i)ᵀ`, where `G_i`
/// is the weight gradient of sample `i`'s own loss. Test oracle only.
pub fn exact_empirical_fim<T: Scalar>(
    net: &Network<T>,
    x: &DenseMatrix<T>,
    labels: &[usize],
) -> Result<Vec<DenseMatrix<T>>> {
    for (l, layer) in net.layers().iter().enumerate() {
        let params = layer.weights.data().len();
        if params > EXACT_FIM_LIMIT {
            return Err(OclError::TooLarge {
                layer: l,
                params,
                limit: EXACT_FIM_LIMIT,
            });
        }
    }
    if labels.len() != x.rows() || x.rows() == 0 {
        return Err(OclError::shape("labels must match a nonempty batch"));
    }
    let mut fims: Vec<DenseMatrix<T>> = net
        .layers()
        .iter()
        .map(|l| {
            let p = l.weights.data().len();
            DenseMatrix::zeros(p, p)
        })
        .collect();
    for (i, &y) in labels.iter().enumerate() {
        let xi = x.select_rows(&[i]);
        let fwd = net.forward(&xi)?;
        let (_, dlogits) = cross_entropy(&fwd.logits, &[y])?;
        let (grads, _) = net.backward(fwd.caches, &dlogits)?;
        for (fim, g) in fims.iter_mut().zip(&grads) {
            let v = g.vec_columns();
            fim.axpy(T::one(), &outer(&v, &v))?;
        }
    }
    let inv_n = T::one() / T::lit(labels.len() as f64);
    Ok(fims.into_iter().map(|f| f.scale(inv_n)).collect())
}

/// Local quadratic model `½ δᵀFδ + ∇ᵀδ + loss_now` with `F` the block-diagonal
/// damped Kronecker curvature. Diagnostic only.
///
/// `delta` is given per layer, shaped like the weights.
pub fn quadratic_model_value<T: Scalar>(
    grads: &[DenseMatrix<T>],
    states: &[KfacLayerState<T>],
    delta: &[DenseMatrix<T>],
    loss_now: T,
) -> Result<T> {
    if grads.len() != delta.len() || grads.len() != states.len() {
        return Err(OclError::shape(
            "grads, states and delta disagree on layer count",
        ));
    }
    let mut value = loss_now;
    for (l, ((g, s), d)) in grads.iter().zip(states).zip(delta).enumerate() {
        if g.shape() != d.shape() {
            return Err(OclError::shape(format!(
                "delta for layer {l} is {:?}, expected {:?}",
                d.shape(),
                g.shape()
            )));
        }
        let (a, b) = match (&s.a_damped, &s.b_damped) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(OclError::StateMissing(l)),
        };
        // vec(D)ᵀ (A ⊗ B) vec(D) = ⟨D, B D A⟩
        let curv = d.dot(&b.matmul(d)?.matmul(a)?)?;
        value += T::lit(0.5) * curv + g.dot(d)?;
    }
    Ok(value)
}

/// Stateful KFAC optimizer: refreshes factors and inverses every step.
#[derive(Clone, Debug)]
pub struct Kfac<T> {
    cfg: KfacConfig<T>,
    states: Vec<KfacLayerState<T>>,
}

impl<T: Scalar> Kfac<T> {
    pub fn new(cfg: KfacConfig<T>, net: &Network<T>) -> Result<Self> {
        cfg.validate()?;
        let states = net
            .layers()
            .iter()
            .map(|l| KfacLayerState::new(l.weights.cols(), l.weights.rows()))
            .collect();
        Ok(Self { cfg, states })
    }

    pub fn config(&self) -> &KfacConfig<T> {
        &self.cfg
    }

    pub fn states(&self) -> &[KfacLayerState<T>] {
        &self.states
    }

    /// Updates factors from `caches`, re-damps, inverts and steps.
    ///
    /// `grads` may differ from the gradient that produced the caches (for
    /// example after an A-GEM projection); the caches only feed curvature.
    pub fn step(
        &mut self,
        net: &mut Network<T>,
        grads: &[DenseMatrix<T>],
        caches: Vec<LayerCache<T>>,
    ) -> Result<()> {
        if caches.len() != self.states.len() {
            return Err(OclError::CacheMissing(format!(
                "{} caches for {} layers",
                caches.len(),
                self.states.len()
            )));
        }
        for (state, cache) in self.states.iter_mut().zip(caches) {
            state.update_factors(cache, &self.cfg)?;
            state.damp_and_invert(self.cfg.damping)?;
        }
        kfac_step(net, grads, &self.states, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron, solve_dense};
    use crate::network::loss_and_grads;
    use crate::rng::Rng;

    type M = DenseMatrix<f64>;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> M {
        M::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn random_psd(n: usize, rng: &mut Rng) -> M {
        let x = random(n, n + 1, rng);
        x.matmul_t(&x).unwrap()
    }

    fn cache_for(h: M, g: M) -> LayerCache<f64> {
        LayerCache::from_parts(h, g).unwrap()
    }

    #[test]
    fn zero_decay_tracks_current_batch() {
        let mut rng = Rng::new(1);
        let cfg = KfacConfig {
            ema_decay: 0.0,
            ..KfacConfig::default()
        };
        let mut s = KfacLayerState::<f64>::new(3, 2);
        s.update_factors(
            cache_for(random(4, 3, &mut rng), random(4, 2, &mut rng)),
            &cfg,
        )
        .unwrap();
        let h = random(5, 3, &mut rng);
        let g = random(5, 2, &mut rng);
        s.update_factors(cache_for(h.clone(), g.clone()), &cfg)
            .unwrap();
        assert!(s.a_ema.max_abs_diff(&h.t_matmul(&h).unwrap().scale(0.2)) < 1e-14);
        assert!(s.b_ema.max_abs_diff(&g.t_matmul(&g).unwrap().scale(5.0)) < 1e-14);
    }

    #[test]
    fn single_sample_factors_are_outer_products() {
        let h = M::from_rows(&[[1.0, -2.0, 1.0]]).unwrap();
        let g = M::from_rows(&[[0.5, 3.0]]).unwrap();
        let mut s = KfacLayerState::new(3, 2);
        s.update_factors(cache_for(h.clone(), g.clone()), &KfacConfig::default())
            .unwrap();
        assert_eq!(s.a_ema, outer(h.row(0), h.row(0)));
        assert_eq!(s.b_ema, outer(g.row(0), g.row(0)));
    }

    #[test]
    fn batch_factor_b_is_mean_of_per_sample_outer_products() {
        // g from a batch-mean loss is per-sample gradient / n
        let mut rng = Rng::new(2);
        let per_sample = random(4, 3, &mut rng);
        let g = per_sample.scale(0.25);
        let mut s = KfacLayerState::new(2, 3);
        s.update_factors(cache_for(random(4, 2, &mut rng), g), &KfacConfig::default())
            .unwrap();
        let mut expected = M::zeros(3, 3);
        for r in 0..4 {
            expected
                .axpy(0.25, &outer(per_sample.row(r), per_sample.row(r)))
                .unwrap();
        }
        assert!(s.b_ema.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn ema_matches_unrolled_recurrence() {
        let mut rng = Rng::new(3);
        let cfg = KfacConfig::default();
        let (h1, g1) = (random(3, 4, &mut rng), random(3, 2, &mut rng));
        let (h2, g2) = (random(3, 4, &mut rng), random(3, 2, &mut rng));
        let mut s = KfacLayerState::new(4, 2);
        s.update_factors(cache_for(h1.clone(), g1.clone()), &cfg)
            .unwrap();
        s.update_factors(cache_for(h2.clone(), g2.clone()), &cfg)
            .unwrap();
        // hand-unrolled: A = 0.9·A1 + 0.1·A2 with Ak = hkᵀhk/3
        let a1 = h1.t_matmul(&h1).unwrap().scale(1.0 / 3.0);
        let a2 = h2.t_matmul(&h2).unwrap().scale(1.0 / 3.0);
        let b1 = g1.t_matmul(&g1).unwrap().scale(3.0);
        let b2 = g2.t_matmul(&g2).unwrap().scale(3.0);
        let a = M::from_fn(4, 4, |i, j| 0.9 * a1[(i, j)] + 0.1 * a2[(i, j)]);
        let b = M::from_fn(2, 2, |i, j| 0.9 * b1[(i, j)] + 0.1 * b2[(i, j)]);
        assert!(s.a_ema.max_abs_diff(&a) < 1e-13);
        assert!(s.b_ema.max_abs_diff(&b) < 1e-13);
        assert!(s.a_ema.is_symmetric(1e-10) && s.b_ema.is_symmetric(1e-10));
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn incomplete_cache_is_rejected() {
        let mut rng = Rng::new(4);
        let net = Network::<f64>::mlp(&[2, 2], &mut rng).unwrap();
        let fwd = net.forward(&random(1, 2, &mut rng)).unwrap();
        let mut s = KfacLayerState::new(3, 2);
        let cache = fwd.caches.into_iter().next().unwrap();
        assert!(matches!(
            s.update_factors(cache, &KfacConfig::default()),
            Err(OclError::CacheMissing(_))
        ));
    }

    #[test]
    fn pi_cases() {
        let s = KfacLayerState::from_factors(M::identity(4), M::identity(3)).unwrap();
        assert!((s.compute_pi() - 1.0).abs() < 1e-15);
        let s4 = KfacLayerState::from_factors(M::identity(4).scale(4.0), M::identity(3)).unwrap();
        assert!((s4.compute_pi() - 2.0).abs() < 1e-15);
        let mut rng = Rng::new(5);
        let (a, b) = (random_psd(4, &mut rng), random_psd(3, &mut rng));
        let s = KfacLayerState::from_factors(a.clone(), b.clone()).unwrap();
        let direct = ((trace(&a).unwrap() / 4.0) / (trace(&b).unwrap() / 3.0)).sqrt();
        assert!((s.compute_pi() - direct).abs() < 1e-14);
        let zero = KfacLayerState::<f64>::new(4, 3);
        assert_eq!(zero.compute_pi(), 1.0);
    }

    #[test]
    fn damping_alone_inverts_to_identity() {
        let mut s = KfacLayerState::<f64>::new(3, 2);
        s.damp_and_invert(1.0).unwrap();
        assert!(s.a_damped_inv.unwrap().max_abs_diff(&M::identity(3)) < 1e-15);
        assert!(s.b_damped_inv.unwrap().max_abs_diff(&M::identity(2)) < 1e-15);
    }

    #[test]
    fn zero_damping_gives_plain_inverses() {
        let mut rng = Rng::new(6);
        let (a, b) = (random_psd(3, &mut rng), random_psd(2, &mut rng));
        let mut s = KfacLayerState::from_factors(a.clone(), b.clone()).unwrap();
        s.damp_and_invert(0.0).unwrap();
        assert!(
            s.a_damped_inv
                .unwrap()
                .max_abs_diff(&invert_spd(&a).unwrap())
                < 1e-12
        );
        assert!(
            s.b_damped_inv
                .unwrap()
                .max_abs_diff(&invert_spd(&b).unwrap())
                < 1e-12
        );
        let mut zero = KfacLayerState::<f64>::new(3, 2);
        assert!(matches!(
            zero.damp_and_invert(0.0),
            Err(OclError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn damped_product_is_invariant_to_factor_rescaling() {
        let mut rng = Rng::new(7);
        let (a, b) = (random_psd(3, &mut rng), random_psd(2, &mut rng));
        let mut base = KfacLayerState::from_factors(a.clone(), b.clone()).unwrap();
        base.damp_and_invert(1.0).unwrap();
        let mut scaled = KfacLayerState::from_factors(a.scale(7.0), b.scale(1.0 / 7.0)).unwrap();
        scaled.damp_and_invert(1.0).unwrap();
        assert!((scaled.pi - 7.0 * base.pi).abs() < 1e-12);
        assert!(
            base.damped_kron()
                .unwrap()
                .max_abs_diff(&scaled.damped_kron().unwrap())
                < 1e-10
        );
    }

    #[test]
    fn identity_preconditioner_reduces_to_sgd() {
        let mut rng = Rng::new(8);
        let net0 = Network::<f64>::mlp(&[3, 4, 2], &mut rng).unwrap();
        let x = random(5, 3, &mut rng);
        let (_, grads, _) = loss_and_grads(&net0, &x, &[0, 1, 1, 0, 1]).unwrap();
        let mut states: Vec<_> = net0
            .layers()
            .iter()
            .map(|l| KfacLayerState::new(l.weights.cols(), l.weights.rows()))
            .collect();
        for s in &mut states {
            s.damp_and_invert(1.0).unwrap();
        }
        let mut via_kfac = net0.clone();
        kfac_step(&mut via_kfac, &grads, &states, &KfacConfig::default()).unwrap();
        let mut via_sgd = net0.clone();
        super::super::sgd::sgd_step(
            &mut via_sgd,
            &grads,
            &super::super::SgdConfig::new(0.1).unwrap(),
        )
        .unwrap();
        for (a, b) in via_kfac.layers().iter().zip(via_sgd.layers()) {
            assert!(a.weights.max_abs_diff(&b.weights) < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_step_is_a_no_op_and_missing_state_errors() {
        let mut rng = Rng::new(9);
        let mut net = Network::<f64>::mlp(&[2, 3], &mut rng).unwrap();
        let before = net.clone();
        let mut state =
            KfacLayerState::from_factors(random_psd(3, &mut rng), random_psd(3, &mut rng)).unwrap();
        state.damp_and_invert(1.0).unwrap();
        let zeros = vec![M::zeros(3, 3)];
        kfac_step(
            &mut net,
            &zeros,
            std::slice::from_ref(&state),
            &KfacConfig::default(),
        )
        .unwrap();
        assert_eq!(net, before);
        let fresh = KfacLayerState::new(3, 3);
        assert!(matches!(
            kfac_step(&mut net, &zeros, &[fresh], &KfacConfig::default()),
            Err(OclError::StateMissing(0))
        ));
        assert!(matches!(
            kfac_step(&mut net, &zeros, &[], &KfacConfig::default()),
            Err(OclError::StateMissing(0))
        ));
    }

    #[test]
    fn tiny_layer_direction_matches_dense_solve() {
        // 2 outputs × (2 inputs + bias)
        let mut rng = Rng::new(10);
        let net = Network::<f64>::mlp(&[2, 2], &mut rng).unwrap();
        let x = random(1, 2, &mut rng);
        let (_, grads, caches) = loss_and_grads(&net, &x, &[1]).unwrap();
        let mut s = KfacLayerState::new(3, 2);
        s.update_factors(caches.into_iter().next().unwrap(), &KfacConfig::default())
            .unwrap();
        s.damp_and_invert(1.0).unwrap();
        let dir = s.precondition(&grads[0]).unwrap();
        let dense = solve_dense(
            &s.damped_kron().unwrap(),
            &M::column(&grads[0].vec_columns()),
        )
        .unwrap();
        let got = M::column(&dir.vec_columns());
        assert!(got.max_abs_diff(&dense) < 1e-8 * dense.max_abs().max(1.0));
    }

    #[test]
    fn single_sample_kfac_is_exact() {
        let mut rng = Rng::new(11);
        let net = Network::<f64>::mlp(&[3, 4, 3], &mut rng).unwrap();
        let x = random(1, 3, &mut rng);
        let fims = exact_empirical_fim(&net, &x, &[2]).unwrap();
        let (_, _, caches) = loss_and_grads(&net, &x, &[2]).unwrap();
        for (cache, fim) in caches.into_iter().zip(&fims) {
            let mut s = KfacLayerState::new(
                cache.input_h.cols(),
                cache.outgrad_g.as_ref().unwrap().cols(),
            );
            s.update_factors(cache, &KfacConfig::default()).unwrap();
            assert!(kron(&s.a_ema, &s.b_ema).max_abs_diff(fim) < 1e-10);
        }
    }

    #[test]
    fn exact_fim_edge_cases() {
        let net = Network::<f64>::zeros(&[2, 2]).unwrap();
        // zero weights still give nonzero softmax gradients; use a weight layer whose
        // gradient vanishes instead: a one-class network has softmax ≡ 1
        let one_class = Network::<f64>::zeros(&[2, 1]).unwrap();
        let x = M::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let fim = exact_empirical_fim(&one_class, &x, &[0, 0]).unwrap();
        assert_eq!(fim[0].max_abs(), 0.0);

        let x1 = x.select_rows(&[0]);
        let (_, grads, _) = loss_and_grads(&net, &x1, &[1]).unwrap();
        let v = grads[0].vec_columns();
        assert!(
            exact_empirical_fim(&net, &x1, &[1]).unwrap()[0].max_abs_diff(&outer(&v, &v)) < 1e-15
        );

        let mut rng = Rng::new(0);
        let big = Network::<f64>::mlp(&[20, 10], &mut rng).unwrap();
        assert!(matches!(
            exact_empirical_fim(&big, &M::zeros(1, 20), &[0]),
            Err(OclError::TooLarge {
                layer: 0,
                params: 210,
                ..
            })
        ));
    }

    #[test]
    fn quadratic_model_cases() {
        let mut rng = Rng::new(12);
        let g = vec![random(2, 3, &mut rng)];
        let mut ident = KfacLayerState::<f64>::new(3, 2);
        ident.damp_and_invert(1.0).unwrap();
        let zero = vec![M::zeros(2, 3)];
        assert_eq!(
            quadratic_model_value(&g, std::slice::from_ref(&ident), &zero, 1.25).unwrap(),
            1.25
        );

        let d = vec![random(2, 3, &mut rng)];
        let expected = 0.5 * d[0].dot(&d[0]).unwrap() + g[0].dot(&d[0]).unwrap() + 1.25;
        let got = quadratic_model_value(&g, std::slice::from_ref(&ident), &d, 1.25).unwrap();
        assert!((got - expected).abs() < 1e-14);

        // minimizer δ* = −F⁻¹g gives loss − ½ gᵀF⁻¹g
        let mut s =
            KfacLayerState::from_factors(random_psd(3, &mut rng), random_psd(2, &mut rng)).unwrap();
        s.damp_and_invert(0.5).unwrap();
        let nat = s.precondition(&g[0]).unwrap();
        let step = vec![nat.scale(-1.0)];
        let value = quadratic_model_value(&g, std::slice::from_ref(&s), &step, 2.0).unwrap();
        let gv = M::column(&g[0].vec_columns());
        let finv_g = solve_dense(&s.damped_kron().unwrap(), &gv).unwrap();
        let closed = 2.0 - 0.5 * gv.dot(&finv_g).unwrap();
        assert!((value - closed).abs() < 1e-10);

        assert!(matches!(
            quadratic_model_value(&g, std::slice::from_ref(&s), &[M::zeros(3, 3)], 0.0),
            Err(OclError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn large_damping_approaches_scaled_sgd() {
        let mut rng = Rng::new(13);
        let net = Network::<f64>::mlp(&[4, 5, 3], &mut rng).unwrap();
        let x = random(6, 4, &mut rng);
        let (_, grads, caches) = loss_and_grads(&net, &x, &[0, 1, 2, 0, 1, 2]).unwrap();
        let cfg = KfacConfig {
            damping: 1e6,
            ..KfacConfig::default()
        };
        let mut opt = Kfac::new(cfg, &net).unwrap();
        let mut stepped = net.clone();
        opt.step(&mut stepped, &grads, caches).unwrap();
        let dirs = natural_directions(&grads, opt.states()).unwrap();
        let (flat_d, flat_g) = (
            crate::network::flatten(&dirs),
            crate::network::flatten(&grads),
        );
        let dot: f64 = flat_d.iter().zip(&flat_g).map(|(a, b)| a * b).sum();
        let nd = flat_d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = flat_g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let angle = (dot / (nd * ng)).clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-3, "angle {angle}");
        assert!((nd / ng * 1e6 - 1.0).abs() < 1e-2);
    }
}
