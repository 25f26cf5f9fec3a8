//! First-order and natural-gradient optimizers.

pub mod kfac;
pub mod sgd;

pub use kfac::{
    exact_empirical_fim, kfac_step, natural_directions, quadratic_model_value, FisherKind, Kfac,
    KfacConfig, KfacLayerState,
};
pub use sgd::{sgd_step, SgdConfig};

use crate::error::Result;
use crate::linalg::DenseMatrix;
use crate::network::{LayerCache, Network};
use crate::scalar::Scalar;

/// The optimizer a training loop drives.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd(SgdConfig<T>),
    Kfac(Kfac<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn learning_rate(&self) -> T {
        match self {
            Optimizer::Sgd(cfg) => cfg.learning_rate,
            Optimizer::Kfac(k) => k.config().learning_rate,
        }
    }

    /// Applies one update. `caches` are consumed by KFAC and ignored by SGD.
    pub fn step(
        &mut self,
        net: &mut Network<T>,
        grads: &[DenseMatrix<T>],
        caches: Vec<LayerCache<T>>,
    ) -> Result<()> {
        match self {
            Optimizer::Sgd(cfg) => sgd_step(net, grads, cfg),
            Optimizer::Kfac(k) => k.step(net, grads, caches),
        }
    }
}
