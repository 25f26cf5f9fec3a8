use crate::error::{OclError, Result};
use crate::linalg::DenseMatrix;
use crate::network::Network;
use crate::scalar::Scalar;

/// Plain stochastic gradient descent: no momentum, no weight decay, no schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig<T> {
    pub learning_rate: T,
}

impl<T: Scalar> SgdConfig<T> {
    pub fn new(learning_rate: T) -> Result<Self> {
        if !(learning_rate > T::zero()) {
            return Err(OclError::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self { learning_rate })
    }
}

impl<T: Scalar> Default for SgdConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::lit(0.1),
        }
    }
}

/// `w ← w − α · grad` for every layer.
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &[DenseMatrix<T>],
    cfg: &SgdConfig<T>,
) -> Result<()> {
    net.apply_update(cfg.learning_rate, grads)
}
