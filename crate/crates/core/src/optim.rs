//! Stochastic gradient descent with heavy-ball momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl SgdConfig {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Invalid(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self { lr, momentum })
    }
}

/// Optimizer state. Velocity buffers exist exactly when `momentum > 0`, one
/// per parameter with the parameter's shape.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f32> {
    lr: T,
    momentum: T,
    velocity: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new<'s>(config: SgdConfig, shapes: impl IntoIterator<Item = &'s [usize]>) -> Result<Self> {
        let config = SgdConfig::new(config.lr, config.momentum)?;
        let velocity = (config.momentum > 0.0)
            .then(|| shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect());
        Ok(Self {
            lr: T::of(config.lr),
            momentum: T::of(config.momentum),
            velocity,
        })
    }

    pub fn velocity(&self) -> Option<&[Tensor<T>]> {
        self.velocity.as_deref()
    }

    /// `v <- momentum * v + g; p <- p - lr * v` (or `p <- p - lr * g` without momentum).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(v) = &self.velocity {
            if v.len() != params.len() {
                return Err(Error::Invalid(format!(
                    "optimizer tracks {} parameters, step got {}",
                    v.len(),
                    params.len()
                )));
            }
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or(Error::MissingGradient(i))?;
            if g.shape() != p.shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.expect("checked above");
            match &mut self.velocity {
                Some(vel) => {
                    let v = vel[i].data_mut();
                    for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        *vv = self.momentum * *vv + gv;
                        *pv -= self.lr * *vv;
                    }
                }
                None => {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
        }
        Ok(())
    }
}
