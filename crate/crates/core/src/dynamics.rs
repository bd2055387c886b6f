//! The Langevin transition kernel shared by SGLD, DSGLD and CG-DSGLD.
//!
//! One step moves the chain by half a step size along the gradient estimate
//! and adds isotropic Gaussian noise with variance equal to the step size:
//!
//! ```text
//! theta' = theta + (h_t / 2) * estimate + eta,   eta ~ N(0, h_t I)
//! ```
//!
//! There is no accept/reject correction. Constrained models are projected back
//! into their domain after the noise is added.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{ModelSpec, ParamVector};
use crate::rng::RandomStream;

/// Step-size schedule. Steps are numbered from 1, so the first update of a
/// fresh chain uses `value(1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { h: f64 },
    /// `h_t = a * (b + t)^(-gamma)`
    PolyDecay { a: f64, b: f64, gamma: f64 },
}

impl StepSchedule {
    pub fn constant(h: f64) -> Self {
        Self::Constant { h }
    }

    pub fn value(&self, t: u64) -> f64 {
        match *self {
            Self::Constant { h } => h,
            Self::PolyDecay { a, b, gamma } => a * (b + t as f64).powf(-gamma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Constant { h } if h > 0.0 && h.is_finite() => Ok(()),
            Self::Constant { h } => Err(Error::InvalidConfig(format!(
                "constant step size must be positive, got {h}"
            ))),
            Self::PolyDecay { a, b, gamma } => {
                if !(a > 0.0 && a.is_finite()) || !(b >= 0.0 && b.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "decay schedule needs a > 0 and b >= 0, got a={a}, b={b}"
                    )));
                }
                if !(gamma > 0.5 && gamma <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "decay exponent must lie in (0.5, 1], got {gamma}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// A chain: its position, how many steps it has taken and its own random stream.
#[derive(Clone, Debug)]
pub struct ChainState {
    theta: ParamVector,
    t: u64,
    rng: RandomStream,
}

impl ChainState {
    pub fn new(theta: ParamVector, rng: RandomStream) -> Self {
        Self { theta, t: 0, rng }
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    /// Number of steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn rng(&self) -> &RandomStream {
        &self.rng
    }

    pub fn rng_mut(&mut self) -> &mut RandomStream {
        &mut self.rng
    }

    /// One Langevin step with noise drawn from the chain's stream.
    pub fn step(
        &mut self,
        estimate: &DVector<f64>,
        schedule: &StepSchedule,
        model: &ModelSpec,
    ) -> Result<()> {
        let h = schedule.value(self.t + 1);
        let scale = h.sqrt();
        let d = self.theta.dim();
        let rng = &mut self.rng;
        let noise = DVector::from_fn(d, |_, _| scale * rng.standard_normal());
        self.step_with_noise(estimate, h, &noise, model)
    }

    /// One Langevin step with caller-supplied noise `eta` (already scaled).
    pub fn step_with_noise(
        &mut self,
        estimate: &DVector<f64>,
        h: f64,
        noise: &DVector<f64>,
        model: &ModelSpec,
    ) -> Result<()> {
        check_dim(self.theta.dim(), estimate.len())?;
        check_dim(self.theta.dim(), noise.len())?;
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::NonFinite {
                step: self.t + 1,
                what: format!("step size {h}"),
            });
        }
        if let Some(i) = estimate.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: self.t + 1,
                what: format!("gradient estimate component {i} is {}", estimate[i]),
            });
        }
        let theta = self.theta.as_vector_mut();
        theta.axpy(0.5 * h, estimate, 1.0);
        *theta += noise;
        model.project(theta);
        if !self.theta.is_finite() {
            return Err(Error::NonFinite {
                step: self.t + 1,
                what: "chain state".into(),
            });
        }
        self.t += 1;
        Ok(())
    }
}
