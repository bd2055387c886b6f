//! Stochastic gradient estimators of `grad log p(theta | x)`.
//!
//! * SGLD draws a mini-batch from the pooled data and rescales by `N / m`.
//! * DSGLD draws the batch inside the shard picked by the scheduler and
//!   rescales by `N_s / (f_s m)`, which keeps it unbiased over the shard choice.
//! * CG-DSGLD adds the conducive gradient
//!   `g_s(theta) = grad log q(theta) - grad log q_s(theta) / f_s`, a
//!   zero-mean term built from Gaussian surrogates of the shard likelihoods,
//!   optionally scaled by `alpha`.
//!
//! Mini-batches are drawn uniformly with replacement.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::federation::Shard;
use crate::model::{DataPoint, ModelSpec};
use crate::rng::RandomStream;
use crate::surrogates::{GaussianSurrogate, SurrogateSet};

/// Indices into one shard's data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniBatch {
    pub shard_id: usize,
    pub indices: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    Sgld,
    Dsgld,
    #[serde(rename = "cgdsgld")]
    CgDsgld {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

fn default_alpha() -> f64 {
    1.0
}

impl EstimatorKind {
    pub fn cgdsgld() -> Self {
        Self::CgDsgld { alpha: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgld => "sgld",
            Self::Dsgld => "dsgld",
            Self::CgDsgld { .. } => "cgdsgld",
        }
    }

    pub fn needs_surrogates(&self) -> bool {
        matches!(self, Self::CgDsgld { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::CgDsgld { alpha } if !(alpha >= 0.0 && alpha.is_finite()) => Err(
                Error::InvalidConfig(format!("alpha must be non-negative, got {alpha}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Terms of an estimate. `vector` is their sum, accumulated in this order.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateBreakdown {
    pub prior: DVector<f64>,
    /// Rescaled mini-batch likelihood gradient.
    pub likelihood: DVector<f64>,
    /// Conducive term, already multiplied by `alpha`.
    pub conducive: Option<DVector<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub vector: DVector<f64>,
    pub components: Option<EstimateBreakdown>,
}

impl GradientEstimate {
    fn assemble(prior: DVector<f64>, likelihood: DVector<f64>, conducive: Option<DVector<f64>>) -> Self {
        let mut vector = &prior + &likelihood;
        if let Some(c) = &conducive {
            vector += c;
        }
        Self {
            vector,
            components: Some(EstimateBreakdown {
                prior,
                likelihood,
                conducive,
            }),
        }
    }
}

/// `m` indices drawn uniformly with replacement from the shard.
pub fn sample_minibatch(shard: &Shard, m: usize, rng: &mut RandomStream) -> Result<MiniBatch> {
    if shard.is_empty() {
        return Err(Error::EmptyShard(shard.id()));
    }
    if m == 0 {
        return Err(Error::InvalidConfig("mini-batch size must be positive".into()));
    }
    Ok(MiniBatch {
        shard_id: shard.id(),
        indices: draw_indices(shard.len(), m, rng),
    })
}

pub(crate) fn draw_indices(n: usize, m: usize, rng: &mut RandomStream) -> Vec<usize> {
    (0..m).map(|_| rng.index(n)).collect()
}

/// `scale * sum_{i in batch} grad log p(x_i | theta)`, summed first.
pub(crate) fn scaled_batch_gradient(
    model: &ModelSpec,
    theta: &DVector<f64>,
    data: &[DataPoint],
    indices: &[usize],
    scale: f64,
) -> DVector<f64> {
    let mut sum = DVector::zeros(theta.len());
    for &i in indices {
        model.add_grad_log_lik(theta, &data[i], 1.0, &mut sum);
    }
    sum * scale
}

fn check_batch(data_len: usize, batch: &MiniBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty mini-batch".into()));
    }
    if let Some(&bad) = batch.indices.iter().find(|&&i| i >= data_len) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: data_len,
        });
    }
    Ok(())
}

fn check_prob(f_s: f64) -> Result<()> {
    if f_s > 0.0 && f_s <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidProbabilities(format!(
            "shard probability must lie in (0, 1], got {f_s}"
        )))
    }
}

/// `grad log p(theta) + (N / m) sum_batch grad log p(x | theta)` over pooled data.
pub fn sgld_estimate(
    model: &ModelSpec,
    theta: &DVector<f64>,
    data: &[DataPoint],
    batch: &MiniBatch,
) -> Result<GradientEstimate> {
    model.check_theta(theta)?;
    check_batch(data.len(), batch)?;
    let scale = data.len() as f64 / batch.len() as f64;
    Ok(sgld_unchecked(model, theta, data, &batch.indices, scale))
}

fn sgld_unchecked(
    model: &ModelSpec,
    theta: &DVector<f64>,
    data: &[DataPoint],
    indices: &[usize],
    scale: f64,
) -> GradientEstimate {
    let mut prior = DVector::zeros(theta.len());
    model.add_grad_log_prior(theta, &mut prior);
    let lik = scaled_batch_gradient(model, theta, data, indices, scale);
    GradientEstimate::assemble(prior, lik, None)
}

/// `grad log p(theta) + N_s / (f_s m) sum_batch grad log p(x | theta)`.
pub fn dsgld_estimate(
    model: &ModelSpec,
    theta: &DVector<f64>,
    shard: &Shard,
    batch: &MiniBatch,
    f_s: f64,
) -> Result<GradientEstimate> {
    model.check_theta(theta)?;
    check_prob(f_s)?;
    check_batch(shard.len(), batch)?;
    Ok(dsgld_unchecked(model, theta, shard, &batch.indices, f_s))
}

pub(crate) fn dsgld_unchecked(
    model: &ModelSpec,
    theta: &DVector<f64>,
    shard: &Shard,
    indices: &[usize],
    f_s: f64,
) -> GradientEstimate {
    let scale = shard.len() as f64 / (f_s * indices.len() as f64);
    sgld_unchecked(model, theta, shard.data(), indices, scale)
}

/// `grad log q(theta) - grad log q_s(theta) / f_s`.
pub fn conducive_gradient(
    surrogates: &SurrogateSet,
    s: usize,
    f_s: f64,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let q_s = surrogates.shard(s)?;
    check_dim(surrogates.dim(), theta.len())?;
    check_prob(f_s)?;
    Ok(conducive_unchecked(surrogates.product(), q_s, f_s, theta))
}

fn conducive_unchecked(
    product: &GaussianSurrogate,
    q_s: &GaussianSurrogate,
    f_s: f64,
    theta: &DVector<f64>,
) -> DVector<f64> {
    let mut g = product.grad_unchecked(theta);
    g.axpy(-1.0 / f_s, &q_s.grad_unchecked(theta), 1.0);
    g
}

/// DSGLD estimate plus `alpha` times the conducive gradient of the shard.
/// With `alpha == 0` the conducive term is skipped, so the result is
/// bit-for-bit the DSGLD estimate.
#[allow(clippy::too_many_arguments)]
pub fn cgdsgld_estimate(
    model: &ModelSpec,
    theta: &DVector<f64>,
    shard: &Shard,
    batch: &MiniBatch,
    f_s: f64,
    surrogates: &SurrogateSet,
    alpha: f64,
) -> Result<GradientEstimate> {
    model.check_theta(theta)?;
    check_prob(f_s)?;
    check_batch(shard.len(), batch)?;
    check_dim(model.dimension(), surrogates.dim())?;
    surrogates.shard(shard.id())?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be non-negative, got {alpha}")));
    }
    Ok(cgdsgld_unchecked(model, theta, shard, &batch.indices, f_s, surrogates, alpha))
}

pub(crate) fn cgdsgld_unchecked(
    model: &ModelSpec,
    theta: &DVector<f64>,
    shard: &Shard,
    indices: &[usize],
    f_s: f64,
    surrogates: &SurrogateSet,
    alpha: f64,
) -> GradientEstimate {
    let base = dsgld_unchecked(model, theta, shard, indices, f_s);
    if alpha == 0.0 {
        return base;
    }
    let q_s = &surrogates.per_shard()[shard.id()];
    let g = conducive_unchecked(surrogates.product(), q_s, f_s, theta) * alpha;
    let parts = base.components.expect("assembled with breakdown");
    GradientEstimate::assemble(parts.prior, parts.likelihood, Some(g))
}

/// Dispatches on the estimator kind for a batch drawn within `shard`.
/// For [`EstimatorKind::Sgld`] the shard is treated as the pooled data set.
pub fn estimate(
    kind: &EstimatorKind,
    model: &ModelSpec,
    theta: &DVector<f64>,
    shard: &Shard,
    batch: &MiniBatch,
    surrogates: Option<&SurrogateSet>,
) -> Result<GradientEstimate> {
    match *kind {
        EstimatorKind::Sgld => sgld_estimate(model, theta, shard.data(), batch),
        EstimatorKind::Dsgld => dsgld_estimate(model, theta, shard, batch, shard.prob()),
        EstimatorKind::CgDsgld { alpha } => {
            let set = surrogates.ok_or_else(|| {
                Error::InvalidConfig("CG-DSGLD requires surrogates".into())
            })?;
            cgdsgld_estimate(model, theta, shard, batch, shard.prob(), set, alpha)
        }
    }
}
