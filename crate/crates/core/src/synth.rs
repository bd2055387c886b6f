//! Synthetic data sets used by the experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{make_shards, Shard, ShardStrategy};
use crate::model::{DataPoint, ModelSpec};
use crate::rng::RandomStream;

/// Gaussian blobs: one 2-D cluster per shard, unit covariance, means uniform
/// on `[-half_width, half_width]^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobsParams {
    pub n_shards: usize,
    pub shard_size: usize,
    pub half_width: f64,
}

impl Default for BlobsParams {
    fn default() -> Self {
        Self {
            n_shards: 10,
            shard_size: 200,
            half_width: 6.0,
        }
    }
}

pub struct Blobs {
    pub shards: Vec<Shard>,
    pub means: Vec<Vec<f64>>,
}

pub fn blobs_2d(params: &BlobsParams, rng: &mut RandomStream) -> Result<Blobs> {
    if !(params.half_width >= 0.0 && params.half_width.is_finite()) {
        return Err(Error::InvalidConfig("half width must be finite and non-negative".into()));
    }
    let w = params.half_width;
    let means: Vec<Vec<f64>> = (0..params.n_shards)
        .map(|_| (0..2).map(|_| w * (2.0 * rng.uniform() - 1.0)).collect())
        .collect();
    let strategy = ShardStrategy::ByMeans {
        means: means.clone(),
        size: params.shard_size,
    };
    let shards = make_shards(&[], &strategy, params.n_shards, rng)?;
    Ok(Blobs { shards, means })
}

/// Coin-toss shards with exactly `heads[s]` ones out of `tosses` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoinParams {
    pub heads: Vec<usize>,
    pub tosses: usize,
}

impl Default for CoinParams {
    fn default() -> Self {
        Self {
            heads: vec![1, 5, 9],
            tosses: 10,
        }
    }
}

pub fn bernoulli_coins(params: &CoinParams) -> Result<Vec<Shard>> {
    if params.heads.is_empty() || params.tosses == 0 {
        return Err(Error::InvalidConfig("need at least one shard with one toss".into()));
    }
    if let Some(k) = params.heads.iter().find(|&&k| k > params.tosses) {
        return Err(Error::InvalidConfig(format!("{k} heads out of {} tosses", params.tosses)));
    }
    let f = 1.0 / params.heads.len() as f64;
    Ok(params
        .heads
        .iter()
        .enumerate()
        .map(|(s, &k)| Shard::new(s, (0..params.tosses).map(|i| DataPoint::toss(i < k)).collect(), f))
        .collect())
}

/// Linear regression with two feature clusters and label-skewed shards.
///
/// Each point has an intercept and `dimension - 1` Gaussian features centred
/// at `+separation` or `-separation` (the cluster is the point's label). The
/// response is `beta' x + nonlinearity * x_1^2 + noise`, so the best linear
/// fit differs between clusters. Shards are filled with
/// [`ShardStrategy::LabelBeta`]; the held-out set is drawn from the full
/// mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinRegParams {
    pub dimension: usize,
    pub n_shards: usize,
    pub shard_size: usize,
    pub heldout: usize,
    pub noise_scale: f64,
    pub prior_precision: f64,
    pub separation: f64,
    pub nonlinearity: f64,
    pub beta_a: f64,
    pub beta_b: f64,
}

impl Default for LinRegParams {
    fn default() -> Self {
        Self {
            dimension: 3,
            n_shards: 10,
            shard_size: 100,
            heldout: 250,
            noise_scale: 1.0,
            prior_precision: 1.0,
            separation: 2.0,
            nonlinearity: 0.5,
            beta_a: 0.5,
            beta_b: 0.5,
        }
    }
}

pub struct LinRegData {
    pub model: ModelSpec,
    pub shards: Vec<Shard>,
    pub heldout: Vec<DataPoint>,
    pub beta: Vec<f64>,
}

pub fn linreg_synthetic(params: &LinRegParams, rng: &mut RandomStream) -> Result<LinRegData> {
    if params.dimension < 2 {
        return Err(Error::InvalidConfig("need an intercept and at least one feature".into()));
    }
    let model = ModelSpec::bayes_lin_reg(params.dimension, params.prior_precision, params.noise_scale);
    model.validate()?;
    let beta: Vec<f64> = (0..params.dimension).map(|_| rng.standard_normal()).collect();
    let draw = |rng: &mut RandomStream| {
        let positive = rng.uniform() < 0.5;
        let centre = if positive { params.separation } else { -params.separation };
        let mut x = vec![1.0];
        x.extend((1..params.dimension).map(|_| centre + rng.standard_normal()));
        let mean: f64 = beta.iter().zip(&x).map(|(b, v)| b * v).sum::<f64>() + params.nonlinearity * x[1] * x[1];
        DataPoint::regression(x, mean + params.noise_scale * rng.standard_normal()).with_label(positive)
    };
    let pooled: Vec<DataPoint> = (0..params.n_shards * params.shard_size).map(|_| draw(rng)).collect();
    let heldout = (0..params.heldout).map(|_| draw(rng)).collect();
    let strategy = ShardStrategy::LabelBeta {
        a: params.beta_a,
        b: params.beta_b,
        shard_size: None,
    };
    let shards = make_shards(&pooled, &strategy, params.n_shards, rng)?;
    Ok(LinRegData {
        model,
        shards,
        heldout,
        beta,
    })
}
