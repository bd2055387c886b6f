//! Sample-quality measurements: Monte Carlo error against a known posterior,
//! exact and sampled moments of the gradient estimators, grid estimates of
//! the per-shard score constants `gamma_s^2` and `epsilon_s^2`, and held-out
//! log-likelihood curves.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::estimators::{cgdsgld_unchecked, draw_indices, dsgld_unchecked, EstimatorKind};
use crate::federation::{pooled_data, shard_probabilities, validate_shards, ChainTrace, Shard};
use crate::model::{AnalyticPosterior, DataPoint, ModelSpec};
use crate::rng::RandomStream;
use crate::surrogates::SurrogateSet;

/// Largest number of (shard, batch) outcomes enumerated by default.
pub const ENUMERATION_CAP: u128 = 1_000_000;

/// Largest parameter dimension accepted by [`grid_bound_constants`].
pub const MAX_GRID_DIM: usize = 3;

/// A function `phi` whose posterior expectation is estimated by the chain.
#[derive(Clone)]
pub enum TestFunction {
    /// `phi(theta) = theta`.
    Identity,
    /// `phi(theta) = theta * theta`, elementwise.
    SecondMoment,
    Custom {
        name: String,
        func: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    },
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TestFunction {
    pub fn custom(
        name: impl Into<String>,
        func: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self::Custom {
            name: name.into(),
            func: Arc::new(func),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Identity => "identity",
            Self::SecondMoment => "second_moment",
            Self::Custom { name, .. } => name,
        }
    }

    pub fn eval(&self, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Identity => theta.clone(),
            Self::SecondMoment => theta.component_mul(theta),
            Self::Custom { func, .. } => func(theta),
        }
    }

    /// `E[phi(theta)]` under a Gaussian posterior.
    pub fn posterior_expectation(&self, post: &AnalyticPosterior) -> Result<DVector<f64>> {
        match self {
            Self::Identity => Ok(post.mean.clone()),
            Self::SecondMoment => Ok(post.mean.component_mul(&post.mean) + post.covariance.diagonal()),
            Self::Custom { .. } => Err(Error::Unsupported("custom test function", "analytic expectation")),
        }
    }
}

/// One point of a curve indexed by the number of kept samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_samples: usize,
    pub value: f64,
}

fn checkpoints(len: usize, every: usize) -> Vec<usize> {
    let every = every.max(1);
    let mut out: Vec<usize> = (1..=len / every).map(|k| k * every).collect();
    if out.last() != Some(&len) && len > 0 {
        out.push(len);
    }
    out
}

fn per_chain_thetas(trace: &ChainTrace) -> Result<Vec<Vec<DVector<f64>>>> {
    if trace.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let chains: Vec<_> = trace.chain_ids().into_iter().map(|c| trace.thetas(c)).collect();
    let len = chains[0].len();
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::Format("replica chains have different lengths".into()));
    }
    Ok(chains)
}

/// Running Monte Carlo error `|mean_{t<=n} phi(theta_t) - truth|^2` at every
/// `every`-th kept sample (and the last). With several replica chains the
/// squared errors are averaged across chains.
pub fn mc_mse(trace: &ChainTrace, phi: &TestFunction, truth: &DVector<f64>, every: usize) -> Result<Vec<CurvePoint>> {
    let chains = per_chain_thetas(trace)?;
    let len = chains[0].len();
    let marks = checkpoints(len, every);
    let mut totals = vec![0.0; marks.len()];
    for thetas in &chains {
        let mut sum = DVector::zeros(truth.len());
        let mut k = 0;
        for (i, theta) in thetas.iter().enumerate() {
            let v = phi.eval(theta);
            check_dim(truth.len(), v.len())?;
            sum += v;
            if marks[k] == i + 1 {
                totals[k] += (&sum / (i + 1) as f64 - truth).norm_squared();
                k += 1;
            }
        }
    }
    let nc = chains.len() as f64;
    Ok(marks
        .into_iter()
        .zip(totals)
        .map(|(n_samples, t)| CurvePoint { n_samples, value: t / nc })
        .collect())
}

/// Running average of the per-datum held-out log-likelihood,
/// `(1/n) sum_{t<=n} (1/|H|) sum_{x in H} log p(x | theta_t)`, averaged over
/// replica chains.
pub fn avg_log_likelihood(
    trace: &ChainTrace,
    model: &ModelSpec,
    heldout: &[DataPoint],
    every: usize,
) -> Result<Vec<CurvePoint>> {
    if heldout.is_empty() {
        return Err(Error::InvalidConfig("held-out set is empty".into()));
    }
    for x in heldout {
        model.check_datum(x)?;
    }
    let chains = per_chain_thetas(trace)?;
    let len = chains[0].len();
    let marks = checkpoints(len, every);
    let h = heldout.len() as f64;
    let per_chain: Vec<Vec<f64>> = chains
        .par_iter()
        .map(|thetas| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(marks.len());
            let mut sum = 0.0;
            let mut k = 0;
            for (i, theta) in thetas.iter().enumerate() {
                model.check_theta(theta)?;
                sum += heldout.iter().map(|x| model.log_lik_unchecked(theta, x)).sum::<f64>() / h;
                if marks[k] == i + 1 {
                    out.push(sum / (i + 1) as f64);
                    k += 1;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let nc = per_chain.len() as f64;
    Ok(marks
        .iter()
        .enumerate()
        .map(|(k, &n_samples)| CurvePoint {
            n_samples,
            value: per_chain.iter().map(|c| c[k]).sum::<f64>() / nc,
        })
        .collect())
}

/// Mean and spread of an estimator over its own randomness at fixed `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorMoments {
    pub mean: DVector<f64>,
    /// Trace of the covariance.
    pub variance: f64,
    pub covariance: DMatrix<f64>,
}

/// Sampled moments with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledMoments {
    pub mean: DVector<f64>,
    pub variance: f64,
    /// Standard error of each mean component.
    pub mean_se: DVector<f64>,
    /// Standard error of `variance`.
    pub variance_se: f64,
    pub n_draws: usize,
}

struct Instance<'a> {
    model: &'a ModelSpec,
    kind: EstimatorKind,
    surrogates: Option<&'a SurrogateSet>,
    /// SGLD: one pooled shard with probability 1.
    shards: Vec<Shard>,
}

impl<'a> Instance<'a> {
    fn new(
        model: &'a ModelSpec,
        shards: &[Shard],
        kind: EstimatorKind,
        surrogates: Option<&'a SurrogateSet>,
        theta: &DVector<f64>,
        m: usize,
    ) -> Result<Self> {
        model.validate()?;
        kind.validate()?;
        validate_shards(shards, Some(model))?;
        model.check_theta(theta)?;
        if m == 0 {
            return Err(Error::InvalidConfig("mini-batch size must be positive".into()));
        }
        if let EstimatorKind::CgDsgld { .. } = kind {
            let set = surrogates.ok_or_else(|| Error::InvalidConfig("CG-DSGLD requires surrogates".into()))?;
            check_dim(model.dimension(), set.dim())?;
            if set.len() != shards.len() {
                return Err(Error::InvalidConfig(format!(
                    "{} surrogates for {} shards",
                    set.len(),
                    shards.len()
                )));
            }
        }
        let shards = match kind {
            EstimatorKind::Sgld => vec![Shard::new(0, pooled_data(shards), 1.0)],
            _ => shards.to_vec(),
        };
        Ok(Self {
            model,
            kind,
            surrogates,
            shards,
        })
    }

    fn eval(&self, theta: &DVector<f64>, s: usize, indices: &[usize]) -> DVector<f64> {
        let shard = &self.shards[s];
        match (self.kind, self.surrogates) {
            (EstimatorKind::CgDsgld { alpha }, Some(set)) => {
                cgdsgld_unchecked(self.model, theta, shard, indices, shard.prob(), set, alpha).vector
            }
            _ => dsgld_unchecked(self.model, theta, shard, indices, shard.prob()).vector,
        }
    }
}

/// `C(n + m - 1, m)`, saturating.
fn multiset_count(n: usize, m: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 0..m as u128 {
        c = match c.checked_mul(n as u128 + i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    c
}

/// Calls `f(indices, probability)` for every multiset of `m` draws with
/// replacement from `0..n`, indices non-decreasing.
fn for_each_multiset(n: usize, m: usize, mut f: impl FnMut(&[usize], f64)) {
    let log_norm = m as f64 * (n as f64).ln();
    let ln_fact: Vec<f64> = (0..=m)
        .scan(0.0, |acc, k| {
            if k > 0 {
                *acc += (k as f64).ln();
            }
            Some(*acc)
        })
        .collect();
    let mut idx = vec![0usize; m];
    loop {
        let mut log_w = ln_fact[m] - log_norm;
        let mut run = 1;
        for k in 1..=m {
            if k < m && idx[k] == idx[k - 1] {
                run += 1;
            } else {
                log_w -= ln_fact[run];
                run = 1;
            }
        }
        f(&idx, log_w.exp());
        let Some(pos) = (0..m).rev().find(|&k| idx[k] + 1 < n) else {
            return;
        };
        let v = idx[pos] + 1;
        idx[pos..].fill(v);
    }
}

/// Exact mean and covariance of an estimator at `theta` over the shard choice
/// and the with-replacement mini-batch, by enumeration. Fails with
/// [`Error::EnumerationCap`] above [`ENUMERATION_CAP`] outcomes.
pub fn estimator_moments_exact(
    model: &ModelSpec,
    shards: &[Shard],
    theta: &DVector<f64>,
    m: usize,
    kind: EstimatorKind,
    surrogates: Option<&SurrogateSet>,
) -> Result<EstimatorMoments> {
    estimator_moments_exact_capped(model, shards, theta, m, kind, surrogates, ENUMERATION_CAP)
}

#[allow(clippy::too_many_arguments)]
pub fn estimator_moments_exact_capped(
    model: &ModelSpec,
    shards: &[Shard],
    theta: &DVector<f64>,
    m: usize,
    kind: EstimatorKind,
    surrogates: Option<&SurrogateSet>,
    cap: u128,
) -> Result<EstimatorMoments> {
    let inst = Instance::new(model, shards, kind, surrogates, theta, m)?;
    let outcomes = inst
        .shards
        .iter()
        .fold(0u128, |acc, s| acc.saturating_add(multiset_count(s.len(), m)));
    if outcomes > cap {
        return Err(Error::EnumerationCap { outcomes, cap });
    }
    let d = theta.len();
    let mut mean = DVector::zeros(d);
    for (s, shard) in inst.shards.iter().enumerate() {
        for_each_multiset(shard.len(), m, |idx, w| {
            mean.axpy(shard.prob() * w, &inst.eval(theta, s, idx), 1.0);
        });
    }
    let mut covariance = DMatrix::zeros(d, d);
    for (s, shard) in inst.shards.iter().enumerate() {
        for_each_multiset(shard.len(), m, |idx, w| {
            let dev = inst.eval(theta, s, idx) - &mean;
            covariance.ger(shard.prob() * w, &dev, &dev, 1.0);
        });
    }
    Ok(EstimatorMoments {
        mean,
        variance: covariance.trace(),
        covariance,
    })
}

/// Monte Carlo moments from `n_draws` independent estimator draws.
#[allow(clippy::too_many_arguments)]
pub fn estimator_moments_sampled(
    model: &ModelSpec,
    shards: &[Shard],
    theta: &DVector<f64>,
    m: usize,
    kind: EstimatorKind,
    surrogates: Option<&SurrogateSet>,
    n_draws: usize,
    rng: &mut RandomStream,
) -> Result<SampledMoments> {
    if n_draws < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n_draws });
    }
    let inst = Instance::new(model, shards, kind, surrogates, theta, m)?;
    let probs = shard_probabilities(&inst.shards);
    let draws: Vec<DVector<f64>> = (0..n_draws)
        .map(|_| {
            let u = rng.uniform();
            let mut acc = 0.0;
            let s = probs
                .iter()
                .position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(probs.len() - 1);
            let idx = draw_indices(inst.shards[s].len(), m, rng);
            inst.eval(theta, s, &idx)
        })
        .collect();
    let n = n_draws as f64;
    let mean = draws.iter().fold(DVector::zeros(theta.len()), |acc, v| acc + v) / n;
    let sq: Vec<DVector<f64>> = draws.iter().map(|v| (v - &mean).map(|x| x * x)).collect();
    let var_comp = sq.iter().fold(DVector::zeros(theta.len()), |acc, v| acc + v) / (n - 1.0);
    let norms: Vec<f64> = sq.iter().map(|v| v.sum()).collect();
    let variance = var_comp.sum();
    let norm_mean = norms.iter().sum::<f64>() / n;
    let norm_var = norms.iter().map(|x| (x - norm_mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(SampledMoments {
        mean_se: var_comp.map(|v| (v / n).sqrt()),
        mean,
        variance,
        variance_se: (norm_var / n).sqrt(),
        n_draws,
    })
}

/// Axis-aligned box sampled at `resolution` points per axis, endpoints included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub resolution: usize,
}

impl GridSpec {
    /// `[lo, hi]^dim`.
    pub fn cube(lo: f64, hi: f64, dim: usize, resolution: usize) -> Self {
        Self {
            lower: vec![lo; dim],
            upper: vec![hi; dim],
            resolution,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Resolution whose grid contains this one's points.
    pub fn refined(&self) -> Self {
        Self {
            resolution: 2 * self.resolution.max(1) - 1,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::InvalidConfig("grid bounds differ in length".into()));
        }
        if self.resolution == 0 || self.lower.is_empty() {
            return Err(Error::InvalidConfig("grid is empty".into()));
        }
        if self.dim() > MAX_GRID_DIM {
            return Err(Error::Unsupported("grid bound constants", "dimension above 3"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u && l.is_finite() && u.is_finite())) {
            return Err(Error::InvalidConfig("grid needs finite lower <= upper".into()));
        }
        Ok(())
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        if self.resolution == 1 {
            return self.lower[axis];
        }
        let t = i as f64 / (self.resolution - 1) as f64;
        self.lower[axis] + (self.upper[axis] - self.lower[axis]) * t
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point number `k` in row-major order.
    pub fn point(&self, mut k: usize) -> DVector<f64> {
        let d = self.dim();
        let mut v = DVector::zeros(d);
        for axis in (0..d).rev() {
            v[axis] = self.coord(axis, k % self.resolution);
            k /= self.resolution;
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Per shard, `max_theta max_i |grad log p(x_i | theta)|^2`.
    pub gamma_sq: Vec<f64>,
    /// Per shard, `max_theta (1/N_s) sum_i |grad log p(x_i | theta) - grad log q_s(theta) / N_s|^2`.
    pub epsilon_sq: Vec<f64>,
    pub grid: GridSpec,
}

impl BoundConstants {
    /// Largest `epsilon_s^2 / gamma_s^2` over shards.
    pub fn max_ratio(&self) -> f64 {
        self.gamma_sq
            .iter()
            .zip(&self.epsilon_sq)
            .map(|(g, e)| e / g)
            .fold(0.0, f64::max)
    }
}

/// Grid estimates of the per-shard score constants. Both are maxima over the
/// grid points, so refining to a superset of points can only raise them.
pub fn grid_bound_constants(
    model: &ModelSpec,
    shards: &[Shard],
    surrogates: &SurrogateSet,
    grid: &GridSpec,
) -> Result<BoundConstants> {
    grid.validate()?;
    check_dim(model.dimension(), grid.dim())?;
    check_dim(model.dimension(), surrogates.dim())?;
    validate_shards(shards, Some(model))?;
    if surrogates.len() != shards.len() {
        return Err(Error::InvalidConfig(format!(
            "{} surrogates for {} shards",
            surrogates.len(),
            shards.len()
        )));
    }
    let d = grid.dim();
    let per_point = |k: usize| -> Vec<(f64, f64)> {
        let theta = grid.point(k);
        let mut g = DVector::zeros(d);
        shards
            .iter()
            .zip(surrogates.per_shard())
            .map(|(shard, q)| {
                let n = shard.len() as f64;
                let target = q.grad_unchecked(&theta) / n;
                let mut gamma = 0.0f64;
                let mut eps = 0.0;
                for x in shard.data() {
                    g.fill(0.0);
                    model.add_grad_log_lik(&theta, x, 1.0, &mut g);
                    gamma = gamma.max(g.norm_squared());
                    eps += (&g - &target).norm_squared();
                }
                (gamma, eps / n)
            })
            .collect()
    };
    let zero = vec![(0.0, 0.0); shards.len()];
    let maxima = (0..grid.len())
        .into_par_iter()
        .map(per_point)
        .reduce(
            || zero.clone(),
            |a, b| a.iter().zip(&b).map(|(x, y)| (x.0.max(y.0), x.1.max(y.1))).collect(),
        );
    Ok(BoundConstants {
        gamma_sq: maxima.iter().map(|m| m.0).collect(),
        epsilon_sq: maxima.iter().map(|m| m.1).collect(),
        grid: grid.clone(),
    })
}
