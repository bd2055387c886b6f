//! Gaussian surrogates for per-shard likelihoods.
//!
//! Each shard's likelihood `p(x_s | theta)` is approximated by a Gaussian
//! `q_s`, stored in precision form. Products of Gaussians are Gaussians whose
//! precisions add, so the surrogate of the full likelihood `q = prod_s q_s`
//! costs one matrix-vector product to differentiate no matter how many shards
//! contribute.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ChainState, StepSchedule};
use crate::error::{check_dim, Error, Result};
use crate::federation::Shard;
use crate::model::{normal_equations, DataPoint, ModelSpec, ParamVector};
use crate::rng::RandomStream;

/// Default diagonal jitter for sample covariances and rank-deficient designs.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// `N(mean, precision^-1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSurrogate {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    diagonal_only: bool,
}

impl GaussianSurrogate {
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>, diagonal_only: bool) -> Result<Self> {
        let d = mean.len();
        check_dim(d, precision.nrows())?;
        check_dim(d, precision.ncols())?;
        let scale = precision.amax().max(f64::MIN_POSITIVE);
        if (&precision - precision.transpose()).amax() > 1e-12 * scale {
            return Err(Error::NotPositiveDefinite("precision is not symmetric".into()));
        }
        if diagonal_only {
            for i in 0..d {
                for j in 0..d {
                    if i != j && precision[(i, j)] != 0.0 {
                        return Err(Error::NotPositiveDefinite(
                            "diagonal surrogate has off-diagonal entries".into(),
                        ));
                    }
                }
            }
        }
        if precision.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("surrogate precision".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("surrogate mean is not finite".into()));
        }
        Ok(Self {
            mean,
            precision,
            diagonal_only,
        })
    }

    /// Isotropic surrogate `N(mean, I / precision)`.
    pub fn isotropic(mean: DVector<f64>, precision: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * precision, true)
    }

    pub fn from_covariance(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        diagonal_only: bool,
    ) -> Result<Self> {
        let precision = covariance
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("surrogate covariance".into()))?
            .inverse();
        Self::new(mean, symmetrize(precision), diagonal_only)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn diagonal_only(&self) -> bool {
        self.diagonal_only
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.precision
            .clone()
            .cholesky()
            .expect("validated at construction")
            .inverse()
    }

    /// Normalized log-density.
    pub fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        let chol = self
            .precision
            .clone()
            .cholesky()
            .expect("validated at construction");
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let r = theta - &self.mean;
        let quad = r.dot(&(&self.precision * &r));
        let d = self.dim() as f64;
        Ok(-0.5 * quad + 0.5 * log_det - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
    }

    /// `-precision * (theta - mean)`.
    pub fn grad_log_density(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), theta.len())?;
        Ok(self.grad_unchecked(theta))
    }

    pub(crate) fn grad_unchecked(&self, theta: &DVector<f64>) -> DVector<f64> {
        -(&self.precision * (theta - &self.mean))
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Product of Gaussian factors: precisions add, and the mean is the
/// precision-weighted combination of the factor means.
pub fn product_of_surrogates(qs: &[GaussianSurrogate]) -> Result<GaussianSurrogate> {
    let first = qs
        .first()
        .ok_or_else(|| Error::InvalidConfig("product of zero surrogates".into()))?;
    let d = first.dim();
    let mut precision = DMatrix::zeros(d, d);
    let mut info = DVector::zeros(d);
    for q in qs {
        check_dim(d, q.dim())?;
        precision += &q.precision;
        info += &q.precision * &q.mean;
    }
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("product precision".into()))?;
    let mean = chol.solve(&info);
    let diagonal_only = qs.iter().all(|q| q.diagonal_only);
    GaussianSurrogate::new(mean, precision, diagonal_only)
}

/// Per-shard surrogates together with their cached product.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateSet {
    per_shard: Vec<GaussianSurrogate>,
    product: GaussianSurrogate,
}

impl SurrogateSet {
    pub fn new(per_shard: Vec<GaussianSurrogate>) -> Result<Self> {
        let product = product_of_surrogates(&per_shard)?;
        Ok(Self { per_shard, product })
    }

    /// Accepts a precomputed product after checking it against the factors.
    pub fn with_product(per_shard: Vec<GaussianSurrogate>, product: GaussianSurrogate) -> Result<Self> {
        let set = Self { per_shard, product };
        set.check_product(1e-8)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.per_shard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_shard.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.product.dim()
    }

    pub fn shard(&self, s: usize) -> Result<&GaussianSurrogate> {
        self.per_shard.get(s).ok_or(Error::IndexOutOfRange {
            index: s,
            len: self.per_shard.len(),
        })
    }

    pub fn per_shard(&self) -> &[GaussianSurrogate] {
        &self.per_shard
    }

    pub fn product(&self) -> &GaussianSurrogate {
        &self.product
    }

    /// Verifies the cached product against its factors, relative to the
    /// largest entry involved.
    pub fn check_product(&self, tol: f64) -> Result<()> {
        let d = self.product.dim();
        let mut precision = DMatrix::zeros(d, d);
        let mut info = DVector::zeros(d);
        for q in &self.per_shard {
            check_dim(d, q.dim())?;
            precision += &q.precision;
            info += &q.precision * &q.mean;
        }
        let p_err = (&precision - &self.product.precision).amax() / precision.amax().max(1.0);
        let lhs = &self.product.precision * &self.product.mean;
        let m_err = (&lhs - &info).amax() / info.amax().max(1.0);
        if p_err > tol || m_err > tol {
            return Err(Error::NotPositiveDefinite(format!(
                "cached product disagrees with factors (precision {p_err:.3e}, mean {m_err:.3e})"
            )));
        }
        Ok(())
    }
}

/// Gaussian fitted to samples by moment matching: sample mean and unbiased
/// sample covariance plus `jitter * I`. The diagonal variant drops
/// off-diagonal covariance before inverting.
pub fn fit_from_samples(
    samples: &[ParamVector],
    diagonal_only: bool,
    jitter: f64,
) -> Result<GaussianSurrogate> {
    let d = samples.first().map(ParamVector::dim).unwrap_or(0);
    let needed = if diagonal_only { 2 } else { d + 1 }.max(2);
    if samples.len() < needed {
        return Err(Error::TooFewSamples {
            needed,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        check_dim(d, s.dim())?;
        mean += s.as_vector();
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let r = s.as_vector() - &mean;
        cov.ger(1.0, &r, &r, 1.0);
    }
    cov /= n - 1.0;
    if diagonal_only {
        cov = DMatrix::from_diagonal(&cov.diagonal());
    }
    for i in 0..d {
        cov[(i, i)] += jitter;
    }
    let chol = cov.clone().cholesky().ok_or_else(|| {
        Error::NotPositiveDefinite(format!("sample covariance is singular (jitter {jitter})"))
    })?;
    let precision = if diagonal_only {
        DMatrix::from_diagonal(&cov.diagonal().map(|v| 1.0 / v))
    } else {
        symmetrize(chol.inverse())
    };
    GaussianSurrogate::new(mean, precision, diagonal_only)
}

/// Which data size sets the precision of the Gaussian-mean surrogate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "snake_case")]
pub enum PrecisionScale {
    /// `N_s * I`, the exact curvature of the shard likelihood.
    #[default]
    ShardSize,
    /// `N * I` with `N` the pooled data size.
    TotalData(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticSurrogateOptions {
    #[serde(default)]
    pub precision_scale: PrecisionScale,
    /// Added to `X'X` only when the design is rank deficient.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

impl Default for AnalyticSurrogateOptions {
    fn default() -> Self {
        Self {
            precision_scale: PrecisionScale::ShardSize,
            jitter: DEFAULT_JITTER,
        }
    }
}

/// Closed-form surrogate of a shard likelihood.
///
/// Gaussian mean: centred on the shard sample mean, isotropic precision set by
/// [`PrecisionScale`]. Linear regression: precision `X_s'X_s / sigma^2`
/// centred on the least-squares fit `(X_s'X_s)^-1 X_s'y_s`, which is the shard
/// likelihood itself.
pub fn analytic_surrogate(
    model: &ModelSpec,
    data: &[DataPoint],
    opts: &AnalyticSurrogateOptions,
) -> Result<GaussianSurrogate> {
    if data.is_empty() {
        return Err(Error::EmptyShard(0));
    }
    for x in data {
        model.check_datum(x)?;
    }
    match *model {
        ModelSpec::BernoulliCoin => Err(Error::Unsupported(model.name(), "analytic surrogate")),
        ModelSpec::GaussianMean { dimension } => {
            let mut mean = DVector::zeros(dimension);
            for x in data {
                mean += DVector::from_column_slice(&x.features);
            }
            mean /= data.len() as f64;
            let n = match opts.precision_scale {
                PrecisionScale::ShardSize => data.len(),
                PrecisionScale::TotalData(n) => n,
            };
            if n == 0 {
                return Err(Error::InvalidConfig("surrogate precision scale is zero".into()));
            }
            GaussianSurrogate::isotropic(mean, n as f64)
        }
        ModelSpec::BayesLinReg {
            dimension,
            noise_scale,
            ..
        } => {
            let (mut xtx, xty) = normal_equations(dimension, data);
            let chol = match xtx.clone().cholesky() {
                Some(c) => c,
                None if opts.jitter > 0.0 => {
                    for i in 0..dimension {
                        xtx[(i, i)] += opts.jitter;
                    }
                    xtx.clone().cholesky().ok_or_else(|| {
                        Error::NotPositiveDefinite("design matrix even after jitter".into())
                    })?
                }
                None => {
                    return Err(Error::NotPositiveDefinite(
                        "rank-deficient design matrix".into(),
                    ))
                }
            };
            let mean = chol.solve(&xty);
            let precision = xtx / (noise_scale * noise_scale);
            GaussianSurrogate::new(mean, precision, false)
        }
    }
}

/// Analytic surrogates for every shard.
pub fn analytic_surrogate_set(
    model: &ModelSpec,
    shards: &[Shard],
    opts: &AnalyticSurrogateOptions,
) -> Result<SurrogateSet> {
    let qs = shards
        .iter()
        .map(|s| {
            analytic_surrogate(model, s.data(), opts).map_err(|e| match e {
                Error::EmptyShard(_) => Error::EmptyShard(s.id()),
                e => e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SurrogateSet::new(qs)
}

/// SGLD settings for fitting a surrogate from shard-local samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalFitConfig {
    pub schedule: StepSchedule,
    pub batch_size: usize,
    pub burn_in: usize,
    pub thinning: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

impl LocalFitConfig {
    pub fn new(schedule: StepSchedule, batch_size: usize) -> Self {
        Self {
            schedule,
            batch_size,
            burn_in: 1000,
            thinning: 10,
            init: None,
            jitter: DEFAULT_JITTER,
        }
    }
}

/// Runs SGLD on the shard's likelihood alone (no prior), keeps `n_samples`
/// states after burn-in and thinning, and fits a Gaussian to them.
pub fn local_sgld_fit(
    model: &ModelSpec,
    shard: &Shard,
    cfg: &LocalFitConfig,
    n_samples: usize,
    diagonal_only: bool,
    rng: RandomStream,
) -> Result<GaussianSurrogate> {
    let d = model.dimension();
    let needed = if diagonal_only { 2 } else { d + 1 }.max(2);
    if n_samples < needed {
        return Err(Error::TooFewSamples {
            needed,
            got: n_samples,
        });
    }
    if shard.is_empty() {
        return Err(Error::EmptyShard(shard.id()));
    }
    cfg.schedule.validate()?;
    if cfg.batch_size == 0 || cfg.thinning == 0 {
        return Err(Error::InvalidConfig(
            "batch size and thinning must be positive".into(),
        ));
    }
    let init = match &cfg.init {
        Some(v) => ParamVector::from_slice(v),
        None => model.default_init(),
    };
    model.check_theta(init.as_vector())?;

    let data = shard.data();
    let scale = data.len() as f64 / cfg.batch_size as f64;
    let mut state = ChainState::new(init, rng);
    let total = cfg.burn_in + (n_samples - 1) * cfg.thinning + 1;
    let mut kept = Vec::with_capacity(n_samples);
    for i in 0..total {
        let mut grad = DVector::zeros(d);
        for _ in 0..cfg.batch_size {
            let j = state.rng_mut().index(data.len());
            model.add_grad_log_lik(state.theta().as_vector(), &data[j], 1.0, &mut grad);
        }
        grad *= scale;
        state.step(&grad, &cfg.schedule, model)?;
        if i >= cfg.burn_in && (i - cfg.burn_in) % cfg.thinning == 0 {
            kept.push(state.theta().clone());
        }
    }
    fit_from_samples(&kept, diagonal_only, cfg.jitter)
}
