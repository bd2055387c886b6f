//! Probabilistic models with per-datum likelihood gradients.
//!
//! A [`ModelSpec`] knows its prior and likelihood in closed form. Three models
//! are built in: a coin with uniform prior on its bias, the mean of an
//! isotropic Gaussian under a standard normal prior, and Bayesian linear
//! regression with a ridge prior and known noise scale.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Coin-bias chain states are kept inside `[BERNOULLI_EPS, 1 - BERNOULLI_EPS]`.
pub const BERNOULLI_EPS: f64 = 1e-6;

/// A point in parameter space; the state of a chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(DVector<f64>);

impl ParamVector {
    pub fn new(values: DVector<f64>) -> Self {
        Self(values)
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self(DVector::from_column_slice(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_vector_mut(&mut self) -> &mut DVector<f64> {
        &mut self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<DVector<f64>> for ParamVector {
    fn from(v: DVector<f64>) -> Self {
        Self(v)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(DVector::from_vec(v))
    }
}

/// One observation. Binary observations (coin tosses) live in `target` as
/// `0.0` or `1.0`; `label` is an optional class tag used only for sharding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

impl DataPoint {
    /// Unlabelled feature vector, as used by the Gaussian-mean model.
    pub fn point(features: Vec<f64>) -> Self {
        Self {
            features,
            target: None,
            label: None,
        }
    }

    pub fn regression(features: Vec<f64>, target: f64) -> Self {
        Self {
            features,
            target: Some(target),
            label: None,
        }
    }

    /// A coin toss.
    pub fn toss(heads: bool) -> Self {
        Self {
            features: Vec::new(),
            target: Some(if heads { 1.0 } else { 0.0 }),
            label: None,
        }
    }

    pub fn with_label(mut self, label: bool) -> Self {
        self.label = Some(label);
        self
    }

    /// Class membership for label-based sharding: the explicit label if set,
    /// otherwise a binary target.
    pub fn binary_class(&self) -> Option<bool> {
        match (self.label, self.target) {
            (Some(l), _) => Some(l),
            (None, Some(t)) if t == 0.0 => Some(false),
            (None, Some(t)) if t == 1.0 => Some(true),
            _ => None,
        }
    }
}

/// Model family and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Bernoulli likelihood, uniform prior on the bias `0 < theta < 1`.
    BernoulliCoin,
    /// `x ~ N(theta, I)` with prior `theta ~ N(0, I)`.
    GaussianMean { dimension: usize },
    /// `y ~ N(beta' x, noise_scale^2)` with prior `beta ~ N(0, I / prior_precision)`.
    BayesLinReg {
        dimension: usize,
        prior_precision: f64,
        noise_scale: f64,
    },
}

/// Closed-form Gaussian posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl AnalyticPosterior {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), covariance.nrows())?;
        check_dim(mean.len(), covariance.ncols())?;
        if covariance.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("posterior covariance".into()));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

impl ModelSpec {
    pub fn gaussian_mean(dimension: usize) -> Self {
        Self::GaussianMean { dimension }
    }

    pub fn bayes_lin_reg(dimension: usize, prior_precision: f64, noise_scale: f64) -> Self {
        Self::BayesLinReg {
            dimension,
            prior_precision,
            noise_scale,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BernoulliCoin => "bernoulli_coin",
            Self::GaussianMean { .. } => "gaussian_mean",
            Self::BayesLinReg { .. } => "bayes_lin_reg",
        }
    }

    pub fn dimension(&self) -> usize {
        match *self {
            Self::BernoulliCoin => 1,
            Self::GaussianMean { dimension } | Self::BayesLinReg { dimension, .. } => dimension,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::BernoulliCoin => Ok(()),
            Self::GaussianMean { dimension } => positive_dim(dimension),
            Self::BayesLinReg {
                dimension,
                prior_precision,
                noise_scale,
            } => {
                positive_dim(dimension)?;
                if !(prior_precision > 0.0 && prior_precision.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "prior precision must be positive, got {prior_precision}"
                    )));
                }
                if !(noise_scale > 0.0 && noise_scale.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "noise scale must be positive, got {noise_scale}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Starting point for chains when none is configured.
    pub fn default_init(&self) -> ParamVector {
        match self {
            Self::BernoulliCoin => ParamVector::from_slice(&[0.5]),
            _ => ParamVector::zeros(self.dimension()),
        }
    }

    /// Checks dimension and domain of a parameter.
    pub fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        check_dim(self.dimension(), theta.len())?;
        if let Self::BernoulliCoin = self {
            let p = theta[0];
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::OutOfDomain {
                    value: p,
                    domain: "0 < theta < 1",
                });
            }
        }
        Ok(())
    }

    /// Checks that a datum has the shape this model expects.
    pub fn check_datum(&self, x: &DataPoint) -> Result<()> {
        match *self {
            Self::BernoulliCoin => match x.target {
                Some(t) if t == 0.0 || t == 1.0 => Ok(()),
                other => Err(Error::IncompatibleDatum(format!(
                    "coin toss must be 0 or 1, got {other:?}"
                ))),
            },
            Self::GaussianMean { dimension } => {
                if x.features.len() != dimension {
                    return Err(Error::IncompatibleDatum(format!(
                        "expected {dimension} features, got {}",
                        x.features.len()
                    )));
                }
                Ok(())
            }
            Self::BayesLinReg { dimension, .. } => {
                if x.features.len() != dimension {
                    return Err(Error::IncompatibleDatum(format!(
                        "expected {dimension} features, got {}",
                        x.features.len()
                    )));
                }
                match x.target {
                    Some(y) if y.is_finite() => Ok(()),
                    _ => Err(Error::IncompatibleDatum("regression target missing".into())),
                }
            }
        }
    }

    pub fn log_prior(&self, theta: &DVector<f64>) -> Result<f64> {
        self.check_theta(theta)?;
        let d = theta.len() as f64;
        Ok(match *self {
            Self::BernoulliCoin => 0.0,
            Self::GaussianMean { .. } => -0.5 * theta.norm_squared() - 0.5 * d * (2.0 * PI).ln(),
            Self::BayesLinReg {
                prior_precision, ..
            } => {
                -0.5 * prior_precision * theta.norm_squared()
                    + 0.5 * d * (prior_precision / (2.0 * PI)).ln()
            }
        })
    }

    pub fn grad_log_prior(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        let mut out = DVector::zeros(theta.len());
        self.add_grad_log_prior(theta, &mut out);
        Ok(out)
    }

    /// `out += grad log p(theta)`. Unchecked.
    pub(crate) fn add_grad_log_prior(&self, theta: &DVector<f64>, out: &mut DVector<f64>) {
        match *self {
            Self::BernoulliCoin => {}
            Self::GaussianMean { .. } => *out -= theta,
            Self::BayesLinReg {
                prior_precision, ..
            } => out.axpy(-prior_precision, theta, 1.0),
        }
    }

    pub fn log_lik_datum(&self, theta: &DVector<f64>, x: &DataPoint) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_datum(x)?;
        Ok(self.log_lik_unchecked(theta, x))
    }

    pub(crate) fn log_lik_unchecked(&self, theta: &DVector<f64>, x: &DataPoint) -> f64 {
        match *self {
            Self::BernoulliCoin => {
                let p = theta[0];
                let t = x.target.unwrap_or(0.0);
                t * p.ln() + (1.0 - t) * (1.0 - p).ln()
            }
            Self::GaussianMean { dimension } => {
                let sq: f64 = theta
                    .iter()
                    .zip(&x.features)
                    .map(|(m, v)| (v - m) * (v - m))
                    .sum();
                -0.5 * sq - 0.5 * dimension as f64 * (2.0 * PI).ln()
            }
            Self::BayesLinReg { noise_scale, .. } => {
                let var = noise_scale * noise_scale;
                let r = x.target.unwrap_or(0.0) - dot(theta, &x.features);
                -0.5 * r * r / var - 0.5 * (2.0 * PI * var).ln()
            }
        }
    }

    pub fn grad_log_lik_datum(&self, theta: &DVector<f64>, x: &DataPoint) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        self.check_datum(x)?;
        let mut out = DVector::zeros(theta.len());
        self.add_grad_log_lik(theta, x, 1.0, &mut out);
        Ok(out)
    }

    /// Full-data gradient `grad log p(theta) + sum_i grad log p(x_i | theta)`.
    pub fn grad_log_posterior(&self, theta: &DVector<f64>, data: &[DataPoint]) -> Result<DVector<f64>> {
        self.check_theta(theta)?;
        for x in data {
            self.check_datum(x)?;
        }
        let mut out = DVector::zeros(theta.len());
        self.add_grad_log_prior(theta, &mut out);
        for x in data {
            self.add_grad_log_lik(theta, x, 1.0, &mut out);
        }
        Ok(out)
    }

    /// `out += weight * grad log p(x | theta)`. Unchecked; callers validate
    /// data once when a shard is built.
    pub(crate) fn add_grad_log_lik(
        &self,
        theta: &DVector<f64>,
        x: &DataPoint,
        weight: f64,
        out: &mut DVector<f64>,
    ) {
        match *self {
            Self::BernoulliCoin => {
                let p = theta[0];
                let t = x.target.unwrap_or(0.0);
                out[0] += weight * (t / p - (1.0 - t) / (1.0 - p));
            }
            Self::GaussianMean { .. } => {
                for ((o, m), v) in out.iter_mut().zip(theta.iter()).zip(&x.features) {
                    *o += weight * (v - m);
                }
            }
            Self::BayesLinReg { noise_scale, .. } => {
                let r = x.target.unwrap_or(0.0) - dot(theta, &x.features);
                let c = weight * r / (noise_scale * noise_scale);
                for (o, v) in out.iter_mut().zip(&x.features) {
                    *o += c * v;
                }
            }
        }
    }

    /// Projects a chain state back into the model domain.
    pub fn project(&self, theta: &mut DVector<f64>) {
        if let Self::BernoulliCoin = self {
            theta[0] = theta[0].clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
        }
    }

    /// Exact posterior for the conjugate models.
    pub fn analytic_posterior(&self, data: &[DataPoint]) -> Result<AnalyticPosterior> {
        for x in data {
            self.check_datum(x)?;
        }
        match *self {
            Self::BernoulliCoin => Err(Error::Unsupported(self.name(), "analytic posterior")),
            Self::GaussianMean { dimension } => {
                let n = data.len() as f64;
                let mut sum = DVector::zeros(dimension);
                for x in data {
                    sum += DVector::from_column_slice(&x.features);
                }
                let mean = sum / (n + 1.0);
                let cov = DMatrix::identity(dimension, dimension) / (n + 1.0);
                AnalyticPosterior::new(mean, cov)
            }
            Self::BayesLinReg {
                dimension,
                prior_precision,
                noise_scale,
            } => {
                let (xtx, xty) = normal_equations(dimension, data);
                let inv_var = 1.0 / (noise_scale * noise_scale);
                let precision =
                    DMatrix::identity(dimension, dimension) * prior_precision + xtx * inv_var;
                let chol = precision
                    .cholesky()
                    .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
                let mean = chol.solve(&(xty * inv_var));
                AnalyticPosterior::new(mean, chol.inverse())
            }
        }
    }
}

fn positive_dim(d: usize) -> Result<()> {
    if d == 0 {
        Err(Error::InvalidConfig("model dimension must be positive".into()))
    } else {
        Ok(())
    }
}

pub(crate) fn dot(a: &DVector<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// `(X'X, X'y)` for regression data.
pub(crate) fn normal_equations(dim: usize, data: &[DataPoint]) -> (DMatrix<f64>, DVector<f64>) {
    let mut xtx = DMatrix::zeros(dim, dim);
    let mut xty = DVector::zeros(dim);
    for p in data {
        let x = DVector::from_column_slice(&p.features);
        xtx.ger(1.0, &x, &x, 1.0);
        xty.axpy(p.target.unwrap_or(0.0), &x, 1.0);
    }
    (xtx, xty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn prior_gradients() {
        let g = ModelSpec::gaussian_mean(2);
        assert_eq!(g.grad_log_prior(&v(&[0.0, 0.0])).unwrap(), v(&[0.0, 0.0]));
        assert_eq!(g.grad_log_prior(&v(&[1.0, -2.0])).unwrap(), v(&[-1.0, 2.0]));
        let r = ModelSpec::bayes_lin_reg(1, 2.0, 1.0);
        assert_eq!(r.grad_log_prior(&v(&[3.0])).unwrap(), v(&[-6.0]));
        let c = ModelSpec::BernoulliCoin;
        assert_eq!(c.grad_log_prior(&v(&[0.3])).unwrap(), v(&[0.0]));
    }

    #[test]
    fn prior_errors() {
        let g = ModelSpec::gaussian_mean(2);
        assert!(matches!(
            g.grad_log_prior(&v(&[1.0])),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
        let c = ModelSpec::BernoulliCoin;
        assert!(matches!(c.grad_log_prior(&v(&[1.0])), Err(Error::OutOfDomain { .. })));
        assert!(c.grad_log_prior(&v(&[0.0])).is_err());
    }

    #[test]
    fn likelihood_gradients() {
        let c = ModelSpec::BernoulliCoin;
        let g = c.grad_log_lik_datum(&v(&[0.5]), &DataPoint::toss(true)).unwrap();
        assert_eq!(g[0], 2.0);
        let m = ModelSpec::gaussian_mean(2);
        let g = m
            .grad_log_lik_datum(&v(&[1.0, 1.0]), &DataPoint::point(vec![1.0, 1.0]))
            .unwrap();
        assert_eq!(g, v(&[0.0, 0.0]));
        let r = ModelSpec::bayes_lin_reg(1, 1.0, 1.0);
        let g = r
            .grad_log_lik_datum(&v(&[0.0]), &DataPoint::regression(vec![2.0], 1.0))
            .unwrap();
        assert_eq!(g, v(&[2.0]));
        assert!(c.grad_log_lik_datum(&v(&[1.5]), &DataPoint::toss(true)).is_err());
        assert!(c
            .grad_log_lik_datum(&v(&[0.5]), &DataPoint::regression(vec![], 0.3))
            .is_err());
    }

    #[test]
    fn conjugate_posteriors() {
        let g = ModelSpec::gaussian_mean(1);
        let p = g.analytic_posterior(&[]).unwrap();
        assert_eq!(p.mean, v(&[0.0]));
        assert_eq!(p.covariance, DMatrix::identity(1, 1));
        let p = g.analytic_posterior(&[DataPoint::point(vec![3.0])]).unwrap();
        assert_eq!(p.mean, v(&[1.5]));
        assert_eq!(p.covariance[(0, 0)], 0.5);

        let r = ModelSpec::bayes_lin_reg(1, 1.0, 1.0);
        let p = r
            .analytic_posterior(&[DataPoint::regression(vec![1.0], 2.0)])
            .unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-15);
        assert!((p.covariance[(0, 0)] - 0.5).abs() < 1e-15);

        assert!(matches!(
            ModelSpec::BernoulliCoin.analytic_posterior(&[]),
            Err(Error::Unsupported(..))
        ));
    }

    fn random_case(model: &ModelSpec, rng: &mut RandomStream) -> (DVector<f64>, DataPoint) {
        let d = model.dimension();
        match model {
            ModelSpec::BernoulliCoin => (
                v(&[0.05 + 0.9 * rng.uniform()]),
                DataPoint::toss(rng.uniform() < 0.5),
            ),
            ModelSpec::GaussianMean { .. } => (
                DVector::from_fn(d, |_, _| 2.0 * rng.standard_normal()),
                DataPoint::point((0..d).map(|_| 3.0 * rng.standard_normal()).collect()),
            ),
            ModelSpec::BayesLinReg { .. } => (
                DVector::from_fn(d, |_, _| rng.standard_normal()),
                DataPoint::regression(
                    (0..d).map(|_| rng.standard_normal()).collect(),
                    2.0 * rng.standard_normal(),
                ),
            ),
        }
    }

    fn central_difference(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>) -> DVector<f64> {
        let h = 1e-5;
        DVector::from_fn(at.len(), |i, _| {
            let mut up = at.clone();
            let mut down = at.clone();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1.0)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let models = [
            ModelSpec::BernoulliCoin,
            ModelSpec::gaussian_mean(3),
            ModelSpec::bayes_lin_reg(3, 0.7, 1.3),
        ];
        let mut rng = RandomStream::new(11, 0);
        for model in &models {
            for _ in 0..10 {
                let (theta, x) = random_case(model, &mut rng);
                let fd = central_difference(|t| model.log_lik_datum(t, &x).unwrap(), &theta);
                let g = model.grad_log_lik_datum(&theta, &x).unwrap();
                assert!(rel_err(&g, &fd) <= 1e-6, "{model:?}: {g} vs {fd}");

                let fd = central_difference(|t| model.log_prior(t).unwrap(), &theta);
                let g = model.grad_log_prior(&theta).unwrap();
                assert!(rel_err(&g, &fd) <= 1e-6, "{model:?} prior: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn gaussian_posterior_mean_is_the_mode() {
        let model = ModelSpec::gaussian_mean(2);
        let mut rng = RandomStream::new(5, 0);
        let data: Vec<DataPoint> = (0..25)
            .map(|_| DataPoint::point(vec![rng.standard_normal() + 1.0, rng.standard_normal() - 2.0]))
            .collect();
        let post = model.analytic_posterior(&data).unwrap();

        // Gradient ascent on the log posterior; curvature is N + 1.
        let mut theta = DVector::zeros(2);
        let lr = 0.5 / (data.len() as f64 + 1.0);
        for _ in 0..500 {
            let mut g = model.grad_log_prior(&theta).unwrap();
            for x in &data {
                g += model.grad_log_lik_datum(&theta, x).unwrap();
            }
            theta += g * lr;
        }
        assert!((theta - &post.mean).amax() < 1e-8);
    }

    #[test]
    fn project_clamps_coin() {
        let mut t = v(&[1.2]);
        ModelSpec::BernoulliCoin.project(&mut t);
        assert_eq!(t[0], 1.0 - BERNOULLI_EPS);
        let mut t = v(&[-3.0, 4.0]);
        ModelSpec::gaussian_mean(2).project(&mut t);
        assert_eq!(t, v(&[-3.0, 4.0]));
    }
}
