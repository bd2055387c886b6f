//! Stochastic gradient Langevin dynamics over federated data.
//!
//! Three gradient estimators share one Langevin kernel:
//!
//! * **SGLD** on pooled data,
//! * **DSGLD**, where a server hands the chain to a randomly chosen client
//!   that runs several local steps on its own shard,
//! * **CG-DSGLD**, which adds a zero-mean *conducive gradient* built from
//!   Gaussian surrogates of every shard's likelihood, so that long runs of
//!   local updates no longer drag the chain towards the local posterior.
//!
//! The federation is simulated in one process and is fully deterministic
//! given a seed.
//!
//! ```
//! use conducive::{
//!     analytic_surrogate_set, blobs_2d, run_simulation, AnalyticSurrogateOptions, BlobsParams,
//!     EstimatorKind, FederationConfig, ModelSpec, RandomStream, StepSchedule,
//! };
//!
//! let mut rng = RandomStream::new(7, 0);
//! let params = BlobsParams { n_shards: 4, shard_size: 50, half_width: 6.0 };
//! let shards = blobs_2d(&params, &mut rng)?.shards;
//! let model = ModelSpec::gaussian_mean(2);
//! let surrogates = analytic_surrogate_set(&model, &shards, &AnalyticSurrogateOptions::default())?;
//!
//! let mut cfg = FederationConfig::new(EstimatorKind::cgdsgld(), StepSchedule::constant(1e-3), 10);
//! cfg.local_updates = 20;
//! cfg.rounds = 50;
//! cfg.burn_in = 200;
//! let trace = run_simulation(&model, &shards, &cfg, Some(&surrogates))?;
//! assert_eq!(trace.len(), 800);
//! # Ok::<(), conducive::Error>(())
//! ```

pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod federation;
pub mod io;
pub mod model;
pub mod rng;
pub mod surrogates;
pub mod synth;

pub use diagnostics::{
    avg_log_likelihood, estimator_moments_exact, estimator_moments_sampled, grid_bound_constants, mc_mse,
    BoundConstants, CurvePoint, EstimatorMoments, GridSpec, SampledMoments, TestFunction,
};
pub use dynamics::{ChainState, StepSchedule};
pub use error::{Error, Result};
pub use estimators::{
    cgdsgld_estimate, conducive_gradient, dsgld_estimate, estimate, sample_minibatch, sgld_estimate,
    EstimatorKind, GradientEstimate, MiniBatch,
};
pub use federation::{
    client_update, config_hash, make_shards, run_serial_sgld, run_simulation, select_client, ChainTrace,
    FederationConfig, Shard, ShardStrategy, TraceMeta, TraceRecord,
};
pub use model::{AnalyticPosterior, DataPoint, ModelSpec, ParamVector};
pub use rng::RandomStream;
pub use surrogates::{
    analytic_surrogate, analytic_surrogate_set, fit_from_samples, local_sgld_fit, product_of_surrogates,
    AnalyticSurrogateOptions, GaussianSurrogate, LocalFitConfig, PrecisionScale, SurrogateSet,
};
pub use synth::{bernoulli_coins, blobs_2d, linreg_synthetic, BlobsParams, CoinParams, LinRegParams};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/langevin.md")]
    mod langevin {}
    #[doc = include_str!("../../../book/src/federation.md")]
    mod federation {}
    #[doc = include_str!("../../../book/src/conducive.md")]
    mod conducive {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
