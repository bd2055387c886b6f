//! Single-process simulation of federated DSGLD / CG-DSGLD.
//!
//! A server holds one chain per replica. Each round it picks a client from a
//! categorical distribution over shard probabilities, hands the chain to that
//! client, and the client runs `local_updates` Langevin steps using only its
//! own data (plus the surrogates received once before the first round). The
//! returned states are stored server-side; burn-in and thinning are applied
//! over the concatenated chain.
//!
//! Random streams: replica `c` uses stream `2c` for mini-batches and noise
//! and stream `2c + 1` for client selection. Keeping the scheduler on its own
//! stream lets a one-shard federation reproduce serial SGLD exactly.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{ChainState, StepSchedule};
use crate::error::{check_dim, Error, Result};
use crate::estimators::{cgdsgld_unchecked, draw_indices, dsgld_unchecked, EstimatorKind};
use crate::model::{DataPoint, ModelSpec, ParamVector};
use crate::rng::RandomStream;
use crate::surrogates::SurrogateSet;

/// Tolerance on `sum_s f_s = 1`.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// One client's data and its selection probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    id: usize,
    data: Vec<DataPoint>,
    prob: f64,
}

impl Shard {
    pub fn new(id: usize, data: Vec<DataPoint>, prob: f64) -> Self {
        Self { id, data, prob }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn data(&self) -> &[DataPoint] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn prob(&self) -> f64 {
        self.prob
    }

    pub fn with_prob(mut self, prob: f64) -> Self {
        self.prob = prob;
        self
    }
}

/// All shards concatenated in id order.
pub fn pooled_data(shards: &[Shard]) -> Vec<DataPoint> {
    shards.iter().flat_map(|s| s.data.iter().cloned()).collect()
}

/// Sets `f_s = 1 / S` on every shard.
pub fn set_uniform_probabilities(shards: &mut [Shard]) {
    let f = 1.0 / shards.len() as f64;
    for s in shards {
        s.prob = f;
    }
}

pub fn shard_probabilities(shards: &[Shard]) -> Vec<f64> {
    shards.iter().map(Shard::prob).collect()
}

fn check_probabilities(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidProbabilities("no shards".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
        return Err(Error::InvalidProbabilities(format!(
            "every shard needs positive probability, got {p}"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidProbabilities(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Checks ids, sizes, probabilities and (optionally) data compatibility.
pub fn validate_shards(shards: &[Shard], model: Option<&ModelSpec>) -> Result<()> {
    check_probabilities(&shard_probabilities(shards))?;
    for (i, s) in shards.iter().enumerate() {
        if s.id != i {
            return Err(Error::InvalidConfig(format!(
                "shard at position {i} has id {}",
                s.id
            )));
        }
        if s.is_empty() {
            return Err(Error::EmptyShard(i));
        }
        if let Some(m) = model {
            for x in &s.data {
                m.check_datum(x)?;
            }
        }
    }
    Ok(())
}

/// Draws a client index from `Categorical(probs)`.
pub fn select_client(probs: &[f64], rng: &mut RandomStream) -> Result<usize> {
    check_probabilities(probs)?;
    Ok(select_unchecked(probs, rng))
}

fn select_unchecked(probs: &[f64], rng: &mut RandomStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn default_chains() -> usize {
    1
}

/// Everything that determines a simulated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub estimator: EstimatorKind,
    pub schedule: StepSchedule,
    /// Mini-batch size `m`.
    pub batch_size: usize,
    /// Steps taken by a client before the chain returns to the server.
    pub local_updates: usize,
    /// Number of client visits.
    pub rounds: usize,
    /// States discarded from the start of each chain.
    pub burn_in: usize,
    /// Keep every `thinning`-th state after burn-in.
    pub thinning: usize,
    pub seed: u64,
    /// Independent replica chains.
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

impl FederationConfig {
    pub fn new(estimator: EstimatorKind, schedule: StepSchedule, batch_size: usize) -> Self {
        Self {
            estimator,
            schedule,
            batch_size,
            local_updates: 1,
            rounds: 0,
            burn_in: 0,
            thinning: 1,
            seed: 0,
            chains: 1,
            init: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.local_updates == 0 {
            return Err(Error::InvalidConfig("local updates must be at least 1".into()));
        }
        if self.thinning == 0 {
            return Err(Error::InvalidConfig("thinning must be at least 1".into()));
        }
        if self.chains == 0 {
            return Err(Error::InvalidConfig("need at least one chain".into()));
        }
        Ok(())
    }

    pub fn steps_per_chain(&self) -> u64 {
        self.rounds as u64 * self.local_updates as u64
    }

    /// Whether the state reached after step `t` (1-based) is kept.
    pub fn keeps(&self, t: u64) -> bool {
        let i = t - 1;
        let burn = self.burn_in as u64;
        i >= burn && (i - burn) % self.thinning as u64 == 0
    }

    /// Number of kept states per chain.
    pub fn kept_per_chain(&self) -> u64 {
        let total = self.steps_per_chain();
        let burn = self.burn_in as u64;
        if total <= burn {
            0
        } else {
            (total - burn - 1) / self.thinning as u64 + 1
        }
    }

    fn init_for(&self, model: &ModelSpec) -> Result<ParamVector> {
        let init = match &self.init {
            Some(v) => ParamVector::from_slice(v),
            None => model.default_init(),
        };
        model.check_theta(init.as_vector())?;
        Ok(init)
    }
}

/// SHA-256 over the canonical JSON of model and configuration.
pub fn config_hash(model: &ModelSpec, cfg: &FederationConfig) -> String {
    let doc = serde_json::json!({ "model": model, "federation": cfg });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One kept chain state.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub chain: usize,
    /// Round (client visit) during which the state was produced, from 0.
    pub round: u64,
    pub shard: usize,
    /// Global step number within the chain, from 1.
    pub t: u64,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub config_hash: String,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub dim: usize,
    pub chains: usize,
    pub steps_per_chain: u64,
    /// Server-side client selections, summed over chains.
    pub client_selections: u64,
    /// Surrogates sent to the server before the first round.
    pub surrogate_messages: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainTrace {
    pub meta: TraceMeta,
    pub records: Vec<TraceRecord>,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    /// Records of one replica, in step order.
    pub fn chain(&self, chain: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.chain == chain)
    }

    pub fn thetas(&self, chain: usize) -> Vec<DVector<f64>> {
        self.chain(chain)
            .map(|r| DVector::from_column_slice(&r.theta))
            .collect()
    }

    /// Replica ids present, ascending.
    pub fn chain_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.chain).collect();
        ids.dedup();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn visit<F>(
    model: &ModelSpec,
    state: &mut ChainState,
    shard: &Shard,
    cfg: &FederationConfig,
    surrogates: Option<&SurrogateSet>,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&ChainState),
{
    for _ in 0..cfg.local_updates {
        let indices = draw_indices(shard.len(), cfg.batch_size, state.rng_mut());
        let theta = state.theta().as_vector();
        let est = match (cfg.estimator, surrogates) {
            (EstimatorKind::Sgld, _) => dsgld_unchecked(model, theta, shard, &indices, 1.0),
            (EstimatorKind::Dsgld, _) => dsgld_unchecked(model, theta, shard, &indices, shard.prob),
            (EstimatorKind::CgDsgld { alpha }, Some(set)) => {
                cgdsgld_unchecked(model, theta, shard, &indices, shard.prob, set, alpha)
            }
            (EstimatorKind::CgDsgld { .. }, None) => {
                return Err(Error::InvalidConfig("CG-DSGLD requires surrogates".into()))
            }
        };
        state.step(&est.vector, &cfg.schedule, model)?;
        on_step(state);
    }
    Ok(())
}

fn check_surrogates(
    model: &ModelSpec,
    shards: &[Shard],
    cfg: &FederationConfig,
    surrogates: Option<&SurrogateSet>,
) -> Result<()> {
    match (cfg.estimator.needs_surrogates(), surrogates) {
        (true, None) => Err(Error::InvalidConfig("CG-DSGLD requires surrogates".into())),
        (true, Some(set)) => {
            check_dim(model.dimension(), set.dim())?;
            if set.len() != shards.len() {
                return Err(Error::InvalidConfig(format!(
                    "{} surrogates for {} shards",
                    set.len(),
                    shards.len()
                )));
            }
            Ok(())
        }
        (false, _) => Ok(()),
    }
}

/// Runs `cfg.local_updates` steps on one client and returns every
/// intermediate state. With [`EstimatorKind::Sgld`] the shard is treated as
/// the whole data set.
pub fn client_update(
    model: &ModelSpec,
    state: &mut ChainState,
    shard: &Shard,
    cfg: &FederationConfig,
    surrogates: Option<&SurrogateSet>,
) -> Result<Vec<ParamVector>> {
    cfg.validate()?;
    model.check_theta(state.theta().as_vector())?;
    if shard.is_empty() {
        return Err(Error::EmptyShard(shard.id));
    }
    if let (EstimatorKind::CgDsgld { .. }, Some(set)) = (cfg.estimator, surrogates) {
        set.shard(shard.id)?;
        check_dim(model.dimension(), set.dim())?;
    }
    let mut out = Vec::with_capacity(cfg.local_updates);
    visit(model, state, shard, cfg, surrogates, |s| out.push(s.theta().clone()))?;
    Ok(out)
}

/// Chain and scheduler streams for replica `chain`.
pub fn replica_streams(seed: u64, chain: usize) -> (RandomStream, RandomStream) {
    let c = chain as u64;
    (RandomStream::new(seed, 2 * c), RandomStream::new(seed, 2 * c + 1))
}

fn run_chain(
    model: &ModelSpec,
    shards: &[Shard],
    cfg: &FederationConfig,
    surrogates: Option<&SurrogateSet>,
    chain: usize,
) -> Result<(Vec<TraceRecord>, u64)> {
    let probs = shard_probabilities(shards);
    let (chain_rng, mut sched_rng) = replica_streams(cfg.seed, chain);
    let mut state = ChainState::new(cfg.init_for(model)?, chain_rng);
    let mut records = Vec::with_capacity(cfg.kept_per_chain() as usize);
    let mut selections = 0;
    for round in 0..cfg.rounds as u64 {
        let s = select_unchecked(&probs, &mut sched_rng);
        selections += 1;
        visit(model, &mut state, &shards[s], cfg, surrogates, |st| {
            if cfg.keeps(st.t()) {
                records.push(TraceRecord {
                    chain,
                    round,
                    shard: s,
                    t: st.t(),
                    theta: st.theta().as_slice().to_vec(),
                });
            }
        })?;
    }
    Ok((records, selections))
}

/// Simulates `cfg.rounds` client visits for each of `cfg.chains` replicas.
/// Replicas run in parallel; the trace lists them in chain order.
pub fn run_simulation(
    model: &ModelSpec,
    shards: &[Shard],
    cfg: &FederationConfig,
    surrogates: Option<&SurrogateSet>,
) -> Result<ChainTrace> {
    model.validate()?;
    cfg.validate()?;
    validate_shards(shards, Some(model))?;
    if let EstimatorKind::Sgld = cfg.estimator {
        return Err(Error::InvalidConfig(
            "SGLD has no client schedule; use run_serial_sgld on pooled data".into(),
        ));
    }
    check_surrogates(model, shards, cfg, surrogates)?;
    let surrogates = surrogates.filter(|_| cfg.estimator.needs_surrogates());

    let per_chain = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(model, shards, cfg, surrogates, c))
        .collect::<Result<Vec<_>>>()?;
    let client_selections = per_chain.iter().map(|(_, n)| n).sum();
    let records = per_chain.into_iter().flat_map(|(r, _)| r).collect();
    Ok(ChainTrace {
        meta: TraceMeta {
            config_hash: config_hash(model, cfg),
            seed: cfg.seed,
            estimator: cfg.estimator,
            dim: model.dimension(),
            chains: cfg.chains,
            steps_per_chain: cfg.steps_per_chain(),
            client_selections,
            surrogate_messages: surrogates.map_or(0, SurrogateSet::len),
        },
        records,
    })
}

/// Centralized SGLD on pooled data, with the same step budget, burn-in,
/// thinning and chain streams as [`run_simulation`]. Records carry round 0
/// and shard 0.
pub fn run_serial_sgld(
    model: &ModelSpec,
    data: &[DataPoint],
    cfg: &FederationConfig,
) -> Result<ChainTrace> {
    model.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyShard(0));
    }
    for x in data {
        model.check_datum(x)?;
    }
    let pooled = Shard::new(0, data.to_vec(), 1.0);
    let serial = FederationConfig {
        estimator: EstimatorKind::Sgld,
        local_updates: cfg.steps_per_chain().max(1) as usize,
        ..cfg.clone()
    };
    let steps = cfg.steps_per_chain();
    let per_chain = (0..cfg.chains)
        .into_par_iter()
        .map(|c| -> Result<Vec<TraceRecord>> {
            let (rng, _) = replica_streams(cfg.seed, c);
            let mut state = ChainState::new(cfg.init_for(model)?, rng);
            let mut records = Vec::new();
            if steps == 0 {
                return Ok(records);
            }
            visit(model, &mut state, &pooled, &serial, None, |st| {
                if cfg.keeps(st.t()) {
                    records.push(TraceRecord {
                        chain: c,
                        round: 0,
                        shard: 0,
                        t: st.t(),
                        theta: st.theta().as_slice().to_vec(),
                    });
                }
            })?;
            Ok(records)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainTrace {
        meta: TraceMeta {
            config_hash: config_hash(model, cfg),
            seed: cfg.seed,
            estimator: EstimatorKind::Sgld,
            dim: model.dimension(),
            chains: cfg.chains,
            steps_per_chain: steps,
            client_selections: 0,
            surrogate_messages: 0,
        },
        records: per_chain.into_iter().flatten().collect(),
    })
}

/// How pooled data is divided among clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShardStrategy {
    /// Random disjoint shards of (nearly) equal size.
    EqualSplit,
    /// Per-shard positive-class proportions drawn from `Beta(a, b)`.
    ///
    /// Without `shard_size` the pool is partitioned into equal-size shards and
    /// the drawn counts are adjusted so every point is used: surplus positives
    /// are handed out one at a time starting from the shards with the largest
    /// proportions, shortfalls are taken one at a time starting from the
    /// smallest. With `shard_size` each shard holds
    /// exactly that many points at the drawn proportion, and the pool must
    /// have enough of each class.
    LabelBeta {
        a: f64,
        b: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shard_size: Option<usize>,
    },
    /// Synthetic Gaussian shards: `size` points from `N(mean_s, I)` for each
    /// mean. The pooled data is not used.
    ByMeans { means: Vec<Vec<f64>>, size: usize },
}

/// Splits (or, for [`ShardStrategy::ByMeans`], generates) `n_shards` shards
/// with uniform selection probabilities.
pub fn make_shards(
    pooled: &[DataPoint],
    strategy: &ShardStrategy,
    n_shards: usize,
    rng: &mut RandomStream,
) -> Result<Vec<Shard>> {
    if n_shards == 0 {
        return Err(Error::InvalidConfig("need at least one shard".into()));
    }
    let groups: Vec<Vec<DataPoint>> = match strategy {
        ShardStrategy::ByMeans { means, size } => by_means(means, *size, n_shards, rng)?,
        _ if pooled.is_empty() => return Err(Error::EmptyShard(0)),
        _ if n_shards == 1 => vec![pooled.to_vec()],
        ShardStrategy::EqualSplit => {
            if n_shards > pooled.len() {
                return Err(Error::Infeasible(format!(
                    "{} points cannot fill {n_shards} shards",
                    pooled.len()
                )));
            }
            let mut idx: Vec<usize> = (0..pooled.len()).collect();
            idx.shuffle(rng);
            let mut out = Vec::with_capacity(n_shards);
            let mut start = 0;
            for size in equal_sizes(pooled.len(), n_shards) {
                out.push(idx[start..start + size].iter().map(|&i| pooled[i].clone()).collect());
                start += size;
            }
            out
        }
        ShardStrategy::LabelBeta { a, b, shard_size } => {
            label_beta(pooled, *a, *b, *shard_size, n_shards, rng)?
        }
    };
    let f = 1.0 / n_shards as f64;
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, data)| Shard::new(i, data, f))
        .collect())
}

fn equal_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| n / parts + usize::from(i < n % parts))
        .collect()
}

fn by_means(
    means: &[Vec<f64>],
    size: usize,
    n_shards: usize,
    rng: &mut RandomStream,
) -> Result<Vec<Vec<DataPoint>>> {
    if means.len() != n_shards {
        return Err(Error::InvalidConfig(format!(
            "{} means for {n_shards} shards",
            means.len()
        )));
    }
    if size == 0 {
        return Err(Error::InvalidConfig("shard size must be positive".into()));
    }
    Ok(means
        .iter()
        .map(|mu| {
            (0..size)
                .map(|_| DataPoint::point(mu.iter().map(|m| m + rng.standard_normal()).collect()))
                .collect()
        })
        .collect())
}

fn label_beta(
    pooled: &[DataPoint],
    a: f64,
    b: f64,
    shard_size: Option<usize>,
    n_shards: usize,
    rng: &mut RandomStream,
) -> Result<Vec<Vec<DataPoint>>> {
    let beta = Beta::new(a, b)
        .map_err(|e| Error::InvalidConfig(format!("Beta({a}, {b}): {e}")))?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, x) in pooled.iter().enumerate() {
        match x.binary_class() {
            Some(true) => pos.push(i),
            Some(false) => neg.push(i),
            None => {}
        }
    }
    let unlabelled = pooled.len() - pos.len() - neg.len();
    if unlabelled > 0 {
        return Err(Error::Infeasible(format!(
            "{unlabelled} of {} points have no binary label",
            pooled.len()
        )));
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let props: Vec<f64> = (0..n_shards).map(|_| beta.sample(rng)).collect();

    let sizes = match shard_size {
        Some(0) => return Err(Error::InvalidConfig("shard size must be positive".into())),
        Some(n) => vec![n; n_shards],
        None => {
            if n_shards > pooled.len() {
                return Err(Error::Infeasible(format!(
                    "{} points cannot fill {n_shards} shards",
                    pooled.len()
                )));
            }
            equal_sizes(pooled.len(), n_shards)
        }
    };
    let mut k: Vec<usize> = props
        .iter()
        .zip(&sizes)
        .map(|(p, &n)| ((p * n as f64).round() as usize).min(n))
        .collect();

    let need_pos: usize = k.iter().sum();
    let need_neg: usize = sizes.iter().sum::<usize>() - need_pos;
    if shard_size.is_some() {
        if need_pos > pos.len() {
            return Err(Error::Infeasible(format!(
                "proportions need {need_pos} positive labels, pool has {} (deficit {})",
                pos.len(),
                need_pos - pos.len()
            )));
        }
        if need_neg > neg.len() {
            return Err(Error::Infeasible(format!(
                "proportions need {need_neg} negative labels, pool has {} (deficit {})",
                neg.len(),
                need_neg - neg.len()
            )));
        }
    } else {
        let mut order: Vec<usize> = (0..n_shards).collect();
        order.sort_by(|&i, &j| props[j].total_cmp(&props[i]));
        // Spread the mismatch one point at a time so no shard absorbs it all.
        let mut surplus = pos.len() as i64 - need_pos as i64;
        while surplus > 0 {
            for &s in &order {
                if surplus > 0 && k[s] < sizes[s] {
                    k[s] += 1;
                    surplus -= 1;
                }
            }
        }
        while surplus < 0 {
            for &s in order.iter().rev() {
                if surplus < 0 && k[s] > 0 {
                    k[s] -= 1;
                    surplus += 1;
                }
            }
        }
    }

    let mut p_iter = pos.into_iter();
    let mut n_iter = neg.into_iter();
    Ok(sizes
        .iter()
        .zip(&k)
        .map(|(&n, &kp)| {
            let mut shard: Vec<DataPoint> = p_iter.by_ref().take(kp).map(|i| pooled[i].clone()).collect();
            shard.extend(n_iter.by_ref().take(n - kp).map(|i| pooled[i].clone()));
            shard
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogates::GaussianSurrogate;

    fn gaussian_shards(rng: &mut RandomStream) -> Vec<Shard> {
        let means = vec![vec![-3.0, 1.0], vec![2.0, 2.0], vec![0.0, -4.0]];
        make_shards(&[], &ShardStrategy::ByMeans { means, size: 20 }, 3, rng).unwrap()
    }

    #[test]
    fn degenerate_categorical() {
        let mut rng = RandomStream::new(1, 0);
        for _ in 0..100 {
            assert_eq!(select_client(&[1.0], &mut rng).unwrap(), 0);
        }
        assert!(select_client(&[0.5, 0.4], &mut rng).is_err());
        assert!(select_client(&[1.0, 0.0], &mut rng).is_err());
        assert!(select_client(&[], &mut rng).is_err());
    }

    #[test]
    fn fair_categorical_frequencies() {
        let mut rng = RandomStream::new(2, 0);
        let n = 10_000;
        let ones = (0..n)
            .filter(|_| select_client(&[0.5, 0.5], &mut rng).unwrap() == 1)
            .count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((ones - n as f64 / 2.0).abs() < 3.0 * sd);
    }

    #[test]
    fn uniform_probabilities_sum_to_one() {
        let mut shards: Vec<Shard> = (0..10)
            .map(|i| Shard::new(i, vec![DataPoint::point(vec![0.0])], 0.0))
            .collect();
        set_uniform_probabilities(&mut shards);
        assert!(shards.iter().all(|s| s.prob() == 0.1));
        validate_shards(&shards, None).unwrap();
    }

    #[test]
    fn one_local_update_is_one_step() {
        let mut rng = RandomStream::new(3, 0);
        let shards = gaussian_shards(&mut rng);
        let model = ModelSpec::gaussian_mean(2);
        let cfg = FederationConfig::new(EstimatorKind::Dsgld, StepSchedule::constant(1e-3), 5);
        let mut state = ChainState::new(ParamVector::zeros(2), RandomStream::new(4, 0));
        let out = client_update(&model, &mut state, &shards[1], &cfg, None).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(state.t(), 1);
    }

    #[test]
    fn client_update_requires_surrogates_for_cgdsgld() {
        let mut rng = RandomStream::new(3, 0);
        let shards = gaussian_shards(&mut rng);
        let model = ModelSpec::gaussian_mean(2);
        let cfg = FederationConfig::new(EstimatorKind::cgdsgld(), StepSchedule::constant(1e-3), 5);
        let mut state = ChainState::new(ParamVector::zeros(2), RandomStream::new(4, 0));
        assert!(client_update(&model, &mut state, &shards[0], &cfg, None).is_err());
    }

    #[test]
    fn alpha_zero_matches_dsgld_bitwise() {
        let mut rng = RandomStream::new(5, 0);
        let shards = gaussian_shards(&mut rng);
        let model = ModelSpec::gaussian_mean(2);
        let set = SurrogateSet::new(
            shards
                .iter()
                .map(|_| GaussianSurrogate::isotropic(DVector::from_element(2, 1.0), 20.0).unwrap())
                .collect(),
        )
        .unwrap();
        let mut cfg = FederationConfig::new(EstimatorKind::Dsgld, StepSchedule::constant(1e-3), 4);
        cfg.local_updates = 50;
        let mut a = ChainState::new(ParamVector::zeros(2), RandomStream::new(6, 0));
        let mut b = a.clone();
        let da = client_update(&model, &mut a, &shards[2], &cfg, None).unwrap();
        cfg.estimator = EstimatorKind::CgDsgld { alpha: 0.0 };
        let db = client_update(&model, &mut b, &shards[2], &cfg, Some(&set)).unwrap();
        assert_eq!(da, db);
    }

    #[test]
    fn zero_rounds_give_an_empty_trace() {
        let mut rng = RandomStream::new(7, 0);
        let shards = gaussian_shards(&mut rng);
        let model = ModelSpec::gaussian_mean(2);
        let cfg = FederationConfig::new(EstimatorKind::Dsgld, StepSchedule::constant(1e-3), 4);
        let trace = run_simulation(&model, &shards, &cfg, None).unwrap();
        assert!(trace.is_empty());
        assert_eq!(trace.meta.client_selections, 0);
        assert_eq!(trace.meta.dim, 2);
    }

    #[test]
    fn burn_in_and_thinning_are_global() {
        let mut rng = RandomStream::new(8, 0);
        let shards = gaussian_shards(&mut rng);
        let model = ModelSpec::gaussian_mean(2);
        let mut cfg = FederationConfig::new(EstimatorKind::Dsgld, StepSchedule::constant(1e-3), 4);
        cfg.local_updates = 7;
        cfg.rounds = 30;
        cfg.burn_in = 11;
        cfg.thinning = 5;
        cfg.chains = 2;
        let trace = run_simulation(&model, &shards, &cfg, None).unwrap();
        let ts: Vec<u64> = trace.chain(1).map(|r| r.t).collect();
        let expected: Vec<u64> = (12..=210).step_by(5).collect();
        assert_eq!(ts, expected);
        assert_eq!(trace.len() as u64, 2 * cfg.kept_per_chain());
        assert_eq!(trace.meta.client_selections, 60);
        assert_eq!(trace.chain_ids(), vec![0, 1]);
        for r in trace.chain(0) {
            assert_eq!(r.round, (r.t - 1) / 7);
        }
    }

    #[test]
    fn one_shard_federation_is_serial_sgld() {
        let mut rng = RandomStream::new(9, 0);
        let data: Vec<DataPoint> = (0..30)
            .map(|_| DataPoint::point(vec![rng.standard_normal() + 1.0]))
            .collect();
        let model = ModelSpec::gaussian_mean(1);
        let shards = vec![Shard::new(0, data.clone(), 1.0)];
        let mut cfg = FederationConfig::new(EstimatorKind::Dsgld, StepSchedule::constant(1e-3), 3);
        cfg.local_updates = 13;
        cfg.rounds = 20;
        cfg.burn_in = 5;
        cfg.thinning = 2;
        let fed = run_simulation(&model, &shards, &cfg, None).unwrap();
        let serial = run_serial_sgld(&model, &data, &cfg).unwrap();
        let a: Vec<_> = fed.records.iter().map(|r| (r.t, r.theta.clone())).collect();
        let b: Vec<_> = serial.records.iter().map(|r| (r.t, r.theta.clone())).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sgld_is_rejected_by_the_federated_loop() {
        let mut rng = RandomStream::new(7, 0);
        let shards = gaussian_shards(&mut rng);
        let cfg = FederationConfig::new(EstimatorKind::Sgld, StepSchedule::constant(1e-3), 4);
        assert!(run_simulation(&ModelSpec::gaussian_mean(2), &shards, &cfg, None).is_err());
    }

    fn labelled_pool(pos: usize, neg: usize) -> Vec<DataPoint> {
        (0..pos + neg)
            .map(|i| DataPoint::point(vec![i as f64]).with_label(i < pos))
            .collect()
    }

    fn assert_partition(pooled: &[DataPoint], shards: &[Shard]) {
        let mut seen: Vec<f64> = shards
            .iter()
            .flat_map(|s| s.data().iter().map(|x| x.features[0]))
            .collect();
        seen.sort_by(f64::total_cmp);
        let mut all: Vec<f64> = pooled.iter().map(|x| x.features[0]).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(seen, all);
    }

    #[test]
    fn single_shard_is_the_pool() {
        let pool = labelled_pool(5, 7);
        let mut rng = RandomStream::new(1, 0);
        for strat in [
            ShardStrategy::EqualSplit,
            ShardStrategy::LabelBeta {
                a: 1.0,
                b: 1.0,
                shard_size: None,
            },
        ] {
            let shards = make_shards(&pool, &strat, 1, &mut rng).unwrap();
            assert_eq!(shards.len(), 1);
            assert_eq!(shards[0].data(), &pool[..]);
            assert_eq!(shards[0].prob(), 1.0);
        }
    }

    #[test]
    fn equal_split_partitions() {
        let pool = labelled_pool(0, 103);
        let shards = make_shards(&pool, &ShardStrategy::EqualSplit, 10, &mut RandomStream::new(2, 0)).unwrap();
        assert_eq!(shards.iter().map(Shard::len).collect::<Vec<_>>(), [11, 11, 11, 10, 10, 10, 10, 10, 10, 10]);
        assert_partition(&pool, &shards);
        validate_shards(&shards, None).unwrap();
        assert!(make_shards(&pool[..3], &ShardStrategy::EqualSplit, 4, &mut RandomStream::new(2, 0)).is_err());
    }

    fn positive_fraction(s: &Shard) -> f64 {
        s.data().iter().filter(|x| x.label == Some(true)).count() as f64 / s.len() as f64
    }

    #[test]
    fn balanced_label_beta() {
        let pool = labelled_pool(3000, 3000);
        let strat = ShardStrategy::LabelBeta {
            a: 100.0,
            b: 100.0,
            shard_size: None,
        };
        let shards = make_shards(&pool, &strat, 30, &mut RandomStream::new(3, 0)).unwrap();
        assert_partition(&pool, &shards);
        for s in &shards {
            let p = positive_fraction(s);
            assert!((p - 0.5).abs() < 0.2, "{p}");
        }
    }

    #[test]
    fn skewed_label_beta_is_bimodal() {
        let pool = labelled_pool(3000, 3000);
        let strat = ShardStrategy::LabelBeta {
            a: 0.5,
            b: 0.5,
            shard_size: None,
        };
        let shards = make_shards(&pool, &strat, 30, &mut RandomStream::new(4, 0)).unwrap();
        assert_partition(&pool, &shards);
        let extreme = shards
            .iter()
            .filter(|s| {
                let p = positive_fraction(s);
                !(0.2..=0.8).contains(&p)
            })
            .count();
        assert!(extreme >= 15, "only {extreme} of 30 shards are lopsided");
    }

    #[test]
    fn label_beta_reports_deficits() {
        let pool = labelled_pool(10, 1000);
        let strat = ShardStrategy::LabelBeta {
            a: 100.0,
            b: 1.0,
            shard_size: Some(50),
        };
        let err = make_shards(&pool, &strat, 5, &mut RandomStream::new(5, 0)).unwrap_err();
        assert!(err.to_string().contains("deficit"), "{err}");

        let unlabelled = vec![DataPoint::point(vec![0.0]); 4];
        let strat = ShardStrategy::LabelBeta {
            a: 1.0,
            b: 1.0,
            shard_size: None,
        };
        assert!(matches!(
            make_shards(&unlabelled, &strat, 2, &mut RandomStream::new(5, 0)),
            Err(Error::Infeasible(_))
        ));
    }
}
