//! Acceptance criteria, one test each. Every test writes a single
//! `criterion N: PASS|FAIL ...` line to stderr, bypassing output capture, and
//! then asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use conducive::federation::pooled_data;
use conducive::io::write_trace_csv;
use conducive::{
    analytic_surrogate_set, avg_log_likelihood, bernoulli_coins, blobs_2d, conducive_gradient,
    estimator_moments_exact, grid_bound_constants, linreg_synthetic, mc_mse, run_simulation, sgld_estimate,
    AnalyticSurrogateOptions, BlobsParams, ChainState, CoinParams, DataPoint, EstimatorKind, FederationConfig,
    GaussianSurrogate, GridSpec, LinRegParams, MiniBatch, ModelSpec, ParamVector, RandomStream, Shard,
    StepSchedule, SurrogateSet, TestFunction,
};
use nalgebra::{DMatrix, DVector};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {id}: {status} {name}: {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn random_spd(d: usize, rng: &mut RandomStream) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

fn random_surrogates(d: usize, s: usize, rng: &mut RandomStream) -> SurrogateSet {
    SurrogateSet::new(
        (0..s)
            .map(|_| {
                let mean = DVector::from_fn(d, |_, _| rng.standard_normal());
                GaussianSurrogate::new(mean, random_spd(d, rng), false).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

fn random_theta(model: &ModelSpec, rng: &mut RandomStream) -> DVector<f64> {
    match model {
        ModelSpec::BernoulliCoin => DVector::from_element(1, 0.05 + 0.9 * rng.uniform()),
        _ => DVector::from_fn(model.dimension(), |_, _| rng.standard_normal()),
    }
}

fn small_instance(model: &ModelSpec, rng: &mut RandomStream) -> Vec<Shard> {
    let d = model.dimension();
    let datum = |rng: &mut RandomStream| match model {
        ModelSpec::BernoulliCoin => DataPoint::toss(rng.uniform() < 0.5),
        ModelSpec::GaussianMean { .. } => DataPoint::point((0..d).map(|_| 2.0 * rng.standard_normal()).collect()),
        ModelSpec::BayesLinReg { .. } => DataPoint::regression(
            (0..d).map(|_| rng.standard_normal()).collect(),
            3.0 * rng.standard_normal(),
        ),
    };
    let a: Vec<DataPoint> = (0..3).map(|_| datum(rng)).collect();
    let b: Vec<DataPoint> = (0..2).map(|_| datum(rng)).collect();
    vec![Shard::new(0, a, 0.35), Shard::new(1, b, 0.65)]
}

#[test]
fn criterion_1_unbiased_estimators() {
    let start = Instant::now();
    let mut rng = RandomStream::new(101, 0);
    let models = [
        ModelSpec::BernoulliCoin,
        ModelSpec::gaussian_mean(2),
        ModelSpec::bayes_lin_reg(2, 0.7, 1.3),
    ];
    let mut worst = 0.0f64;
    for model in &models {
        let shards = small_instance(model, &mut rng);
        let pooled = pooled_data(&shards);
        let set = random_surrogates(model.dimension(), 2, &mut rng);
        for _ in 0..5 {
            let theta = random_theta(model, &mut rng);
            let truth = model.grad_log_posterior(&theta, &pooled).unwrap();
            for kind in [EstimatorKind::Sgld, EstimatorKind::Dsgld, EstimatorKind::cgdsgld()] {
                for m in [1, 2] {
                    let mom = estimator_moments_exact(model, &shards, &theta, m, kind, Some(&set)).unwrap();
                    worst = worst.max((mom.mean - &truth).amax());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-10 && elapsed < Duration::from_secs(1);
    report(
        1,
        "estimator expectations equal the posterior gradient",
        pass,
        &format!("max abs error {worst:.3e} (< 1e-10), {elapsed:.2?} (< 1 s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_conducive_gradient_zero_mean() {
    let start = Instant::now();
    let mut rng = RandomStream::new(202, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = 1 + rng.index(4);
        let s = 2 + rng.index(6);
        let set = random_surrogates(d, s, &mut rng);
        let raw: Vec<f64> = (0..s).map(|_| 0.05 + rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let f: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let theta = DVector::from_fn(d, |_, _| 2.0 * rng.standard_normal());
        let mut sum = DVector::zeros(d);
        for (i, fi) in f.iter().enumerate() {
            sum += conducive_gradient(&set, i, *fi, &theta).unwrap() * *fi;
        }
        worst = worst.max(sum.amax());
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-10 && elapsed < Duration::from_secs(1);
    report(
        2,
        "weighted conducive gradients sum to zero",
        pass,
        &format!("max abs sum {worst:.3e} over 100 cases (< 1e-10), {elapsed:.2?} (< 1 s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_coin_variance_ordering() {
    let start = Instant::now();
    let model = ModelSpec::BernoulliCoin;
    let shards = bernoulli_coins(&CoinParams::default()).unwrap();
    let theta = DVector::from_element(1, 0.5);
    let sgld = estimator_moments_exact(&model, &shards, &theta, 5, EstimatorKind::Sgld, None).unwrap();
    let dsgld = estimator_moments_exact(&model, &shards, &theta, 5, EstimatorKind::Dsgld, None).unwrap();
    let elapsed = start.elapsed();

    // Independent closed forms at theta = 1/2, where every score is +-2.
    // SGLD: scale 30/5, five draws from a fair pool.
    let sgld_oracle = 36.0 * 5.0 * 4.0;
    // DSGLD: scale 10 / (5/3) = 6 inside each shard, plus the spread of the
    // per-shard conditional means 60 (2p - 1).
    let ps = [0.1, 0.5, 0.9];
    let within: f64 = ps.iter().map(|p| 36.0 * 5.0 * 16.0 * p * (1.0 - p)).sum::<f64>() / 3.0;
    let between: f64 = ps.iter().map(|p| (60.0 * (2.0 * p - 1.0)).powi(2)).sum::<f64>() / 3.0;
    let dsgld_oracle = within + between;

    let ratio = dsgld.variance / sgld.variance;
    let oracle_ok = (sgld.variance - sgld_oracle).abs() < 1e-8 * sgld_oracle
        && (dsgld.variance - dsgld_oracle).abs() < 1e-8 * dsgld_oracle;
    let pass = dsgld.variance > sgld.variance && oracle_ok && elapsed < Duration::from_secs(10);
    report(
        3,
        "coin shards: DSGLD variance exceeds SGLD variance",
        pass,
        &format!(
            "SGLD {:.6} (closed form {sgld_oracle}), DSGLD {:.6} (closed form {dsgld_oracle:.1}), ratio {ratio:.6}, {elapsed:.2?} (< 10 s)",
            sgld.variance, dsgld.variance
        ),
    );
    assert!(pass);
}

const BLOB_SEED: u64 = 2024;

fn blob_setup() -> (ModelSpec, Vec<Shard>, SurrogateSet) {
    let shards = blobs_2d(&BlobsParams::default(), &mut RandomStream::new(BLOB_SEED, 1000))
        .unwrap()
        .shards;
    let model = ModelSpec::gaussian_mean(2);
    let set = analytic_surrogate_set(&model, &shards, &AnalyticSurrogateOptions::default()).unwrap();
    (model, shards, set)
}

#[test]
fn criterion_4_blob_mse_ratios() {
    const REPLICAS: usize = 64;
    const STEPS: usize = 200_000;
    let start = Instant::now();
    let (model, shards, set) = blob_setup();
    let truth = model.analytic_posterior(&pooled_data(&shards)).unwrap().mean;
    let final_mse = |kind: EstimatorKind, local_updates: usize| {
        let mut cfg = FederationConfig::new(kind, StepSchedule::constant(1e-4), 10);
        cfg.local_updates = local_updates;
        cfg.rounds = STEPS / local_updates;
        cfg.burn_in = 20_000;
        cfg.thinning = 100;
        cfg.chains = REPLICAS;
        cfg.seed = 4;
        let trace = run_simulation(&model, &shards, &cfg, Some(&set)).unwrap();
        let curve = mc_mse(&trace, &TestFunction::Identity, &truth, 100).unwrap();
        curve.last().unwrap().value
    };
    let cg: Vec<f64> = [10, 100, 1000].iter().map(|&l| final_mse(EstimatorKind::cgdsgld(), l)).collect();
    let dsgld_1000 = final_mse(EstimatorKind::Dsgld, 1000);
    let elapsed = start.elapsed();

    let cg_max = cg.iter().cloned().fold(f64::MIN, f64::max);
    let cg_min = cg.iter().cloned().fold(f64::MAX, f64::min);
    let spread = cg_max / cg_min;
    let gap = dsgld_1000 / cg[2];
    let pass_a = spread <= 2.0;
    let pass_b = gap >= 5.0;
    report(
        4,
        "(a) CG-DSGLD MSE insensitive to local updates",
        pass_a,
        &format!(
            "final MSE at 10/100/1000 local updates {:.3e}/{:.3e}/{:.3e}, max/min {spread:.3} (<= 2)",
            cg[0], cg[1], cg[2]
        ),
    );
    report(
        4,
        "(b) DSGLD with 1000 local updates plateaus above CG-DSGLD",
        pass_b,
        &format!(
            "DSGLD(1000) {dsgld_1000:.3e} vs CG-DSGLD(1000) {:.3e}, ratio {gap:.1} (>= 5); {REPLICAS} replicas, {elapsed:.1?}",
            cg[2]
        ),
    );
    assert!(pass_a && pass_b);
}

#[test]
fn criterion_5_bound_constants() {
    let start = Instant::now();
    let (model, shards, set) = blob_setup();
    let grid = GridSpec::cube(-8.0, 8.0, 2, 161);
    let c = grid_bound_constants(&model, &shards, &set, &grid).unwrap();
    let elapsed = start.elapsed();
    let all_smaller = c.epsilon_sq.iter().zip(&c.gamma_sq).all(|(e, g)| e < g);
    let ratio = c.max_ratio();
    let pass = all_smaller && ratio < 0.5 && elapsed < Duration::from_secs(60);
    report(
        5,
        "epsilon_s^2 well below gamma_s^2 on every shard",
        pass,
        &format!(
            "gamma_sq in [{:.1}, {:.1}], epsilon_sq in [{:.3}, {:.3}], max ratio {ratio:.4} (< 0.5), {elapsed:.2?} (< 60 s)",
            c.gamma_sq.iter().cloned().fold(f64::MAX, f64::min),
            c.gamma_sq.iter().cloned().fold(f64::MIN, f64::max),
            c.epsilon_sq.iter().cloned().fold(f64::MAX, f64::min),
            c.epsilon_sq.iter().cloned().fold(f64::MIN, f64::max),
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_sgld_exactness() {
    const STEPS: usize = 200_000;
    const BURN_IN: usize = 1_000;
    const THIN: usize = 100;
    let start = Instant::now();
    let (model, shards, _) = blob_setup();
    let data = pooled_data(&shards);
    let post = model.analytic_posterior(&data).unwrap();
    let full = MiniBatch {
        shard_id: 0,
        indices: (0..data.len()).collect(),
    };
    let schedule = StepSchedule::constant(1e-4);
    let mut chain = ChainState::new(ParamVector::zeros(2), RandomStream::new(6, 0));
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for i in 0..STEPS {
        let g = sgld_estimate(&model, chain.theta().as_vector(), &data, &full).unwrap();
        chain.step(&g.vector, &schedule, &model).unwrap();
        if i >= BURN_IN && (i - BURN_IN) % THIN == 0 {
            kept.push(chain.theta().as_vector().clone());
        }
    }
    let elapsed = start.elapsed();

    let n = kept.len() as f64;
    let mean = kept.iter().fold(DVector::zeros(2), |a, v| a + v) / n;
    let cov = kept
        .iter()
        .fold(DMatrix::zeros(2, 2), |a, v| a + (v - &mean) * (v - &mean).transpose())
        / (n - 1.0);
    let z: Vec<f64> = (0..2)
        .map(|i| (mean[i] - post.mean[i]) / (cov[(i, i)] / n).sqrt())
        .collect();
    let trace_rel = (cov.trace() - post.covariance.trace()) / post.covariance.trace();
    let pass = z.iter().all(|z| z.abs() <= 3.0) && trace_rel.abs() <= 0.2 && elapsed < Duration::from_secs(60);
    report(
        6,
        "full-gradient Langevin matches the Gaussian posterior",
        pass,
        &format!(
            "mean errors {:.2}/{:.2} standard errors (<= 3), covariance trace off by {:.1}% (<= 20%), {} samples, {elapsed:.2?} (< 60 s)",
            z[0],
            z[1],
            100.0 * trace_rel,
            kept.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_reduction_identity() {
    let (model, shards, set) = blob_setup();
    let dir = tempfile::tempdir().unwrap();
    let run = |kind: EstimatorKind, name: &str| {
        let mut cfg = FederationConfig::new(kind, StepSchedule::constant(1e-4), 10);
        cfg.local_updates = 50;
        cfg.rounds = 200;
        cfg.seed = 77;
        let trace = run_simulation(&model, &shards, &cfg, Some(&set)).unwrap();
        let path = dir.path().join(name);
        write_trace_csv(&path, &trace).unwrap();
        (trace.len(), std::fs::read(path).unwrap())
    };
    let (n_a, a) = run(EstimatorKind::Dsgld, "dsgld.csv");
    let (n_b, b) = run(EstimatorKind::CgDsgld { alpha: 0.0 }, "cg0.csv");
    let pass = n_a == 10_000 && a == b;
    report(
        7,
        "CG-DSGLD with alpha = 0 reproduces DSGLD byte for byte",
        pass,
        &format!("{n_a} and {n_b} states, {} and {} bytes, identical: {}", a.len(), b.len(), a == b),
    );
    assert!(pass);
}

#[test]
fn criterion_8_heldout_loglik() {
    const SEEDS: u64 = 10;
    let start = Instant::now();
    let data = linreg_synthetic(&LinRegParams::default(), &mut RandomStream::new(31, 900)).unwrap();
    let set = analytic_surrogate_set(&data.model, &data.shards, &AnalyticSurrogateOptions::default()).unwrap();
    let finals = |kind: EstimatorKind| -> Vec<f64> {
        (0..SEEDS)
            .map(|seed| {
                let mut cfg = FederationConfig::new(kind, StepSchedule::constant(1e-5), 10);
                cfg.local_updates = 500;
                cfg.rounds = 400;
                cfg.burn_in = 50_000;
                cfg.thinning = 100;
                cfg.seed = seed;
                let trace = run_simulation(&data.model, &data.shards, &cfg, Some(&set)).unwrap();
                let curve = avg_log_likelihood(&trace, &data.model, &data.heldout, 100).unwrap();
                curve.last().unwrap().value
            })
            .collect()
    };
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (m, sd)
    };
    let (cg_mean, cg_sd) = stats(&finals(EstimatorKind::cgdsgld()));
    let (ds_mean, ds_sd) = stats(&finals(EstimatorKind::Dsgld));
    let elapsed = start.elapsed();
    let pass = cg_mean >= ds_mean && cg_sd <= ds_sd;
    report(
        8,
        "label-skewed regression: CG-DSGLD held-out log-likelihood higher and steadier",
        pass,
        &format!(
            "CG-DSGLD {cg_mean:.4} +- {cg_sd:.2e}, DSGLD {ds_mean:.4} +- {ds_sd:.2e} over {SEEDS} seeds, {elapsed:.1?}"
        ),
    );
    assert!(pass);
}

fn central_difference(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>) -> DVector<f64> {
    let h = 1e-5;
    DVector::from_fn(at.len(), |i, _| {
        let mut up = at.clone();
        let mut dn = at.clone();
        up[i] += h;
        dn[i] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    })
}

#[test]
fn criterion_9_gradient_finite_differences() {
    let mut rng = RandomStream::new(909, 0);
    let models = [
        ModelSpec::BernoulliCoin,
        ModelSpec::gaussian_mean(3),
        ModelSpec::bayes_lin_reg(3, 0.5, 0.8),
    ];
    let mut worst = 0.0f64;
    let mut checks = 0;
    for model in &models {
        for _ in 0..20 {
            let theta = random_theta(model, &mut rng);
            let x = small_instance(model, &mut rng)[0].data()[0].clone();
            let pairs = [
                (
                    model.grad_log_lik_datum(&theta, &x).unwrap(),
                    central_difference(|t| model.log_lik_datum(t, &x).unwrap(), &theta),
                ),
                (
                    model.grad_log_prior(&theta).unwrap(),
                    central_difference(|t| model.log_prior(t).unwrap(), &theta),
                ),
            ];
            for (g, fd) in pairs {
                worst = worst.max((g - &fd).norm() / fd.norm().max(1.0));
                checks += 1;
            }
        }
    }
    for _ in 0..20 {
        let set = random_surrogates(3, 1, &mut rng);
        let q = &set.per_shard()[0];
        let theta = DVector::from_fn(3, |_, _| rng.standard_normal());
        let fd = central_difference(|t| q.log_density(t).unwrap(), &theta);
        worst = worst.max((q.grad_log_density(&theta).unwrap() - &fd).norm() / fd.norm().max(1.0));
        checks += 1;
    }
    let pass = worst <= 1e-6;
    report(
        9,
        "analytic gradients match central differences",
        pass,
        &format!("max relative error {worst:.3e} over {checks} checks (<= 1e-6)"),
    );
    assert!(pass);
}
