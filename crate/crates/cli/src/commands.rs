use std::path::{Path, PathBuf};

use conducive::diagnostics::estimator_moments_sampled;
use conducive::federation::pooled_data;
use conducive::io::{
    load_surrogate_set, load_trace, read_dataset, read_labelled_csv, read_shard_csv, save_surrogate_set,
    save_trace, write_constants_csv, write_curve_csv, write_dataset, write_json, write_shard_csv,
    write_trace_binary,
};
use conducive::{
    analytic_surrogate_set, avg_log_likelihood, bernoulli_coins, blobs_2d, config_hash, estimator_moments_exact,
    grid_bound_constants, linreg_synthetic, local_sgld_fit, make_shards, mc_mse, run_serial_sgld, run_simulation,
    CurvePoint, EstimatorKind, ModelSpec, ParamVector, RandomStream, Shard, SurrogateSet, TestFunction,
};
use serde_json::json;

use crate::config::{DataSource, Loaded, SurrogateSource, SynthSpec};
use crate::error::{CliError, CliResult};

// Chain streams use small ids (2c, 2c + 1); harness streams sit far above.
const SYNTH_STREAM: u64 = 1 << 40;
const SHARD_STREAM: u64 = SYNTH_STREAM + 1;
const MOMENTS_STREAM: u64 = SYNTH_STREAM + 2;
const FIT_STREAM: u64 = 1 << 41;

pub fn synth(loaded: &Loaded, preset: Option<SynthSpec>, out: &Path, seed: u64) -> CliResult<()> {
    let spec = preset
        .or_else(|| loaded.config.synth.clone())
        .ok_or_else(|| CliError::Config("no preset: pass --preset or add a `synth` section".into()))?;
    let mut rng = RandomStream::new(seed, SYNTH_STREAM);
    let (model, shards) = match &spec {
        SynthSpec::Blobs2d(p) => (ModelSpec::gaussian_mean(2), blobs_2d(p, &mut rng)?.shards),
        SynthSpec::BernoulliCoins(p) => (ModelSpec::BernoulliCoin, bernoulli_coins(p)?),
        SynthSpec::LinregSynthetic(p) => {
            let data = linreg_synthetic(p, &mut rng)?;
            write_shard_csv(&out.join("heldout.csv"), &data.heldout)?;
            (data.model, data.shards)
        }
    };
    let manifest = write_dataset(out, &shards, &model, seed)?;
    println!(
        "wrote {} shards ({} points) to {}",
        manifest.n_shards,
        manifest.sizes.iter().sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn load_data(loaded: &Loaded, seed: u64) -> CliResult<(ModelSpec, Vec<Shard>)> {
    let source = loaded
        .config
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `data` section".into()))?;
    let (model, shards) = match source {
        DataSource::Dataset { dir } => {
            let (manifest, shards) = read_dataset(&loaded.resolve(dir))?;
            (loaded.config.model.clone().unwrap_or(manifest.model), shards)
        }
        DataSource::PooledCsv {
            path,
            strategy,
            n_shards,
            label_column,
        } => {
            let model = loaded
                .config
                .model
                .clone()
                .ok_or_else(|| CliError::Config("pooled CSV input needs a `model` section".into()))?;
            let path = loaded.resolve(path);
            let pooled = match label_column {
                Some(col) => read_labelled_csv(&path, col)?,
                None => read_shard_csv(&path)?,
            };
            let shards = make_shards(&pooled, strategy, *n_shards, &mut RandomStream::new(seed, SHARD_STREAM))?;
            (model, shards)
        }
    };
    model.validate()?;
    for s in &shards {
        for x in s.data() {
            model.check_datum(x)?;
        }
    }
    Ok((model, shards))
}

fn build_surrogates(
    loaded: &Loaded,
    source: &SurrogateSource,
    model: &ModelSpec,
    shards: &[Shard],
    seed: u64,
) -> CliResult<SurrogateSet> {
    let set = match source {
        SurrogateSource::Analytic { options } => analytic_surrogate_set(model, shards, options)?,
        SurrogateSource::LocalSgld {
            fit,
            samples,
            diagonal_only,
        } => {
            let qs = shards
                .iter()
                .map(|s| {
                    let rng = RandomStream::new(seed, FIT_STREAM + s.id() as u64);
                    local_sgld_fit(model, s, fit, *samples, *diagonal_only, rng)
                })
                .collect::<Result<Vec<_>, _>>()?;
            SurrogateSet::new(qs)?
        }
        SurrogateSource::FromFile { dir } => load_surrogate_set(&loaded.resolve(dir), shards.len())?,
    };
    if set.dim() != model.dimension() {
        return Err(CliError::Data(format!(
            "surrogates have dimension {}, model has {}",
            set.dim(),
            model.dimension()
        )));
    }
    Ok(set)
}

fn surrogate_source(loaded: &Loaded) -> CliResult<&SurrogateSource> {
    loaded
        .config
        .surrogates
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `surrogates` section".into()))
}

pub fn fit_surrogates(loaded: &Loaded, out: &Path, seed: u64) -> CliResult<()> {
    let source = surrogate_source(loaded)?;
    let (model, shards) = load_data(loaded, seed)?;
    let set = build_surrogates(loaded, source, &model, &shards, seed)?;
    let paths = save_surrogate_set(out, &set)?;
    let (method, samples) = match source {
        SurrogateSource::Analytic { .. } => ("analytic", None),
        SurrogateSource::LocalSgld { samples, .. } => ("local_sgld", Some(*samples)),
        SurrogateSource::FromFile { .. } => ("from_file", None),
    };
    write_json(
        &out.join("provenance.json"),
        &json!({
            "method": method,
            "samples_per_shard": samples,
            "source": source,
            "model": model,
            "n_shards": shards.len(),
            "seed": seed,
        }),
    )?;
    println!("wrote {} surrogate files to {}", paths.len(), out.display());
    Ok(())
}

pub fn run(loaded: &Loaded, out: &Path, seed: u64, binary: bool) -> CliResult<()> {
    let cfg = loaded.federation(seed)?;
    let (model, shards) = load_data(loaded, seed)?;
    let trace = match cfg.estimator {
        EstimatorKind::Sgld => run_serial_sgld(&model, &pooled_data(&shards), &cfg)?,
        kind => {
            let set = match (kind.needs_surrogates(), &loaded.config.surrogates) {
                (true, Some(src)) => Some(build_surrogates(loaded, src, &model, &shards, seed)?),
                _ => None,
            };
            run_simulation(&model, &shards, &cfg, set.as_ref())?
        }
    };
    let path = out.join("trace.csv");
    save_trace(&path, &trace)?;
    if binary {
        write_trace_binary(&out.join("trace.bin"), &trace)?;
    }
    println!(
        "{}: {} kept states from {} chain(s), config {}",
        path.display(),
        trace.len(),
        trace.meta.chains,
        trace.meta.config_hash
    );
    Ok(())
}

fn final_value(curve: &[CurvePoint]) -> Option<f64> {
    curve.last().map(|p| p.value)
}

fn write_curve(out: &Path, stem: &str, value_name: &str, curve: &[CurvePoint]) -> CliResult<()> {
    write_curve_csv(&out.join(format!("{stem}.csv")), value_name, curve)?;
    write_json(&out.join(format!("{stem}.json")), &curve)?;
    Ok(())
}

pub fn diagnose(loaded: &Loaded, traces: &[PathBuf], out: &Path, seed: u64, force: bool) -> CliResult<()> {
    if traces.is_empty() {
        return Err(CliError::Config("no trace files given".into()));
    }
    let (model, shards) = load_data(loaded, seed)?;
    let req = &loaded.config.diagnostics;
    let expected_hash = loaded.config.federation.clone().map(|mut f| {
        f.seed = seed;
        config_hash(&model, &f)
    });
    let posterior = match model.analytic_posterior(&pooled_data(&shards)) {
        Ok(p) => Some(p),
        Err(conducive::Error::Unsupported(..)) => None,
        Err(e) => return Err(e.into()),
    };
    let heldout = req
        .heldout
        .as_ref()
        .map(|p| read_shard_csv(&loaded.resolve(p)))
        .transpose()?;

    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let mut summaries = Vec::new();
    for (i, path) in traces.iter().enumerate() {
        let trace = load_trace(path)?;
        if let Some(h) = &expected_hash {
            if &trace.meta.config_hash != h && !force {
                return Err(CliError::Config(format!(
                    "{} was produced by config {}, expected {h}; pass --force to diagnose anyway",
                    path.display(),
                    trace.meta.config_hash
                )));
            }
        }
        if trace.dim() != model.dimension() {
            return Err(CliError::Data(format!(
                "{} has dimension {}, model has {}",
                path.display(),
                trace.dim(),
                model.dimension()
            )));
        }
        let mut summary = json!({
            "trace": path,
            "config_hash": trace.meta.config_hash,
            "estimator": trace.meta.estimator,
            "kept": trace.len(),
        });
        if trace.is_empty() {
            summaries.push(summary);
            continue;
        }
        if let (true, Some(post)) = (req.mse, &posterior) {
            let curve = mc_mse(&trace, &TestFunction::Identity, &post.mean, req.every)?;
            write_curve(out, &format!("mse_{i}"), "mse", &curve)?;
            summary["final_mse"] = json!(final_value(&curve));
        }
        if let (true, Some(post)) = (req.second_moment, &posterior) {
            let truth = TestFunction::SecondMoment.posterior_expectation(post)?;
            let curve = mc_mse(&trace, &TestFunction::SecondMoment, &truth, req.every)?;
            write_curve(out, &format!("mse_second_moment_{i}"), "mse", &curve)?;
            summary["final_mse_second_moment"] = json!(final_value(&curve));
        }
        if let Some(held) = &heldout {
            let curve = avg_log_likelihood(&trace, &model, held, req.every)?;
            write_curve(out, &format!("loglik_{i}"), "avg_log_likelihood", &curve)?;
            summary["final_avg_log_likelihood"] = json!(final_value(&curve));
        }
        summaries.push(summary);
    }

    let mut report = json!({ "model": model, "seed": seed, "traces": summaries });
    if let Some(grid) = &req.grid {
        let set = build_surrogates(loaded, surrogate_source(loaded)?, &model, &shards, seed)?;
        let c = grid_bound_constants(&model, &shards, &set, grid)?;
        write_constants_csv(&out.join("bound_constants.csv"), &c)?;
        write_json(&out.join("bound_constants.json"), &c)?;
        report["max_epsilon_gamma_ratio"] = json!(c.max_ratio());
    }
    if let Some(m) = &req.moments {
        let theta = ParamVector::from_slice(&m.theta).into_inner();
        let set = match &loaded.config.surrogates {
            Some(src) if m.estimators.iter().any(EstimatorKind::needs_surrogates) => {
                Some(build_surrogates(loaded, src, &model, &shards, seed)?)
            }
            _ => None,
        };
        let mut rng = RandomStream::new(seed, MOMENTS_STREAM);
        let mut rows = Vec::new();
        for kind in &m.estimators {
            let row = match estimator_moments_exact(&model, &shards, &theta, m.batch_size, *kind, set.as_ref()) {
                Ok(mom) => json!({
                    "estimator": kind,
                    "method": "exact",
                    "mean": mom.mean.as_slice(),
                    "variance": mom.variance,
                }),
                Err(conducive::Error::EnumerationCap { .. }) => {
                    let s = estimator_moments_sampled(
                        &model,
                        &shards,
                        &theta,
                        m.batch_size,
                        *kind,
                        set.as_ref(),
                        m.draws,
                        &mut rng,
                    )?;
                    json!({
                        "estimator": kind,
                        "method": "sampled",
                        "draws": s.n_draws,
                        "mean": s.mean.as_slice(),
                        "mean_se": s.mean_se.as_slice(),
                        "variance": s.variance,
                        "variance_se": s.variance_se,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            rows.push(row);
        }
        write_json(&out.join("moments.json"), &rows)?;
        report["moments"] = json!(rows);
    }
    write_json(&out.join("report.json"), &report)?;
    println!("wrote diagnostics for {} trace(s) to {}", traces.len(), out.display());
    Ok(())
}
