//! Files: shard CSVs with a JSON manifest, surrogate JSON, traces as CSV or a
//! compact binary format with a JSON sidecar, and curve/constant tables.
//!
//! Floats are written in shortest round-trip form, so reading a file and
//! writing it back reproduces the same bytes.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{BoundConstants, CurvePoint};
use crate::error::{Error, Result};
use crate::federation::{validate_shards, ChainTrace, Shard, TraceMeta, TraceRecord};
use crate::model::{DataPoint, ModelSpec};
use crate::surrogates::{GaussianSurrogate, SurrogateSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRODUCT_FILE: &str = "surrogate_product.json";
const TRACE_MAGIC: &[u8; 4] = b"CGTR";
const TRACE_VERSION: u32 = 1;

pub fn shard_file_name(s: usize) -> String {
    format!("shard_{s:03}.csv")
}

pub fn surrogate_file_name(s: usize) -> String {
    format!("surrogate_{s:03}.json")
}

/// The `.meta.json` sidecar next to a trace file.
pub fn meta_path(trace: &Path) -> PathBuf {
    let mut name = trace.file_stem().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    trace.with_file_name(name)
}

/// Shortest round-trip text, switching to exponent form for very large or
/// small magnitudes.
fn fmt_f64(v: &f64) -> String {
    format!("{v:?}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Writes one datum per row: features `x0..`, then `y` if targets are present.
pub fn write_shard_csv(path: &Path, data: &[DataPoint]) -> Result<()> {
    let d = data.first().map_or(0, |x| x.features.len());
    let has_target = data.first().is_some_and(|x| x.target.is_some());
    if data.iter().any(|x| x.features.len() != d || x.target.is_some() != has_target) {
        return Err(Error::Format("rows differ in shape".into()));
    }
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    if has_target {
        header.push("y".into());
    }
    w.write_record(&header)?;
    for x in data {
        let mut row: Vec<String> = x.features.iter().map(fmt_f64).collect();
        if let Some(t) = x.target {
            row.push(fmt_f64(&t));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a shard CSV. Columns named `y` or `target` are the response; all
/// other columns are features, in file order.
pub fn read_shard_csv(path: &Path) -> Result<Vec<DataPoint>> {
    read_points(path, None)
}

/// Like [`read_shard_csv`], but `label_column` holds a 0/1 class label that
/// is kept out of the features.
pub fn read_labelled_csv(path: &Path, label_column: &str) -> Result<Vec<DataPoint>> {
    read_points(path, Some(label_column))
}

fn read_points(path: &Path, label_column: Option<&str>) -> Result<Vec<DataPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let target_col = header.iter().position(|h| h == "y" || h == "target");
    let label_col = match label_column {
        Some(name) => Some(header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Format(format!("{}: no column named '{name}'", path.display()))
        })?),
        None => None,
    };
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut x = DataPoint {
            features: Vec::with_capacity(rec.len()),
            target: None,
            label: None,
        };
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("{}: row {}: '{field}' is not a number", path.display(), line + 1))
            })?;
            if Some(i) == label_col {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Format(format!(
                        "{}: row {}: label must be 0 or 1, got {v}",
                        path.display(),
                        line + 1
                    )));
                }
                x.label = Some(v == 1.0);
            } else if Some(i) == target_col {
                x.target = Some(v);
            } else {
                x.features.push(v);
            }
        }
        out.push(x);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_shards: usize,
    pub sizes: Vec<usize>,
    pub probs: Vec<f64>,
    pub model: ModelSpec,
    pub seed: u64,
}

/// Writes `shard_XXX.csv` for every shard plus `manifest.json`.
pub fn write_dataset(dir: &Path, shards: &[Shard], model: &ModelSpec, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    for s in shards {
        write_shard_csv(&dir.join(shard_file_name(s.id())), s.data())?;
    }
    let manifest = Manifest {
        n_shards: shards.len(),
        sizes: shards.iter().map(Shard::len).collect(),
        probs: shards.iter().map(Shard::prob).collect(),
        model: model.clone(),
        seed,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a directory written by [`write_dataset`] and validates it.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Shard>)> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.sizes.len() != manifest.n_shards || manifest.probs.len() != manifest.n_shards {
        return Err(Error::Format("manifest lists disagree with n_shards".into()));
    }
    let shards = (0..manifest.n_shards)
        .map(|s| {
            let data = read_shard_csv(&dir.join(shard_file_name(s)))?;
            if data.len() != manifest.sizes[s] {
                return Err(Error::Format(format!(
                    "shard {s} has {} rows, manifest says {}",
                    data.len(),
                    manifest.sizes[s]
                )));
            }
            Ok(Shard::new(s, data, manifest.probs[s]))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_shards(&shards, Some(&manifest.model))?;
    Ok((manifest, shards))
}

/// On-disk form of a [`GaussianSurrogate`]; `precision` is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFile {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub precision: Vec<f64>,
    pub diagonal_only: bool,
}

impl From<&GaussianSurrogate> for SurrogateFile {
    fn from(q: &GaussianSurrogate) -> Self {
        let d = q.dim();
        Self {
            dim: d,
            mean: q.mean().as_slice().to_vec(),
            precision: q.precision().transpose().as_slice().to_vec(),
            diagonal_only: q.diagonal_only(),
        }
    }
}

impl TryFrom<SurrogateFile> for GaussianSurrogate {
    type Error = Error;

    fn try_from(f: SurrogateFile) -> Result<Self> {
        if f.mean.len() != f.dim || f.precision.len() != f.dim * f.dim {
            return Err(Error::Format(format!(
                "surrogate of dimension {} has {} mean and {} precision entries",
                f.dim,
                f.mean.len(),
                f.precision.len()
            )));
        }
        let precision = DMatrix::from_row_slice(f.dim, f.dim, &f.precision);
        GaussianSurrogate::new(DVector::from_vec(f.mean), precision, f.diagonal_only)
    }
}

pub fn save_surrogate(path: &Path, q: &GaussianSurrogate) -> Result<()> {
    write_json(path, &SurrogateFile::from(q))
}

pub fn load_surrogate(path: &Path) -> Result<GaussianSurrogate> {
    read_json::<SurrogateFile>(path)?.try_into()
}

/// Writes `surrogate_XXX.json` per shard and `surrogate_product.json`.
pub fn save_surrogate_set(dir: &Path, set: &SurrogateSet) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(set.len() + 1);
    for (s, q) in set.per_shard().iter().enumerate() {
        let p = dir.join(surrogate_file_name(s));
        save_surrogate(&p, q)?;
        paths.push(p);
    }
    let p = dir.join(PRODUCT_FILE);
    save_surrogate(&p, set.product())?;
    paths.push(p);
    Ok(paths)
}

/// Loads `n_shards` surrogates and checks the stored product against them.
pub fn load_surrogate_set(dir: &Path, n_shards: usize) -> Result<SurrogateSet> {
    let qs = (0..n_shards)
        .map(|s| load_surrogate(&dir.join(surrogate_file_name(s))))
        .collect::<Result<Vec<_>>>()?;
    let product_path = dir.join(PRODUCT_FILE);
    if product_path.exists() {
        SurrogateSet::with_product(qs, load_surrogate(&product_path)?)
    } else {
        SurrogateSet::new(qs)
    }
}

/// Columns `chain, round, shard, t, theta_0, ..`.
pub fn write_trace_csv(path: &Path, trace: &ChainTrace) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = ["chain", "round", "shard", "t"].map(String::from).to_vec();
    header.extend((0..trace.dim()).map(|i| format!("theta_{i}")));
    w.write_record(&header)?;
    for r in &trace.records {
        let mut row = vec![r.chain.to_string(), r.round.to_string(), r.shard.to_string(), r.t.to_string()];
        row.extend(r.theta.iter().map(fmt_f64));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    if width < 4 {
        return Err(Error::Format(format!("{}: not a trace file", path.display())));
    }
    let bad = |what: &str| Error::Format(format!("{}: bad {what}", path.display()));
    r.records()
        .map(|rec| {
            let rec = rec?;
            let int = |i: usize, what: &str| rec[i].parse::<u64>().map_err(|_| bad(what));
            Ok(TraceRecord {
                chain: int(0, "chain")? as usize,
                round: int(1, "round")?,
                shard: int(2, "shard")? as usize,
                t: int(3, "t")?,
                theta: (4..width)
                    .map(|i| rec[i].parse::<f64>().map_err(|_| bad("theta")))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Writes the trace CSV and its `.meta.json` sidecar.
pub fn save_trace(path: &Path, trace: &ChainTrace) -> Result<()> {
    write_trace_csv(path, trace)?;
    write_json(&meta_path(path), &trace.meta)
}

/// Reads a trace (CSV or binary, by extension) with its sidecar.
pub fn load_trace(path: &Path) -> Result<ChainTrace> {
    let meta: TraceMeta = read_json(&meta_path(path))?;
    let records = if path.extension().is_some_and(|e| e == "bin") {
        read_trace_binary(path)?.1
    } else {
        read_trace_csv(path)?
    };
    if records.iter().any(|r| r.theta.len() != meta.dim) {
        return Err(Error::Format(format!("{}: rows do not match dimension {}", path.display(), meta.dim)));
    }
    Ok(ChainTrace { meta, records })
}

/// Little-endian: magic `CGTR`, version u32, dim u32, count u64, then per
/// record chain u32, round u64, shard u32, t u64 and `dim` f64s.
pub fn write_trace_binary(path: &Path, trace: &ChainTrace) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&(trace.dim() as u32).to_le_bytes())?;
    w.write_all(&(trace.records.len() as u64).to_le_bytes())?;
    for r in &trace.records {
        w.write_all(&(r.chain as u32).to_le_bytes())?;
        w.write_all(&r.round.to_le_bytes())?;
        w.write_all(&(r.shard as u32).to_le_bytes())?;
        w.write_all(&r.t.to_le_bytes())?;
        for v in &r.theta {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the dimension and records of a binary trace.
pub fn read_trace_binary(path: &Path) -> Result<(usize, Vec<TraceRecord>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRACE_MAGIC {
        return Err(Error::Format(format!("{}: not a binary trace", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != TRACE_VERSION {
        return Err(Error::Format(format!("unsupported trace version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    let n = read_u64(&mut r)?;
    let mut records = Vec::new();
    for _ in 0..n {
        let chain = read_u32(&mut r)? as usize;
        let round = read_u64(&mut r)?;
        let shard = read_u32(&mut r)? as usize;
        let t = read_u64(&mut r)?;
        let theta = (0..dim)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<Result<_>>()?;
        records.push(TraceRecord {
            chain,
            round,
            shard,
            t,
            theta,
        });
    }
    Ok((dim, records))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Two columns: `n_samples` and `value_name`.
pub fn write_curve_csv(path: &Path, value_name: &str, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["n_samples", value_name])?;
    for p in curve {
        w.write_record([p.n_samples.to_string(), fmt_f64(&p.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `shard, gamma_sq, epsilon_sq`.
pub fn write_constants_csv(path: &Path, c: &BoundConstants) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["shard", "gamma_sq", "epsilon_sq"])?;
    for (s, (g, e)) in c.gamma_sq.iter().zip(&c.epsilon_sq).enumerate() {
        w.write_record([s.to_string(), fmt_f64(g), fmt_f64(e)])?;
    }
    w.flush()?;
    Ok(())
}
