//! Experiment harness: declarative parameter sweeps that compare
//! empirical channel behaviour against the closed-form bounds, with
//! deterministic substream seeding so any worker count produces
//! byte-identical rows.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    self, decoding_error_bound, make_ball_codebook, make_orthogonal_codebook, min_distance,
    ChannelConfig, ChannelError, Codebook, CodebookEntry,
};
use crate::detection::{self, DetectionError, DetectorFn};
use crate::numerics::{
    cosine_similarity, gaussian_sample, LatentVector, NumericsError, RandomStream,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("experiments need at least 100 trials, got {trials}")]
    TooFewTrials { trials: u64 },
    #[error("{kind} experiments need a non-empty {name} list")]
    MissingParameter { kind: &'static str, name: &'static str },
    #[error("invalid parameter {name}: {detail}")]
    InvalidParameter { name: &'static str, detail: String },
    #[error("successes {successes} exceed trials {trials} (or trials is zero)")]
    WilsonDomain { successes: u64, trials: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("unsupported spec format {extension:?}; use .toml or .json")]
    UnsupportedFormat { extension: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Empirical decode error rate vs the union bound.
    DecodeError,
    /// Matched-filter game advantage vs the closed form.
    Detection,
    /// Plug-in Gaussian KL estimate vs the closed form.
    KlEstimate,
    /// Sampled checks of the geometric similarity lower bound.
    ScsBound,
    /// Sampled codebooks inside a stealth-budget sphere vs the
    /// minimum-distance cap.
    TradeoffSweep,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::DecodeError => "decode_error",
            Self::Detection => "detection",
            Self::KlEstimate => "kl_estimate",
            Self::ScsBound => "scs_bound",
            Self::TradeoffSweep => "tradeoff_sweep",
        }
    }
}

fn default_anchor_norm() -> f64 {
    10.0
}

/// Named parameter lists; the experiment kind decides which lists are
/// swept. Expansion order is fixed: d, then m, then sigma, then norm,
/// then eta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterGrid {
    #[serde(default)]
    pub d: Vec<usize>,
    #[serde(default)]
    pub m: Vec<usize>,
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub norm: Vec<f64>,
    #[serde(default)]
    pub eta: Vec<f64>,
    pub trials: u64,
    #[serde(default = "default_anchor_norm")]
    pub anchor_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub grid: ParameterGrid,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

/// One grid point's outcome. The verdict is recomputable from the
/// stored fields alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub params: BTreeMap<String, f64>,
    pub empirical: f64,
    pub bound_or_theory: f64,
    pub stderr: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy)]
struct GridPoint {
    d: usize,
    m: usize,
    sigma: f64,
    norm: f64,
    eta: f64,
}

const BLOCK_SIZE: u64 = 4096;

/// Wilson score interval for a binomial proportion at confidence `z`.
pub fn wilson_interval(
    successes: u64,
    trials: u64,
    z: f64,
) -> Result<(f64, f64), ExperimentError> {
    if trials == 0 || successes > trials {
        return Err(ExperimentError::WilsonDomain { successes, trials });
    }
    if !z.is_finite() || z <= 0.0 {
        return Err(ExperimentError::InvalidParameter {
            name: "z",
            detail: format!("{z} must be a positive number"),
        });
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let zz = z * z;
    let denom = 1.0 + zz / n;
    let center = (p + zz / (2.0 * n)) / denom;
    let margin = z * (p * (1.0 - p) / n + zz / (4.0 * n * n)).sqrt() / denom;
    let mut lo = center - margin;
    let mut hi = center + margin;
    if successes == 0 {
        lo = 0.0;
    }
    if successes == trials {
        hi = 1.0;
    }
    Ok((lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0)))
}

impl ExperimentSpec {
    /// Parses one spec or an `[[experiment]]` list from TOML.
    pub fn from_toml_str(text: &str) -> Result<Vec<Self>, ExperimentError> {
        let value: toml::Value = toml::from_str(text)?;
        if value.get("experiment").is_some() {
            #[derive(Deserialize)]
            struct Multi {
                experiment: Vec<ExperimentSpec>,
            }
            let multi: Multi = toml::from_str(text)?;
            Ok(multi.experiment)
        } else {
            Ok(vec![toml::from_str(text)?])
        }
    }

    /// Parses one spec or {"experiment": [...]} from JSON.
    pub fn from_json_str(text: &str) -> Result<Vec<Self>, ExperimentError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("experiment").is_some() {
            #[derive(Deserialize)]
            struct Multi {
                experiment: Vec<ExperimentSpec>,
            }
            let multi: Multi = serde_json::from_value(value)?;
            Ok(multi.experiment)
        } else {
            Ok(vec![serde_json::from_value(value)?])
        }
    }

    /// Loads specs from a .toml or .json file.
    pub fn load(path: &Path) -> Result<Vec<Self>, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text),
            Some("json") => Self::from_json_str(&text),
            other => Err(ExperimentError::UnsupportedFormat {
                extension: other.unwrap_or("").to_string(),
            }),
        }
    }

    fn require(
        &self,
        name: &'static str,
        list_len: usize,
    ) -> Result<(), ExperimentError> {
        if list_len == 0 {
            return Err(ExperimentError::MissingParameter {
                kind: self.kind.name(),
                name,
            });
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.grid.trials < 100 {
            return Err(ExperimentError::TooFewTrials { trials: self.grid.trials });
        }
        if !self.grid.anchor_norm.is_finite() || self.grid.anchor_norm <= 0.0 {
            return Err(ExperimentError::InvalidParameter {
                name: "anchor_norm",
                detail: format!("{} must be positive", self.grid.anchor_norm),
            });
        }
        let g = &self.grid;
        let positive = |name: &'static str, list: &[f64]| -> Result<(), ExperimentError> {
            for &v in list {
                if !v.is_finite() || v <= 0.0 {
                    return Err(ExperimentError::InvalidParameter {
                        name,
                        detail: format!("{v} must be positive"),
                    });
                }
            }
            Ok(())
        };
        match self.kind {
            ExperimentKind::DecodeError => {
                self.require("d", g.d.len())?;
                self.require("m", g.m.len())?;
                self.require("sigma", g.sigma.len())?;
                self.require("norm", g.norm.len())?;
                positive("sigma", &g.sigma)?;
                positive("norm", &g.norm)?;
                for &m in &g.m {
                    for &d in &g.d {
                        if m < 2 || m > d {
                            return Err(ExperimentError::InvalidParameter {
                                name: "m",
                                detail: format!("{m} must lie in [2, d] with d = {d}"),
                            });
                        }
                    }
                }
            }
            ExperimentKind::Detection => {
                self.require("d", g.d.len())?;
                self.require("sigma", g.sigma.len())?;
                self.require("norm", g.norm.len())?;
                positive("sigma", &g.sigma)?;
                for &v in &g.norm {
                    if !v.is_finite() || v < 0.0 {
                        return Err(ExperimentError::InvalidParameter {
                            name: "norm",
                            detail: format!("{v} must be non-negative"),
                        });
                    }
                }
                for &d in &g.d {
                    if d < 2 {
                        return Err(ExperimentError::InvalidParameter {
                            name: "d",
                            detail: format!("{d} must be at least 2"),
                        });
                    }
                }
            }
            ExperimentKind::KlEstimate => {
                self.require("d", g.d.len())?;
                self.require("sigma", g.sigma.len())?;
                self.require("norm", g.norm.len())?;
                positive("sigma", &g.sigma)?;
                positive("norm", &g.norm)?;
            }
            ExperimentKind::ScsBound => {
                self.require("d", g.d.len())?;
                self.require("norm", g.norm.len())?;
                positive("norm", &g.norm)?;
            }
            ExperimentKind::TradeoffSweep => {
                self.require("d", g.d.len())?;
                self.require("m", g.m.len())?;
                self.require("eta", g.eta.len())?;
                positive("eta", &g.eta)?;
                for &m in &g.m {
                    if m < 2 {
                        return Err(ExperimentError::InvalidParameter {
                            name: "m",
                            detail: format!("{m} must be at least 2"),
                        });
                    }
                }
            }
        }
        for &d in &g.d {
            if d == 0 {
                return Err(ExperimentError::InvalidParameter {
                    name: "d",
                    detail: "0 is not a dimension".into(),
                });
            }
        }
        Ok(())
    }

    fn points(&self) -> Vec<GridPoint> {
        let one_usize = vec![0usize];
        let one_f64 = vec![0.0f64];
        let g = &self.grid;
        let (use_m, use_sigma, use_norm, use_eta) = match self.kind {
            ExperimentKind::DecodeError => (true, true, true, false),
            ExperimentKind::Detection => (false, true, true, false),
            ExperimentKind::KlEstimate => (false, true, true, false),
            ExperimentKind::ScsBound => (false, false, true, false),
            ExperimentKind::TradeoffSweep => (true, false, false, true),
        };
        let ms = if use_m { &g.m } else { &one_usize };
        let sigmas = if use_sigma { &g.sigma } else { &one_f64 };
        let norms = if use_norm { &g.norm } else { &one_f64 };
        let etas = if use_eta { &g.eta } else { &one_f64 };
        let mut points = Vec::new();
        for &d in &g.d {
            for &m in ms {
                for &sigma in sigmas {
                    for &norm in norms {
                        for &eta in etas {
                            points.push(GridPoint { d, m, sigma, norm, eta });
                        }
                    }
                }
            }
        }
        points
    }
}

/// Evaluates half-open block ranges of [0, trials) in parallel and
/// returns the per-block results in block order, so any reduction the
/// caller performs is independent of the worker count.
fn parallel_block_results<T: Send>(
    trials: u64,
    workers: usize,
    eval_block: impl Fn(u64, u64) -> Result<T, ExperimentError> + Sync,
) -> Result<Vec<T>, ExperimentError> {
    let blocks = trials.div_ceil(BLOCK_SIZE);
    let workers = workers.clamp(1, blocks.max(1) as usize);
    if workers == 1 {
        let mut out = Vec::with_capacity(blocks as usize);
        for b in 0..blocks {
            out.push(eval_block(b * BLOCK_SIZE, ((b + 1) * BLOCK_SIZE).min(trials))?);
        }
        return Ok(out);
    }
    let next = AtomicU64::new(0);
    let slots: Vec<Mutex<Option<Result<T, ExperimentError>>>> =
        (0..blocks).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let b = next.fetch_add(1, Ordering::Relaxed);
                if b >= blocks {
                    break;
                }
                let res = eval_block(b * BLOCK_SIZE, ((b + 1) * BLOCK_SIZE).min(trials));
                *slots[b as usize].lock().expect("slot poisoned") = Some(res);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot poisoned").expect("block evaluated"))
        .collect()
}

fn random_anchor(stream: &RandomStream, dim: usize, norm: f64) -> Result<LatentVector, ExperimentError> {
    let draw = gaussian_sample(stream, dim, 1.0)?;
    let len = draw.norm();
    if len == 0.0 {
        return Err(ExperimentError::InvalidParameter {
            name: "anchor",
            detail: "degenerate zero draw".into(),
        });
    }
    Ok(draw.scale(norm / len)?)
}

fn decode_error_row(
    point: GridPoint,
    trials: u64,
    anchor_norm: f64,
    stream: &RandomStream,
    workers: usize,
) -> Result<ExperimentRow, ExperimentError> {
    let setup = stream.substream(0);
    let trial_root = stream.substream(1);
    let anchor = random_anchor(&setup.substream(0), point.d, anchor_norm)?;
    let cfg = ChannelConfig::new(anchor, point.sigma)?;
    let book = make_orthogonal_codebook(point.d, point.m, point.norm, &setup.substream(1))?;
    let d_min = min_distance(&book)?;
    let bound = decoding_error_bound(&book, point.sigma)?;

    let ids: Vec<String> = book.entries().iter().map(|e| e.message_id.clone()).collect();
    let blocks = parallel_block_results(trials, workers, |lo, hi| {
        let mut errors = 0u64;
        for i in lo..hi {
            let id = &ids[(i % ids.len() as u64) as usize];
            let stego = channel::encode(&cfg, &book, id, &trial_root.substream(i))?;
            let (decoded, _) = channel::decode(&cfg, &book, &stego)?;
            errors += (decoded != *id) as u64;
        }
        Ok(errors)
    })?;
    let errors: u64 = blocks.iter().sum();
    let empirical = errors as f64 / trials as f64;
    let stderr = (empirical * (1.0 - empirical) / trials as f64).sqrt();
    let mut params = BTreeMap::new();
    params.insert("d".into(), point.d as f64);
    params.insert("m".into(), point.m as f64);
    params.insert("sigma".into(), point.sigma);
    params.insert("norm".into(), point.norm);
    params.insert("d_min".into(), d_min);
    params.insert("trials".into(), trials as f64);
    let verdict = if empirical <= bound + 3.0 * stderr {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(ExperimentRow { params, empirical, bound_or_theory: bound, stderr, verdict })
}

fn detection_row(
    point: GridPoint,
    trials: u64,
    anchor_norm: f64,
    stream: &RandomStream,
    workers: usize,
) -> Result<ExperimentRow, ExperimentError> {
    let setup = stream.substream(0);
    let anchor = random_anchor(&setup.substream(0), point.d, anchor_norm)?;
    let cfg = ChannelConfig::new(anchor, point.sigma)?;
    let (book, detector): (Codebook, Box<DetectorFn<'static>>) = if point.norm == 0.0 {
        // A zero perturbation makes stego and cover identical; every
        // detector has zero advantage, so a blind one stands in for the
        // undefined matched filter.
        let book = Codebook::new(vec![CodebookEntry {
            message_id: "m0".into(),
            perturbation: LatentVector::zeros(point.d)?,
        }])?;
        (book, Box::new(|_: &LatentVector| Ok(false)))
    } else {
        let book = make_orthogonal_codebook(point.d, 2, point.norm, &setup.substream(1))?;
        let detector = detection::template_detector(&cfg, book.get("m0").expect("generated"))?;
        (book, detector)
    };
    let report = detection::run_ind_game_with_workers(
        &cfg,
        &book,
        "m0",
        &*detector,
        trials,
        &stream.substream(1),
        workers,
    )?;
    let mut params = BTreeMap::new();
    params.insert("d".into(), point.d as f64);
    params.insert("sigma".into(), point.sigma);
    params.insert("norm".into(), point.norm);
    params.insert("tv".into(), report.tv);
    params.insert("trials".into(), trials as f64);
    let verdict = if (report.empirical_advantage - report.theoretical_advantage).abs()
        <= 0.01f64.max(3.0 * report.stderr)
    {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(ExperimentRow {
        params,
        empirical: report.empirical_advantage,
        bound_or_theory: report.theoretical_advantage,
        stderr: report.stderr,
        verdict,
    })
}

struct CloudStats {
    sum: Vec<f64>,
    sumsq: f64,
    count: u64,
}

impl CloudStats {
    fn empty(dim: usize) -> Self {
        Self { sum: vec![0.0; dim], sumsq: 0.0, count: 0 }
    }

    fn absorb(&mut self, other: &CloudStats) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.sumsq += other.sumsq;
        self.count += other.count;
    }

    fn push(&mut self, v: &LatentVector) {
        for (a, b) in self.sum.iter_mut().zip(v.as_slice()) {
            *a += b;
        }
        self.sumsq += v.as_slice().iter().map(|x| x * x).sum::<f64>();
        self.count += 1;
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.count as f64).collect()
    }

    /// Pooled per-coordinate variance about the sample mean.
    fn isotropic_variance(&self) -> f64 {
        let mean_sq: f64 = self.mean().iter().map(|m| m * m).sum();
        (self.sumsq - self.count as f64 * mean_sq) / (self.count as f64 * self.sum.len() as f64)
    }
}

fn kl_estimate_row(
    point: GridPoint,
    trials: u64,
    stream: &RandomStream,
    workers: usize,
) -> Result<ExperimentRow, ExperimentError> {
    let setup = stream.substream(0);
    let delta = random_anchor(&setup.substream(0), point.d, point.norm)?;
    let stego_root = stream.substream(1);
    let cover_root = stream.substream(2);

    let blocks = parallel_block_results(trials, workers, |lo, hi| {
        let mut stego = CloudStats::empty(point.d);
        let mut cover = CloudStats::empty(point.d);
        for i in lo..hi {
            let noise = gaussian_sample(&stego_root.substream(i), point.d, point.sigma)?;
            stego.push(&delta.add(&noise)?);
            cover.push(&gaussian_sample(&cover_root.substream(i), point.d, point.sigma)?);
        }
        Ok((stego, cover))
    })?;
    let mut stego = CloudStats::empty(point.d);
    let mut cover = CloudStats::empty(point.d);
    for (s, c) in &blocks {
        stego.absorb(s);
        cover.absorb(c);
    }

    let d = point.d as f64;
    let s1 = stego.isotropic_variance();
    let s0 = cover.isotropic_variance();
    let mean_gap_sq: f64 = stego
        .mean()
        .iter()
        .zip(cover.mean())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let estimate = 0.5 * (d * (s0 / s1).ln() + (d * s1 + mean_gap_sq) / s0 - d);
    let truth = point.norm * point.norm / (2.0 * point.sigma * point.sigma);

    let mut params = BTreeMap::new();
    params.insert("d".into(), point.d as f64);
    params.insert("sigma".into(), point.sigma);
    params.insert("norm".into(), point.norm);
    params.insert("trials".into(), trials as f64);
    let verdict = if (estimate - truth).abs() <= 0.05 * truth {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(ExperimentRow {
        params,
        empirical: estimate,
        bound_or_theory: truth,
        stderr: 0.0,
        verdict,
    })
}

fn scs_bound_row(
    point: GridPoint,
    trials: u64,
    anchor_norm: f64,
    stream: &RandomStream,
    workers: usize,
) -> Result<ExperimentRow, ExperimentError> {
    let trial_root = stream.substream(1);
    let blocks = parallel_block_results(trials, workers, |lo, hi| {
        let mut violations = 0u64;
        for i in lo..hi {
            let sub = trial_root.substream(i);
            let base = gaussian_sample(&sub.substream(0), point.d, anchor_norm)?;
            let mut dev = gaussian_sample(&sub.substream(1), point.d, point.norm)?;
            if base.dot(&dev)? < 0.0 {
                dev = dev.scale(-1.0)?;
            }
            let cos = cosine_similarity(&base, &base.add(&dev)?)?;
            let bound = channel::scs_lower_bound(base.norm(), dev.norm(), true)?;
            violations += (cos < bound - 1e-12) as u64;
        }
        Ok(violations)
    })?;
    let violations: u64 = blocks.iter().sum();
    let mut params = BTreeMap::new();
    params.insert("d".into(), point.d as f64);
    params.insert("norm".into(), point.norm);
    params.insert("trials".into(), trials as f64);
    Ok(ExperimentRow {
        params,
        empirical: violations as f64,
        bound_or_theory: 0.0,
        stderr: 0.0,
        verdict: if violations == 0 { Verdict::Pass } else { Verdict::Fail },
    })
}

fn tradeoff_row(
    point: GridPoint,
    trials: u64,
    anchor_norm: f64,
    stream: &RandomStream,
    workers: usize,
) -> Result<ExperimentRow, ExperimentError> {
    let radius = (2.0 * point.eta).sqrt() * anchor_norm;
    let trial_root = stream.substream(1);
    let blocks = parallel_block_results(trials, workers, |lo, hi| {
        let mut violations = 0u64;
        for i in lo..hi {
            let book = make_ball_codebook(point.d, point.m, radius, &trial_root.substream(i))?;
            violations += (min_distance(&book)? > 2.0 * radius) as u64;
        }
        Ok(violations)
    })?;
    let violations: u64 = blocks.iter().sum();
    let mut params = BTreeMap::new();
    params.insert("d".into(), point.d as f64);
    params.insert("m".into(), point.m as f64);
    params.insert("eta".into(), point.eta);
    params.insert("radius".into(), radius);
    params.insert("trials".into(), trials as f64);
    Ok(ExperimentRow {
        params,
        empirical: violations as f64,
        bound_or_theory: 2.0 * radius,
        stderr: 0.0,
        verdict: if violations == 0 { Verdict::Pass } else { Verdict::Fail },
    })
}

/// Runs every grid point sequentially on one worker.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ExperimentRow>, ExperimentError> {
    run_experiment_with_workers(spec, 1)
}

/// Runs the sweep with trials sharded over `workers` threads. Rows are
/// identical for every worker count and emitted in grid order.
pub fn run_experiment_with_workers(
    spec: &ExperimentSpec,
    workers: usize,
) -> Result<Vec<ExperimentRow>, ExperimentError> {
    spec.validate()?;
    let root = RandomStream::new(spec.seed);
    let trials = spec.grid.trials;
    let anchor_norm = spec.grid.anchor_norm;
    spec.points()
        .into_iter()
        .enumerate()
        .map(|(index, point)| {
            let stream = root.substream(index as u64);
            match spec.kind {
                ExperimentKind::DecodeError => {
                    decode_error_row(point, trials, anchor_norm, &stream, workers)
                }
                ExperimentKind::Detection => {
                    detection_row(point, trials, anchor_norm, &stream, workers)
                }
                ExperimentKind::KlEstimate => kl_estimate_row(point, trials, &stream, workers),
                ExperimentKind::ScsBound => {
                    scs_bound_row(point, trials, anchor_norm, &stream, workers)
                }
                ExperimentKind::TradeoffSweep => {
                    tradeoff_row(point, trials, anchor_norm, &stream, workers)
                }
            }
        })
        .collect()
}

/// Writes rows as CSV: sorted parameter columns, then the comparison
/// fields. Parameters absent from a row leave an empty cell.
pub fn write_rows_csv<W: Write>(writer: W, rows: &[ExperimentRow]) -> Result<(), ExperimentError> {
    let mut keys: Vec<String> = Vec::new();
    for row in rows {
        for key in row.params.keys() {
            if !keys.contains(key) {
                keys.push(key.clone());
            }
        }
    }
    keys.sort();
    let mut csv_writer = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = keys.clone();
    header.extend(
        ["empirical", "bound_or_theory", "stderr", "verdict"]
            .iter()
            .map(|s| s.to_string()),
    );
    csv_writer.write_record(&header)?;
    for row in rows {
        let mut record: Vec<String> = keys
            .iter()
            .map(|k| row.params.get(k).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        record.push(row.empirical.to_string());
        record.push(row.bound_or_theory.to_string());
        record.push(row.stderr.to_string());
        record.push(match row.verdict {
            Verdict::Pass => "pass".to_string(),
            Verdict::Fail => "fail".to_string(),
        });
        csv_writer.write_record(&record)?;
    }
    csv_writer.flush()?;
    Ok(())
}

pub fn write_rows_json<W: Write>(writer: W, rows: &[ExperimentRow]) -> Result<(), ExperimentError> {
    serde_json::to_writer_pretty(writer, rows)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ExperimentKind, grid: ParameterGrid, seed: u64) -> ExperimentSpec {
        ExperimentSpec { kind, grid, seed }
    }

    fn base_grid() -> ParameterGrid {
        ParameterGrid {
            d: vec![],
            m: vec![],
            sigma: vec![],
            norm: vec![],
            eta: vec![],
            trials: 200,
            anchor_norm: 10.0,
        }
    }

    #[test]
    fn wilson_interval_reference() {
        let (lo, hi) = wilson_interval(50, 100, 1.96).unwrap();
        assert!((lo - 0.40382982859014715).abs() < 1e-12);
        assert!((hi - 0.59617017140985285).abs() < 1e-12);
        assert_eq!(wilson_interval(0, 40, 1.96).unwrap().0, 0.0);
        assert_eq!(wilson_interval(40, 40, 1.96).unwrap().1, 1.0);
        assert!(matches!(
            wilson_interval(5, 4, 1.96),
            Err(ExperimentError::WilsonDomain { .. })
        ));
        assert!(matches!(
            wilson_interval(1, 4, 0.0),
            Err(ExperimentError::InvalidParameter { .. })
        ));
    }

    #[test]
    fn decode_error_noiseless_passes_with_zero_errors() {
        let mut grid = base_grid();
        grid.d = vec![8];
        grid.m = vec![4];
        grid.sigma = vec![1e-9];
        grid.norm = vec![1.0];
        let rows = run_experiment(&spec(ExperimentKind::DecodeError, grid, 1)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].empirical, 0.0);
        assert_eq!(rows[0].verdict, Verdict::Pass);
        let dmin = rows[0].params["d_min"];
        assert!((dmin - 2.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn decode_error_tracks_union_bound() {
        let mut grid = base_grid();
        grid.d = vec![16];
        grid.m = vec![4];
        grid.sigma = vec![1.0];
        grid.norm = vec![1.0];
        grid.trials = 4000;
        let rows = run_experiment(&spec(ExperimentKind::DecodeError, grid, 2)).unwrap();
        assert_eq!(rows[0].verdict, Verdict::Pass);
        assert!(rows[0].empirical > 0.0);
        assert!(rows[0].empirical <= rows[0].bound_or_theory + 3.0 * rows[0].stderr);
    }

    #[test]
    fn detection_zero_norm_has_zero_theory() {
        let mut grid = base_grid();
        grid.d = vec![8];
        grid.sigma = vec![1.0];
        grid.norm = vec![0.0];
        let rows = run_experiment(&spec(ExperimentKind::Detection, grid, 3)).unwrap();
        assert_eq!(rows[0].bound_or_theory, 0.0);
        assert_eq!(rows[0].verdict, Verdict::Pass);
    }

    #[test]
    fn detection_sweep_matches_theory() {
        let mut grid = base_grid();
        grid.d = vec![8];
        grid.sigma = vec![1.0];
        grid.norm = vec![1.0, 2.0];
        grid.trials = 20_000;
        let rows = run_experiment(&spec(ExperimentKind::Detection, grid, 4)).unwrap();
        assert_eq!(rows.len(), 2);
        for row in rows {
            assert_eq!(row.verdict, Verdict::Pass);
        }
    }

    #[test]
    fn kl_estimate_within_five_percent() {
        let mut grid = base_grid();
        grid.d = vec![8];
        grid.sigma = vec![1.0];
        grid.norm = vec![1.0];
        grid.trials = 20_000;
        let rows = run_experiment(&spec(ExperimentKind::KlEstimate, grid, 5)).unwrap();
        assert_eq!(rows[0].bound_or_theory, 0.5);
        assert_eq!(rows[0].verdict, Verdict::Pass);
    }

    #[test]
    fn scs_bound_never_violated() {
        let mut grid = base_grid();
        grid.d = vec![4, 16];
        grid.norm = vec![0.5, 5.0];
        grid.trials = 1000;
        let rows = run_experiment(&spec(ExperimentKind::ScsBound, grid, 6)).unwrap();
        assert_eq!(rows.len(), 4);
        for row in rows {
            assert_eq!(row.empirical, 0.0);
            assert_eq!(row.verdict, Verdict::Pass);
        }
    }

    #[test]
    fn tradeoff_sweep_respects_cap() {
        let mut grid = base_grid();
        grid.d = vec![6];
        grid.m = vec![4];
        grid.eta = vec![0.02, 0.5];
        grid.trials = 300;
        let rows = run_experiment(&spec(ExperimentKind::TradeoffSweep, grid, 7)).unwrap();
        for row in &rows {
            assert_eq!(row.verdict, Verdict::Pass);
        }
        assert!((rows[0].params["radius"] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rows_are_worker_count_invariant() {
        for kind in [
            ExperimentKind::DecodeError,
            ExperimentKind::Detection,
            ExperimentKind::KlEstimate,
            ExperimentKind::ScsBound,
            ExperimentKind::TradeoffSweep,
        ] {
            let mut grid = base_grid();
            grid.d = vec![8];
            grid.m = vec![4];
            grid.sigma = vec![1.0];
            grid.norm = vec![1.0];
            grid.eta = vec![0.1];
            grid.trials = 9000;
            let s = spec(kind, grid, 8);
            let solo = run_experiment_with_workers(&s, 1).unwrap();
            let sharded = run_experiment_with_workers(&s, 4).unwrap();
            assert_eq!(solo, sharded, "kind {kind:?} differs across workers");
            let again = run_experiment_with_workers(&s, 4).unwrap();
            assert_eq!(sharded, again);
        }
    }

    #[test]
    fn spec_parsing_from_toml_and_json() {
        let single = r#"
            kind = "decode_error"
            seed = 42
            [grid]
            d = [16]
            m = [2]
            sigma = [1.0]
            norm = [1.0]
            trials = 1000
        "#;
        let specs = ExperimentSpec::from_toml_str(single).unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].kind, ExperimentKind::DecodeError);
        assert_eq!(specs[0].grid.anchor_norm, 10.0);

        let multi = r#"
            [[experiment]]
            kind = "scs_bound"
            seed = 1
            [experiment.grid]
            d = [4]
            norm = [1.0]
            trials = 500

            [[experiment]]
            kind = "tradeoff_sweep"
            seed = 2
            [experiment.grid]
            d = [4]
            m = [2]
            eta = [0.1]
            trials = 200
        "#;
        let specs = ExperimentSpec::from_toml_str(multi).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[1].kind, ExperimentKind::TradeoffSweep);

        let json = r#"{"kind": "detection", "seed": 9,
                       "grid": {"d": [8], "sigma": [1.0], "norm": [0.5], "trials": 400}}"#;
        let specs = ExperimentSpec::from_json_str(json).unwrap();
        assert_eq!(specs[0].kind, ExperimentKind::Detection);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut grid = base_grid();
        grid.d = vec![16];
        grid.m = vec![2];
        grid.sigma = vec![1.0];
        grid.norm = vec![1.0];
        grid.trials = 99;
        let err = run_experiment(&spec(ExperimentKind::DecodeError, grid.clone(), 0)).unwrap_err();
        assert!(matches!(err, ExperimentError::TooFewTrials { trials: 99 }));

        grid.trials = 1000;
        grid.m = vec![32];
        let err = run_experiment(&spec(ExperimentKind::DecodeError, grid.clone(), 0)).unwrap_err();
        assert!(matches!(err, ExperimentError::InvalidParameter { name: "m", .. }));

        grid.m = vec![2];
        grid.sigma = vec![];
        let err = run_experiment(&spec(ExperimentKind::DecodeError, grid, 0)).unwrap_err();
        assert!(matches!(
            err,
            ExperimentError::MissingParameter { name: "sigma", .. }
        ));
    }

    #[test]
    fn row_writers_produce_csv_and_json() {
        let mut grid = base_grid();
        grid.d = vec![4];
        grid.norm = vec![1.0];
        grid.trials = 120;
        let rows = run_experiment(&spec(ExperimentKind::ScsBound, grid, 11)).unwrap();
        let mut csv_buf = Vec::new();
        write_rows_csv(&mut csv_buf, &rows).unwrap();
        let text = String::from_utf8(csv_buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "d,norm,trials,empirical,bound_or_theory,stderr,verdict"
        );
        assert!(lines.next().unwrap().ends_with("pass"));

        let mut json_buf = Vec::new();
        write_rows_json(&mut json_buf, &rows).unwrap();
        let back: Vec<ExperimentRow> = serde_json::from_slice(&json_buf).unwrap();
        assert_eq!(back, rows);
    }
}
