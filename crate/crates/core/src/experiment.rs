//! Multi-seed optimizer comparisons driven by a TOML file, with CSV traces
//! and a JSON manifest on disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cvbm::{train_continuous, ContinuousData, EmbeddingLayer, RAW_DIM, REDUCED_DIM};
use crate::data::{gen_bas, load_iris_csv, load_mnist_idx, min_max_scale, mnist_dataset, parse_iris_csv, Dataset};
use crate::error::{Error, Result};
use crate::mps::Mps;
use crate::newton::{NewtonConfig, Solver};
use crate::sweep::{train, LossTrace, OptimizerKind, RegularizationSchedule, TrainingSet};

pub const TRACE_HEADER: [&str; 8] = ["iteration", "sweep", "site", "nll", "reg_loss", "epsilon", "inner_iters", "seconds"];
pub const AGGREGATE_HEADER: [&str; 6] = ["iteration", "sweep", "site", "mean_nll", "std_nll", "n_seeds"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `n x n` bars and stripes; all patterns with equal weight unless
    /// `n_train_samples` draws with replacement.
    Bas {
        n: usize,
        #[serde(default)]
        n_train_samples: Option<usize>,
        #[serde(default)]
        sample_seed: u64,
    },
    /// IDX image file, pooled to `side x side` and thresholded.
    Mnist {
        path: PathBuf,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_threshold")]
        threshold: f64,
        n_train_samples: usize,
        #[serde(default)]
        sample_seed: u64,
    },
    /// Four-feature CSV, min-max scaled to `[0, 1]`.
    Iris {
        path: PathBuf,
        #[serde(default)]
        class: Option<String>,
        #[serde(default = "default_raw_dim")]
        raw_dim: usize,
        #[serde(default = "default_reduced_dim")]
        reduced_dim: usize,
        #[serde(default = "default_learning_rate")]
        isometry_learning_rate: f64,
    },
    /// `bitstring weight` lines.
    File {
        path: PathBuf,
        #[serde(default = "default_site_dim")]
        site_dim: usize,
        #[serde(default)]
        n_train_samples: Option<usize>,
        #[serde(default)]
        sample_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub bond_dim: usize,
    /// Checked against the dataset when given.
    #[serde(default)]
    pub n_sites: Option<usize>,
    #[serde(default)]
    pub site_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kinds: Vec<String>,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default = "default_bias")]
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_solver")]
    pub kind: String,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_max_inner")]
    pub max_inner_iters: usize,
    #[serde(default)]
    pub step_cap: Option<f64>,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            kind: default_solver(),
            inner_tol: default_inner_tol(),
            max_inner_iters: default_max_inner(),
            step_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub n_sweeps: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Wall-clock seconds in the trace; off by default so reruns are
    /// byte-identical.
    #[serde(default)]
    pub record_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    pub run: RunSpec,
}

fn default_side() -> usize {
    7
}
fn default_threshold() -> f64 {
    0.5
}
fn default_raw_dim() -> usize {
    RAW_DIM
}
fn default_reduced_dim() -> usize {
    REDUCED_DIM
}
fn default_learning_rate() -> f64 {
    OptimizerKind::DEFAULT_LEARNING_RATE
}
fn default_site_dim() -> usize {
    2
}
fn default_epsilon0() -> f64 {
    RegularizationSchedule::default().initial
}
fn default_decay() -> f64 {
    RegularizationSchedule::default().decay
}
fn default_floor() -> f64 {
    RegularizationSchedule::default().floor
}
fn default_bias() -> f64 {
    crate::loss::DEFAULT_BIAS
}
fn default_solver() -> String {
    "iterative".into()
}
fn default_inner_tol() -> f64 {
    NewtonConfig::default().inner_tol
}
fn default_max_inner() -> usize {
    NewtonConfig::default().max_inner_iters
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

pub fn parse_optimizer(name: &str, spec: &OptimizerSpec) -> Option<OptimizerKind> {
    Some(match name {
        "steepest_descent" => OptimizerKind::SteepestDescent { learning_rate: spec.learning_rate },
        "newton" => OptimizerKind::Newton,
        "reg_newton_smooth" => OptimizerKind::RegNewtonSmooth,
        "reg_newton_bias" => OptimizerKind::RegNewtonBias { shift: spec.bias },
        _ => return None,
    })
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.as_ref().parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// Makes dataset and output paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSpec::Mnist { path, .. } | DatasetSpec::Iris { path, .. } | DatasetSpec::File { path, .. } => fix(path),
            DatasetSpec::Bas { .. } => {}
        }
        fix(&mut self.run.output_dir);
    }

    pub fn optimizers(&self) -> Vec<OptimizerKind> {
        self.optimizer.kinds.iter().filter_map(|k| parse_optimizer(k, &self.optimizer)).collect()
    }

    pub fn schedule(&self) -> RegularizationSchedule {
        RegularizationSchedule { initial: self.optimizer.epsilon0, decay: self.optimizer.decay, floor: self.optimizer.floor }
    }

    pub fn newton_config(&self) -> NewtonConfig {
        NewtonConfig {
            solver: if self.solver.kind == "dense" { Solver::Dense } else { Solver::Iterative },
            inner_tol: self.solver.inner_tol,
            max_inner_iters: self.solver.max_inner_iters,
            step_cap: self.solver.step_cap,
        }
    }

    /// Every problem found, each prefixed by its key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut bad = |key: &str, msg: String| out.push(format!("{key}: {msg}"));
        match &self.dataset {
            DatasetSpec::Bas { n, n_train_samples, .. } => {
                if *n < 2 {
                    bad("dataset.n", format!("must be >= 2, got {n}"));
                }
                if *n_train_samples == Some(0) {
                    bad("dataset.n_train_samples", "must be >= 1".into());
                }
            }
            DatasetSpec::Mnist { path, side, threshold, n_train_samples, .. } => {
                if !path.is_file() {
                    bad("dataset.path", format!("{} does not exist", path.display()));
                }
                if *side == 0 || *side > 28 {
                    bad("dataset.side", format!("must be in 1..=28, got {side}"));
                }
                if !threshold.is_finite() {
                    bad("dataset.threshold", "must be finite".into());
                }
                if *n_train_samples == 0 {
                    bad("dataset.n_train_samples", "must be >= 1".into());
                }
            }
            DatasetSpec::Iris { path, raw_dim, reduced_dim, isometry_learning_rate, .. } => {
                if !path.is_file() {
                    bad("dataset.path", format!("{} does not exist", path.display()));
                }
                if *reduced_dim == 0 || reduced_dim > raw_dim {
                    bad("dataset.reduced_dim", format!("must be in 1..={raw_dim}, got {reduced_dim}"));
                }
                if !(*isometry_learning_rate > 0.0) {
                    bad("dataset.isometry_learning_rate", "must be > 0".into());
                }
            }
            DatasetSpec::File { path, site_dim, n_train_samples, .. } => {
                if !path.is_file() {
                    bad("dataset.path", format!("{} does not exist", path.display()));
                }
                if *site_dim < 2 || *site_dim > 10 {
                    bad("dataset.site_dim", format!("must be in 2..=10, got {site_dim}"));
                }
                if *n_train_samples == Some(0) {
                    bad("dataset.n_train_samples", "must be >= 1".into());
                }
            }
        }
        if self.model.bond_dim == 0 {
            bad("model.bond_dim", "must be >= 1".into());
        }
        if let (Some(n), Some(expected)) = (self.model.n_sites, self.implied_sites()) {
            if n != expected {
                bad("model.n_sites", format!("dataset implies {expected} sites, got {n}"));
            }
        }
        if let Some(d) = self.model.site_dim {
            if d != self.implied_site_dim() {
                bad("model.site_dim", format!("dataset implies {}, got {d}", self.implied_site_dim()));
            }
        }
        if self.optimizer.kinds.is_empty() {
            bad("optimizer.kinds", "must name at least one optimizer".into());
        }
        let mut seen = Vec::new();
        for k in &self.optimizer.kinds {
            if parse_optimizer(k, &self.optimizer).is_none() {
                bad(
                    "optimizer.kinds",
                    format!("unknown optimizer {k:?}; expected steepest_descent, newton, reg_newton_smooth or reg_newton_bias"),
                );
            } else if seen.contains(&k) {
                bad("optimizer.kinds", format!("{k:?} listed twice"));
            }
            seen.push(k);
        }
        if !(self.optimizer.learning_rate > 0.0) {
            bad("optimizer.learning_rate", format!("must be > 0, got {}", self.optimizer.learning_rate));
        }
        if let Err(e) = self.schedule().validate() {
            bad("optimizer.epsilon0/decay/floor", e.to_string());
        }
        if !self.optimizer.bias.is_finite() {
            bad("optimizer.bias", "must be finite".into());
        }
        if self.solver.kind != "dense" && self.solver.kind != "iterative" {
            bad("solver.kind", format!("expected dense or iterative, got {:?}", self.solver.kind));
        }
        if let Err(e) = self.newton_config().validate() {
            bad("solver", e.to_string());
        }
        if self.run.n_sweeps == 0 {
            bad("run.n_sweeps", "must be >= 1".into());
        }
        if self.run.seeds.is_empty() {
            bad("run.seeds", "must list at least one seed".into());
        }
        let mut sorted = self.run.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.run.seeds.len() {
            bad("run.seeds", "seeds must be distinct".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    fn implied_sites(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSpec::Bas { n, .. } => Some(n * n),
            DatasetSpec::Mnist { side, .. } => Some(side * side),
            DatasetSpec::Iris { .. } => Some(4),
            DatasetSpec::File { .. } => None,
        }
    }

    fn implied_site_dim(&self) -> usize {
        match &self.dataset {
            DatasetSpec::Iris { reduced_dim, .. } => *reduced_dim,
            DatasetSpec::File { site_dim, .. } => *site_dim,
            _ => 2,
        }
    }

    /// SHA-256 of the canonical TOML rendering of the config.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_toml().as_bytes()))
    }

    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

enum Prepared {
    Discrete(TrainingSet),
    Continuous { data: ContinuousData, raw_dim: usize, reduced_dim: usize, learning_rate: f64 },
}

impl Prepared {
    fn n_sites(&self) -> usize {
        match self {
            Prepared::Discrete(t) => t.inputs.n_sites().unwrap_or(0),
            Prepared::Continuous { data, .. } => data.n_sites(),
        }
    }
}

fn maybe_draw(d: Dataset, count: Option<usize>, seed: u64) -> Result<Dataset> {
    match count {
        Some(c) => d.draw(c, seed),
        None => Ok(d),
    }
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    Ok(match &cfg.dataset {
        DatasetSpec::Bas { n, n_train_samples, sample_seed } => {
            Prepared::Discrete(TrainingSet::from(&maybe_draw(gen_bas(*n)?, *n_train_samples, *sample_seed)?))
        }
        DatasetSpec::Mnist { path, side, threshold, n_train_samples, sample_seed } => {
            let images = load_mnist_idx(path)?;
            Prepared::Discrete(TrainingSet::from(&mnist_dataset(&images, *side, *n_train_samples, *threshold, *sample_seed)?))
        }
        DatasetSpec::Iris { path, class, raw_dim, reduced_dim, isometry_learning_rate } => {
            let mut records = match class {
                None => load_iris_csv(path, false)?,
                Some(_) => parse_iris_csv(fs::File::open(path)?, 4)?,
            };
            if let Some(c) = class {
                records.retain(|r| r.label.as_deref() == Some(c.as_str()));
                if records.is_empty() {
                    return Err(Error::Config(format!("dataset.class: no records labelled {c:?}")));
                }
            }
            min_max_scale(&mut records);
            Prepared::Continuous {
                data: ContinuousData::from_records(&records, *raw_dim)?,
                raw_dim: *raw_dim,
                reduced_dim: *reduced_dim,
                learning_rate: *isometry_learning_rate,
            }
        }
        DatasetSpec::File { path, site_dim, n_train_samples, sample_seed } => {
            let file = std::io::BufReader::new(fs::File::open(path)?);
            Prepared::Discrete(TrainingSet::from(&maybe_draw(
                Dataset::read_text(*site_dim, file)?,
                *n_train_samples,
                *sample_seed,
            )?))
        }
    })
}

/// Seed used for the isometry initialization of a continuous run.
pub fn layer_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn run_one(cfg: &ExperimentConfig, prepared: &Prepared, opt: OptimizerKind, seed: u64) -> Result<LossTrace> {
    let schedule = cfg.schedule();
    let newton = cfg.newton_config();
    let n = prepared.n_sites();
    match prepared {
        Prepared::Discrete(set) => {
            let mps = Mps::random(n, set.inputs.site_dim(), cfg.model.bond_dim, seed)?;
            train(mps, set, opt, &schedule, cfg.run.n_sweeps, &newton).map(|(_, t)| t)
        }
        Prepared::Continuous { data, raw_dim, reduced_dim, learning_rate } => {
            let mps = Mps::random(n, *reduced_dim, cfg.model.bond_dim, seed)?;
            let layer = EmbeddingLayer::random(n, *raw_dim, *reduced_dim, layer_seed(seed))?;
            train_continuous(mps, layer, data, opt, &schedule, cfg.run.n_sweeps, &newton, *learning_rate)
                .map(|(_, _, t)| t)
        }
    }
}

/// Per-iteration statistics of one optimizer across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub optimizer: String,
    pub seeds: Vec<u64>,
    pub final_nll: Vec<f64>,
    /// `(iteration, sweep, site)` for every row.
    pub axis: Vec<(usize, usize, usize)>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub wall_seconds: f64,
    pub config_hash: String,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 || !mean.is_finite() {
        return (mean, if mean.is_finite() { 0.0 } else { f64::NAN });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RunSummary {
    pub fn from_traces(optimizer: &str, seeds: &[u64], traces: &[LossTrace], wall_seconds: f64, config_hash: &str) -> Result<Self> {
        let first = traces.first().ok_or_else(|| Error::Alignment("no traces".into()))?;
        let axis: Vec<_> = first.records.iter().map(|r| (r.iteration, r.sweep, r.site)).collect();
        for t in traces {
            let other: Vec<_> = t.records.iter().map(|r| (r.iteration, r.sweep, r.site)).collect();
            if other != axis {
                return Err(Error::Alignment("seed traces have different iteration axes".into()));
            }
        }
        let (mean, std) = (0..axis.len())
            .map(|i| mean_std(&traces.iter().map(|t| t.records[i].nll).collect::<Vec<_>>()))
            .unzip();
        Ok(Self {
            optimizer: optimizer.to_string(),
            seeds: seeds.to_vec(),
            final_nll: traces.iter().map(LossTrace::final_nll).collect(),
            axis,
            mean,
            std,
            wall_seconds,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn write_aggregate<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(AGGREGATE_HEADER).map_err(csv_err)?;
        for (i, &(it, sw, site)) in self.axis.iter().enumerate() {
            out.write_record([
                it.to_string(),
                sw.to_string(),
                site.to_string(),
                self.mean[i].to_string(),
                self.std[i].to_string(),
                self.seeds.len().to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads an aggregate CSV; per-seed values and provenance are not
    /// stored there and come back empty.
    pub fn read_aggregate(optimizer: &str, r: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header != AGGREGATE_HEADER {
            return Err(Error::Parse { row: 1, column: 0, message: format!("unexpected header {header:?}") });
        }
        let mut s = Self {
            optimizer: optimizer.to_string(),
            seeds: Vec::new(),
            final_nll: Vec::new(),
            axis: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
            wall_seconds: 0.0,
            config_hash: String::new(),
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let cell = |c: usize| -> Result<&str> {
                rec.get(c).ok_or(Error::Parse { row: i + 2, column: c + 1, message: "missing cell".into() })
            };
            let int = |c: usize| -> Result<usize> {
                cell(c)?.parse().map_err(|_| Error::Parse { row: i + 2, column: c + 1, message: "not an integer".into() })
            };
            let real = |c: usize| -> Result<f64> {
                cell(c)?.parse().map_err(|_| Error::Parse { row: i + 2, column: c + 1, message: "not a number".into() })
            };
            s.axis.push((int(0)?, int(1)?, int(2)?));
            s.mean.push(real(3)?);
            s.std.push(real(4)?);
        }
        Ok(s)
    }

    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(f64::NAN)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse { row: e.position().map_or(0, |p| p.line() as usize), column: 0, message: e.to_string() }
}

pub fn write_trace<W: Write>(trace: &LossTrace, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACE_HEADER).map_err(csv_err)?;
    for r in &trace.records {
        out.write_record([
            r.iteration.to_string(),
            r.sweep.to_string(),
            r.site.to_string(),
            r.nll.to_string(),
            r.reg_loss.to_string(),
            r.epsilon.to_string(),
            r.inner_iters.to_string(),
            r.seconds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedFailure {
    pub optimizer: String,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summaries: Vec<RunSummary>,
    pub failures: Vec<SeedFailure>,
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub config_hash: String,
}

/// Runs every configured optimizer over every seed (seeds in parallel) and
/// writes `<optimizer>_seed<seed>.csv`, `<optimizer>_aggregate.csv` and
/// `manifest.json` under the output directory. Seeds that fail keep the
/// artifacts of the others; their optimizer gets no aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let hash = cfg.hash();
    let dir = cfg.run.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for opt in cfg.optimizers() {
        let name = opt.name();
        let clock = Instant::now();
        let results: Vec<(u64, Result<LossTrace>)> = cfg
            .run
            .seeds
            .par_iter()
            .map(|&seed| {
                let mut r = run_one(cfg, &prepared, opt, seed);
                if !cfg.run.record_time {
                    if let Ok(t) = &mut r {
                        t.records.iter_mut().for_each(|rec| rec.seconds = 0.0);
                    }
                }
                (seed, r)
            })
            .collect();
        let wall = clock.elapsed().as_secs_f64();
        let mut traces = Vec::new();
        for (seed, r) in results {
            match r {
                Ok(t) => {
                    let path = dir.join(format!("{name}_seed{seed}.csv"));
                    write_trace(&t, fs::File::create(&path)?)?;
                    files.push(path);
                    traces.push(t);
                }
                Err(e) => failures.push(SeedFailure { optimizer: name.into(), seed, message: e.to_string() }),
            }
        }
        if traces.len() == cfg.run.seeds.len() {
            let summary = RunSummary::from_traces(name, &cfg.run.seeds, &traces, wall, &hash)?;
            let path = dir.join(format!("{name}_aggregate.csv"));
            summary.write_aggregate(fs::File::create(&path)?)?;
            files.push(path);
            summaries.push(summary);
        }
    }
    let manifest = manifest(cfg, &hash, &summaries, &failures, &files)?;
    let path = dir.join("manifest.json");
    fs::write(&path, manifest)?;
    files.push(path);
    Ok(ExperimentOutcome { summaries, failures, output_dir: dir, files, config_hash: hash })
}

fn manifest(
    cfg: &ExperimentConfig,
    hash: &str,
    summaries: &[RunSummary],
    failures: &[SeedFailure],
    files: &[PathBuf],
) -> Result<String> {
    let mut hashes = BTreeMap::new();
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        hashes.insert(name, hex(&Sha256::digest(fs::read(f)?)));
    }
    let runs: Vec<serde_json::Value> = summaries
        .iter()
        .map(|s| {
            let finals: BTreeMap<String, serde_json::Value> = s
                .seeds
                .iter()
                .zip(&s.final_nll)
                .map(|(seed, v)| (seed.to_string(), json_number(*v)))
                .collect();
            let mut run = serde_json::json!({
                "optimizer": s.optimizer,
                "final_nll": finals,
                "final_mean": json_number(s.final_mean()),
                "final_std": json_number(s.std.last().copied().unwrap_or(f64::NAN)),
            });
            if cfg.run.record_time {
                run["wall_seconds"] = serde_json::json!(s.wall_seconds);
            }
            run
        })
        .collect();
    let fails: Vec<serde_json::Value> = failures
        .iter()
        .map(|f| serde_json::json!({ "optimizer": f.optimizer, "seed": f.seed, "error": f.message }))
        .collect();
    let doc = serde_json::json!({
        "tool": "tnbm",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
        "config": cfg.canonical_toml(),
        "runs": runs,
        "failures": fails,
        "files": hashes,
    });
    Ok(serde_json::to_string_pretty(&doc).expect("manifest serializes") + "\n")
}

/// Non-finite values become strings so they survive JSON.
fn json_number(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(v.to_string())
    }
}

/// Aligned per-iteration comparison of several summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub names: Vec<String>,
    pub axis: Vec<(usize, usize, usize)>,
    /// `rows[i][k]` is `(mean, std)` of optimizer `k` at row `i`.
    pub rows: Vec<Vec<(f64, f64)>>,
    /// `(name, final mean, gap to the best final mean)`, best first.
    pub ranking: Vec<(String, f64, f64)>,
}

pub fn compare(summaries: &[RunSummary]) -> Result<Comparison> {
    let first = summaries.first().ok_or_else(|| Error::Alignment("nothing to compare".into()))?;
    for s in &summaries[1..] {
        if s.axis.len() != first.axis.len() {
            return Err(Error::Alignment(format!(
                "{} has {} iterations, {} has {}",
                first.optimizer,
                first.axis.len(),
                s.optimizer,
                s.axis.len()
            )));
        }
        if let Some(i) = (0..s.axis.len()).find(|&i| s.axis[i] != first.axis[i]) {
            return Err(Error::Alignment(format!(
                "{} and {} differ at row {i}: {:?} vs {:?}",
                first.optimizer, s.optimizer, first.axis[i], s.axis[i]
            )));
        }
    }
    let rows = (0..first.axis.len())
        .map(|i| summaries.iter().map(|s| (s.mean[i], s.std[i])).collect())
        .collect();
    let mut ranking: Vec<(String, f64, f64)> =
        summaries.iter().map(|s| (s.optimizer.clone(), s.final_mean(), 0.0)).collect();
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1));
    let best = ranking[0].1;
    for r in &mut ranking {
        r.2 = if r.1 == best { 0.0 } else { r.1 - best };
    }
    Ok(Comparison { names: summaries.iter().map(|s| s.optimizer.clone()).collect(), axis: first.axis.clone(), rows, ranking })
}

impl Comparison {
    /// CSV of `mean` and `std` columns per optimizer, then a ranking block
    /// after a blank line.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("iteration,sweep,site");
        for n in &self.names {
            let _ = write!(header, ",{n}_mean,{n}_std");
        }
        writeln!(w, "{header}")?;
        for (i, (it, sw, site)) in self.axis.iter().enumerate() {
            let mut line = format!("{it},{sw},{site}");
            for (m, s) in &self.rows[i] {
                let _ = write!(line, ",{m},{s}");
            }
            writeln!(w, "{line}")?;
        }
        writeln!(w)?;
        writeln!(w, "rank,optimizer,final_mean_nll,gap_to_best")?;
        for (k, (n, m, g)) in self.ranking.iter().enumerate() {
            writeln!(w, "{},{n},{m},{g}", k + 1)?;
        }
        Ok(())
    }
}
