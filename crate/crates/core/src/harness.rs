//! Experiment drivers: convergence traces, selectivity/recall sweeps and
//! scan-count histograms, each written as CSV.
//!
//! A sweep trains k-means once per `k`, runs one balancing pass up to the
//! largest iteration preset, and takes the codebook at every preset from
//! the trace; the loop is deterministic, so this equals a separate run per
//! preset.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::balancer::{balance, BalanceConfig, BalanceTrace, Codebook, StopRule};
use crate::dataset::{load_vectors, VectorSet};
use crate::error::{Error, Result};
use crate::index::{InvertedFile, Route, SearchParams};
use crate::kmeans::{lloyd, KMeansConfig};
use crate::metrics::{brute_force_nn, evaluate_with_width, EvalReport, GroundTruth};

/// Which vectors train k-means and which drive balancing. The index always
/// holds the database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BalanceSource {
    /// Both on the database.
    #[default]
    Closed,
    /// k-means on the learning set, balancing on the database.
    Semiclosed,
    /// Both on the learning set.
    Open,
}

impl FromStr for BalanceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(Self::Closed),
            "semiclosed" => Ok(Self::Semiclosed),
            "open" => Ok(Self::Open),
            _ => Err(Error::invalid(format!("unknown mode `{s}`"))),
        }
    }
}

/// Depth of the cached ground truth.
pub const TRUTH_DEPTH: usize = 10;

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub database: Arc<VectorSet>,
    pub queries: Option<VectorSet>,
    pub learning: Option<VectorSet>,
    pub ks: Vec<usize>,
    pub mas: Vec<usize>,
    /// Balancing iteration counts to report; 0 is the plain k-means partition.
    pub iters: Vec<usize>,
    pub alpha: f64,
    pub seed: u64,
    pub mode: BalanceSource,
    pub route: Route,
    pub kmeans_max_iters: usize,
    pub kmeans_rel_tol: f64,
    pub bucket_width: Option<usize>,
    pub out: PathBuf,
}

impl ExperimentSpec {
    pub fn new(database: Arc<VectorSet>, out: impl Into<PathBuf>) -> Self {
        Self {
            database,
            queries: None,
            learning: None,
            ks: vec![256],
            mas: vec![1],
            iters: vec![0, 8, 16, 32, 64],
            alpha: 0.01,
            seed: 0,
            mode: BalanceSource::Closed,
            route: Route::Penalized,
            kmeans_max_iters: 100,
            kmeans_rel_tol: 1e-4,
            bucket_width: None,
            out: out.into(),
        }
    }

    /// Loads the vector files named on a command line.
    pub fn from_paths(
        database: &Path,
        queries: Option<&Path>,
        learning: Option<&Path>,
        out: impl Into<PathBuf>,
    ) -> Result<Self> {
        let mut spec = Self::new(Arc::new(load_vectors(database)?), out);
        spec.queries = queries.map(load_vectors).transpose()?;
        spec.learning = learning.map(load_vectors).transpose()?;
        Ok(spec)
    }

    fn kmeans_set(&self) -> Result<&VectorSet> {
        match self.mode {
            BalanceSource::Closed => Ok(&self.database),
            BalanceSource::Semiclosed | BalanceSource::Open => self
                .learning
                .as_ref()
                .ok_or_else(|| Error::invalid("this mode needs a learning set")),
        }
    }

    fn balance_set(&self) -> Result<&VectorSet> {
        match self.mode {
            BalanceSource::Closed | BalanceSource::Semiclosed => Ok(&self.database),
            BalanceSource::Open => self
                .learning
                .as_ref()
                .ok_or_else(|| Error::invalid("this mode needs a learning set")),
        }
    }

    fn query_set(&self) -> Result<&VectorSet> {
        match &self.queries {
            Some(q) if !q.is_empty() => Ok(q),
            _ => Err(Error::invalid("a non-empty query set is required")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.database.is_empty() {
            return Err(Error::Empty("database"));
        }
        if self.ks.is_empty() || self.mas.is_empty() || self.iters.is_empty() {
            return Err(Error::invalid(
                "k, ma and iteration lists must be non-empty",
            ));
        }
        if self.ks.contains(&0) || self.mas.contains(&0) {
            return Err(Error::invalid("k and ma values must be positive"));
        }
        let probe = BalanceConfig {
            alpha: self.alpha,
            stop: StopRule::FixedIters(self.max_iters()),
            max_iters_cap: self.max_iters(),
            ..BalanceConfig::default()
        };
        probe.validate()?;
        let train = self.kmeans_set()?;
        let bal = self.balance_set()?;
        for set in [train, bal] {
            if set.dim() != self.database.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.database.dim(),
                    found: set.dim(),
                });
            }
        }
        if let Some(q) = &self.queries {
            if !q.is_empty() && q.dim() != self.database.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.database.dim(),
                    found: q.dim(),
                });
            }
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k > train.len()) {
            return Err(Error::invalid(format!(
                "k={k} exceeds the {} training vectors",
                train.len()
            )));
        }
        Ok(())
    }

    fn max_iters(&self) -> usize {
        self.iters.iter().copied().max().unwrap_or(0)
    }

    fn balance_config(&self) -> BalanceConfig {
        let r = self.max_iters();
        BalanceConfig {
            alpha: self.alpha,
            stop: StopRule::FixedIters(r),
            max_iters_cap: r.max(BalanceConfig::default().max_iters_cap),
            ..BalanceConfig::default()
        }
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(Error::at_path(&self.out))
    }
}

/// k-means plus one balancing pass for a single `k`.
#[derive(Debug, Clone)]
pub struct Trained {
    pub k: usize,
    pub initial: Codebook,
    pub trace: BalanceTrace,
}

impl Trained {
    /// The codebook after `r` penalty updates.
    pub fn at(&self, r: usize) -> Result<Codebook> {
        let rec = self.trace.records.get(r).ok_or_else(|| {
            Error::invalid(format!(
                "iteration {r} beyond the {} recorded",
                self.trace.len() - 1
            ))
        })?;
        Codebook::with_penalties(self.initial.centroids().clone(), rec.penalties.clone(), r)
    }
}

pub fn train(spec: &ExperimentSpec, k: usize) -> Result<Trained> {
    let config = KMeansConfig {
        max_iters: spec.kmeans_max_iters,
        rel_tol: spec.kmeans_rel_tol,
        ..KMeansConfig::new(k, spec.seed)
    };
    let km = lloyd(spec.kmeans_set()?, &config)?;
    log::info!(
        "k={k}: k-means finished after {} iterations, distortion {}",
        km.iterations,
        km.distortion()
    );
    let initial = Codebook::new(km.centroids);
    let outcome = balance(spec.balance_set()?, &initial, &spec.balance_config())?;
    Ok(Trained {
        k,
        initial,
        trace: outcome.trace,
    })
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(
        fs::File::create(path).map_err(Error::at_path(path))?,
    ))
}

/// Loads the cached exact neighbors for (database, queries), computing and
/// storing them under `out` when absent.
pub fn cached_ground_truth(spec: &ExperimentSpec) -> Result<GroundTruth> {
    let queries = spec.query_set()?;
    let depth = TRUTH_DEPTH.min(spec.database.len());
    let mut key = Sha256::new();
    key.update(spec.database.checksum());
    key.update(queries.checksum());
    key.update(depth.to_le_bytes());
    let key = hex::encode(key.finalize());
    let path = spec.out.join(format!("groundtruth-{}.bin", &key[..16]));
    if path.exists() {
        let truth = GroundTruth::load(&path)?;
        if truth.len() == queries.len() && truth.r == depth {
            return Ok(truth);
        }
        log::warn!("discarding stale ground truth {}", path.display());
    }
    let truth = brute_force_nn(&spec.database, queries, depth)?;
    truth.save(&path)?;
    Ok(truth)
}

#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub k: usize,
    pub trace: BalanceTrace,
}

/// Writes `convergence_k{k}.csv` with the imbalance trace for every `k`.
pub fn run_convergence(spec: &ExperimentSpec) -> Result<Vec<ConvergenceRun>> {
    spec.validate()?;
    spec.prepare_out()?;
    let mut runs = Vec::new();
    for &k in &spec.ks {
        let trained = train(spec, k)?;
        trained
            .trace
            .save_csv(spec.out.join(format!("convergence_k{k}.csv")))?;
        runs.push(ConvergenceRun {
            k,
            trace: trained.trace,
        });
    }
    Ok(runs)
}

#[derive(Debug, Clone)]
pub struct GridPoint {
    pub k: usize,
    pub ma: usize,
    pub iters: usize,
    pub report: EvalReport,
}

fn sweep(spec: &ExperimentSpec) -> Result<Vec<GridPoint>> {
    spec.validate()?;
    let queries = spec.query_set()?;
    spec.prepare_out()?;
    let truth = cached_ground_truth(spec)?;
    let mut points = Vec::new();
    for &k in &spec.ks {
        let trained = train(spec, k)?;
        for &iters in &spec.iters {
            let index = InvertedFile::build(spec.database.clone(), trained.at(iters)?)?;
            for &ma in &spec.mas {
                if ma > k {
                    log::warn!("skipping ma={ma} > k={k}");
                    continue;
                }
                let params = SearchParams::new(ma).with_route(spec.route);
                let report =
                    evaluate_with_width(&index, queries, &params, &truth, spec.bucket_width)?;
                points.push(GridPoint {
                    k,
                    ma,
                    iters,
                    report,
                });
            }
        }
    }
    Ok(points)
}

/// Writes `tradeoff.csv`: one row per (k, ma, iterations) grid point.
pub fn run_tradeoff(spec: &ExperimentSpec) -> Result<Vec<GridPoint>> {
    let points = sweep(spec)?;
    let mut out = create(&spec.out.join("tradeoff.csv"))?;
    writeln!(out, "{}", EvalReport::CSV_HEADER)?;
    for p in &points {
        writeln!(out, "{}", p.report.csv_row(p.iters, spec.alpha))?;
    }
    out.flush()?;
    Ok(points)
}

/// Writes `histogram_k{k}_ma{ma}_iters{r}.csv` per grid point and
/// `histogram_summary.csv` with the mean, sample variance and coefficient of
/// variation of the scan counts.
pub fn run_histogram(spec: &ExperimentSpec) -> Result<Vec<GridPoint>> {
    let points = sweep(spec)?;
    let mut summary = create(&spec.out.join("histogram_summary.csv"))?;
    writeln!(summary, "k,ma,iters,mean,variance,cv")?;
    for p in &points {
        let name = format!("histogram_k{}_ma{}_iters{}.csv", p.k, p.ma, p.iters);
        let mut out = create(&spec.out.join(name))?;
        p.report.histogram.write_csv(&mut out)?;
        writeln!(
            summary,
            "{},{},{},{},{},{}",
            p.k,
            p.ma,
            p.iters,
            p.report.scan_mean,
            p.report.scan_variance,
            p.report.scan_cv()
        )?;
    }
    summary.flush()?;
    Ok(points)
}
