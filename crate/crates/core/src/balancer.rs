//! Penalty-driven cluster balancing.
//!
//! Every cell `i` carries an additive penalty `b_i` on squared distances:
//! points are assigned by `d(x, c_i)^2 + b_i`. Starting from `b_i = 1`, each
//! iteration scales the penalty of a cell by `(n_i / n_opt)^alpha`, where
//! `n_i` is the cell's current population and `n_opt = N / k`. Overfull
//! cells grow more expensive and shed points at their borders; underfull
//! cells get cheaper and absorb them. Centroid positions never move.
//!
//! The penalty is equivalent to lifting the problem into `d + 1`
//! dimensions: points get a zero last coordinate and centroid `i` gets
//! `sqrt(b_i)`, so plain squared distance in the lifted space equals the
//! penalized distance. [`embed_augmented`] and [`embed_point`] expose that
//! view for verification.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::VectorSet;
use crate::distance::squared_l2_mixed;
use crate::error::{check_dim, Error, Result};
use crate::kmeans::{assign_with_offsets, Assignment, Centroids};
use crate::metrics::imbalance_factor;
use crate::textmeta::Meta;

/// Populations are clamped to at least this value inside the penalty update,
/// so an empty cell's penalty shrinks geometrically instead of collapsing to
/// an absorbing zero.
pub const COUNT_FLOOR: f64 = 1.0;

/// Centroids plus per-cell penalties and the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Centroids,
    penalties: Vec<f64>,
    iteration: usize,
}

impl Codebook {
    /// A fresh codebook: every penalty is 1, iteration 0.
    pub fn new(centroids: Centroids) -> Self {
        let k = centroids.k();
        Self {
            centroids,
            penalties: vec![1.0; k],
            iteration: 0,
        }
    }

    /// Explicit penalties. Zero is accepted here; the update keeps penalties
    /// above the configured floor.
    pub fn with_penalties(
        centroids: Centroids,
        penalties: Vec<f64>,
        iteration: usize,
    ) -> Result<Self> {
        if penalties.len() != centroids.k() {
            return Err(Error::invalid(format!(
                "{} penalties for {} centroids",
                penalties.len(),
                centroids.k()
            )));
        }
        if let Some(i) = penalties.iter().position(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::invalid(format!(
                "penalty {i} is {}, expected a finite non-negative value",
                penalties[i]
            )));
        }
        Ok(Self {
            centroids,
            penalties,
            iteration,
        })
    }

    pub fn centroids(&self) -> &Centroids {
        &self.centroids
    }

    pub fn penalties(&self) -> &[f64] {
        &self.penalties
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn k(&self) -> usize {
        self.centroids.k()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    /// Writes `centroids.fvecs` and `penalties.txt` (one value per line, in
    /// shortest round-trip decimal form) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
        self.centroids.save_fvecs(dir.join("centroids.fvecs"))?;
        let path = dir.join("penalties.txt");
        fs::write(&path, render_penalties(&self.penalties)).map_err(Error::at_path(&path))
    }

    /// Reads a codebook written by [`Codebook::save`]. A directory with
    /// centroids only (plain k-means output) loads with unit penalties.
    pub fn load(dir: impl AsRef<Path>, iteration: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let centroids = Centroids::load_fvecs(dir.join("centroids.fvecs"))?;
        let path = dir.join("penalties.txt");
        if !path.exists() {
            return Ok(Self::new(centroids));
        }
        let text = fs::read_to_string(&path).map_err(Error::at_path(&path))?;
        Self::with_penalties(centroids, parse_penalties(&text)?, iteration)
    }
}

fn render_penalties(penalties: &[f64]) -> String {
    penalties.iter().map(|b| format!("{b}\n")).collect()
}

pub(crate) fn parse_penalties(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Corrupt(format!("penalties line {}: `{l}`", i + 1)))
        })
        .collect()
}

/// When the balancing loop stops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Exactly this many penalty updates.
    FixedIters(usize),
    /// Stop once the imbalance factor is at most this value.
    TargetGamma(f64),
    /// Stop once `gamma <= 1 + f * (gamma_0 - 1)`.
    TargetFraction(f64),
}

impl fmt::Display for StopRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopRule::FixedIters(r) => write!(f, "fixed_iters({r})"),
            StopRule::TargetGamma(g) => write!(f, "target_gamma({g})"),
            StopRule::TargetFraction(x) => write!(f, "target_fraction({x})"),
        }
    }
}

impl FromStr for StopRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = s
            .strip_suffix(')')
            .and_then(|s| s.split_once('('))
            .ok_or_else(|| Error::invalid(format!("stop rule `{s}`")))?;
        let bad = || Error::invalid(format!("stop rule argument `{arg}`"));
        match name {
            "fixed_iters" => Ok(StopRule::FixedIters(arg.parse().map_err(|_| bad())?)),
            "target_gamma" => Ok(StopRule::TargetGamma(arg.parse().map_err(|_| bad())?)),
            "target_fraction" => Ok(StopRule::TargetFraction(arg.parse().map_err(|_| bad())?)),
            _ => Err(Error::invalid(format!("unknown stop rule `{name}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceConfig {
    /// Exponent of the population ratio; small values balance smoothly.
    pub alpha: f64,
    pub stop: StopRule,
    pub b_floor: f64,
    /// Hard limit on penalty updates whatever the stop rule.
    pub max_iters_cap: usize,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            stop: StopRule::FixedIters(64),
            b_floor: 1e-9,
            max_iters_cap: 1000,
        }
    }
}

impl BalanceConfig {
    /// Iteration counts used for partial balancing sweeps.
    pub const PRESETS: [usize; 4] = [8, 16, 32, 64];

    pub fn fixed(r: usize) -> Self {
        Self {
            stop: StopRule::FixedIters(r),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.b_floor.is_finite() && self.b_floor > 0.0) {
            return Err(Error::invalid(format!(
                "b_floor must be > 0, got {}",
                self.b_floor
            )));
        }
        match self.stop {
            StopRule::FixedIters(r) if r > self.max_iters_cap => Err(Error::invalid(format!(
                "fixed_iters({r}) exceeds max_iters_cap {}",
                self.max_iters_cap
            ))),
            StopRule::TargetGamma(g) if !(g >= 1.0 && g.is_finite()) => Err(Error::invalid(
                format!("target gamma {g} is unreachable; gamma is always >= 1"),
            )),
            StopRule::TargetFraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::invalid(format!(
                "target fraction {f} outside (0, 1]"
            ))),
            _ => Ok(()),
        }
    }
}

/// Squared Euclidean distance plus the cell penalty.
pub fn penalized_distance_sq(x: &[f32], c: &[f64], b: f64) -> Result<f64> {
    check_dim(c.len(), x.len())?;
    if b.is_nan() || b < 0.0 {
        return Err(Error::invalid(format!("penalty {b} is negative")));
    }
    Ok(squared_l2_mixed(x, c) + b)
}

/// Assigns each point to the cell minimizing the penalized distance, lowest
/// index on ties.
pub fn assign_balanced(data: &VectorSet, codebook: &Codebook) -> Result<Assignment> {
    assign_with_offsets(data, &codebook.centroids, Some(&codebook.penalties))
}

/// One multiplicative penalty update from the populations `counts`.
///
/// `n_opt` is the real-valued target population `N / k`.
pub fn update_penalties(
    codebook: &Codebook,
    counts: &[usize],
    n_opt: f64,
    config: &BalanceConfig,
) -> Result<Codebook> {
    if counts.len() != codebook.k() {
        return Err(Error::invalid(format!(
            "{} counts for {} cells",
            counts.len(),
            codebook.k()
        )));
    }
    if !(n_opt.is_finite() && n_opt > 0.0) {
        return Err(Error::invalid(format!("n_opt must be > 0, got {n_opt}")));
    }
    let penalties = codebook
        .penalties
        .iter()
        .zip(counts)
        .map(|(&b, &n)| {
            let ratio = (n as f64).max(COUNT_FLOOR) / n_opt;
            (b * ratio.powf(config.alpha)).max(config.b_floor)
        })
        .collect();
    Ok(Codebook {
        centroids: codebook.centroids.clone(),
        penalties,
        iteration: codebook.iteration + 1,
    })
}

/// State observed at one balancing iteration, before its penalty update.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Updates applied so far in this run.
    pub iteration: usize,
    pub gamma: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub b_mean: f64,
    pub n_min: usize,
    pub n_max: usize,
    /// Mean plain squared distance from each point to its assigned centroid.
    /// Compare against the penalties to judge whether the unit starting
    /// penalty is small or large for the data's scale.
    pub mean_sq_dist: f64,
    /// Penalties used for this iteration's assignment.
    pub penalties: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BalanceTrace {
    pub records: Vec<TraceRecord>,
}

impl BalanceTrace {
    pub const CSV_HEADER: &'static str = "iter,gamma,b_min,b_max,b_mean,n_min,n_max";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.gamma).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration, r.gamma, r.b_min, r.b_max, r.b_mean, r.n_min, r.n_max
            )?;
        }
        out.flush()
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(Error::at_path(path))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(Error::at_path(path))
    }
}

#[derive(Debug, Clone)]
pub struct BalanceOutcome {
    pub codebook: Codebook,
    pub trace: BalanceTrace,
    /// Assignment under the returned codebook.
    pub assignment: Assignment,
}

impl BalanceOutcome {
    /// Writes the codebook, `trace.csv` and `balance.meta` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, config: &BalanceConfig) -> Result<()> {
        let dir = dir.as_ref();
        self.codebook.save(dir)?;
        self.trace.save_csv(dir.join("trace.csv"))?;
        let mut meta = Meta::new();
        meta.set("k", self.codebook.k())
            .set("dim", self.codebook.dim())
            .set("alpha", config.alpha)
            .set("iterations", self.codebook.iteration())
            .set("stop", config.stop)
            .set("b_floor", config.b_floor)
            .set(
                "final_gamma",
                self.trace.records.last().map_or(f64::NAN, |r| r.gamma),
            );
        meta.write(&dir.join("balance.meta"))
    }
}

fn record(
    data: &VectorSet,
    codebook: &Codebook,
    assignment: &Assignment,
    iteration: usize,
) -> Result<TraceRecord> {
    let b = &codebook.penalties;
    let counts = assignment.counts();
    let mean_sq_dist = data
        .rows()
        .zip(assignment.cell_of())
        .map(|(x, &c)| squared_l2_mixed(x, codebook.centroids.row(c as usize)))
        .sum::<f64>()
        / data.len() as f64;
    Ok(TraceRecord {
        iteration,
        gamma: imbalance_factor(counts)?,
        b_min: b.iter().copied().fold(f64::INFINITY, f64::min),
        b_max: b.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        b_mean: b.iter().sum::<f64>() / b.len() as f64,
        n_min: counts.iter().copied().min().unwrap_or(0),
        n_max: counts.iter().copied().max().unwrap_or(0),
        mean_sq_dist,
        penalties: b.clone(),
        counts: counts.to_vec(),
    })
}

/// Runs the balancing loop: assign, measure, record, test the stop rule,
/// update penalties. The trace holds one record per assignment, so a run
/// with `r` updates has `r + 1` records.
pub fn balance(
    data: &VectorSet,
    codebook: &Codebook,
    config: &BalanceConfig,
) -> Result<BalanceOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("balancing set"));
    }
    check_dim(codebook.dim(), data.dim())?;
    let n_opt = data.len() as f64 / codebook.k() as f64;
    let mut current = codebook.clone();
    let mut trace = BalanceTrace::default();
    let mut updates = 0usize;
    loop {
        let assignment = assign_balanced(data, &current)?;
        let rec = record(data, &current, &assignment, updates)?;
        let gamma = rec.gamma;
        log::debug!("balance iteration {updates}: gamma {gamma}");
        trace.records.push(rec);
        let gamma0 = trace.records[0].gamma;
        let done = match config.stop {
            StopRule::FixedIters(r) => updates >= r,
            StopRule::TargetGamma(target) => gamma <= target,
            StopRule::TargetFraction(f) => gamma <= 1.0 + f * (gamma0 - 1.0),
        };
        if done || updates >= config.max_iters_cap {
            if !done {
                log::warn!(
                    "balancing hit the cap of {} updates at gamma {gamma}",
                    config.max_iters_cap
                );
            }
            return Ok(BalanceOutcome {
                codebook: current,
                trace,
                assignment,
            });
        }
        current = update_penalties(&current, assignment.counts(), n_opt, config)?;
        updates += 1;
    }
}

/// Centroids lifted to `dim + 1` dimensions with last coordinate `sqrt(b_i)`.
pub fn embed_augmented(codebook: &Codebook) -> Centroids {
    let dim = codebook.dim();
    let mut data = Vec::with_capacity(codebook.k() * (dim + 1));
    for (c, &b) in codebook.centroids.rows().zip(&codebook.penalties) {
        data.extend_from_slice(c);
        data.push(b.sqrt());
    }
    Centroids::new(dim + 1, data).expect("finite non-negative penalties lift to finite values")
}

/// A point lifted to `dim + 1` dimensions with last coordinate 0.
pub fn embed_point(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).chain([0.0]).collect()
}
