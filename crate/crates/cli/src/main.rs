use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use cellbal::harness::{self, BalanceSource, ExperimentSpec};
use cellbal::{
    balance, gen_gaussian_mixture, lloyd, load_vectors, save_fvecs, BalanceConfig, Codebook,
    GaussianMixture, InvertedFile, KMeansConfig, Route, SearchParams, StopRule, VectorSet,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cellbal", version, about = "Balanced inverted-file indexing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample database, query and learning sets from a Gaussian mixture.
    Gen(GenArgs),
    /// Train a k-means codebook.
    Kmeans(Common),
    /// Balance a codebook's cell populations.
    Balance(BalanceArgs),
    /// Build and save an inverted file.
    Build(IndexArgs),
    /// Query a saved index.
    Search(IndexArgs),
    /// Evaluate a saved index against exact neighbors.
    Eval(IndexArgs),
    /// Imbalance factor per balancing iteration.
    Convergence(Common),
    /// Selectivity and recall over a (k, ma, iterations) grid.
    Tradeoff(Common),
    /// Scan-count histograms over a (k, ma, iterations) grid.
    Histogram(Common),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    db: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    learning: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "256")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    ma: Vec<usize>,
    /// Balancing iteration presets.
    #[arg(long, value_delimiter = ',', default_value = "0,8,16,32,64")]
    iters: Vec<usize>,
    #[arg(long, default_value_t = 0.01, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "closed")]
    mode: BalanceSource,
    #[arg(long, default_value = "penalized")]
    route: Route,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Database size.
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    nq: usize,
    /// Learning-set size; 0 skips the file.
    #[arg(long, default_value_t = 0)]
    nl: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Mixture weights, one per mode.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.2,0.15,0.1,0.05")]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 0.6)]
    spread: f64,
}

#[derive(Args)]
struct BalanceArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding the starting codebook.
    #[arg(long)]
    codebook: PathBuf,
    /// Stop rule such as `fixed_iters(64)`, `target_gamma(1.02)` or
    /// `target_fraction(0.1)`. Defaults to the largest `--iters` value.
    #[arg(long)]
    stop: Option<StopRule>,
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    common: Common,
    /// Codebook directory for `build`, index directory otherwise.
    #[arg(long)]
    index: PathBuf,
    /// Hits returned per query.
    #[arg(long, default_value_t = 100)]
    results: usize,
}

/// Bad input from the command line; exits with status 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn input(path: &Option<PathBuf>, flag: &str) -> anyhow::Result<PathBuf> {
    let path = path
        .clone()
        .ok_or_else(|| invalid(format!("--{flag} is required")))?;
    if !path.is_file() {
        return Err(invalid(format!(
            "--{flag} {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn optional_input(path: &Option<PathBuf>, flag: &str) -> anyhow::Result<Option<PathBuf>> {
    path.as_ref().map(|_| input(path, flag)).transpose()
}

fn load(path: &Path) -> anyhow::Result<VectorSet> {
    load_vectors(path).with_context(|| format!("reading {}", path.display()))
}

fn single(values: &[usize], flag: &str) -> anyhow::Result<usize> {
    match values {
        [v] => Ok(*v),
        _ => Err(invalid(format!("--{flag} takes a single value here"))),
    }
}

/// Iteration count recorded next to a balanced codebook, 0 for plain k-means.
fn codebook_iteration(dir: &Path) -> anyhow::Result<usize> {
    let path = dir.join("balance.meta");
    if !path.exists() {
        return Ok(0);
    }
    let text = fs::read_to_string(&path)?;
    text.lines()
        .find_map(|l| l.strip_prefix("iterations="))
        .context("balance.meta lacks an iterations entry")?
        .trim()
        .parse()
        .context("bad iterations entry in balance.meta")
}

fn load_codebook(dir: &Path) -> anyhow::Result<Codebook> {
    if !dir.join("centroids.fvecs").is_file() {
        return Err(invalid(format!(
            "{} holds no centroids.fvecs",
            dir.display()
        )));
    }
    Ok(Codebook::load(dir, codebook_iteration(dir)?)?)
}

fn experiment(c: &Common) -> anyhow::Result<ExperimentSpec> {
    let db = input(&c.db, "db")?;
    let queries = optional_input(&c.queries, "queries")?;
    let learning = optional_input(&c.learning, "learning")?;
    let mut spec =
        ExperimentSpec::from_paths(&db, queries.as_deref(), learning.as_deref(), &c.out)?;
    spec.ks = c.k.clone();
    spec.mas = c.ma.clone();
    spec.iters = c.iters.clone();
    spec.alpha = c.alpha;
    spec.seed = c.seed;
    spec.mode = c.mode;
    spec.route = c.route;
    Ok(spec)
}

fn gen(a: &GenArgs) -> anyhow::Result<()> {
    let c = &a.common;
    let modes = a.weights.len();
    let db = gen_gaussian_mixture(c.seed, a.n, a.dim, modes, &a.weights, a.spread)?;
    let mix = GaussianMixture::new(c.seed, a.dim, &a.weights, a.spread)?;
    fs::create_dir_all(&c.out)?;
    save_fvecs(&db, c.out.join("db.fvecs"))?;
    if a.nq > 0 {
        save_fvecs(&mix.sample(a.nq, 1)?, c.out.join("queries.fvecs"))?;
    }
    if a.nl > 0 {
        save_fvecs(&mix.sample(a.nl, 2)?, c.out.join("learning.fvecs"))?;
    }
    println!(
        "wrote {} vectors of dimension {} to {}",
        a.n,
        a.dim,
        c.out.display()
    );
    Ok(())
}

fn kmeans(c: &Common) -> anyhow::Result<()> {
    let k = single(&c.k, "k")?;
    // Train on the learning set when one is given.
    let path = match optional_input(&c.learning, "learning")? {
        Some(p) => p,
        None => input(&c.db, "db")?,
    };
    let data = load(&path)?;
    let out = lloyd(&data, &KMeansConfig::new(k, c.seed))?;
    out.save(&c.out)?;
    println!(
        "k={k}: {} iterations, distortion {}",
        out.iterations,
        out.distortion()
    );
    Ok(())
}

fn run_balance(a: &BalanceArgs) -> anyhow::Result<()> {
    let c = &a.common;
    let path = match c.mode {
        BalanceSource::Open => input(&c.learning, "learning")?,
        _ => input(&c.db, "db")?,
    };
    let data = load(&path)?;
    let start = load_codebook(&a.codebook)?;
    let largest = c.iters.iter().copied().max().unwrap_or(0);
    let stop = a.stop.unwrap_or(StopRule::FixedIters(largest));
    let config = BalanceConfig {
        alpha: c.alpha,
        stop,
        max_iters_cap: largest.max(BalanceConfig::default().max_iters_cap),
        ..BalanceConfig::default()
    };
    let outcome = balance(&data, &start, &config)?;
    outcome.save(&c.out, &config)?;
    let trace = &outcome.trace.records;
    println!(
        "{} updates: gamma {} -> {}",
        outcome.codebook.iteration(),
        trace[0].gamma,
        trace[trace.len() - 1].gamma
    );
    Ok(())
}

fn build(a: &IndexArgs) -> anyhow::Result<()> {
    let data = Arc::new(load(&input(&a.common.db, "db")?)?);
    let index = InvertedFile::build(data, load_codebook(&a.index)?)?;
    index.save(&a.common.out)?;
    println!(
        "indexed {} vectors into {} cells at {}",
        index.len(),
        index.k(),
        a.common.out.display()
    );
    Ok(())
}

fn open_index(a: &IndexArgs) -> anyhow::Result<InvertedFile> {
    let data = Arc::new(load(&input(&a.common.db, "db")?)?);
    if !a.index.join("meta.txt").is_file() {
        return Err(invalid(format!("{} holds no index", a.index.display())));
    }
    Ok(InvertedFile::load(&a.index, data)?)
}

fn search(a: &IndexArgs) -> anyhow::Result<()> {
    let c = &a.common;
    let index = open_index(a)?;
    let queries = load(&input(&c.queries, "queries")?)?;
    let params = SearchParams::new(single(&c.ma, "ma")?)
        .with_results(a.results)
        .with_route(c.route);
    let results = index.search_batch(&queries, &params)?;
    fs::create_dir_all(&c.out)?;
    let path = c.out.join("results.csv");
    let mut out = BufWriter::new(fs::File::create(&path)?);
    writeln!(out, "query,rank,id,dist,scanned")?;
    for (q, res) in results.iter().enumerate() {
        for (rank, hit) in res.hits.iter().enumerate() {
            writeln!(out, "{q},{rank},{},{},{}", hit.id, hit.dist, res.scanned)?;
        }
    }
    out.flush()?;
    let scanned: usize = results.iter().map(|r| r.scanned).sum();
    println!(
        "{} queries, {scanned} distances computed; hits in {}",
        results.len(),
        path.display()
    );
    Ok(())
}

fn eval(a: &IndexArgs) -> anyhow::Result<()> {
    let c = &a.common;
    let index = open_index(a)?;
    let queries = load(&input(&c.queries, "queries")?)?;
    let mut spec = ExperimentSpec::new(index.data().clone(), &c.out);
    spec.queries = Some(queries.clone());
    fs::create_dir_all(&c.out)?;
    let truth = harness::cached_ground_truth(&spec)?;
    let path = c.out.join("eval.csv");
    let mut out = BufWriter::new(fs::File::create(&path)?);
    writeln!(
        out,
        "k,ma,iters,gamma,variance,selectivity,recall_at_1,recall_at_r,scan_mean,scan_variance"
    )?;
    for &ma in &c.ma {
        let params = SearchParams::new(ma)
            .with_results(a.results)
            .with_route(c.route);
        let r = cellbal::evaluate(&index, &queries, &params, &truth)?;
        let row = format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.k,
            r.ma,
            index.codebook().iteration(),
            r.gamma,
            r.variance,
            r.selectivity,
            r.recall_at_1,
            r.recall_at_r,
            r.scan_mean,
            r.scan_variance
        );
        writeln!(out, "{row}")?;
        println!("{row}");
    }
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Kmeans(c) => kmeans(c),
        Command::Balance(a) => run_balance(a),
        Command::Build(a) => build(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => eval(a),
        Command::Convergence(c) => {
            let runs = harness::run_convergence(&experiment(c)?)?;
            for r in runs {
                let g = r.trace.gammas();
                println!("k={}: gamma {} -> {}", r.k, g[0], g[g.len() - 1]);
            }
            Ok(())
        }
        Command::Tradeoff(c) => {
            let points = harness::run_tradeoff(&experiment(c)?)?;
            println!(
                "{} grid points written to {}",
                points.len(),
                c.out.display()
            );
            Ok(())
        }
        Command::Histogram(c) => {
            let points = harness::run_histogram(&experiment(c)?)?;
            if points.is_empty() {
                bail!("no (k, ma) combination satisfied ma <= k");
            }
            println!("{} histograms written to {}", points.len(), c.out.display());
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|e| {
        e.is::<Invalid>()
            || e.downcast_ref::<cellbal::Error>()
                .is_some_and(|e| e.is_validation())
    });
    if validation {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
