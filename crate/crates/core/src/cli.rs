//! Command-line driver.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::bayes::MergeConfig;
use crate::error::{Error, Result};
use crate::eval::{
    calibrate_term2, evaluate, format_metrics_csv, generate_synthetic, ratio_histogram, write_histogram_csv,
    GroundTruth, MetricsRow, Protocol, SyntheticSpec,
};
use crate::format::{read_descriptors, read_vocabulary, write_descriptors, write_vocabulary};
use crate::hamming::HammingParams;
use crate::index::{build_index, read_index, write_index, IndexBundle};
use crate::retrieval::{
    prepare_query, read_results, score_prepared, write_results, Method, RankedResult, ScoringMethod,
};
use crate::vocab::train_vocabulary_with_report;

#[derive(Debug, Parser)]
#[command(
    name = "vocmerge",
    version,
    about = "Multi-vocabulary bag-of-words retrieval experiments"
)]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic training/database/query corpus with ground truth.
    Gen(GenArgs),
    /// Train K vocabularies with different seeds.
    Train(TrainArgs),
    /// Build the inverted files of a database.
    Index(IndexArgs),
    /// Run queries and write a results file.
    Query(QueryArgs),
    /// Score a results file against ground truth.
    Eval(EvalArgs),
    /// Fit the term-2 line on queries with ground truth.
    Calibrate(CalibrateArgs),
    /// Histogram the cardinality ratio over database prefixes.
    RatioHist(RatioHistArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SyntheticSpec::default().n_images as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub images: u64,
    #[arg(long, default_value_t = SyntheticSpec::default().n_queries)]
    pub queries: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().training_images)]
    pub training: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().features_per_image)]
    pub features: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().dim)]
    pub dim: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().n_clusters)]
    pub clusters: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().cluster_spread)]
    pub spread: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().zipf)]
    pub zipf: f64,
    /// Share of each image's features drawn from its theme clusters.
    #[arg(long, default_value_t = SyntheticSpec::default().burst)]
    pub burst: f64,
    /// Tight clusters of near-identical generic features.
    #[arg(long, default_value_t = SyntheticSpec::default().generic_clusters)]
    pub generic_clusters: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().generic_spread)]
    pub generic_spread: f64,
    /// Share of each image's features drawn from the generic clusters.
    #[arg(long, default_value_t = SyntheticSpec::default().generic_share)]
    pub generic_share: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().duplicates_per_query)]
    pub duplicates: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().noise)]
    pub noise: f64,
    /// Also put each query into the database (ids 0..queries).
    #[arg(long)]
    pub include_queries: bool,
    #[arg(long, default_value_t = SyntheticSpec::default().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training descriptor file.
    #[arg(long)]
    pub training: PathBuf,
    /// Output directory; vocabulary k goes to `vocab<k>.bmvc`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = crate::eval::BENCHMARK_VOCAB_SIZE)]
    pub size: usize,
    /// Vocabulary k uses seed + k.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 25)]
    pub max_iters: usize,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Vocabulary files, in order.
    #[arg(long = "vocab", required = true)]
    pub vocab: Vec<PathBuf>,
    /// Expected number of vocabularies.
    #[arg(long)]
    pub k: Option<usize>,
    /// Store Hamming signatures.
    #[arg(long)]
    pub he: bool,
    #[arg(long, default_value_t = 64)]
    pub he_bits: u32,
    /// Descriptors used to learn Hamming thresholds (default: the database).
    #[arg(long)]
    pub training: Option<PathBuf>,
    /// Projection seed; vocabulary k uses seed + k.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    B0,
    B1,
    B2,
    Bayes,
    Ra,
}

#[derive(Debug, Args)]
pub struct WeightArgs {
    /// Merge configuration file (default: the shipped one).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long = "term2-a")]
    pub term2_a: Option<f64>,
    #[arg(long = "term2-b")]
    pub term2_b: Option<f64>,
    /// Database size used in the prior odds (default: index size).
    #[arg(long)]
    pub n: Option<u32>,
    /// Hamming acceptance threshold (strict).
    #[arg(long = "he-thresh")]
    pub he_thresh: Option<u32>,
    /// Pin every Bayes weight to 1.
    #[arg(long = "force-w1")]
    pub force_w1: bool,
}

impl WeightArgs {
    pub fn resolve(&self) -> Result<MergeConfig> {
        let mut cfg = match &self.config {
            Some(p) => MergeConfig::load(p)?,
            None => MergeConfig::default(),
        };
        if let Some(c) = self.c {
            cfg.c = c;
        }
        if let Some(a) = self.term2_a {
            cfg.term2_slope = a;
        }
        if let Some(b) = self.term2_b {
            cfg.term2_intercept = b;
        }
        if let Some(n) = self.n {
            cfg.n_override = Some(n);
        }
        if let Some(t) = self.he_thresh {
            cfg.he_threshold = t;
        }
        cfg.force_unit_weight |= self.force_w1;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct IndexInput {
    #[arg(long)]
    pub index: PathBuf,
    /// Vocabulary files the index was built with, in order.
    #[arg(long = "vocab", required = true)]
    pub vocab: Vec<PathBuf>,
    /// Expected number of vocabularies.
    #[arg(long)]
    pub k: Option<usize>,
}

impl IndexInput {
    fn load(&self) -> Result<IndexBundle> {
        if let Some(k) = self.k {
            if k != self.vocab.len() {
                return Err(Error::Invalid(format!(
                    "--k {k} but {} vocabularies given",
                    self.vocab.len()
                )));
            }
        }
        let vocabs = self.vocab.iter().map(read_vocabulary).collect::<Result<Vec<_>>>()?;
        read_index(&self.index, vocabs)
    }
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub input: IndexInput,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Bayes)]
    pub method: MethodArg,
    /// Vocabulary used by b0.
    #[arg(long, default_value_t = 0)]
    pub b0_vocab: usize,
    #[command(flatten)]
    pub weights: WeightArgs,
    /// Filter candidates by Hamming distance.
    #[arg(long)]
    pub he: bool,
    /// Burstiness weighting of difference-set votes.
    #[arg(long)]
    pub burst: bool,
    #[arg(long, default_value_t = 100)]
    pub topk: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Map,
    Ns,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Map)]
    pub protocol: ProtocolArg,
    /// Drop each query from its own ranking (when queries are in the database).
    #[arg(long)]
    pub exclude_self: bool,
    /// Metrics CSV (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub input: IndexInput,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long = "he-thresh", default_value_t = crate::hamming::DEFAULT_HE_THRESHOLD)]
    pub he_thresh: u32,
    /// c written to the output configuration.
    #[arg(long, default_value_t = 30.0)]
    pub c: f64,
    /// Merge configuration to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RatioHistArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long = "vocab", required = true, num_args = 1)]
    pub vocab: Vec<PathBuf>,
    #[arg(long)]
    pub queries: PathBuf,
    /// Database prefix sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Histogram CSV (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the selected command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Invalid(e.to_string()))?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Invalid("--threads must be at least 1".into()));
        }
        // A pool may already exist when called twice in one process.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialised");
        }
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Index(a) => cmd_index(&a),
        Command::Query(a) => cmd_query(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::RatioHist(a) => cmd_ratio_hist(&a),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{}: no such file", p.display())))
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_images: a.images as usize,
        n_queries: a.queries,
        training_images: a.training,
        features_per_image: a.features,
        dim: a.dim,
        n_clusters: a.clusters,
        cluster_spread: a.spread,
        zipf: a.zipf,
        burst: a.burst,
        generic_clusters: a.generic_clusters,
        generic_spread: a.generic_spread,
        generic_share: a.generic_share,
        duplicates_per_query: a.duplicates,
        noise: a.noise,
        include_query_in_db: a.include_queries,
        seed: a.seed,
    };
    let data = generate_synthetic(&spec)?;
    create_dir(&a.out)?;
    write_descriptors(&data.training, a.out.join("training.bmv"))?;
    write_descriptors(&data.db, a.out.join("db.bmv"))?;
    write_descriptors(&data.queries, a.out.join("queries.bmv"))?;
    data.ground_truth.write(a.out.join("gt.txt"))?;
    log::info!(
        "wrote {} training, {} database and {} query images to {}",
        data.training.num_images(),
        data.db.num_images(),
        data.queries.num_images(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.k == 0 || a.k > crate::bayes::MAX_VOCABULARIES {
        return Err(Error::Invalid(format!(
            "--k must be in 1..={}",
            crate::bayes::MAX_VOCABULARIES
        )));
    }
    let training = read_descriptors(&a.training)?;
    create_dir(&a.out)?;
    for k in 0..a.k {
        let seed = a.seed.wrapping_add(k as u64);
        let report = train_vocabulary_with_report(&training, a.size, seed, a.max_iters)?;
        log::info!(
            "vocabulary {k}: {} iterations, final SSE {:.4}",
            report.iterations,
            report.sse_history.last().copied().unwrap_or(f64::NAN)
        );
        write_vocabulary(&report.vocabulary, a.out.join(format!("vocab{k}.bmvc")))?;
    }
    Ok(())
}

pub fn cmd_index(a: &IndexArgs) -> Result<()> {
    if let Some(k) = a.k {
        if k != a.vocab.len() {
            return Err(Error::Invalid(format!(
                "--k {k} but {} vocabularies given",
                a.vocab.len()
            )));
        }
    }
    for p in a.vocab.iter().chain([&a.db]) {
        require_file(p)?;
    }
    let vocabs = a.vocab.iter().map(read_vocabulary).collect::<Result<Vec<_>>>()?;
    let db = read_descriptors(&a.db)?;
    let hamming = if a.he {
        let training = match &a.training {
            Some(p) => read_descriptors(p)?,
            None => db.clone(),
        };
        Some(
            vocabs
                .iter()
                .enumerate()
                .map(|(k, v)| HammingParams::train(&training, v, a.he_bits, a.seed.wrapping_add(k as u64)))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let index = build_index(&db, &vocabs, hamming)?;
    write_index(&index, &a.out)
}

fn scoring_method(a: &QueryArgs) -> ScoringMethod {
    let method = match a.method {
        MethodArg::B0 => Method::B0(a.b0_vocab),
        MethodArg::B1 => Method::B1,
        MethodArg::B2 => Method::B2,
        MethodArg::Bayes => Method::Bayes,
        MethodArg::Ra => Method::RankAggregation,
    };
    ScoringMethod {
        method,
        use_hamming: a.he,
        use_burstiness: a.burst,
    }
}

/// Path of the metadata file written next to a results file.
pub fn meta_path(results: &Path) -> PathBuf {
    let mut s = results.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn cmd_query(a: &QueryArgs) -> Result<()> {
    require_file(&a.input.index)?;
    require_file(&a.queries)?;
    let cfg = a.weights.resolve()?;
    let method = scoring_method(a);
    let index = a.input.load()?;
    method.validate(index.num_vocabularies())?;
    if method.use_hamming && !index.has_signatures() {
        return Err(Error::InvalidIndex(format!(
            "{} has no Hamming signatures; rebuild it with --he",
            a.input.index.display()
        )));
    }
    let queries = read_descriptors(&a.queries)?;
    if queries.dim() != index.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            got: queries.dim(),
        });
    }
    let timed: Vec<(RankedResult, f64)> = queries
        .images()
        .par_iter()
        .map(|q| {
            let start = Instant::now();
            let prepared = prepare_query(q, &index)?;
            let r = score_prepared(&prepared, &index, &method, &cfg)?;
            Ok((r, start.elapsed().as_secs_f64() * 1e3))
        })
        .collect::<Result<_>>()?;
    let mean_ms = timed.iter().map(|t| t.1).sum::<f64>() / timed.len() as f64;
    let results: Vec<(u32, RankedResult)> = timed.into_iter().enumerate().map(|(i, (r, _))| (i as u32, r)).collect();
    write_results(&a.out, &results, a.topk)?;
    let mut meta = String::new();
    writeln!(meta, "method={}", method.name()).unwrap();
    writeln!(meta, "k={}", index.num_vocabularies()).unwrap();
    writeln!(meta, "vocab_size={}", index.vocabularies[0].size()).unwrap();
    writeln!(meta, "query_time_ms_mean={mean_ms:.4}").unwrap();
    write_text(&meta_path(&a.out), &meta)?;
    log::info!("{} queries, {mean_ms:.3} ms per query", results.len());
    Ok(())
}

fn read_meta(results: &Path) -> Result<(String, usize, usize, f64)> {
    let p = meta_path(results);
    let mut out = ("unknown".to_string(), 0, 0, 0.0);
    let text = match fs::read_to_string(&p) {
        Ok(t) => t,
        Err(_) => {
            log::warn!("{} missing; metrics rows will lack run details", p.display());
            return Ok(out);
        }
    };
    for (i, line) in text.lines().enumerate() {
        let perr = |m: &str| Error::Parse {
            line: i + 1,
            message: format!("{}: {m}", p.display()),
        };
        let Some((k, v)) = line.split_once('=') else { continue };
        match k {
            "method" => out.0 = v.to_string(),
            "k" => out.1 = v.parse().map_err(|_| perr("bad k"))?,
            "vocab_size" => out.2 = v.parse().map_err(|_| perr("bad vocab_size"))?,
            "query_time_ms_mean" => out.3 = v.parse().map_err(|_| perr("bad query time"))?,
            _ => {}
        }
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let results = read_results(&a.results)?;
    let gt = GroundTruth::read(&a.gt)?;
    let protocol = match a.protocol {
        ProtocolArg::Map => Protocol::MeanAveragePrecision {
            exclude_self: a.exclude_self,
        },
        ProtocolArg::Ns => Protocol::NsScore,
    };
    let value = evaluate(&results, &gt, protocol)?;
    let (method, k, vocab_size, ms) = read_meta(&a.results)?;
    let csv = format_metrics_csv(
        &[MetricsRow {
            method,
            k,
            vocab_size,
            value,
            query_time_ms_mean: ms,
        }],
        protocol,
    );
    match &a.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let index = a.input.load()?;
    let queries = read_descriptors(&a.queries)?;
    let gt = GroundTruth::read(&a.gt)?;
    let fit = calibrate_term2(&queries, &gt, &index, a.he_thresh)?;
    for (r, t, n) in &fit.bins {
        log::info!("bin mean r {r:.3}: mean true-match ratio {t:.3} over {n} features");
    }
    let (slope, intercept) = fit.feasible_line();
    let cfg = MergeConfig {
        c: a.c,
        term2_slope: slope,
        term2_intercept: intercept,
        n_override: None,
        he_threshold: a.he_thresh,
        force_unit_weight: false,
    };
    let mut text = String::new();
    writeln!(
        text,
        "# term-2 line fitted on {} query features in {} bins, rms residual {:.4} (bins unweighted: {:.4})",
        fit.n_points,
        fit.bins.len(),
        fit.rms,
        fit.unweighted_rms()
    )
    .unwrap();
    if (slope, intercept) != (fit.a, fit.b) {
        writeln!(
            text,
            "# free fit a={} b={} projected onto a >= 0, b > 0, a + b <= 1",
            fit.a, fit.b
        )
        .unwrap();
    }
    text.push_str(&cfg.to_text());
    MergeConfig::parse(&text)?;
    write_text(&a.out, &text)?;
    println!("a={} b={} rms={}", fit.a, fit.b, fit.rms);
    Ok(())
}

pub fn cmd_ratio_hist(a: &RatioHistArgs) -> Result<()> {
    let vocabs = a.vocab.iter().map(read_vocabulary).collect::<Result<Vec<_>>>()?;
    let db = read_descriptors(&a.db)?;
    let queries = read_descriptors(&a.queries)?;
    let hists = ratio_histogram(&db, &vocabs, &a.sizes, &queries, a.bins)?;
    for h in &hists {
        log::info!("{} images: mean ratio {:.4}", h.db_size, h.mean);
    }
    let csv = write_histogram_csv(&hists);
    match &a.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
