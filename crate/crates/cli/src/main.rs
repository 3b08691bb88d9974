use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use purge_gate::adapt::{tta_evaluate, tta_evaluate_tokenized, tokenize_stream, PurgeCandidateSet, SelectionMode, TtaOptions, Variant};
use purge_gate::analysis::{
    check_attention_uniformity, check_ln_lipschitz, check_sphere_orthogonality, purge_size_sweep, SweepResult,
};
use purge_gate::config::RunConfig;
use purge_gate::corruptions::{corrupt_stream, describe, CorruptionKind};
use purge_gate::data::{read_dataset_split, write_dataset, Split};
use purge_gate::model::{load_weights_checked, save_weights, train_source, BnMode, ModelWeights};
use purge_gate::purge::{collect_source_stats, load_stats, save_stats, ClsPrototype, SourcePrototype, StatsOrigin};
use purge_gate::report::{aggregate, find_summaries, RunSummary, SUMMARY_SUFFIX};
use purge_gate::Error;

/// Token purging for backpropagation-free test-time adaptation of a small
/// point-cloud transformer.
#[derive(Parser)]
#[command(name = "purge-gate", version)]
struct Cli {
    /// JSON run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test shape clouds.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the source classifier on the clean training split.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Gather source token statistics for PG-SP.
    CollectStats {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        origin: Option<OriginArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a corrupted test stream with or without token purging.
    TtaEval(TtaArgs),
    /// Empirical checks and sweeps.
    Analyze {
        #[command(subcommand)]
        which: Analysis,
    },
    /// Aggregate finished tta-eval runs into an accuracy table.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// CSV table; a JSON twin is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the corruption table.
    Corruptions {
        #[arg(long)]
        describe: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OriginArg {
    Embed,
    Ln,
}

impl From<OriginArg> for StatsOrigin {
    fn from(o: OriginArg) -> Self {
        match o {
            OriginArg::Embed => StatsOrigin::EmbeddingOutput,
            OriginArg::Ln => StatsOrigin::FirstLnInput,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Sp,
    Sf,
    None,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Sp => Variant::PgSp,
            VariantArg::Sf => Variant::PgSf,
            VariantArg::None => Variant::SourceOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BnArg {
    Reset,
    Frozen,
}

impl From<BnArg> for BnMode {
    fn from(b: BnArg) -> Self {
        match b {
            BnArg::Reset => BnMode::PerBatchReset,
            BnArg::Frozen => BnMode::Frozen,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Sample,
    Batch,
}

#[derive(Args)]
struct TtaArgs {
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Source statistics (PG-SP only).
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    corruption: Option<CorruptionKind>,
    #[arg(long)]
    severity: Option<u8>,
    /// Comma-separated purge sizes, e.g. 0,2,4,8,16.
    #[arg(long)]
    candidates: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, value_enum)]
    bn: Option<BnArg>,
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
    /// Run the purge-size arms of a batch in parallel.
    #[arg(long)]
    concurrent_arms: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analysis {
    /// LayerNorm Lipschitz bound.
    /// Columns: d,replicates,mean,variance,max,bound,violations,max_norm,sigma_min (ratio statistics).
    Lipschitz {
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 100_000)]
        pairs: usize,
        #[arg(long, default_value_t = 0.5)]
        sigma_min: f64,
        /// Constant gamma; ignored when --weights is given.
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Take gamma and eps from the first LayerNorm of these weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dot products of random unit vectors.
    /// Columns: d,replicates,mean,variance,max,expected_variance,self_dot.
    Sphere {
        #[arg(long, value_delimiter = ',', default_value = "32,100,256")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Block-1 attention flattening under embedding-space noise.
    /// Columns: noise_scale,replicates,mean,variance,max,relative_to_first.
    Uniformity {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,10,100,1000")]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        replicates: usize,
        /// Clean test clouds in the batch.
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and entropy for every fixed purge size.
    /// Columns: l_pg,replicates,mean,variance,max,accuracy (entropy statistics).
    Sweep {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sp")]
        variant: VariantArg,
        #[arg(long)]
        corruption: Option<CorruptionKind>,
        #[arg(long)]
        severity: Option<u8>,
        #[arg(long, value_enum)]
        bn: Option<BnArg>,
        /// Largest purge size; defaults to L_t - 1.
        #[arg(long)]
        max_l: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::Json(_) => 2,
                Error::InvalidState(_) | Error::TrainingFailure { .. } => 3,
                Error::Io(_) | Error::Format(_) => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("PURGE_GATE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("PURGE_GATE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    fs::write(path, text).map_err(Error::from).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn load_model(path: &Path, cfg: &RunConfig) -> anyhow::Result<ModelWeights> {
    load_weights_checked(path, &cfg.model).with_context(|| format!("loading weights {}", path.display()))
}

fn sweep_csv(result: &SweepResult, hash: &str) -> String {
    format!("# config_hash={hash}\n{}", result.to_csv())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData { out } => {
            if let Some(o) = out {
                cfg.paths.data_dir = o;
            }
            cfg.validate()?;
            let dir = &cfg.paths.data_dir;
            let (n_train, n_test) = write_dataset(dir, &cfg.dataset, cfg.seed)?;
            write_config_record(dir, &cfg)?;
            info!("wrote {n_train} train and {n_test} test clouds to {}", dir.display());
        }
        Command::Pretrain { data, out, epochs, lr, batch } => {
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            if let Some(o) = out {
                cfg.paths.weights = o;
            }
            if let Some(e) = epochs {
                cfg.trainer.epochs = e;
            }
            if let Some(l) = lr {
                cfg.trainer.learning_rate = l;
            }
            if let Some(b) = batch {
                cfg.trainer.batch_size = b;
            }
            cfg.validate()?;
            let train = read_dataset_split(&cfg.paths.data_dir, Split::Train)?;
            let test = read_dataset_split(&cfg.paths.data_dir, Split::Test)?;
            let (weights, report) = train_source(&train, &cfg.model, &cfg.trainer_config())?;
            save_weights(&weights, &cfg.paths.weights)?;
            let opts = TtaOptions::new(Variant::SourceOnly, PurgeCandidateSet::only_zero());
            let clean = tta_evaluate(&weights, None, &test, &opts)?.accuracy();
            let record = serde_json::json!({
                "config_hash": cfg.hash(),
                "weights_checksum": weights.checksum(),
                "clean_test_accuracy": clean,
                "train": report,
            });
            write_text(
                &with_suffix(&cfg.paths.weights, ".train.json"),
                &(serde_json::to_string_pretty(&record)? + "\n"),
            )?;
            info!("clean test accuracy {:.4}; weights at {}", clean, cfg.paths.weights.display());
            println!("{clean:.6}");
        }
        Command::CollectStats { weights, data, origin, out } => {
            if let Some(w) = weights {
                cfg.paths.weights = w;
            }
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            if let Some(o) = origin {
                cfg.tta.stats_origin = o.into();
            }
            if let Some(o) = out {
                cfg.paths.stats = o;
            }
            cfg.validate()?;
            let w = load_model(&cfg.paths.weights, &cfg)?;
            let train = read_dataset_split(&cfg.paths.data_dir, Split::Train)?;
            let samples = tokenize_stream(&train, &w.config)?;
            let stats = collect_source_stats(&w, &samples, cfg.tta.stats_origin, 64)?;
            save_stats(&cfg.paths.stats, &w, &stats)?;
            info!("statistics of {} samples written to {}", stats.n_samples, cfg.paths.stats.display());
        }
        Command::TtaEval(args) => tta_eval(cfg, args)?,
        Command::Analyze { which } => analyze(cfg, which)?,
        Command::Report { run_dirs, out } => {
            let files = find_summaries(&run_dirs)?;
            if files.is_empty() {
                bail!(Error::InvalidArgument(format!("no *{SUMMARY_SUFFIX} files in the given run directories")));
            }
            let runs = files.iter().map(|p| RunSummary::load(p)).collect::<Result<Vec<_>, _>>()?;
            let table = aggregate(&runs)?;
            write_text(&out, &table.to_csv())?;
            write_text(&out.with_extension("json"), &(serde_json::to_string_pretty(&table)? + "\n"))?;
            print!("{}", table.to_csv());
        }
        Command::Corruptions { describe: _ } => {
            println!("kind,family,transform,point_count");
            for d in describe() {
                println!("{},{},\"{}\",\"{}\"", d.kind, d.family, d.transform, d.point_count);
            }
        }
    }
    Ok(())
}

fn write_config_record(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    let record = serde_json::json!({ "config_hash": cfg.hash(), "config": cfg });
    write_text(&dir.join("config.json"), &(serde_json::to_string_pretty(&record)? + "\n"))
}

fn prototype_for(variant: Variant, weights: &ModelWeights, stats: &Path) -> anyhow::Result<Option<SourcePrototype>> {
    Ok(match variant {
        Variant::SourceOnly => None,
        Variant::PgSf => Some(SourcePrototype::Cls(ClsPrototype::from_weights(weights))),
        Variant::PgSp => {
            let s = load_stats(stats).with_context(|| format!("loading statistics {}", stats.display()))?;
            if s.mu.len() != weights.config.d {
                bail!(Error::ShapeMismatch {
                    field: "d".into(),
                    expected: weights.config.d.to_string(),
                    found: s.mu.len().to_string(),
                });
            }
            Some(SourcePrototype::Stats(s))
        }
    })
}

fn tta_eval(mut cfg: RunConfig, a: TtaArgs) -> anyhow::Result<()> {
    if let Some(w) = a.weights {
        cfg.paths.weights = w;
    }
    if let Some(s) = a.stats {
        cfg.paths.stats = s;
    }
    if let Some(d) = a.data {
        cfg.paths.data_dir = d;
    }
    if let Some(v) = a.variant {
        cfg.tta.variant = v.into();
    }
    if let Some(k) = a.corruption {
        cfg.tta.corruption = k;
    }
    if let Some(s) = a.severity {
        cfg.tta.severity = s;
    }
    if let Some(c) = a.candidates {
        cfg.tta.candidates = PurgeCandidateSet::parse(&c, cfg.model.num_tokens)?.as_slice().to_vec();
    }
    if let Some(b) = a.batch {
        cfg.tta.batch_size = b;
    }
    if let Some(b) = a.bn {
        cfg.tta.bn_mode = Some(b.into());
    }
    if let Some(s) = a.selection {
        cfg.tta.selection = match s {
            SelectionArg::Sample => SelectionMode::PerSample,
            SelectionArg::Batch => SelectionMode::PerBatch,
        };
    }
    if a.concurrent_arms {
        cfg.tta.concurrent_arms = true;
    }
    cfg.validate()?;
    let out = a.out.unwrap_or_else(|| {
        cfg.paths.out_dir.join(format!(
            "{}_{}_s{}.csv",
            cfg.tta.variant, cfg.tta.corruption, cfg.tta.severity
        ))
    });
    let weights = load_model(&cfg.paths.weights, &cfg)?;
    let proto = prototype_for(cfg.tta.variant, &weights, &cfg.paths.stats)?;
    let options = cfg.tta_options()?;
    let test = read_dataset_split(&cfg.paths.data_dir, Split::Test)?;
    let stream = corrupt_stream(&test, &options.corruption)?;
    let samples = tokenize_stream(&stream, &weights.config)?;
    let report = tta_evaluate_tokenized(&weights, proto.as_ref(), &samples, &options)?;
    let mut base = TtaOptions::new(Variant::SourceOnly, PurgeCandidateSet::only_zero());
    base.batch_size = options.batch_size;
    base.corruption = options.corruption;
    let baseline = tta_evaluate_tokenized(&weights, None, &samples, &base)?.accuracy();
    let hash = cfg.hash();
    write_text(&out, &report.to_csv(&hash))?;
    let summary = RunSummary::new(&hash, cfg.seed, report.summary(), baseline);
    write_text(
        &with_suffix(&out, SUMMARY_SUFFIX),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    info!(
        "{} on {} s{}: accuracy {:.4} (source-only {:.4})",
        cfg.tta.variant,
        cfg.tta.corruption,
        cfg.tta.severity,
        report.accuracy(),
        baseline
    );
    println!("{:.6}", report.accuracy());
    Ok(())
}

fn analyze(mut cfg: RunConfig, which: Analysis) -> anyhow::Result<()> {
    let hash = cfg.hash();
    let analysis_seed = purge_gate::seed::derive(cfg.seed, purge_gate::seed::Stream::Analysis);
    let (result, out) = match which {
        Analysis::Lipschitz { d, pairs, sigma_min, gamma, weights, out } => {
            let (gamma, eps) = match weights {
                Some(p) => {
                    let w = load_model(&p, &cfg)?;
                    (w.blocks[0].ln1.gamma.clone(), w.config.ln_eps)
                }
                None => (vec![gamma; d], cfg.model.ln_eps),
            };
            let r = check_ln_lipschitz(gamma.len(), pairs, sigma_min, &gamma, eps, analysis_seed)?;
            let violations = r.rows[0].extra[1];
            if violations > 0.0 {
                write_text(&out, &sweep_csv(&r, &hash))?;
                bail!(Error::InvalidState(format!("{violations} pairs exceed the Lipschitz bound")));
            }
            (r, out)
        }
        Analysis::Sphere { dims, pairs, out } => (check_sphere_orthogonality(&dims, pairs, analysis_seed)?, out),
        Analysis::Uniformity { weights, data, scales, replicates, samples, out } => {
            if let Some(w) = weights {
                cfg.paths.weights = w;
            }
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            cfg.validate()?;
            let w = load_model(&cfg.paths.weights, &cfg)?;
            let test = read_dataset_split(&cfg.paths.data_dir, Split::Test)?;
            let batch = tokenize_stream(&test[..samples.min(test.len())], &w.config)?;
            (check_attention_uniformity(&w, &batch, &scales, replicates, analysis_seed)?, out)
        }
        Analysis::Sweep { weights, stats, data, variant, corruption, severity, bn, max_l, out } => {
            if let Some(w) = weights {
                cfg.paths.weights = w;
            }
            if let Some(s) = stats {
                cfg.paths.stats = s;
            }
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            if let Some(k) = corruption {
                cfg.tta.corruption = k;
            }
            if let Some(s) = severity {
                cfg.tta.severity = s;
            }
            cfg.tta.variant = variant.into();
            if let Some(b) = bn {
                cfg.tta.bn_mode = Some(b.into());
            }
            cfg.validate()?;
            let w = load_model(&cfg.paths.weights, &cfg)?;
            let Some(proto) = prototype_for(cfg.tta.variant, &w, &cfg.paths.stats)? else {
                bail!(Error::InvalidArgument("sweep needs --variant sp or sf".into()));
            };
            let max_l = max_l.unwrap_or(w.config.num_tokens - 1);
            let spec = cfg.corruption_spec()?;
            let test = read_dataset_split(&cfg.paths.data_dir, Split::Test)?;
            let samples = tokenize_stream(&corrupt_stream(&test, &spec)?, &w.config)?;
            let range: Vec<usize> = (0..=max_l).collect();
            let r = purge_size_sweep(&w, &proto, &samples, &range, cfg.bn_mode(), cfg.tta.batch_size)?;
            (r, out)
        }
    };
    write_text(&out, &sweep_csv(&result, &hash))?;
    info!("{} rows written to {}", result.rows.len(), out.display());
    Ok(())
}
