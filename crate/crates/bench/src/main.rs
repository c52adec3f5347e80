//! Command-line front end: synthetic data generation, backbone training,
//! single-policy evaluation, multi-scenario benchmarking, and depth sweeps.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use malloc_core::backbone::{train, TrainConfig};
use malloc_core::data::{split_temporal, synth_generate, training_prefix, SynthConfig};
use malloc_core::policy::CachePolicyConfig;

use malloc_bench::checkpoint;
use malloc_bench::config::{BenchConfig, TrainFileConfig};
use malloc_bench::data_io::{load_dataset, write_records};
use malloc_bench::harness::{
    build_specs, depth_sweep, mem_ceiling_from_env, resolve_model, run_benchmark, run_pretrained,
    ScenarioSpec, MEM_CEILING_ENV,
};
use malloc_bench::report::{ReportFormat, CSV_COLUMNS};

#[derive(Parser)]
#[command(
    name = "malloc-bench",
    version,
    about = "Benchmark KV-cache compression policies on a sequential recommender",
    after_help = format!(
        "The {MEM_CEILING_ENV} environment variable, when set to a byte count,\n\
         caps the projected cache allocation of any single scenario."
    )
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic topical interaction log as CSV.
    GenData(GenDataArgs),
    /// Train the backbone on an interaction CSV and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one cache policy and report metrics plus
    /// resource use.
    Eval(EvalArgs),
    /// Run every configured policy x seed scenario and write a report.
    Bench(BenchArgs),
    /// Benchmark each configured policy across a ladder of model depths.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of synthetic users.
    #[arg(long, default_value_t = 1000)]
    users: usize,
    /// Item vocabulary size.
    #[arg(long, default_value_t = 200)]
    items: usize,
    /// Interactions generated per user.
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// Number of item topics (interest clusters).
    #[arg(long, default_value_t = 4)]
    topics: usize,
    /// Interest phase length in positions.
    #[arg(long, default_value_t = 16)]
    period: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Interaction CSV produced by gen-data (or matching its header).
    #[arg(long)]
    data: PathBuf,
    /// JSON training config (model shape, epochs, lr, batch_users, seed).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Interaction CSV; its trailing fraction per user forms the test span.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by the train subcommand.
    #[arg(long)]
    ckpt: PathBuf,
    /// Policy name: native, mqa, gqa, mla, rwkv, linformer, reformer,
    /// longformer, beacon, h2o, snapkv, kivi, intactkv.
    #[arg(long)]
    policy: String,
    /// Held-out fraction of each user's sequence.
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    /// Seed for frozen policy weights and measurement inputs.
    #[arg(long, default_value_t = 1)]
    policy_seed: u64,
    /// Batch size used for resource accounting.
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Report output path (JSON). Omit to print to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    policy_flags: PolicyFlags,
}

/// Optional policy hyperparameters; each applies to the policies that
/// declare the matching field and is rejected otherwise.
#[derive(Args)]
struct PolicyFlags {
    /// Retained cache entries (h2o, snapkv).
    #[arg(long)]
    budget: Option<usize>,
    /// Always-retained trailing entries (h2o).
    #[arg(long)]
    recent_window: Option<usize>,
    /// Trailing entries that vote for prefix retention (snapkv).
    #[arg(long)]
    obs_window: Option<usize>,
    /// Vote-smoothing pool width (snapkv).
    #[arg(long)]
    pool_width: Option<usize>,
    /// Key/value head groups (gqa).
    #[arg(long)]
    groups: Option<usize>,
    /// Shared latent width (mla).
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Quantization bit width (kivi, intactkv).
    #[arg(long)]
    bits: Option<u32>,
    /// Quantization group size (kivi).
    #[arg(long)]
    group_size: Option<usize>,
    /// Full-precision leading tokens (intactkv).
    #[arg(long)]
    pivots: Option<usize>,
    /// Segment compression ratio (beacon).
    #[arg(long)]
    ratio: Option<usize>,
    /// Projected sequence length (linformer).
    #[arg(long)]
    proj_len: Option<usize>,
    /// Hash bucket count (reformer).
    #[arg(long)]
    n_buckets: Option<usize>,
    /// Sliding attention window (longformer).
    #[arg(long)]
    window: Option<usize>,
    /// Globally attended leading tokens (longformer).
    #[arg(long)]
    n_global: Option<usize>,
}

impl PolicyFlags {
    /// Assembles the policy config from the name plus whichever flags were
    /// passed, so per-policy defaults and unknown-field rejection follow
    /// the same rules as config files.
    fn build(&self, name: &str) -> Result<CachePolicyConfig> {
        let mut obj = serde_json::Map::new();
        obj.insert("name".into(), serde_json::Value::String(name.to_string()));
        macro_rules! put {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    obj.insert(stringify!($field).into(), serde_json::json!(v));
                }
            };
        }
        put!(budget);
        put!(recent_window);
        put!(obs_window);
        put!(pool_width);
        put!(groups);
        put!(latent_dim);
        put!(bits);
        put!(group_size);
        put!(pivots);
        put!(ratio);
        put!(proj_len);
        put!(n_buckets);
        put!(window);
        put!(n_global);
        serde_json::from_value(serde_json::Value::Object(obj))
            .with_context(|| format!("building policy {name:?} from flags"))
    }
}

#[derive(Args)]
struct BenchArgs {
    /// JSON benchmark config (dataset, model, policies, seeds).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; the report is identical for any count.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON benchmark config; its model depth is overridden per rung.
    #[arg(long)]
    config: PathBuf,
    /// Ascending comma-separated block counts, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',', required = true)]
    depths: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Bench(args) => run_bench(args),
        Command::Sweep(args) => run_sweep(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        users: args.users,
        items: args.items,
        seq_len: args.seq_len,
        topics: args.topics,
        period: args.period,
    };
    let records =
        synth_generate(&cfg, args.seed).map_err(|e| anyhow::anyhow!("generating data: {e}"))?;
    write_records(&args.out, &records)?;
    println!("wrote {} interactions to {}", records.len(), args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = TrainFileConfig::from_file(&args.config)?;
    let dataset = load_dataset(&args.data, cfg.model.max_seq_len)?;
    let model = resolve_model(cfg.model, &dataset)?;
    let fit_on = if cfg.holdout_fraction > 0.0 {
        // Trailing interactions are excluded so a later `eval` with the same
        // fraction scores data the checkpoint never saw.
        let split = split_temporal(&dataset, cfg.holdout_fraction)
            .map_err(|e| anyhow::anyhow!("holdout split: {e}"))?;
        training_prefix(&dataset, &split).map_err(|e| anyhow::anyhow!("training view: {e}"))?
    } else {
        dataset
    };
    let tc = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_users: cfg.batch_users,
        seed: cfg.seed,
    };
    let params = train(&fit_on, &model, &tc).map_err(|e| anyhow::anyhow!("training: {e}"))?;
    checkpoint::save(&args.out, &model, &params)?;
    println!("trained {} epochs; checkpoint at {}", cfg.epochs, args.out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (model, params) = checkpoint::load(&args.ckpt)?;
    let dataset = load_dataset(&args.data, model.max_seq_len)?;
    if dataset.n_items() > model.n_items {
        anyhow::bail!(
            "dataset has {} items but the checkpoint vocabulary holds {}",
            dataset.n_items(),
            model.n_items
        );
    }
    let policy = args.policy_flags.build(&args.policy)?;
    let spec = ScenarioSpec {
        model,
        policy,
        epochs: 0,
        seed: args.policy_seed,
        batch: args.batch,
        lr: 0.0,
        batch_users: 1,
    };
    let ceiling = mem_ceiling_from_env()?;
    let report = run_pretrained(&dataset, args.test_fraction, &spec, &params, ceiling)?;
    match &args.report {
        Some(path) => {
            report.write(path, ReportFormat::Json)?;
            println!("report at {}", path.display());
        }
        None => print!("{}", report.to_json_string()?),
    }
    if let Some(failure) = &report.rows[0].failure {
        anyhow::bail!("evaluation failed: {failure}");
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let config = BenchConfig::from_file(&args.config)?;
    let dataset = load_dataset(&config.dataset, config.model.max_seq_len)?;
    let model = resolve_model(config.model, &dataset)?;
    let specs = build_specs(&config, model);
    let ceiling = mem_ceiling_from_env()?;
    let report = run_benchmark(&dataset, config.test_fraction, &specs, args.workers, ceiling)?;
    report.write(&args.out, args.format)?;
    summarize(&report, &args.out);
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let config = BenchConfig::from_file(&args.config)?;
    let dataset = load_dataset(&config.dataset, config.model.max_seq_len)?;
    let ceiling = mem_ceiling_from_env()?;
    let report = depth_sweep(&dataset, &config, &args.depths, args.workers, ceiling)?;
    report.write(&args.out, args.format)?;
    summarize(&report, &args.out);
    Ok(())
}

fn summarize(report: &malloc_bench::report::BenchReport, out: &std::path::Path) {
    let failed = report.rows.iter().filter(|r| r.failure.is_some()).count();
    println!(
        "{} scenarios ({} failed), {} mean rows; report at {}",
        report.rows.len(),
        failed,
        report.means.len(),
        out.display()
    );
    println!("csv columns: {}", CSV_COLUMNS.join(","));
}
