//! Command-line front end. [`run`] parses arguments, performs one
//! subcommand and returns the process exit code.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::AttentionKind;
use crate::data::{gen_synthetic, read_bundle, write_bundle, AttentionDump, Bundle, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{Ablation, Checkpoint, GraphContext, Model};
use crate::train::{
    evaluate_split, last_value_baseline, metrics_csv, predict_windows, train, Dataset, EvalMode,
    MetricReport, Normalizer, RunConfig, Split, SplitSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TEST_METRICS_FILE: &str = "test_metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "ccdsreformer", version, about = "Traffic-flow forecasting with rectified criss-crossed attention")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Overrides every seed in the spec or configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenSynthetic {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model.
    Train(TrainArgs),
    /// Train one ablated variant.
    Ablate {
        #[arg(long)]
        variant: Ablation,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults from the network layout.
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long, default_value = "test")]
        split: SplitArg,
    },
    /// Write one attention matrix as CSV and PGM.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        head: usize,
        #[arg(long)]
        kind: AttentionKind,
        #[arg(long)]
        out: PathBuf,
        /// Window index inside the test split.
        #[arg(long, default_value_t = 0)]
        window: usize,
        /// Time step (spatial kinds) or node (retsa); defaults to the last
        /// step or node 0.
        #[arg(long)]
        slice: Option<usize>,
    },
    /// Write prediction against truth for one node as CSV.
    ExportSeries {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Node id as listed in nodes.csv.
        #[arg(long)]
        node: u64,
        #[arg(long)]
        out: PathBuf,
        /// Which step of each forecast to export, from 1.
        #[arg(long, default_value_t = 1)]
        horizon_step: usize,
        #[arg(long, default_value = "test")]
        split: SplitArg,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Data(_) | Error::Format(_) | Error::Io { .. } | Error::Dimension(_) | Error::Contract(_) => EXIT_DATA,
    }
}

/// Parse `argv` (program name first) and run the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match dispatch(cli.command, cli.seed) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, seed: Option<u64>) -> Result<()> {
    match cmd {
        Command::GenSynthetic { spec, out } => {
            let mut spec = SyntheticSpec::load(&spec)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let b = gen_synthetic(&spec)?;
            write_bundle(&out, &b)?;
            println!(
                "wrote {} steps × {} nodes to {}",
                b.series.steps(),
                b.series.nodes(),
                out.display()
            );
            Ok(())
        }
        Command::Train(args) => train_cmd(&args, seed, None),
        Command::Ablate { variant, args } => train_cmd(&args, seed, Some(variant)),
        Command::Eval {
            data,
            checkpoint,
            mode,
            split,
        } => {
            let (bundle, ck) = (read_bundle(&data)?, Checkpoint::load(&checkpoint)?);
            let (ds, default_mode) = dataset_for(bundle, &ck)?;
            let model = ck.to_model()?;
            let ctx = GraphContext::build(&ds.network, &ds.train_history()?, &model.config)?;
            let r = evaluate_split(&model, &ctx, &ds, split.into(), mode.unwrap_or(default_mode))?;
            println!("split,mae,mape,rmse,count");
            println!("{},{},{},{},{}", split_name(split.into()), r.mae, r.mape, r.rmse, r.count);
            Ok(())
        }
        Command::DumpAttention {
            checkpoint,
            data,
            layer,
            stage,
            head,
            kind,
            out,
            window,
            slice,
        } => {
            let (bundle, ck) = (read_bundle(&data)?, Checkpoint::load(&checkpoint)?);
            let (ds, _) = dataset_for(bundle, &ck)?;
            let model = ck.to_model()?;
            let cfg = &model.config;
            let starts = ds.window_starts(Split::Test, cfg.input_len, cfg.horizon)?;
            let start = *starts.get(window).ok_or_else(|| {
                Error::Config(format!("window {window} out of range, the test split has {}", starts.len()))
            })?;
            let ctx = GraphContext::build(&ds.network, &ds.train_history()?, cfg)?;
            let s = ds.sample(start, cfg.input_len, cfg.horizon)?;
            let (_, records) = model.predict_with_attention(&ctx, &s.input, &s.indices)?;
            let rec = records
                .iter()
                .find(|r| r.layer == layer && r.stage == stage && r.head == head && r.kind == kind)
                .ok_or_else(|| {
                    let available: Vec<String> = records
                        .iter()
                        .map(|r| format!("{}/{}/{}/{}", r.layer, r.stage, r.head, r.kind))
                        .collect();
                    Error::Config(format!(
                        "no attention for layer {layer}, stage {stage}, head {head}, kind {kind}; available layer/stage/head/kind: {}",
                        available.join(" ")
                    ))
                })?;
            let dump = AttentionDump::from_record(rec, slice).map_err(|e| Error::Config(e.to_string()))?;
            let (c, p) = dump.write(&out)?;
            println!("{}\n{}", c.display(), p.display());
            Ok(())
        }
        Command::ExportSeries {
            checkpoint,
            data,
            node,
            out,
            horizon_step,
            split,
        } => export_series(&checkpoint, &data, node, &out, horizon_step, split.into()),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Dataset cut and normalized the way the checkpoint was trained.
fn dataset_for(bundle: Bundle, ck: &Checkpoint) -> Result<(Dataset, EvalMode)> {
    let (default_split, mode) = Dataset::defaults_for(&bundle.network.layout());
    let split = ck
        .meta
        .split
        .map_or(default_split, |[train, val, test]| SplitSpec { train, val, test });
    let mut ds = Dataset::new(bundle.network, bundle.series, split)?;
    if !ck.meta.normalizer_mean.is_empty() {
        ds = ds.with_normalizer(Normalizer {
            mean: ck.meta.normalizer_mean.clone(),
            std: ck.meta.normalizer_std.clone(),
        })?;
    }
    Ok((ds, mode))
}

fn report_row(name: &str, r: &MetricReport) -> String {
    format!("{name},{},{},{},{}\n", r.mae, r.mape, r.rmse, r.count)
}

fn train_cmd(args: &TrainArgs, seed: Option<u64>, variant: Option<Ablation>) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(v) = variant {
        cfg.model.ablation = v;
    }
    let bundle = read_bundle(&args.data)?;
    let (default_split, default_mode) = Dataset::defaults_for(&bundle.network.layout());
    let mode = cfg.train.mode.unwrap_or(default_mode);
    let ds = Dataset::new(bundle.network, bundle.series, cfg.train.split.unwrap_or(default_split))?;
    let outcome = train(&ds, &cfg.model, &cfg.train)?;

    fsutil::create_dir_all(&args.out)?;
    outcome.checkpoint(&ds).save(&args.out.join(CHECKPOINT_FILE))?;
    fsutil::write_atomic(&args.out.join(METRICS_FILE), metrics_csv(&outcome.trace).as_bytes())?;
    let effective = toml::to_string(&cfg).map_err(|e| Error::Format(e.to_string()))?;
    fsutil::write_atomic(&args.out.join(CONFIG_FILE), effective.as_bytes())?;

    let ctx = GraphContext::build(&ds.network, &ds.train_history()?, &cfg.model)?;
    let test = evaluate_split(&outcome.model, &ctx, &ds, Split::Test, mode)?;
    let base = last_value_baseline(&ds, Split::Test, cfg.model.input_len, cfg.model.horizon, mode)?;
    let mut table = String::from("model,mae,mape,rmse,count\n");
    table.push_str(&report_row(cfg.model.ablation.name(), &test));
    table.push_str(&report_row("last_value", &base));
    fsutil::write_atomic(&args.out.join(TEST_METRICS_FILE), table.as_bytes())?;
    println!(
        "{} steps, best epoch {}; test {test}; last-value baseline {base}",
        outcome.trace.len(),
        outcome.best_epoch
    );
    Ok(())
}

fn export_series(ck_path: &Path, data: &Path, node: u64, out: &Path, horizon_step: usize, split: Split) -> Result<()> {
    let (bundle, ck) = (read_bundle(data)?, Checkpoint::load(ck_path)?);
    let idx = bundle
        .node_index(node)
        .ok_or_else(|| Error::Config(format!("node {node} is not in the bundle")))?;
    let (ds, _) = dataset_for(bundle, &ck)?;
    let model: Model = ck.to_model()?;
    let cfg = &model.config;
    if horizon_step == 0 || horizon_step > cfg.horizon {
        return Err(Error::Config(format!(
            "horizon step must be in 1..={}, got {horizon_step}",
            cfg.horizon
        )));
    }
    let starts = ds.window_starts(split, cfg.input_len, cfg.horizon)?;
    let ctx = GraphContext::build(&ds.network, &ds.train_history()?, cfg)?;
    let (pred, truth) = predict_windows(&model, &ctx, &ds, &starts)?;
    let (n, c) = (ds.series.nodes(), ds.series.channels());
    let mut csv = String::from("step,timestamp,channel,truth,prediction\n");
    for (w, &s) in starts.iter().enumerate() {
        let step = s + cfg.input_len + horizon_step - 1;
        let ts = ds.series.timestamp(step).format(crate::data::TIME_FORMAT);
        for k in 0..c {
            let at = ((w * cfg.horizon + horizon_step - 1) * n + idx) * c + k;
            writeln!(csv, "{step},{ts},{k},{},{}", truth.data()[at], pred.data()[at]).expect("write to String");
        }
    }
    fsutil::write_atomic(out, csv.as_bytes())?;
    println!("wrote {} rows to {}", starts.len() * c, out.display());
    Ok(())
}
