use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use shuffle_histo::backbone::BackboneSource;
use shuffle_histo::checkpoint::load_checkpoint;
use shuffle_histo::config::ExperimentConfig;
use shuffle_histo::data::{
    make_splits, read_split_file, scan_dataset, synth_dataset, write_manifest, DatasetManifest,
    Magnification, SynthSpec,
};
use shuffle_histo::metrics::{benchmark_latency, LatencyReport, MetricsReport};
use shuffle_histo::model::{build_model, count_parameters, HybridModel};
use shuffle_histo::report::{
    comparison_to_csv, comparison_to_json, emit_comparison_table, load_comparison_fixture,
    metrics_bar_chart_svg, rows_from_table, training_curves_svg, MagnificationTable,
};
use shuffle_histo::training::{evaluate, read_history, run_experiment, sweep_m, TensorDataset};

const DATA_ENV: &str = "SHUFFLE_HISTO_DATA";
const TEST_METRICS_FILE: &str = "test_metrics.json";
const LATENCY_FILE: &str = "latency.json";

#[derive(Parser, Debug)]
#[command(
    name = "shuffle-histo",
    version,
    about = "Breast histopathology classifier toolkit"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Experiment config file (JSON or TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random choice (splits, initialisation, shuffling).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tally the images of a dataset by magnification and class.
    Scan(ScanArgs),
    /// Generate a synthetic dataset with the same file layout.
    Synth(SynthArgs),
    /// Write train/val/test split files for one magnification.
    Split(SplitArgs),
    /// Train a model and store history and the best checkpoint in a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Measure per-image inference latency.
    Bench(BenchArgs),
    /// Train one model per candidate m and pick the best.
    SweepM(SweepArgs),
    /// Build result tables and charts from run directories.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct RootArg {
    /// Dataset root directory.
    #[arg(long, env = DATA_ENV)]
    root: PathBuf,
}

#[derive(Args, Debug)]
struct BackboneArgs {
    /// Safetensors file with ImageNet weights for the backbone.
    #[arg(long)]
    backbone_weights: Option<PathBuf>,

    /// Use a randomly initialised backbone instead of pretrained weights.
    #[arg(long)]
    random_backbone: bool,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[command(flatten)]
    root: RootArg,

    /// Also write the manifest CSV here.
    #[arg(long)]
    manifest_out: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value_t = 100)]
    n_per_class: usize,

    /// Comma-separated magnifications.
    #[arg(long, value_delimiter = ',', default_value = "40")]
    magnifications: Vec<Magnification>,

    #[arg(long, default_value_t = 6)]
    patients_per_class: usize,

    #[arg(long, default_value_t = 112)]
    width: u32,

    #[arg(long, default_value_t = 84)]
    height: u32,
}

#[derive(Args, Debug)]
struct SplitOverrides {
    #[arg(long)]
    magnification: Option<Magnification>,

    /// Comma-separated train,val,test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    ratios: Option<Vec<f64>>,

    /// Split by image instead of by patient.
    #[arg(long)]
    by_image: bool,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    root: RootArg,

    /// Directory receiving train.txt, val.txt and test.txt.
    #[arg(long)]
    out: PathBuf,

    #[command(flatten)]
    split: SplitOverrides,
}

#[derive(Args, Debug)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    batch_size: Option<usize>,

    #[arg(long)]
    learning_rate: Option<f64>,

    #[arg(long)]
    input_size: Option<usize>,

    #[arg(long)]
    augment: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    root: RootArg,

    /// Run directory for config, splits, history and checkpoint.
    #[arg(long)]
    run_dir: PathBuf,

    #[command(flatten)]
    split: SplitOverrides,

    #[command(flatten)]
    train: TrainOverrides,

    #[command(flatten)]
    backbone: BackboneArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint name or file (`best`, `best.weights`, `best.meta.json`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    #[command(flatten)]
    root: RootArg,

    /// Split file listing the images to evaluate.
    #[arg(long, conflicts_with = "run_dir")]
    split_file: Option<PathBuf>,

    /// Run directory; evaluates its test.txt and stores test_metrics.json there.
    #[arg(long)]
    run_dir: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoint to time; without one the model comes from the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Time the comparison network without a backbone instead.
    #[arg(long, conflicts_with = "checkpoint")]
    standalone: bool,

    #[arg(long, default_value_t = 1)]
    batch_size: usize,

    #[arg(long, default_value_t = 5)]
    warmup: usize,

    #[arg(long, default_value_t = 30)]
    runs: usize,

    /// Store latency.json in this run directory.
    #[arg(long)]
    run_dir: Option<PathBuf>,

    #[command(flatten)]
    backbone: BackboneArgs,

    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    root: RootArg,

    /// Comma-separated candidate values of m.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    candidates: Vec<usize>,

    #[command(flatten)]
    split: SplitOverrides,

    #[command(flatten)]
    train: TrainOverrides,

    #[command(flatten)]
    backbone: BackboneArgs,

    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// One run directory per magnification, each with test_metrics.json.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,

    /// CSV of reference results for other methods.
    #[arg(long)]
    baselines: Option<PathBuf>,

    /// Name of this method's rows in the comparison table.
    #[arg(long, default_value = "Our method")]
    name: String,

    /// Write tables and SVG charts into this directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn apply_split(cfg: &mut ExperimentConfig, o: &SplitOverrides) -> Result<()> {
    if let Some(m) = o.magnification {
        cfg.train.magnification = m;
    }
    if let Some(r) = &o.ratios {
        cfg.split.ratios = [r[0], r[1], r[2]];
    }
    if o.by_image {
        cfg.split.group_by_patient = false;
    }
    Ok(cfg.split.validate()?)
}

fn apply_train(cfg: &mut ExperimentConfig, o: &TrainOverrides) {
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = o.input_size {
        cfg.model.input_size = v;
    }
    if o.augment {
        cfg.train.augment = true;
    }
}

fn apply_backbone(cfg: &mut ExperimentConfig, b: &BackboneArgs) {
    if let Some(p) = &b.backbone_weights {
        cfg.backbone_weights = Some(p.clone());
    }
    if b.random_backbone {
        cfg.random_backbone = true;
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_scan(args: &ScanArgs) -> Result<()> {
    let manifest = scan_dataset(&args.root.root)?;
    if let Some(out) = &args.manifest_out {
        write_manifest(out, &manifest)?;
    }
    if !manifest.skipped().is_empty() {
        eprintln!("skipped {} unparseable file(s)", manifest.skipped().len());
    }
    let tally = manifest.tally();
    match args.format {
        Format::Text => println!("{tally}"),
        Format::Json => println!("{}", serde_json::to_string_pretty(&tally)?),
        Format::Csv => {
            println!("magnification,benign,malignant,total");
            for m in Magnification::ALL {
                let (b, mal, t) = tally.row(m);
                println!("{},{b},{mal},{t}", m.value());
            }
            let (b, mal, t) = tally.totals();
            println!("total,{b},{mal},{t}");
        }
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let spec = SynthSpec {
        n_per_class: args.n_per_class,
        magnifications: args.magnifications.clone(),
        seed,
        patients_per_class: args.patients_per_class,
        width: args.width,
        height: args.height,
    };
    let written = synth_dataset(&args.out, &spec)?;
    println!(
        "wrote {} images under {}",
        written.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_split(args: &SplitArgs, mut cfg: ExperimentConfig) -> Result<()> {
    apply_split(&mut cfg, &args.split)?;
    let manifest = scan_dataset(&args.root.root)?;
    let splits = make_splits(&manifest, &cfg.split, cfg.train.magnification)?;
    splits.write_to(&args.out)?;
    println!(
        "train {} val {} test {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, mut cfg: ExperimentConfig) -> Result<()> {
    apply_split(&mut cfg, &args.split)?;
    apply_train(&mut cfg, &args.train);
    apply_backbone(&mut cfg, &args.backbone);
    let manifest = scan_dataset(&args.root.root)?;
    let summary = run_experiment(&args.run_dir, &manifest, &cfg)?;
    println!(
        "best epoch {} val accuracy {:.2}; checkpoint {}",
        summary.state.best_epoch,
        summary.best_metrics.accuracy,
        summary.checkpoint.display()
    );
    Ok(())
}

fn single_magnification(
    manifest_records: &[shuffle_histo::data::ImageRecord],
) -> Result<Magnification> {
    let first = manifest_records
        .first()
        .context("the split lists no images")?
        .magnification;
    if manifest_records.iter().any(|r| r.magnification != first) {
        bail!("the split mixes magnifications");
    }
    Ok(first)
}

fn print_metrics(report: &MetricsReport, format: Format) -> Result<()> {
    match format {
        Format::Json => println!("{}", report.to_json()?),
        Format::Csv => {
            println!("magnification,accuracy,precision,recall,f1,tp,fp,tn,fn");
            let c = report.counts;
            println!(
                "{},{:.2},{:.2},{:.2},{:.2},{},{},{},{}",
                report.magnification.value(),
                report.accuracy,
                report.precision,
                report.recall,
                report.f1,
                c.tp,
                c.fp,
                c.tn,
                c.fn_
            );
        }
        Format::Text => {
            println!("magnification {}", report.magnification);
            println!("accuracy  {:.2}", report.accuracy);
            println!("precision {:.2}", report.precision);
            println!("recall    {:.2}", report.recall);
            println!("f1        {:.2}", report.f1);
            let c = report.counts;
            println!("tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_);
            for d in report.degenerate() {
                println!("note: {d} has a zero denominator and is reported as 0");
            }
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let Some(ckpt) = &args.checkpoint else {
        bail!("eval needs a checkpoint (--checkpoint <path>)");
    };
    let split_file = match (&args.split_file, &args.run_dir) {
        (Some(f), _) => f.clone(),
        (None, Some(d)) => d.join("test.txt"),
        (None, None) => bail!("eval needs --split-file or --run-dir"),
    };
    let (model, meta) = load_checkpoint::<f32>(ckpt)?;
    let manifest = scan_dataset(&args.root.root)?;
    let records = manifest.lookup(&read_split_file(&split_file)?)?;
    let mag = single_magnification(&records)?;
    let data = TensorDataset::load(manifest.root(), &records, meta.config.input_size)?;
    let report = evaluate(&model, &data, mag)?;
    if let Some(dir) = &args.run_dir {
        write_text(&dir.join(TEST_METRICS_FILE), &report.to_json()?)?;
    }
    print_metrics(&report, args.format)
}

fn cmd_bench(args: &BenchArgs, mut cfg: ExperimentConfig) -> Result<()> {
    apply_backbone(&mut cfg, &args.backbone);
    let model: HybridModel<f32> = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None if args.standalone => {
            let mc = shuffle_histo::model::ModelConfig {
                input_size: cfg.model.input_size,
                ..shuffle_histo::model::ModelConfig::standalone_drda()
            }
            .with_stem_channels(cfg.model.stem_channels)
            .with_m(cfg.model.m);
            build_model(&mc, &BackboneSource::RandomInit, cfg.train.seed)?
        }
        None => build_model(&cfg.model, &cfg.backbone_source(), cfg.train.seed)?,
    };
    let size = model.config().input_size;
    info!(
        "timing {} parameters at {size}x{size}, batch {}",
        count_parameters(&model, false),
        args.batch_size
    );
    let report = benchmark_latency(&model, size, args.batch_size, args.warmup, args.runs)?;
    if let Some(dir) = &args.run_dir {
        std::fs::create_dir_all(dir)?;
        write_text(
            &dir.join(LATENCY_FILE),
            &serde_json::to_string_pretty(&report)?,
        )?;
    }
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Csv => {
            println!("per_image_ms,iqr_ms,n_warmup,n_timed,batch_size,device_label");
            println!(
                "{:.4},{:.4},{},{},{},{}",
                report.per_image_ms,
                report.iqr_ms,
                report.n_warmup,
                report.n_timed,
                report.batch_size,
                report.device_label
            );
        }
        Format::Text => println!(
            "median {:.2} ms/image (IQR {:.2} ms) over {} runs on {}",
            report.per_image_ms, report.iqr_ms, report.n_timed, report.device_label
        ),
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, mut cfg: ExperimentConfig) -> Result<()> {
    apply_split(&mut cfg, &args.split)?;
    apply_train(&mut cfg, &args.train);
    apply_backbone(&mut cfg, &args.backbone);
    cfg.validate()?;
    let manifest: DatasetManifest = scan_dataset(&args.root.root)?;
    let splits = make_splits(&manifest, &cfg.split, cfg.train.magnification)?;
    let size = cfg.model.input_size;
    let train_data = TensorDataset::load(manifest.root(), &splits.train, size)?;
    let val_data = TensorDataset::load(manifest.root(), &splits.val, size)?;
    let outcome = sweep_m(
        &args.candidates,
        &cfg.model,
        &cfg.backbone_source(),
        &train_data,
        &val_data,
        &cfg.train,
    )?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&outcome)?),
        Format::Csv => {
            println!("m,val_accuracy");
            for (m, a) in &outcome.accuracies {
                println!("{m},{a:.2}");
            }
        }
        Format::Text => {
            for (m, a) in &outcome.accuracies {
                println!("m {m}: val accuracy {a:.2}");
            }
            println!("chosen m {}", outcome.chosen_m);
        }
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut pairs = Vec::new();
    for dir in &args.runs {
        let metrics: MetricsReport = read_json(&dir.join(TEST_METRICS_FILE))?;
        let latency_path = dir.join(LATENCY_FILE);
        let latency: Option<LatencyReport> = if latency_path.exists() {
            Some(read_json(&latency_path)?)
        } else {
            None
        };
        pairs.push((metrics, latency));
    }
    let table = MagnificationTable::from_reports(&pairs)?;
    for w in table.f1_inconsistencies() {
        eprintln!("warning: {w}");
    }
    let mut rows = match &args.baselines {
        Some(p) => load_comparison_fixture(p)?,
        None => Vec::new(),
    };
    rows.extend(rows_from_table(&args.name, &table));
    match args.format {
        Format::Text => {
            println!("{}", table.to_text());
            print!("{}", emit_comparison_table(&rows)?);
        }
        Format::Csv => {
            println!("{}", table.to_csv()?);
            print!("{}", comparison_to_csv(&rows)?);
        }
        Format::Json => println!(
            "{{\"magnification_table\": {}, \"comparison\": {}}}",
            table.to_json()?,
            comparison_to_json(&rows)?
        ),
    }
    if let Some(out) = &args.out_dir {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_text(&out.join("magnification_table.txt"), &table.to_text())?;
        write_text(&out.join("magnification_table.csv"), &table.to_csv()?)?;
        write_text(&out.join("magnification_table.json"), &table.to_json()?)?;
        write_text(&out.join("comparison.txt"), &emit_comparison_table(&rows)?)?;
        write_text(&out.join("comparison.csv"), &comparison_to_csv(&rows)?)?;
        write_text(&out.join("comparison.json"), &comparison_to_json(&rows)?)?;
        write_text(
            &out.join("metrics_by_magnification.svg"),
            &metrics_bar_chart_svg(&table),
        )?;
        for (dir, (m, _)) in args.runs.iter().zip(&pairs) {
            let history = dir.join("history.csv");
            if history.exists() {
                let svg = training_curves_svg(
                    &read_history(&history)?,
                    &format!("training {}", m.magnification),
                );
                write_text(
                    &out.join(format!("training_{}.svg", m.magnification.value())),
                    &svg,
                )?;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    match &cli.command {
        Command::Scan(a) => cmd_scan(a),
        Command::Synth(a) => cmd_synth(a, seed),
        Command::Split(a) => cmd_split(a, cfg),
        Command::Train(a) => cmd_train(a, cfg),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a, cfg),
        Command::SweepM(a) => cmd_sweep(a, cfg),
        Command::Report(a) => cmd_report(a),
    }
}

/// Joins the cause chain, skipping causes already spelled out by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(1)
        }
    }
}
