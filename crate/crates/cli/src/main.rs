use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fsvlm_core::dataset::{extract_to_dir, read_annotations, InMemorySlide};
use fsvlm_core::experiment::{
    emit_boxplot_data, emit_roc_data, emit_tables, load_records, run_dir, run_grid, verify, ExperimentConfig,
    TrialFilter, BOXPLOT_DIR, PIVOT_FILE, RESULTS_FILE, ROC_DIR,
};

#[derive(Parser)]
#[command(name = "fsvlm", version, about = "Few-shot vision-language adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid from a TOML config.
    Run(RunArgs),
    /// Write tables, ROC curves or box-plot data from saved records.
    Report(ReportArgs),
    /// Re-check records, splits and checkpoints of a run.
    Verify {
        #[arg(long)]
        records: PathBuf,
    },
    /// Cut labelled square patches out of slide images.
    Extract(ExtractArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (overrides the config).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Cell filter such as `strategy=lora,shots=32`.
    #[arg(long)]
    only: Option<String>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("what").required(true).multiple(true)))]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, group = "what")]
    table: bool,
    #[arg(long, group = "what")]
    roc: bool,
    #[arg(long, group = "what")]
    boxplot: bool,
}

#[derive(Args)]
struct ExtractArgs {
    /// Directory holding `<slide_id>.png` images.
    #[arg(long)]
    slides: PathBuf,
    /// JSON-lines annotation file.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    margin: i64,
}

fn run(args: RunArgs) -> Result<bool> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    config.validate()?;
    let filter = match &args.only {
        Some(spec) => TrialFilter::parse(spec)?,
        None => TrialFilter::default(),
    };
    let records = run_grid(&config, &filter)?;
    if records.is_empty() {
        bail!("the filter matched no grid cells");
    }
    emit_tables(&records, &config.output_dir)?;
    emit_roc_data(&records, &config.output_dir.join(ROC_DIR))?;
    emit_boxplot_data(&records, &config.output_dir.join(BOXPLOT_DIR))?;
    let failed: Vec<_> = records.iter().filter(|r| r.is_failed()).collect();
    println!(
        "{} trials, {} failed; results in {}",
        records.len(),
        failed.len(),
        config.output_dir.join(RESULTS_FILE).display()
    );
    for r in &failed {
        eprintln!("failed: {}", r.id());
    }
    Ok(failed.is_empty())
}

fn report(args: ReportArgs) -> Result<bool> {
    let dir = run_dir(&args.records);
    let records = load_records(&dir)?;
    if records.is_empty() {
        bail!("no records under {}", dir.display());
    }
    if args.table {
        emit_tables(&records, &dir)?;
        println!("wrote {} and {}", dir.join(RESULTS_FILE).display(), dir.join(PIVOT_FILE).display());
    }
    if args.roc {
        let files = emit_roc_data(&records, &dir.join(ROC_DIR))?;
        println!("wrote {} ROC files", files.len());
    }
    if args.boxplot {
        let files = emit_boxplot_data(&records, &dir.join(BOXPLOT_DIR))?;
        println!("wrote {} box-plot files", files.len());
    }
    Ok(records.iter().all(|r| !r.is_failed()))
}

fn check(records: &Path) -> Result<bool> {
    let report = verify(records)?;
    println!(
        "{} records, {} checkpoints verified, {} failed trials, {} problems",
        report.records,
        report.checkpoints_verified,
        report.failed_trials.len(),
        report.problems.len()
    );
    for f in &report.failed_trials {
        eprintln!("failed trial: {f}");
    }
    for p in &report.problems {
        eprintln!("problem: {p}");
    }
    Ok(report.ok())
}

fn extract(args: ExtractArgs) -> Result<bool> {
    let instances = read_annotations(&args.annotations)?;
    let ids: BTreeSet<&str> = instances.iter().map(|i| i.slide_id.as_str()).collect();
    let slides = ids
        .into_iter()
        .map(|id| {
            let path = args.slides.join(format!("{id}.png"));
            InMemorySlide::open(id, &path).with_context(|| format!("opening slide {id}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let entries = extract_to_dir(&slides, &instances, args.margin, &args.out)?;
    println!("extracted {} patches into {}", entries.len(), args.out.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::Verify { records } => check(&records),
        Command::Extract(a) => extract(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
