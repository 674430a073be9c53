//! Command-line front end: argument parsing and the five subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::analysis::{distribution_summary, FrequencyAccumulator};
use crate::data::episode_io::{ingest, write_episodes};
use crate::data::generate::generate_range;
use crate::data::profile::{RegionProfile, REGIONS};
use crate::data::schema::{ChannelSchema, CHANNEL_NAMES};
use crate::data::EpisodeRecord;
use crate::error::{Error, Result};
use crate::harness::{
    cohort_seed, grid_search, report_emit, run_comparison, ExperimentConfig, DEFAULT_EPOCH_GRID,
    DEFAULT_IMPORTANCE_GRID, HISTOGRAM_BINS,
};
use crate::par::Executor;
use crate::strategy::Method;

/// Domain-incremental ICU benchmark: synthetic cohorts, transfer runs,
/// grid search and reports.
///
/// Exit status: 0 success, 1 usage error, 2 data or config error,
/// 3 runtime failure.
#[derive(Parser, Debug)]
#[command(name = "icudil", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic cohorts and write them as episode files.
    Generate(GenerateArgs),
    /// Run the two-source transfer protocol for one or more methods.
    Train(TrainArgs),
    /// Grid search over epochs and importance on validation splits.
    Grid(GridArgs),
    /// Measurement frequency and value distribution per region.
    Analyze(AnalyzeArgs),
    /// Build comparison tables and histogram data from result files.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct CohortArgs {
    /// Regions to generate (default: all five shipped regions).
    #[arg(long = "region", value_name = "NAME")]
    regions: Vec<String>,
    /// Profile file replacing the shipped profile of the region it names.
    #[arg(long = "profile", value_name = "FILE")]
    profiles: Vec<PathBuf>,
    /// Data seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stays per region (default: each profile's cohort size).
    #[arg(long)]
    cohort_size: Option<usize>,
    /// Shift coefficient applied to every region except MIMIC-III.
    #[arg(long)]
    shift: Option<f64>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    cohort: CohortArgs,
    /// Output directory for episode files and the listfile.
    #[arg(long, short)]
    out: PathBuf,
    /// Also write each profile as an editable key-value file.
    #[arg(long)]
    write_profiles: bool,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Experiment config file (key = value lines).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Task: ihm, decompensation, los or phenotyping.
    #[arg(long)]
    task: Option<String>,
    /// Target region; the first source stays MIMIC-III.
    #[arg(long)]
    region: Option<String>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// First run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $ICUDIL_OUTPUT_DIR or ./results).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Extra `key=value` config overrides, applied last.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Methods, comma separated: baseline, ewc, replay, adjusted_replay,
    /// combined or all.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Method to tune.
    #[arg(long)]
    method: Option<String>,
    /// Epoch values, comma separated (ignored for per-hour tasks).
    #[arg(long, value_delimiter = ',')]
    epochs_grid: Option<Vec<usize>>,
    /// Importance values, comma separated.
    #[arg(long, value_delimiter = ',')]
    importance_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    cohort: CohortArgs,
    /// Analyze episode files in this directory instead of generating.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory for frequency.csv and distribution CSVs.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding results (searched recursively).
    dir: PathBuf,
}

fn experiment_config(args: &ExperimentArgs, method: Option<&str>) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(t) = &args.task {
        overrides.push(format!("task={t}"));
    }
    if let Some(r) = &args.region {
        overrides.push(format!("sources={},{r}", REGIONS[0]));
    }
    if let Some(n) = args.seeds {
        overrides.push(format!("seeds={n}"));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &args.output {
        overrides.push(format!("output_dir={}", o.display()));
    }
    if let Some(m) = method {
        overrides.push(format!("method={m}"));
    }
    overrides.extend(args.overrides.iter().cloned());
    ExperimentConfig::load(args.config.as_deref(), &overrides)
}

fn parse_methods(spec: Option<&str>) -> Result<Option<Vec<Method>>> {
    let Some(spec) = spec else { return Ok(None) };
    if spec == "all" {
        return Ok(Some(Method::ALL.to_vec()));
    }
    let mut methods = Vec::new();
    for m in spec.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        match m.parse::<Method>() {
            Ok(m) => methods.push(m),
            Err(e) => return Err(Error::Usage(format!("--method: {e}"))),
        }
    }
    if methods.is_empty() {
        return Err(Error::Usage("--method lists no methods".into()));
    }
    Ok(Some(methods))
}

fn cohort_profiles(args: &CohortArgs) -> Result<Vec<RegionProfile>> {
    let mut custom = Vec::new();
    for p in &args.profiles {
        custom.push(RegionProfile::read(p)?);
    }
    let names: Vec<String> = if args.regions.is_empty() && custom.is_empty() {
        REGIONS.iter().map(|r| r.to_string()).collect()
    } else {
        args.regions.clone()
    };
    let mut out = Vec::new();
    for name in &names {
        let p = match custom.iter().position(|c| c.name.eq_ignore_ascii_case(name)) {
            Some(i) => custom.remove(i),
            None => RegionProfile::named(name)?,
        };
        out.push(p);
    }
    out.extend(custom);
    for p in out.iter_mut() {
        if let Some(n) = args.cohort_size {
            p.cohort_size = n;
        }
        if let (Some(s), true) = (args.shift, p.name != REGIONS[0]) {
            p.shift = s;
        }
        p.validate()?;
    }
    Ok(out)
}

fn generate_cohorts(args: &CohortArgs) -> Result<Vec<(String, Vec<EpisodeRecord>)>> {
    let exec = if args.sequential { Executor::Sequential } else { Executor::available() };
    cohort_profiles(args)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = cohort_seed(args.seed, &p.name, i);
            let cohort = generate_range(&p, s, 0..p.cohort_size, exec)?;
            Ok((p.name, cohort))
        })
        .collect()
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let schema = ChannelSchema::standard();
    let cohorts = generate_cohorts(&args.cohort)?;
    let mut all = Vec::new();
    for (name, cohort) in &cohorts {
        println!("{name}: {} stays", cohort.len());
        all.extend(cohort.iter().cloned());
    }
    write_episodes(&all, &schema, &args.out)?;
    if args.write_profiles {
        for p in cohort_profiles(&args.cohort)? {
            write_text(&args.out.join(format!("profile_{}.kv", slug(&p.name))), &p.to_kv().render())?;
        }
    }
    println!("wrote {} episodes to {}", all.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let methods = parse_methods(args.method.as_deref())?;
    let first = methods.as_ref().map(|m| m[0].name());
    let config = experiment_config(&args.experiment, first)?;
    let methods = methods.unwrap_or_else(|| vec![config.method]);
    let records = run_comparison(&config, &methods)?;
    for r in &records {
        let dir = config.run_dir(r.method);
        for metric in crate::train::metric_names(config.task) {
            if let Some((m, s)) = r.final_psa(metric) {
                println!(
                    "{} {} {metric} PSA {}",
                    r.method,
                    config.region(),
                    crate::metrics::format_mean_std(m, s)
                );
            }
        }
        println!("results: {}", dir.display());
    }
    Ok(())
}

fn cmd_grid(args: &GridArgs) -> Result<()> {
    let config = experiment_config(&args.experiment, args.method.as_deref())?;
    let epochs = args.epochs_grid.clone().unwrap_or_else(|| DEFAULT_EPOCH_GRID.to_vec());
    let importance = args.importance_grid.clone().unwrap_or_else(|| DEFAULT_IMPORTANCE_GRID.to_vec());
    let result = grid_search(&config, &epochs, &importance)?;
    let mut csv = String::from("epochs,importance,validation_psa\n");
    for c in &result.cells {
        let _ = writeln!(csv, "{},{},{}", c.epochs, c.importance, c.validation_psa);
    }
    std::fs::create_dir_all(&config.output_dir).map_err(Error::io(&config.output_dir))?;
    let path = config.output_dir.join(format!("grid-{}-{}.csv", config.task.name(), config.method.name()));
    write_text(&path, &csv)?;
    print!("{csv}");
    println!(
        "best: epochs={} importance={} validation PSA {:.4}",
        result.best.epochs, result.best.importance, result.best.validation_psa
    );
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let schema = ChannelSchema::standard();
    let cohorts: Vec<(String, Vec<EpisodeRecord>)> = match &args.input {
        Some(dir) => {
            let (kept, dropped) = ingest(dir, &schema)?;
            if dropped > 0 {
                eprintln!("dropped {dropped} episodes with unknown region");
            }
            let mut by_region: Vec<(String, Vec<EpisodeRecord>)> = Vec::new();
            for e in kept {
                match by_region.iter_mut().find(|(r, _)| *r == e.region) {
                    Some((_, v)) => v.push(e),
                    None => by_region.push((e.region.clone(), vec![e])),
                }
            }
            by_region
        }
        None => generate_cohorts(&args.cohort)?,
    };
    std::fs::create_dir_all(&args.out).map_err(Error::io(&args.out))?;
    let mut freq = Vec::new();
    for (_, cohort) in &cohorts {
        let mut acc = FrequencyAccumulator::default();
        for e in cohort {
            acc.add(e)?;
        }
        freq.push(acc.finish()?);
    }
    let mut table = String::from("channel");
    for (name, _) in &cohorts {
        let _ = write!(table, ",{name}");
    }
    table.push('\n');
    for (c, channel) in CHANNEL_NAMES.iter().enumerate() {
        table.push_str(channel);
        for f in &freq {
            let _ = write!(table, ",{:.4}", f[c]);
        }
        table.push('\n');
    }
    write_text(&args.out.join("frequency.csv"), &table)?;
    print!("{table}");
    for (name, cohort) in &cohorts {
        let mut text = String::from("channel,episodes,mean,q1,median,q3\n");
        for s in distribution_summary(cohort, HISTOGRAM_BINS)? {
            let _ = writeln!(text, "{},{},{},{},{},{}", s.channel, s.episodes, s.mean, s.q1, s.median, s.q3);
        }
        write_text(&args.out.join(format!("distribution_{}.csv", slug(name))), &text)?;
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let emitted = report_emit(&args.dir)?;
    println!("{} rows -> {}", emitted.rows, emitted.table.display());
    println!("first-source table -> {}", emitted.first_source.display());
    for h in &emitted.histograms {
        println!("histogram -> {}", h.display());
    }
    Ok(())
}

/// Exit status for a failed command: 1 usage, 2 data or config, 3 runtime.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) => 1,
        e if e.is_data_error() => 2,
        _ => 3,
    }
}

/// Runs a parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `args` (program name first) and runs the command, returning the
/// exit status. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
