use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gossipmon::report::{
    overhead_ratio, render_csv, render_json, render_trace_jsonl, write_text, ReportError,
};
use gossipmon::scenario::{load_scenario, ConfigError, Scenario, Scheme};
use gossipmon::sim::{self, RunOutput};

#[derive(Parser)]
#[command(name = "gossipmon", version, about = "Layered gossip monitoring simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its report (and optionally a trace).
    Simulate(SimulateArgs),
    /// Run several schemes on the same topology and seeds and report
    /// message overhead side by side.
    Compare(CompareArgs),
    /// Re-run a scenario while varying one parameter.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the JSON-lines event trace.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated schemes to run.
    #[arg(long, value_delimiter = ',', default_values_t = vec![Scheme::Layered, Scheme::Flat, Scheme::Central])]
    schemes: Vec<Scheme>,
    /// Number of consecutive seeds, starting from the scenario's seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Parameter sweep, e.g. population=50,100,200 or rounds=10,100.
    #[arg(long)]
    param: String,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Config(String),
    Io(String),
}

impl CliError {
    fn report(&self) -> ExitCode {
        match self {
            CliError::Config(msg) => {
                eprintln!("configuration error: {msg}");
                ExitCode::from(1)
            }
            CliError::Io(msg) => {
                eprintln!("i/o error: {msg}");
                ExitCode::from(2)
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Compare(args) => compare(args),
        Command::Sweep(args) => sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

fn ensure_out_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    ensure_out_dir(&args.out)?;
    let run = sim::run(&scenario, args.trace)?;
    write_text(args.out.join("report.csv"), &render_csv(&run.report))?;
    write_text(args.out.join("report.json"), &render_json(&run.report))?;
    if let Some(trace) = &run.trace {
        write_text(args.out.join("trace.jsonl"), &render_trace_jsonl(trace))?;
    }
    println!(
        "{} N={} groups={} regions={} rounds={}: {} messages, {} dropped, convergence {}",
        run.report.scheme,
        run.report.population,
        run.report.groups,
        run.report.regions,
        run.report.rounds,
        run.report.total_messages,
        run.report.total_dropped,
        run.report
            .convergence_round
            .map_or_else(|| "none".to_string(), |r| r.to_string()),
    );
    Ok(())
}

/// Run each (scheme, seed) job; independent runs execute in parallel.
fn run_matrix(
    base: &Scenario,
    jobs: &[(Scheme, u64)],
) -> Result<Vec<RunOutput>, CliError> {
    let results: Vec<Result<RunOutput, ConfigError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(scheme, seed)| {
                let mut scenario = base.clone();
                scenario.scheme = *scheme;
                scenario.seed = *seed;
                scope.spawn(move || sim::run(&scenario, false))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run panicked")).collect()
    });
    results.into_iter().map(|r| r.map_err(CliError::from)).collect()
}

fn compare(args: CompareArgs) -> Result<(), CliError> {
    let base = load_scenario(&args.scenario)?;
    ensure_out_dir(&args.out)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| base.seed + i).collect();
    let jobs: Vec<(Scheme, u64)> = args
        .schemes
        .iter()
        .flat_map(|s| seeds.iter().map(move |seed| (*s, *seed)))
        .collect();
    let mut runs = run_matrix(&base, &jobs)?;

    // pair every run with the centralized total for its seed, when available
    let central_totals: Vec<(u64, u64)> = runs
        .iter()
        .filter(|r| r.report.scheme == Scheme::Central)
        .map(|r| (r.report.seed, r.report.total_messages))
        .collect();
    for run in &mut runs {
        if run.report.scheme == Scheme::Central {
            continue;
        }
        if let Some((_, central)) =
            central_totals.iter().find(|(seed, _)| *seed == run.report.seed)
        {
            run.report.overhead_ratio_pct =
                Some(overhead_ratio(run.report.total_messages, *central)?);
        }
    }

    let mut csv = String::from("scheme,seed,population,total_messages,convergence_round,overhead_pct\n");
    for run in &runs {
        let r = &run.report;
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.scheme,
            r.seed,
            r.population,
            r.total_messages,
            r.convergence_round.map_or_else(|| "none".into(), |c| c.to_string()),
            r.overhead_ratio_pct.map_or_else(|| "none".into(), |o| format!("{o:.2}")),
        )
        .unwrap();
        write_text(
            args.out.join(format!("report-{}-{}.csv", r.scheme, r.seed)),
            &render_csv(r),
        )?;
    }
    write_text(args.out.join("comparison.csv"), &csv)?;
    let reports: Vec<_> = runs.iter().map(|r| &r.report).collect();
    let mut json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    json.push('\n');
    write_text(args.out.join("comparison.json"), &json)?;
    print!("{csv}");
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let base = load_scenario(&args.scenario)?;
    ensure_out_dir(&args.out)?;
    let (key, values) = parse_param(&args.param)?;
    let variants: Vec<Scenario> = values
        .iter()
        .map(|v| apply_param(&base, &key, *v))
        .collect::<Result<_, _>>()?;

    let runs: Vec<Result<RunOutput, ConfigError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = variants
            .iter()
            .map(|scenario| scope.spawn(move || sim::run(scenario, false)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("run panicked")).collect()
    });

    let mut csv = String::from("param,value,scheme,seed,total_messages,convergence_round\n");
    for (value, run) in values.iter().zip(runs) {
        let run = run.map_err(CliError::from)?;
        let r = &run.report;
        writeln!(
            csv,
            "{key},{value},{},{},{},{}",
            r.scheme,
            r.seed,
            r.total_messages,
            r.convergence_round.map_or_else(|| "none".into(), |c| c.to_string()),
        )
        .unwrap();
    }
    write_text(args.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn parse_param(spec: &str) -> Result<(String, Vec<u64>), CliError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--param must look like key=v1,v2, got '{spec}'")))?;
    if !matches!(key, "population" | "rounds") {
        return Err(CliError::Config(format!(
            "unsupported sweep parameter '{key}' (expected population or rounds)"
        )));
    }
    let values = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("invalid value '{v}' for --param {key}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(CliError::Config("--param needs at least one value".into()));
    }
    Ok((key.to_string(), values))
}

fn apply_param(base: &Scenario, key: &str, value: u64) -> Result<Scenario, CliError> {
    let mut scenario = base.clone();
    match key {
        "population" => {
            scenario.regions = scale_regions(&base.regions, value);
            scenario.population = value;
        }
        "rounds" => scenario.rounds = value,
        _ => unreachable!("validated in parse_param"),
    }
    scenario.validate().map_err(CliError::from)?;
    Ok(scenario)
}

/// Redistribute `total` VMs over regions, keeping the base proportions;
/// leftovers go to the earliest regions.
fn scale_regions(base: &[u64], total: u64) -> Vec<u64> {
    let base_total: u64 = base.iter().sum();
    if base_total == 0 {
        return vec![total];
    }
    let mut scaled: Vec<u64> = base.iter().map(|c| c * total / base_total).collect();
    let mut assigned: u64 = scaled.iter().sum();
    let len = scaled.len();
    let mut i = 0;
    while assigned < total {
        scaled[i % len] += 1;
        assigned += 1;
        i += 1;
    }
    scaled
}
