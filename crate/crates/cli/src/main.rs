use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossform::analysis::{analyze, power_angle_table};
use crossform::runner::{run_to_dir, sweep, sweep_csv, GridAxis};
use crossform::scenario::{load_scenario, Scenario};
use crossform::verify::{report_jsonl, run_suite, Mutation, VerifyConfig};
use crossform::{bundled, Error};

#[derive(Parser)]
#[command(name = "crossform", version, about = "Grid-forming inverter fault simulations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the integration step (s).
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Override the end time (s).
    #[arg(long = "t-end", global = true)]
    t_end: Option<f64>,
    /// Seed for property-suite draws.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for sweeps and the property suite.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one scenario and write its CSV, config echo, summary and plot script.
    Run { scenario: String },
    /// Run scenario templates over a parameter grid.
    Sweep(SweepArgs),
    /// Power-angle table, equal-area report and dVOC condition.
    Analyze { scenario: String },
    /// Limiter property suite.
    Limiters,
    /// Full property suite.
    Verify {
        /// Only properties whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Inject a defect (`mode2-sign`) to check the suite fails.
        #[arg(long, default_value = "none")]
        mutate: String,
    },
    /// List bundled scenarios.
    List,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario files or bundled names.
    #[arg(required = true)]
    scenarios: Vec<String>,
    /// Axis `key=v1,v2,...`; keys are dotted paths such as `fault.0.p_star_fault`.
    #[arg(long = "grid")]
    grid: Vec<String>,
    /// Sweep result file name inside the output directory.
    #[arg(long, default_value = "sweep.csv")]
    name: String,
}

/// A path when one exists, else a bundled scenario name.
fn resolve(arg: &str, cli: &Cli) -> Result<Scenario, Error> {
    let scn = if Path::new(arg).exists() {
        load_scenario(Path::new(arg))?
    } else {
        bundled::load(arg)?
    };
    scn.with_overrides(cli.dt, cli.t_end)
}

fn write_atomic(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("report serializes")
}

fn suite(cfg: &VerifyConfig, cli: &Cli, file: &str) -> Result<i32, Error> {
    let results = run_suite(cfg);
    let report = report_jsonl(&results);
    print!("{report}");
    write_atomic(&cli.out.join(file), &report)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    eprintln!("{} properties, {failed} failed", results.len());
    Ok(if failed == 0 { 0 } else { 5 })
}

fn execute(cli: &Cli) -> Result<i32, Error> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("--jobs: {e}")))?;
    }
    match &cli.cmd {
        Cmd::Run { scenario } => {
            let scn = resolve(scenario, cli)?;
            let report = run_to_dir(&scn, &cli.out)?;
            println!("{}", json(&report.summary));
            Ok(report.summary.exit_code)
        }
        Cmd::Sweep(args) => {
            let templates = args
                .scenarios
                .iter()
                .map(|s| resolve(s, cli).map(|s| s.file))
                .collect::<Result<Vec<_>, _>>()?;
            let axes = args
                .grid
                .iter()
                .map(|g| g.parse::<GridAxis>())
                .collect::<Result<Vec<_>, _>>()?;
            let rows = sweep(&templates, &axes);
            let text = sweep_csv(&axes, &rows)?;
            write_atomic(&cli.out.join(&args.name), &text)?;
            print!("{text}");
            Ok(0)
        }
        Cmd::Analyze { scenario } => {
            let scn = resolve(scenario, cli)?;
            let a = analyze(&scn)?;
            write_atomic(
                &cli.out.join(format!("{}.power_angle.csv", scn.name)),
                &power_angle_table(&a, 181),
            )?;
            let report = serde_json::to_string_pretty(&a).expect("report serializes");
            write_atomic(&cli.out.join(format!("{}.analysis.json", scn.name)), &report)?;
            println!("{report}");
            Ok(0)
        }
        Cmd::Limiters => {
            let cfg = VerifyConfig {
                seed: cli.seed,
                filter: Some("limiting.".into()),
                mutation: Mutation::None,
            };
            suite(&cfg, cli, "limiters.jsonl")
        }
        Cmd::Verify { filter, mutate } => {
            let cfg = VerifyConfig {
                seed: cli.seed,
                filter: filter.clone(),
                mutation: mutate.parse()?,
            };
            suite(&cfg, cli, "verify.jsonl")
        }
        Cmd::List => {
            for n in bundled::names() {
                println!("{n}");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
