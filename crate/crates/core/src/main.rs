use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cakecut::adversary::{gen_ef2_lb, gen_interp_lb, gen_mnw_lb, gen_pa_lb, random_profile, MisreportFamily};
use cakecut::experiments::{attack_report, mechanism_report, run_repro, to_csv, utility_rows, ReproSpec, Scenario};
use cakecut::instance::{load_profile, to_json_pretty, write_atomic, InstanceFile};
use cakecut::mechanisms::Mechanism;
use cakecut::{audit, solve_mnw, Allocation, CakeError, MnwSolution, Profile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cakecut", version, about = "Nash-welfare cake cutting: mechanisms, audits and manipulation search")]
struct Cli {
    /// Solver and audit tolerance.
    #[arg(long, global = true, default_value_t = 1e-9)]
    tol: f64,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, written atomically; stdout if absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the maximum Nash welfare shares of an instance.
    Solve {
        instance: PathBuf,
        /// Leave cells nobody values unallocated.
        #[arg(long)]
        free_disposal: bool,
    },
    /// Run a mechanism and audit its allocation.
    Run {
        instance: PathBuf,
        #[arg(long)]
        mechanism: String,
        /// Exponent of the interpolated mechanisms.
        #[arg(long)]
        c: Option<f64>,
    },
    /// Audit an allocation file (JSON with `bundles` and `complete`).
    Audit { instance: PathBuf, allocation: PathBuf },
    /// Search a grid of misreports for one agent.
    Attack {
        instance: PathBuf,
        #[arg(long)]
        mechanism: String,
        #[arg(long)]
        c: Option<f64>,
        /// Attacking agent, numbered from 1.
        #[arg(long, default_value_t = 1)]
        agent: usize,
        /// Grid steps across the cake.
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        values: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        max_cells: usize,
        /// Keep the instance's cells and only change values.
        #[arg(long)]
        values_only: bool,
    },
    /// Reproduce a named scenario and check it against its criterion.
    Repro {
        name: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        c_grid: Option<Vec<f64>>,
        /// Number of random instances.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Write a named hard instance (or a random one) as an instance file.
    Gen {
        #[arg(value_enum)]
        kind: GenKind,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Premium-item instance index for interp-lb, 1..=n+1.
        #[arg(long)]
        which: Option<usize>,
        /// Cells of a random instance.
        #[arg(long, default_value_t = 4)]
        m: usize,
        /// Replace agent 1's density by its profitable misreport.
        #[arg(long)]
        misreport: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GenKind {
    MnwLb,
    PaLb,
    Ef2Lb,
    InterpLb,
    Random,
}

enum Failure {
    Criteria,
    Input(anyhow::Error),
    Solver(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<CakeError>() {
            Some(CakeError::NotConverged { .. } | CakeError::Invariant(_)) => Failure::Solver(e),
            _ => Failure::Input(e),
        }
    }
}

impl From<CakeError> for Failure {
    fn from(e: CakeError) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

#[derive(Serialize)]
struct SolveReport<'a> {
    instance_digest: String,
    nash_welfare: f64,
    #[serde(flatten)]
    solution: &'a MnwSolution,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Criteria) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Solver(e)) => {
            eprintln!("solver failure: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn emit(cli: &Cli, text: &str) -> Result<(), Failure> {
    match &cli.out {
        Some(path) => write_atomic(path, text.as_bytes())
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(Failure::Input),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_json_or_csv<T: Serialize, R: Serialize>(cli: &Cli, report: &T, rows: &[R]) -> Result<(), Failure> {
    let text = match cli.format {
        Format::Json => to_json_pretty(report),
        Format::Csv => to_csv(rows).map_err(Failure::Input)?,
    };
    emit(cli, &text)
}

fn load(path: &Path) -> Result<(InstanceFile, Profile), Failure> {
    load_profile(path).map_err(|e| Failure::Input(anyhow::Error::new(e).context(format!("{}", path.display()))))
}

fn mechanism(id: &str, c: Option<f64>) -> Result<Mechanism, Failure> {
    Ok(Mechanism::parse(id, c)?)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Solve { instance, free_disposal } => {
            let (file, profile) = load(instance)?;
            let solution = solve_mnw(&profile, !free_disposal, cli.tol)?;
            let report = SolveReport {
                instance_digest: file.digest(),
                nash_welfare: cakecut::cake::geometric_mean(&solution.utilities),
                solution: &solution,
            };
            let rows = utility_rows(&solution.utilities, Some(&solution.utilities));
            emit_json_or_csv(cli, &report, &rows)
        }
        Command::Run { instance, mechanism: id, c } => {
            let (file, profile) = load(instance)?;
            let report = mechanism_report(mechanism(id, *c)?, &file, &profile, seed, cli.tol)?;
            let rows = utility_rows(&report.utilities, report.audit.mnw_utilities.as_deref());
            emit_json_or_csv(cli, &report, &rows)
        }
        Command::Audit { instance, allocation } => {
            let (_, profile) = load(instance)?;
            let text = std::fs::read_to_string(allocation)
                .with_context(|| format!("cannot read {}", allocation.display()))
                .map_err(Failure::Input)?;
            let alloc: Allocation = serde_json::from_str(&text)
                .with_context(|| format!("{}: not an allocation", allocation.display()))
                .map_err(Failure::Input)?;
            let report = audit::audit(&profile, &alloc, cli.tol)?;
            let rows = utility_rows(&report.utilities, report.mnw_utilities.as_deref());
            emit_json_or_csv(cli, &report, &rows)
        }
        Command::Attack {
            instance,
            mechanism: id,
            c,
            agent,
            grid,
            values,
            max_cells,
            values_only,
        } => {
            let (file, profile) = load(instance)?;
            if *agent == 0 || *agent > profile.n_agents() {
                return Err(Failure::Input(anyhow::anyhow!(
                    "agent must be between 1 and {}",
                    profile.n_agents()
                )));
            }
            let family = if *values_only {
                MisreportFamily::values_only(values.clone())
            } else {
                MisreportFamily::cake(*grid, values.clone(), *max_cells)
            };
            let report = attack_report(mechanism(id, *c)?, &file, &profile, agent - 1, &family, seed, cli.tol)?;
            let rows = utility_rows(&report.utilities, report.audit.mnw_utilities.as_deref());
            emit_json_or_csv(cli, &report, &rows)
        }
        Command::Repro {
            name,
            n,
            k,
            eps,
            c_grid,
            instances,
        } => {
            let mut spec = ReproSpec::new(name.parse::<Scenario>()?);
            spec.n = *n;
            spec.k = *k;
            spec.eps = *eps;
            spec.c_grid = c_grid.clone();
            spec.instances = *instances;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let report = run_repro(&spec)?;
            for check in &report.checks {
                eprintln!("{check}");
            }
            emit_json_or_csv(cli, &report, &report.checks)?;
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Criteria)
            }
        }
        Command::Gen {
            kind,
            n,
            k,
            eps,
            which,
            m,
            misreport,
        } => {
            let (profile, lie) = match kind {
                GenKind::MnwLb => {
                    let h = gen_mnw_lb(n.unwrap_or(10), *eps)?;
                    (h.profile, Some(h.misreport))
                }
                GenKind::PaLb => {
                    let h = gen_pa_lb(n.unwrap_or(10))?;
                    (h.profile, Some(h.misreport))
                }
                GenKind::Ef2Lb => {
                    let h = gen_ef2_lb()?;
                    (h.profile, Some(h.misreport))
                }
                GenKind::InterpLb => {
                    let n = n.unwrap_or(3);
                    (gen_interp_lb(n, k.unwrap_or(5), which.unwrap_or(n + 1))?, None)
                }
                GenKind::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (random_profile(&mut rng, n.unwrap_or(3), *m, 8, 4)?, None)
                }
            };
            let profile = match (misreport, lie) {
                (false, _) => profile,
                (true, Some(lie)) => profile.with_density(0, lie)?,
                (true, None) => {
                    return Err(Failure::Input(anyhow::anyhow!("this instance has no built-in misreport")));
                }
            };
            if cli.format == Format::Csv {
                return Err(Failure::Input(anyhow::anyhow!("instances are only written as JSON")));
            }
            emit(cli, &to_json_pretty(&InstanceFile::from_profile(&profile)))
        }
    }
}
