//! Command-line orchestration: `solve`, `check`, `nash` and `study`.
//!
//! Exit codes: 0 success, 1 usage or parse error, 2 non-convergence or a
//! failed sub-run, 3 a failed weak-solution check.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checker::{check_weak_solution, stability_test, Perturbation};
use crate::error::{Error, Result};
use crate::functionals::{PrimalState, ALPHA_LOC, M_LOC, PHI_LOC, W_LOC};
use crate::grid::{Field, Location, SpaceTimeGrid};
use crate::io::{
    field_from_csv, field_to_bytes, field_to_csv, parse_toml, read_toml, sha256_hex, to_toml,
    unix_now, ArtifactWriter, ProblemSpec, RunConfig, RunManifest,
};
use crate::model::{validate, ProblemData};
use crate::nash::nash_estimate;
use crate::solver::solve;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;
pub const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mfg", version, about = "Variational solver and verification suite for first-order mean field games")]
pub struct Cli {
    /// Worker threads (defaults to the number of cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Root directory for outputs when `--out` is not given.
    #[arg(long, global = true, env = "MFG_OUT_ROOT", default_value = "runs")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a problem and write the fields, report and manifest.
    Solve {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write little-endian binary dumps of the fields.
        #[arg(long)]
        binary: bool,
    },
    /// Run the weak-solution checks on a solution directory.
    Check {
        solution: PathBuf,
        /// Thresholds override (the `[thresholds]` table of a run config).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the N-player game from a solution directory and estimate the Nash gap.
    Nash {
        solution: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `game.n_players`.
        #[arg(long)]
        players: Option<usize>,
    },
    /// Sweep one parameter and tabulate the trend.
    Study {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values (grid sizes, player counts or perturbation sizes).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Which datum the perturbation axis perturbs.
        #[arg(long, value_enum, default_value = "terminal")]
        perturb: PerturbKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Grid,
    N,
    Perturbation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PerturbKind {
    Terminal,
    Initial,
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ProxNonConvergence { .. } | Error::Divergence { .. } | Error::Cfl { .. } => {
            EXIT_NOT_CONVERGED
        }
        _ => EXIT_USAGE,
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Solve {
            problem,
            config,
            out,
            seed,
            binary,
        } => {
            let out = out_dir(cli, out, "solve", problem);
            cmd_solve(problem, config.as_deref(), &out, *seed, *binary)
        }
        Command::Check {
            solution,
            config,
            out,
        } => cmd_check(solution, config.as_deref(), out.as_deref().unwrap_or(solution)),
        Command::Nash {
            solution,
            config,
            out,
            seed,
            players,
        } => cmd_nash(
            solution,
            config.as_deref(),
            out.as_deref().unwrap_or(solution),
            *seed,
            *players,
        ),
        Command::Study {
            problem,
            axis,
            values,
            perturb,
            config,
            out,
            seed,
        } => {
            let out = out_dir(cli, out, "study", problem);
            cmd_study(problem, *axis, values.as_deref(), *perturb, config.as_deref(), &out, *seed)
        }
    }
}

fn out_dir(cli: &Cli, out: &Option<PathBuf>, cmd: &str, problem: &Path) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        let stem = problem
            .file_stem()
            .map_or_else(|| "problem".into(), |s| s.to_string_lossy().into_owned());
        cli.out_root.join(format!("{cmd}-{stem}"))
    })
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), read_toml)
}

fn manifest(command: &str, problem_text: &str, config: &RunConfig, seed: u64, started: u64) -> RunManifest {
    RunManifest {
        command: command.into(),
        problem_sha256: sha256_hex(problem_text.as_bytes()),
        config: config.clone(),
        seed,
        version: env!("CARGO_PKG_VERSION").into(),
        started,
        finished: unix_now(),
        artifacts: Vec::new(),
    }
}

fn build_problem(text: &str, origin: &str) -> Result<ProblemData> {
    let spec: ProblemSpec = parse_toml(text, origin)?;
    let data = spec.build()?;
    let report = validate(&data)?;
    for c in report.checks.iter().filter(|c| !c.passed) {
        eprintln!("warning: assumption {} not met on the samples: {}", c.name, c.detail);
    }
    Ok(data)
}

pub fn cmd_solve(
    problem: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    binary: bool,
) -> Result<u8> {
    let started = unix_now();
    let text = fs::read_to_string(problem)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", problem.display())))?;
    let data = build_problem(&text, &problem.display().to_string())?;
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.solver.seed = s;
        cfg.game.seed = s;
    }
    let mut w = ArtifactWriter::new(out)?;
    w.write("problem.toml", text.as_bytes())?;
    w.write("config.toml", to_toml(&cfg)?.as_bytes())?;
    let status = match solve(&data, &cfg.solver) {
        Ok(sol) => {
            let grid = &data.grid;
            let fields: [(&str, &Field); 4] = [
                ("m", &sol.primal.m),
                ("w", &sol.primal.w),
                ("phi", &sol.dual.phi),
                ("alpha", &sol.dual.alpha),
            ];
            for (name, f) in fields {
                w.write(&format!("{name}.csv"), field_to_csv(grid, f).as_bytes())?;
                if binary {
                    w.write(&format!("{name}.bin"), &field_to_bytes(grid, f))?;
                }
            }
            w.write_json("solve_report.json", &sol.report)?;
            let r = &sol.report;
            println!(
                "{} after {} iterations: relative gap {:.3e}, continuity residual {:.3e}",
                if r.converged { "converged" } else { "not converged" },
                r.iterations,
                r.relative_gap,
                r.continuity_residual
            );
            if r.converged {
                EXIT_OK
            } else {
                EXIT_NOT_CONVERGED
            }
        }
        Err(e) => {
            let code = exit_code(&e);
            if code != EXIT_NOT_CONVERGED {
                return Err(e);
            }
            eprintln!("error: {e}");
            w.write_json("error.json", &ErrorRecord { error: e.to_string() })?;
            code
        }
    };
    w.finish(
        manifest("solve", &text, &cfg, cfg.solver.seed, started),
        "manifest.json",
    )?;
    Ok(status)
}

#[derive(Serialize)]
struct ErrorRecord {
    error: String,
}

/// Problem, run configuration and fields stored by `solve`.
pub struct SolutionDir {
    pub problem_text: String,
    pub data: ProblemData,
    pub config: RunConfig,
    pub m: Field,
    pub phi: Field,
}

fn read_field(dir: &Path, name: &str, grid: &SpaceTimeGrid, loc: Location, comps: usize) -> Result<Field> {
    let path = dir.join(format!("{name}.csv"));
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Parse(format!("missing artifact {}: {e}", path.display())))?;
    field_from_csv(grid, loc, comps, &text, &path.display().to_string())
}

pub fn load_solution(dir: &Path) -> Result<SolutionDir> {
    let problem = dir.join("problem.toml");
    let problem_text = fs::read_to_string(&problem)
        .map_err(|e| Error::Parse(format!("missing artifact {}: {e}", problem.display())))?;
    let spec: ProblemSpec = parse_toml(&problem_text, &problem.display().to_string())?;
    let data = spec.build()?;
    let config: RunConfig = read_toml(&dir.join("config.toml"))?;
    let grid = &data.grid;
    let m = read_field(dir, "m", grid, M_LOC, 1)?;
    let phi = read_field(dir, "phi", grid, PHI_LOC, 1)?;
    // alpha is not needed by the checks, but a solution without it is incomplete
    read_field(dir, "alpha", grid, ALPHA_LOC, 1)?;
    Ok(SolutionDir {
        problem_text,
        data,
        config,
        m,
        phi,
    })
}

pub fn cmd_check(dir: &Path, config: Option<&Path>, out: &Path) -> Result<u8> {
    let started = unix_now();
    let sol = load_solution(dir)?;
    let mut cfg = sol.config.clone();
    if let Some(p) = config {
        cfg.thresholds = read_toml::<RunConfig>(p)?.thresholds;
    }
    cfg.thresholds.solver_tol = cfg.solver.tol;
    let report = check_weak_solution(&sol.m, &sol.phi, &sol.data, &cfg.thresholds)?;
    let mut w = ArtifactWriter::new(out)?;
    w.write_json("check_report.json", &report)?;
    w.finish(
        manifest("check", &sol.problem_text, &cfg, cfg.solver.seed, started),
        "check_manifest.json",
    )?;
    if report.passed {
        println!("all weak-solution checks passed");
        Ok(EXIT_OK)
    } else {
        println!("failed: {}", report.failures.join("; "));
        Ok(EXIT_CHECK_FAILED)
    }
}

pub fn cmd_nash(
    dir: &Path,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    players: Option<usize>,
) -> Result<u8> {
    let started = unix_now();
    let sol = load_solution(dir)?;
    let mut cfg = sol.config.clone();
    if let Some(p) = config {
        cfg.game = read_toml::<RunConfig>(p)?.game;
    }
    if let Some(s) = seed {
        cfg.game.seed = s;
    }
    if let Some(n) = players {
        cfg.game.n_players = n;
        cfg.game.sample_players = cfg.game.sample_players.min(n);
    }
    cfg.game.validate(&sol.data.grid)?;
    let grid = &sol.data.grid;
    let w_field = read_field(dir, "w", grid, W_LOC, 2 * grid.dim())?;
    let primal = PrimalState::new(grid, sol.m.clone(), w_field)?;
    let report = nash_estimate(&primal, &sol.phi, &sol.data, &cfg.game)?;
    let mut csv = String::from("replicate,player,x0");
    if grid.dim() == 2 {
        csv.push_str(",y0");
    }
    csv.push_str(",cost,best_response_cost,gain\n");
    for (r, sample) in report.samples.iter().enumerate() {
        for g in &sample.gains {
            let _ = write!(csv, "{r},{},{:.16e}", g.player, g.x0[0]);
            if grid.dim() == 2 {
                let _ = write!(csv, ",{:.16e}", g.x0[1]);
            }
            let _ = writeln!(
                csv,
                ",{:.16e},{:.16e},{:.16e}",
                g.cost, g.best_response_cost, g.gain
            );
        }
    }
    let mut w = ArtifactWriter::new(out)?;
    w.write("nash_players.csv", csv.as_bytes())?;
    w.write_json("nash_summary.json", &report)?;
    w.finish(
        manifest("nash", &sol.problem_text, &cfg, cfg.game.seed, started),
        "nash_manifest.json",
    )?;
    println!(
        "N = {}: epsilon {:.4e}, mean cost {:.6}, value {:.6}",
        report.n_players, report.epsilon, report.mean_cost, report.value
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
pub struct StudyTable {
    pub axis: Axis,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Whether the tracked column is monotone along the axis.
    pub monotone: bool,
    /// `false` when a sub-run failed and the table is partial.
    pub complete: bool,
    pub error: Option<String>,
}

impl StudyTable {
    fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Parse(format!("{what} must be a positive integer, got {v}")))
    }
}

pub fn cmd_study(
    problem: &Path,
    axis: Axis,
    values: Option<&[f64]>,
    perturb: PerturbKind,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<u8> {
    let started = unix_now();
    let text = fs::read_to_string(problem)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", problem.display())))?;
    let spec: ProblemSpec = parse_toml(&text, &problem.display().to_string())?;
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.solver.seed = s;
        cfg.game.seed = s;
    }
    let (columns, values, tracked): (&[&str], Vec<f64>, usize) = match axis {
        Axis::Grid => (
            &["nx", "nt", "iterations", "converged", "duality_gap", "relative_gap", "continuity_residual", "momentum_residual"],
            values.map_or_else(|| vec![16.0, 32.0], <[f64]>::to_vec),
            5,
        ),
        Axis::N => (
            &["n_players", "epsilon", "mean_gain", "min_gain", "mean_cost", "value", "w1_max"],
            values.map_or_else(|| vec![16.0, 64.0, 256.0], <[f64]>::to_vec),
            1,
        ),
        Axis::Perturbation => (
            &["eps", "m_lq", "phi_inf"],
            values.map_or_else(|| (1..=5).map(|k| 0.5f64.powi(k)).collect(), <[f64]>::to_vec),
            1,
        ),
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let outcome: Result<()> = (|| {
        match axis {
            Axis::Grid => {
                for &v in &values {
                    let nx = as_count(v, "grid size")?;
                    let mut s = spec.clone();
                    s.grid.nt = (spec.grid.nt * nx).div_ceil(spec.grid.nx);
                    s.grid.nx = nx;
                    let data = s.build()?;
                    let sol = solve(&data, &cfg.solver)?;
                    let r = &sol.report;
                    rows.push(vec![
                        nx as f64,
                        s.grid.nt as f64,
                        r.iterations as f64,
                        f64::from(u8::from(r.converged)),
                        r.duality_gap,
                        r.relative_gap,
                        r.continuity_residual,
                        r.momentum_residual,
                    ]);
                }
            }
            Axis::N => {
                let data = spec.build()?;
                let sol = solve(&data, &cfg.solver)?;
                for &v in &values {
                    let n = as_count(v, "player count")?;
                    let mut game = cfg.game.clone();
                    game.n_players = n;
                    game.sample_players = game.sample_players.min(n);
                    let rep = nash_estimate(&sol.primal, &sol.dual.phi, &data, &game)?;
                    let w1 = rep.wasserstein.iter().fold(0.0f64, |a, w| a.max(w.distance));
                    rows.push(vec![
                        n as f64,
                        rep.epsilon,
                        rep.mean_gain,
                        rep.min_gain,
                        rep.mean_cost,
                        rep.value,
                        w1,
                    ]);
                }
            }
            Axis::Perturbation => {
                let data = spec.build()?;
                let kind = match perturb {
                    PerturbKind::Terminal => Perturbation::Terminal,
                    PerturbKind::Initial => Perturbation::Initial,
                };
                let rep = stability_test(&data, kind, &values, &cfg.solver)?;
                for r in rep.rows {
                    rows.push(vec![r.eps, r.m_lq, r.phi_inf]);
                }
            }
        }
        Ok(())
    })();
    let monotone = rows.windows(2).all(|w| w[1][tracked] <= w[0][tracked]);
    let table = StudyTable {
        axis,
        columns: columns.iter().map(|c| c.to_string()).collect(),
        rows,
        monotone,
        complete: outcome.is_ok(),
        error: outcome.as_ref().err().map(ToString::to_string),
    };
    let name = match axis {
        Axis::Grid => "grid",
        Axis::N => "n",
        Axis::Perturbation => "perturbation",
    };
    let mut w = ArtifactWriter::new(out)?;
    w.write(&format!("study_{name}.csv"), table.to_csv().as_bytes())?;
    w.write_json(&format!("study_{name}.json"), &table)?;
    w.finish(
        manifest("study", &text, &cfg, cfg.solver.seed, started),
        &format!("study_{name}_manifest.json"),
    )?;
    match outcome {
        Ok(()) => {
            println!(
                "{} rows written; tracked column {} monotone",
                table.rows.len(),
                if table.monotone { "is" } else { "is not" }
            );
            Ok(EXIT_OK)
        }
        Err(e) => {
            eprintln!("error: sub-run failed, partial table written: {e}");
            match exit_code(&e) {
                EXIT_NOT_CONVERGED => Ok(EXIT_NOT_CONVERGED),
                _ => Err(e),
            }
        }
    }
}
