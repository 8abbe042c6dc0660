#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons reject NaN

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lgl_ocp::driver::{default_guess, solve_problem, SolveOutcome};
use lgl_ocp::nlp::{SolveStatus, SolverConfig};
use lgl_ocp::problem::{builtin, builtin_summary, OcpDefinition, BUILTIN_NAMES};
use lgl_ocp::report::{alpha_demo, alpha_table, run_sweep, ConvergenceReport, SweepOptions};
use lgl_ocp::transcribe::CostMode;

const EXIT_OK: u8 = 0;
const EXIT_UNSOLVED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RATE: u8 = 3;

/// Legendre pseudospectral optimal control solver.
#[derive(Debug, Parser)]
#[command(name = "lgl-ocp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a built-in problem at one node count.
    Solve(CommonArgs),
    /// Solve across node counts and fit convergence rates.
    Sweep(SweepArgs),
    /// List built-in problems.
    ListProblems,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Built-in problem name.
    problem: String,

    /// Node count N: an integer, a comma list, or a range `a..b[:step]`.
    #[arg(long, value_parser = parse_nodes)]
    nodes: NodeList,

    /// Regularization order m1.
    #[arg(long)]
    m1: Option<usize>,

    /// Exponent beta of the relaxed collocation tolerance.
    #[arg(long)]
    beta: Option<f64>,

    #[arg(long, value_enum, default_value_t = CostArg::Quadrature)]
    cost_mode: CostArg,

    /// Start from the endpoint interpolant instead of the sampled reference.
    #[arg(long)]
    cold_start: bool,

    /// Write CSV output here (the nodal trajectory for `solve`, the report for `sweep`).
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Also evaluate the unregularized counterexample family at these alphas.
    #[arg(long, value_delimiter = ',')]
    demo_alpha: Vec<f64>,

    /// Start each node count from the previous solution.
    #[arg(long)]
    warm_chain: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CostArg {
    Quadrature,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct NodeList(Vec<usize>);

fn parse_nodes(s: &str) -> std::result::Result<NodeList, String> {
    let int = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad node count '{v}': {e}"));
    let mut out = Vec::new();
    for part in s.split(',') {
        if let Some((lo, rest)) = part.split_once("..") {
            let (hi, step) = match rest.split_once(':') {
                Some((hi, step)) => (int(hi)?, int(step)?),
                None => (int(rest)?, 1),
            };
            let lo = int(lo)?;
            if step == 0 || hi < lo {
                return Err(format!("empty range '{part}'"));
            }
            out.extend((lo..=hi).step_by(step));
        } else {
            out.push(int(part)?);
        }
    }
    if out.is_empty() {
        return Err("no node counts given".into());
    }
    Ok(NodeList(out))
}

impl CommonArgs {
    fn sweep_options(&self) -> SweepOptions {
        let mut opts = SweepOptions::new(self.nodes.0.clone());
        opts.m1 = self.m1;
        opts.beta = self.beta;
        opts.cost_mode = match self.cost_mode {
            CostArg::Quadrature => CostMode::Quadrature,
            CostArg::Exact => CostMode::Exact,
        };
        opts.cold_start = self.cold_start;
        opts
    }

    /// The problem and options, or a usage message.
    fn resolve(&self) -> std::result::Result<(OcpDefinition, SweepOptions), String> {
        let def = builtin(&self.problem).map_err(|e| format!("{e}; try `list-problems`"))?;
        let opts = self.sweep_options();
        for &n in &opts.nodes {
            opts.transcription(&def, n).validate(&def).map_err(|e| e.to_string())?;
        }
        Ok((def, opts))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Solve(args) => run_solve(&args),
        Command::Sweep(args) => run_sweep_command(&args),
        Command::ListProblems => {
            print!("{}", list_problems());
            Ok(EXIT_OK)
        }
    };
    match code {
        Ok(c) => ExitCode::from(c),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_UNSOLVED)
        }
    }
}

fn list_problems() -> String {
    let mut out = String::new();
    for name in BUILTIN_NAMES {
        let _ = writeln!(out, "{name:<16} {}", builtin_summary(name).unwrap_or(""));
    }
    out
}

fn run_solve(args: &CommonArgs) -> Result<u8> {
    let (def, opts) = match args.resolve() {
        Ok(v) => v,
        Err(msg) => return usage(&msg),
    };
    let [n] = opts.nodes[..] else {
        return usage("solve takes a single node count");
    };
    let transcription = opts.transcription(&def, n);
    let config = SolverConfig {
        initial_guess: default_guess(&def, opts.cold_start),
        ..SolverConfig::default()
    };
    let outcome = match solve_problem(&def, &transcription, &config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("solve failed: {e}");
            return Ok(EXIT_UNSOLVED);
        }
    };
    match args.format {
        Format::Text => print!("{}", solve_summary(&outcome)),
        Format::Csv => {
            let entry = lgl_ocp::report::SweepEntry {
                nodes: n,
                wall_ms: outcome.wall_time().as_secs_f64() * 1e3,
                outcome: Ok(outcome.clone()),
            };
            print!("{}", ConvergenceReport::from_sweep(&def.name, &[entry]).to_csv());
        }
    }
    if let Some(path) = &args.out {
        fs::write(path, trajectory_csv(&outcome)).with_context(|| format!("writing {}", path.display()))?;
    }
    if outcome.status() != SolveStatus::Optimal {
        eprintln!(
            "solver did not converge: status {}, violation {:.3e}, optimality {:.3e} after {} outer iterations",
            outcome.status().as_str(),
            outcome.result.constraint_violation,
            outcome.result.optimality,
            outcome.result.outer_iterations,
        );
        return Ok(EXIT_UNSOLVED);
    }
    Ok(EXIT_OK)
}

fn solve_summary(o: &SolveOutcome) -> String {
    let r = &o.result;
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(out, "{k:<24} {v}");
    };
    line("problem", o.problem.definition().name.clone());
    line("N", o.nodes().to_string());
    line("status", r.status.as_str().into());
    line("objective", format!("{:.12e}", r.objective));
    line("discrete cost", format!("{:.12e}", o.solution.discrete_cost));
    line("integrated cost", format!("{:.12e}", o.solution.integrated_cost));
    line("constraint violation", format!("{:.3e}", r.constraint_violation));
    line("optimality", format!("{:.3e}", r.optimality));
    line("dynamics defect", format!("{:.3e}", o.solution.dynamics_defect));
    if let Some(re) = o.reintegration {
        line("reintegration error", format!("{:.3e}", re.max_state_error));
    }
    if let Some(e) = o.errors {
        line("cost error", format!("{:.3e}", e.discrete_cost_error));
        line("integrated cost error", format!("{:.3e}", e.integrated_cost_error));
        line("control error", format!("{:.3e}", e.control_error));
        line("state error", format!("{:.3e}", e.state_error));
    }
    line("iterations", format!("{} outer, {} inner", r.outer_iterations, r.inner_iterations));
    line("wall time", format!("{:.1} ms", o.wall_time().as_secs_f64() * 1e3));
    out
}

fn trajectory_csv(o: &SolveOutcome) -> String {
    let r = o.problem.definition().order_r;
    let mut out = String::from("t");
    for i in 1..=r {
        let _ = write!(out, ",x{i}");
    }
    out.push_str(",u\n");
    for row in o.solution.nodal_trajectory() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn run_sweep_command(args: &SweepArgs) -> Result<u8> {
    let (def, mut opts) = match args.common.resolve() {
        Ok(v) => v,
        Err(msg) => return usage(&msg),
    };
    opts.chain = args.warm_chain;
    if args.demo_alpha.iter().any(|a| !(*a > 0.0)) {
        return usage("--demo-alpha values must be positive");
    }
    if !args.demo_alpha.is_empty() {
        for &n in &opts.nodes {
            let values = alpha_demo(&def, n, &args.demo_alpha)?;
            println!("unregularized family at N = {n}");
            print!("{}", alpha_table(&values));
        }
    }
    let entries = run_sweep(&def, &opts);
    for e in &entries {
        if let Err(err) = &e.outcome {
            eprintln!("N = {}: {err}", e.nodes);
        }
    }
    let report = ConvergenceReport::from_sweep(&def.name, &entries);
    match args.common.format {
        Format::Text => print!("{}", report.to_text()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    if let Some(path) = &args.common.out {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    if !report.all_solved() {
        return Ok(EXIT_UNSOLVED);
    }
    if !report.rate_accepted() {
        return Ok(EXIT_RATE);
    }
    Ok(EXIT_OK)
}

fn usage(msg: &str) -> Result<u8> {
    eprintln!("error: {msg}");
    Ok(EXIT_USAGE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_lists() {
        assert_eq!(parse_nodes("16").unwrap().0, vec![16]);
        assert_eq!(parse_nodes("4,6,8").unwrap().0, vec![4, 6, 8]);
        assert_eq!(parse_nodes("8..12").unwrap().0, vec![8, 9, 10, 11, 12]);
        assert_eq!(parse_nodes("8..18:2").unwrap().0, vec![8, 10, 12, 14, 16, 18]);
        assert_eq!(parse_nodes("4,10..12").unwrap().0, vec![4, 10, 11, 12]);
        assert!(parse_nodes("").is_err());
        assert!(parse_nodes("9..3").is_err());
        assert!(parse_nodes("4..8:0").is_err());
        assert!(parse_nodes("x").is_err());
    }

    #[test]
    fn listing_names_every_problem() {
        let text = list_problems();
        for name in BUILTIN_NAMES {
            assert!(text.contains(name));
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
