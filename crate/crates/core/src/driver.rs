//! End-to-end solves: transcribe, solve, reconstruct and verify.

use std::sync::Arc;
use std::time::Duration;

use crate::error::Result;
use crate::nlp::{self, InitialGuess, Nlp, SolveResult, SolveStatus, SolverConfig};
use crate::problem::{to_canonical, OcpDefinition};
use crate::quadrature::{lgl_grid, QuadratureGrid};
use crate::transcribe::{assemble, NlpProblem, TranscriptionOptions};
use crate::verify::{benchmark_errors, reconstruct, reintegrate, BenchmarkErrors, ContinuousSolution, ReintegrationErrors};

/// Everything produced by one solve.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub problem: NlpProblem,
    pub result: SolveResult,
    pub solution: ContinuousSolution,
    pub errors: Option<BenchmarkErrors>,
    pub reintegration: Option<ReintegrationErrors>,
}

impl SolveOutcome {
    pub fn nodes(&self) -> usize {
        self.problem.grid().order()
    }

    pub fn status(&self) -> SolveStatus {
        self.result.status
    }

    /// `|J_bar^N - J*|`, or NaN without a reference.
    pub fn cost_error(&self) -> f64 {
        self.errors.map_or(f64::NAN, |e| e.discrete_cost_error)
    }

    pub fn control_error(&self) -> f64 {
        self.errors.map_or(f64::NAN, |e| e.control_error)
    }

    pub fn wall_time(&self) -> Duration {
        self.result.wall_time
    }
}

/// Solves `def` on the LGL grid of order `opts.nodes`.
pub fn solve_problem(def: &OcpDefinition, opts: &TranscriptionOptions, config: &SolverConfig) -> Result<SolveOutcome> {
    let grid = Arc::new(lgl_grid(opts.nodes)?);
    solve_on_grid(def, opts, config, grid)
}

pub fn solve_on_grid(
    def: &OcpDefinition,
    opts: &TranscriptionOptions,
    config: &SolverConfig,
    grid: Arc<QuadratureGrid>,
) -> Result<SolveOutcome> {
    let canonical = to_canonical(def)?;
    let problem = assemble(&canonical, opts, grid.clone())?;
    let mut result = nlp::solve(&problem, config)?;
    result.decision = problem.canonicalize_split(&result.decision);
    let solution = reconstruct(&result.decision, &canonical, &grid)?;
    let errors = match canonical.analytic_reference {
        Some(_) => Some(benchmark_errors(&solution)?),
        None => None,
    };
    let reintegration = reintegrate(&solution).ok();
    Ok(SolveOutcome {
        problem,
        result,
        solution,
        errors,
        reintegration,
    })
}

/// Initial guess for a benchmark solve: the sampled reference, or the
/// endpoint interpolant for a cold start.
pub fn default_guess(def: &OcpDefinition, cold_start: bool) -> InitialGuess {
    if cold_start || def.analytic_reference.is_none() {
        InitialGuess::LinearInterpolantOfEndpoints
    } else {
        InitialGuess::ReferenceSample
    }
}

/// Lifts a previous solution to a new grid as a warm-start guess.
pub fn lift(previous: &SolveOutcome, to_grid: &Arc<QuadratureGrid>) -> Result<InitialGuess> {
    let def = previous.problem.definition();
    let z = nlp::warm_start(&previous.result.decision, previous.problem.grid(), to_grid, def)?;
    Ok(InitialGuess::WarmStart(z))
}

/// Evaluates the NLP objective, or NaN when it cannot be evaluated.
pub fn objective_or_nan(problem: &NlpProblem, z: &[f64]) -> f64 {
    problem.objective(z).unwrap_or(f64::NAN)
}
