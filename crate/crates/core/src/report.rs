//! Node sweeps, convergence-rate fits and CSV/text reports.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use crate::driver::{default_guess, lift, solve_on_grid, SolveOutcome};
use crate::error::{OcpError, Result};
use crate::nlp::{Nlp, SolveStatus, SolverConfig};
use crate::problem::OcpDefinition;
use crate::quadrature::lgl_grid;
use crate::transcribe::{alpha_family_point, assemble, default_beta, CostMode, TranscriptionOptions};

/// Errors at or below this level sit on the rounding floor and are not fitted.
pub const FIT_FLOOR: f64 = 1e-12;

/// Fewest points that give a rate fit.
pub const MIN_FIT_POINTS: usize = 3;

/// A tabled error passes when the observed error is at most this multiple of it.
pub const REFERENCE_FACTOR: f64 = 10.0;

/// Published cost errors for `sine_tracking`.
pub const SINE_TRACKING_TABLE: [(usize, f64); 7] = [
    (4, 7.5e-2),
    (6, 1.1e-3),
    (8, 2.1e-4),
    (10, 7.1e-5),
    (12, 6.7e-6),
    (14, 1.0e-6),
    (16, 5.8e-7),
];

pub const CSV_HEADER: [&str; 7] = ["problem", "N", "cost_error", "control_error", "defect", "status", "wall_ms"];

/// Built-in expected errors for a problem, if any.
pub fn reference_table(problem: &str) -> Option<&'static [(usize, f64)]> {
    match problem {
        "sine_tracking" => Some(&SINE_TRACKING_TABLE),
        _ => None,
    }
}

/// Outcome of one sweep entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryStatus {
    Solved(SolveStatus),
    /// The solve raised an error before producing a decision.
    Failed,
}

impl EntryStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntryStatus::Solved(s) => s.as_str(),
            EntryStatus::Failed => "failed",
        }
    }

    pub fn is_optimal(&self) -> bool {
        matches!(self, EntryStatus::Solved(SolveStatus::Optimal))
    }
}

impl FromStr for EntryStatus {
    type Err = OcpError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "optimal" => EntryStatus::Solved(SolveStatus::Optimal),
            "max_iterations" => EntryStatus::Solved(SolveStatus::MaxIterations),
            "infeasible_stall" => EntryStatus::Solved(SolveStatus::InfeasibleStall),
            "failed" => EntryStatus::Failed,
            other => return Err(OcpError::InvalidOptions(format!("unknown status '{other}'"))),
        })
    }
}

/// Least-squares line `y = intercept + slope x` and its residual sum of squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub residual: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Some(LineFit {
        intercept,
        slope,
        residual,
    })
}

/// Algebraic (`log e` vs `log N`) and exponential (`log e` vs `N`) fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub algebraic: LineFit,
    pub exponential: LineFit,
    pub points: usize,
}

impl RateFit {
    /// `p` in `e ~ N^-p`.
    pub fn exponent(&self) -> f64 {
        -self.algebraic.slope
    }

    pub fn is_exponential(&self) -> bool {
        self.exponential.residual < self.algebraic.residual
    }
}

/// Points used for fitting: finite errors above [`FIT_FLOOR`], truncated
/// after the smallest one since later entries have saturated.
pub fn fit_points(nodes: &[usize], errors: &[f64]) -> Vec<(usize, f64)> {
    let pts: Vec<(usize, f64)> = nodes
        .iter()
        .zip(errors)
        .filter(|(_, e)| e.is_finite() && **e > FIT_FLOOR)
        .map(|(n, e)| (*n, *e))
        .collect();
    let best = pts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i);
    match best {
        Some(i) => pts[..=i].to_vec(),
        None => pts,
    }
}

pub fn fit_rates(nodes: &[usize], errors: &[f64]) -> Option<RateFit> {
    let pts = fit_points(nodes, errors);
    if pts.len() < MIN_FIT_POINTS {
        return None;
    }
    let n: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
    let logn: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let loge: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    Some(RateFit {
        algebraic: fit_line(&logn, &loge)?,
        exponential: fit_line(&n, &loge)?,
        points: pts.len(),
    })
}

/// Observed error against a tabled value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceCheck {
    pub nodes: usize,
    pub expected: f64,
    pub observed: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub problem_name: String,
    pub node_list: Vec<usize>,
    pub cost_errors: Vec<f64>,
    pub control_errors: Vec<f64>,
    pub defects: Vec<f64>,
    pub statuses: Vec<EntryStatus>,
    pub wall_ms: Vec<f64>,
    /// Log-log slope, negated; `None` with fewer than three usable points.
    pub fitted_exponent: Option<f64>,
    pub exponential_flag: bool,
    pub reference_table: Option<Vec<ReferenceCheck>>,
}

/// One row of a report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub nodes: usize,
    pub cost_error: f64,
    pub control_error: f64,
    pub defect: f64,
    pub status: EntryStatus,
    pub wall_ms: f64,
}

impl ConvergenceReport {
    /// Builds a report and derives the fit and reference checks from the rows.
    pub fn new(problem_name: &str, rows: &[ReportRow]) -> Self {
        let mut report = ConvergenceReport {
            problem_name: problem_name.to_string(),
            node_list: rows.iter().map(|r| r.nodes).collect(),
            cost_errors: rows.iter().map(|r| r.cost_error).collect(),
            control_errors: rows.iter().map(|r| r.control_error).collect(),
            defects: rows.iter().map(|r| r.defect).collect(),
            statuses: rows.iter().map(|r| r.status).collect(),
            wall_ms: rows.iter().map(|r| r.wall_ms).collect(),
            fitted_exponent: None,
            exponential_flag: false,
            reference_table: None,
        };
        report.refit();
        report
    }

    pub fn from_sweep(problem_name: &str, entries: &[SweepEntry]) -> Self {
        let rows: Vec<ReportRow> = entries.iter().map(SweepEntry::row).collect();
        ConvergenceReport::new(problem_name, &rows)
    }

    fn refit(&mut self) {
        let fit = self.rate_fit();
        self.fitted_exponent = fit.map(|f| f.exponent());
        self.exponential_flag = fit.is_some_and(|f| f.is_exponential());
        self.reference_table = reference_table(&self.problem_name).map(|table| {
            self.node_list
                .iter()
                .zip(&self.cost_errors)
                .filter_map(|(n, e)| {
                    table.iter().find(|(m, _)| m == n).map(|&(_, expected)| ReferenceCheck {
                        nodes: *n,
                        expected,
                        observed: *e,
                        passed: *e <= REFERENCE_FACTOR * expected,
                    })
                })
                .collect()
        });
    }

    pub fn rate_fit(&self) -> Option<RateFit> {
        fit_rates(&self.node_list, &self.cost_errors)
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        (0..self.len())
            .map(|i| ReportRow {
                nodes: self.node_list[i],
                cost_error: self.cost_errors[i],
                control_error: self.control_errors[i],
                defect: self.defects[i],
                status: self.statuses[i],
                wall_ms: self.wall_ms[i],
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.node_list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_list.is_empty()
    }

    /// Equal-length columns and nonnegative (or NaN) errors.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.cost_errors.len(),
            self.control_errors.len(),
            self.defects.len(),
            self.statuses.len(),
            self.wall_ms.len(),
        ];
        if let Some(&bad) = lens.iter().find(|&&l| l != n) {
            return Err(OcpError::LengthMismatch { expected: n, found: bad });
        }
        let negative = self
            .cost_errors
            .iter()
            .chain(&self.control_errors)
            .chain(&self.defects)
            .any(|e| *e < 0.0);
        if negative {
            return Err(OcpError::InvalidOptions("report errors must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn all_solved(&self) -> bool {
        self.statuses.iter().all(EntryStatus::is_optimal)
    }

    pub fn reference_passed(&self) -> bool {
        self.reference_table
            .as_ref()
            .is_none_or(|t| t.iter().all(|c| c.passed))
    }

    /// Rate acceptance: every tabled entry passes, and sweeps long enough to
    /// fit show exponential decay.
    pub fn rate_accepted(&self) -> bool {
        let fitted = self.rate_fit().is_none() || self.exponential_flag;
        self.reference_passed() && fitted
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for row in self.rows() {
            w.write_record([
                self.problem_name.clone(),
                row.nodes.to_string(),
                float(row.cost_error),
                float(row.control_error),
                float(row.defect),
                row.status.as_str().to_string(),
                float(row.wall_ms),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }

    /// Parses CSV written by [`ConvergenceReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| OcpError::InvalidOptions(format!("report CSV: {msg}"));
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut name = None;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| rec.get(i).ok_or_else(|| bad(format!("missing column {}", CSV_HEADER[i])));
            let num = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|e| bad(format!("{e}"))) };
            let problem = field(0)?;
            match &name {
                None => name = Some(problem.to_string()),
                Some(n) if n != problem => return Err(bad("mixed problem names".into())),
                _ => {}
            }
            rows.push(ReportRow {
                nodes: field(1)?.parse().map_err(|e| bad(format!("{e}")))?,
                cost_error: num(2)?,
                control_error: num(3)?,
                defect: num(4)?,
                status: field(5)?.parse()?,
                wall_ms: num(6)?,
            });
        }
        Ok(ConvergenceReport::new(name.as_deref().unwrap_or(""), &rows))
    }

    /// Table laid out with one column per node count.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<(String, Vec<String>)> = vec![
            ("N".into(), self.node_list.iter().map(|n| n.to_string()).collect()),
            ("cost error".into(), self.cost_errors.iter().map(|e| sci(*e)).collect()),
            ("control error".into(), self.control_errors.iter().map(|e| sci(*e)).collect()),
            ("defect".into(), self.defects.iter().map(|e| sci(*e)).collect()),
            ("status".into(), self.statuses.iter().map(|s| s.as_str().to_string()).collect()),
            ("wall ms".into(), self.wall_ms.iter().map(|w| format!("{w:.1}")).collect()),
        ];
        if let Some(table) = &self.reference_table {
            let expected = self
                .node_list
                .iter()
                .map(|n| match table.iter().find(|c| c.nodes == *n) {
                    Some(c) => format!("{}{}", sci(c.expected), if c.passed { "" } else { "!" }),
                    None => "-".into(),
                })
                .collect();
            lines.push(("tabled".into(), expected));
        }
        let label = lines.iter().map(|l| l.0.len()).max().unwrap_or(0);
        let width = lines
            .iter()
            .flat_map(|l| l.1.iter().map(String::len))
            .max()
            .unwrap_or(0);
        let mut out = format!("{}\n", self.problem_name);
        for (name, cells) in &lines {
            let _ = write!(out, "{name:<label$}");
            for c in cells {
                let _ = write!(out, "  {c:>width$}");
            }
            out.push('\n');
        }
        match self.rate_fit() {
            Some(f) => {
                let _ = writeln!(
                    out,
                    "fit over {} points: N^-{:.2} (rss {:.3e}), exp(-{:.3} N) (rss {:.3e}); {}",
                    f.points,
                    f.exponent(),
                    f.algebraic.residual,
                    -f.exponential.slope,
                    f.exponential.residual,
                    if self.exponential_flag { "exponential" } else { "algebraic" },
                );
            }
            None => out.push_str("fit: fewer than 3 usable points\n"),
        }
        if self.reference_table.is_some() {
            let _ = writeln!(
                out,
                "tabled values within {}x: {}",
                REFERENCE_FACTOR,
                if self.reference_passed() { "yes" } else { "no" }
            );
        }
        out
    }
}

/// Shortest representation that parses back to the same double.
fn float(v: f64) -> String {
    format!("{v:?}")
}

fn sci(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2e}")
    } else {
        "-".into()
    }
}

/// Settings shared by every entry of a sweep.
#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub nodes: Vec<usize>,
    pub m1: Option<usize>,
    pub beta: Option<f64>,
    pub cost_mode: CostMode,
    /// Start from the endpoint interpolant rather than the sampled reference.
    pub cold_start: bool,
    /// Start each entry from the previous entry's solution.
    pub chain: bool,
    pub solver: SolverConfig,
}

impl SweepOptions {
    pub fn new(nodes: Vec<usize>) -> Self {
        SweepOptions {
            nodes,
            m1: None,
            beta: None,
            cost_mode: CostMode::Quadrature,
            cold_start: false,
            chain: false,
            solver: SolverConfig::default(),
        }
    }

    /// Transcription options for one entry.
    pub fn transcription(&self, def: &OcpDefinition, nodes: usize) -> TranscriptionOptions {
        let mut opts = TranscriptionOptions::for_problem(def, nodes);
        if let Some(m1) = self.m1 {
            opts.m1 = m1;
            opts.beta = default_beta(def.smoothness, m1);
        }
        if let Some(beta) = self.beta {
            opts.beta = beta;
        }
        opts.cost_mode = self.cost_mode;
        opts
    }
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub nodes: usize,
    pub outcome: Result<SolveOutcome>,
    pub wall_ms: f64,
}

impl SweepEntry {
    pub fn row(&self) -> ReportRow {
        match &self.outcome {
            Ok(o) => ReportRow {
                nodes: self.nodes,
                cost_error: o.cost_error(),
                control_error: o.control_error(),
                defect: o.solution.dynamics_defect,
                status: EntryStatus::Solved(o.status()),
                wall_ms: self.wall_ms,
            },
            Err(_) => ReportRow {
                nodes: self.nodes,
                cost_error: f64::NAN,
                control_error: f64::NAN,
                defect: f64::NAN,
                status: EntryStatus::Failed,
                wall_ms: self.wall_ms,
            },
        }
    }
}

/// Solves `def` at every node count in order. Failures are recorded per entry.
pub fn run_sweep(def: &OcpDefinition, opts: &SweepOptions) -> Vec<SweepEntry> {
    let mut entries: Vec<SweepEntry> = Vec::with_capacity(opts.nodes.len());
    for &n in &opts.nodes {
        let start = Instant::now();
        let outcome = solve_entry(def, opts, n, entries.last());
        entries.push(SweepEntry {
            nodes: n,
            outcome,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    entries
}

fn solve_entry(def: &OcpDefinition, opts: &SweepOptions, n: usize, previous: Option<&SweepEntry>) -> Result<SolveOutcome> {
    let transcription = opts.transcription(def, n);
    transcription.validate(def)?;
    let grid = Arc::new(lgl_grid(n)?);
    let mut config = opts.solver.clone();
    config.initial_guess = match previous.and_then(|p| p.outcome.as_ref().ok()) {
        Some(prev) if opts.chain => lift(prev, &grid)?,
        _ => default_guess(def, opts.cold_start),
    };
    solve_on_grid(def, &transcription, &config, grid)
}

/// Objective of the unregularized transcription along the feasible family
/// returned by [`alpha_family_point`].
pub fn alpha_demo(def: &OcpDefinition, nodes: usize, alphas: &[f64]) -> Result<Vec<(f64, f64)>> {
    let canonical = crate::problem::to_canonical(def)?;
    let grid = Arc::new(lgl_grid(nodes)?);
    let problem = assemble(&canonical, &TranscriptionOptions::unregularized(nodes, 1), grid.clone())?;
    alphas
        .iter()
        .map(|&a| {
            let z = alpha_family_point(a, &grid)?;
            Ok((a, problem.objective(&z)?))
        })
        .collect()
}

pub fn alpha_table(values: &[(f64, f64)]) -> String {
    let mut out = String::from("alpha          objective\n");
    for (a, j) in values {
        let _ = writeln!(out, "{a:<14} {j:.6e}");
    }
    out
}
