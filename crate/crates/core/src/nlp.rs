//! Augmented-Lagrangian solver for small dense NLPs with box bounds.
//!
//! Problems have the form
//!
//! ```text
//! min f(z)  s.t.  c(z) = 0,  g(z) <= 0,  lower <= z <= upper
//! ```
//!
//! The outer loop updates first-order multiplier estimates and the penalty;
//! each subproblem is minimized by a projected quasi-Newton method whose model
//! is a damped BFGS matrix plus the Gauss-Newton penalty term (or, optionally,
//! projected L-BFGS). Near a solution an active-set Newton step on the KKT
//! system cleans up what the penalty method leaves at rounding level.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;

use crate::error::{OcpError, Result};
use crate::interpolant::{control_from_state, PolyInterpolant};
use crate::problem::OcpDefinition;
use crate::quadrature::QuadratureGrid;

/// Starting point selection.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialGuess {
    ReferenceSample,
    LinearInterpolantOfEndpoints,
    Zeros,
    /// Explicit decision vector, e.g. lifted from a coarser grid.
    WarmStart(Vec<f64>),
}

/// Subproblem minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerMethod {
    /// Projected Newton on `B + rho J^T J`, with `B` a damped BFGS estimate of
    /// the Lagrangian curvature and the penalty term formed exactly.
    StructuredQuasiNewton,
    /// Projected limited-memory BFGS on the whole augmented Lagrangian.
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    AnalyticIfAvailable,
    CentralDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_outer: usize,
    pub max_inner: usize,
    pub constraint_tolerance: f64,
    pub optimality_tolerance: f64,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub gradient_mode: GradientMode,
    /// Relative central-difference step, `h = fd_step * (1 + |z_i|)`.
    pub fd_step: f64,
    pub initial_guess: InitialGuess,
    pub lbfgs_memory: usize,
    pub inner_method: InnerMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_outer: 50,
            max_inner: 500,
            constraint_tolerance: 1e-9,
            optimality_tolerance: 1e-9,
            penalty_initial: 10.0,
            penalty_growth: 10.0,
            gradient_mode: GradientMode::AnalyticIfAvailable,
            fd_step: 1e-6,
            initial_guess: InitialGuess::ReferenceSample,
            lbfgs_memory: 12,
            inner_method: InnerMethod::StructuredQuasiNewton,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.constraint_tolerance,
            self.optimality_tolerance,
            self.penalty_initial,
            self.fd_step,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(OcpError::InvalidOptions("solver tolerances and steps must be positive".into()));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(OcpError::InvalidOptions("penalty growth must exceed 1".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.lbfgs_memory == 0 {
            return Err(OcpError::InvalidOptions("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// A dense NLP. Inequalities use the convention `g(z) <= 0`.
///
/// Derivative hooks return `None` when not provided; the solver then falls
/// back to central differences.
pub trait Nlp {
    fn num_variables(&self) -> usize;
    fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn objective(&self, z: &[f64]) -> Result<f64>;
    fn equalities(&self, z: &[f64]) -> Result<Vec<f64>>;
    fn inequalities(&self, z: &[f64]) -> Result<Vec<f64>>;

    fn objective_gradient(&self, _z: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }
    fn equality_jacobian(&self, _z: &[f64]) -> Option<Result<DMatrix<f64>>> {
        None
    }
    fn inequality_jacobian(&self, _z: &[f64]) -> Option<Result<DMatrix<f64>>> {
        None
    }

    fn initial_point(&self, guess: &InitialGuess) -> Result<Vec<f64>> {
        match guess {
            InitialGuess::WarmStart(z) => {
                if z.len() != self.num_variables() {
                    return Err(OcpError::LengthMismatch {
                        expected: self.num_variables(),
                        found: z.len(),
                    });
                }
                Ok(z.clone())
            }
            _ => Ok(vec![0.0; self.num_variables()]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    InfeasibleStall,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::InfeasibleStall => "infeasible_stall",
        }
    }
}

/// Diagnostics for one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterRecord {
    pub penalty: f64,
    /// Augmented Lagrangian at fixed multipliers before and after the inner solve.
    pub merit_start: f64,
    pub merit_end: f64,
    pub violation: f64,
    pub optimality: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub decision: Vec<f64>,
    pub objective: f64,
    pub constraint_violation: f64,
    /// Infinity norm of the projected Lagrangian gradient (scaled problem).
    pub optimality: f64,
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub wall_time: Duration,
    pub equality_multipliers: Vec<f64>,
    pub inequality_multipliers: Vec<f64>,
    pub history: Vec<OuterRecord>,
}

impl SolveResult {
    pub fn merit_is_monotone(&self) -> bool {
        self.history.iter().all(|h| h.merit_end <= h.merit_start)
    }
}

/// Wraps an NLP with scaling and derivative fallbacks.
struct Evaluator<'a, P: Nlp + ?Sized> {
    nlp: &'a P,
    mode: GradientMode,
    fd_step: f64,
    obj_scale: f64,
    eq_scale: Vec<f64>,
    in_scale: Vec<f64>,
}

struct Point {
    f: f64,
    c: Vec<f64>,
    g: Vec<f64>,
}

struct Derivatives {
    grad: Vec<f64>,
    jc: DMatrix<f64>,
    jg: DMatrix<f64>,
}

fn finite_all(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl<'a, P: Nlp + ?Sized> Evaluator<'a, P> {
    fn raw(&self, z: &[f64]) -> Result<Point> {
        let f = self.nlp.objective(z)?;
        let c = self.nlp.equalities(z)?;
        let g = self.nlp.inequalities(z)?;
        if !f.is_finite() || !finite_all(&c) || !finite_all(&g) {
            return Err(OcpError::NonFinite {
                what: "objective or constraints",
                node: None,
            });
        }
        Ok(Point { f, c, g })
    }

    fn scaled(&self, z: &[f64]) -> Result<Point> {
        let mut p = self.raw(z)?;
        p.f *= self.obj_scale;
        for (c, s) in p.c.iter_mut().zip(&self.eq_scale) {
            *c *= s;
        }
        for (g, s) in p.g.iter_mut().zip(&self.in_scale) {
            *g *= s;
        }
        Ok(p)
    }

    fn fd_vector(&self, z: &[f64], eval: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<DMatrix<f64>> {
        let n = z.len();
        let mut work = z.to_vec();
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let h = self.fd_step * (1.0 + z[i].abs());
            work[i] = z[i] + h;
            let fp = eval(&work)?;
            work[i] = z[i] - h;
            let fm = eval(&work)?;
            work[i] = z[i];
            cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
        }
        let rows = cols.first().map_or(0, |c| c.len());
        Ok(DMatrix::from_fn(rows, n, |r, c| cols[c][r]))
    }

    fn raw_derivatives(&self, z: &[f64]) -> Result<Derivatives> {
        let analytic = self.mode == GradientMode::AnalyticIfAvailable;
        let grad = match analytic.then(|| self.nlp.objective_gradient(z)).flatten() {
            Some(g) => g?,
            None => {
                let j = self.fd_vector(z, |w| Ok(vec![self.nlp.objective(w)?]))?;
                j.row(0).iter().copied().collect()
            }
        };
        let jc = match analytic.then(|| self.nlp.equality_jacobian(z)).flatten() {
            Some(j) => j?,
            None => self.fd_vector(z, |w| self.nlp.equalities(w))?,
        };
        let jg = match analytic.then(|| self.nlp.inequality_jacobian(z)).flatten() {
            Some(j) => j?,
            None => self.fd_vector(z, |w| self.nlp.inequalities(w))?,
        };
        let n = z.len();
        let jc = if jc.ncols() == n { jc } else { DMatrix::zeros(0, n) };
        let jg = if jg.ncols() == n { jg } else { DMatrix::zeros(0, n) };
        if !finite_all(&grad) || !finite_all(jc.as_slice()) || !finite_all(jg.as_slice()) {
            return Err(OcpError::NonFinite {
                what: "derivatives",
                node: None,
            });
        }
        Ok(Derivatives { grad, jc, jg })
    }

    fn derivatives(&self, z: &[f64]) -> Result<Derivatives> {
        let mut d = self.raw_derivatives(z)?;
        for g in &mut d.grad {
            *g *= self.obj_scale;
        }
        scale_rows(&mut d.jc, &self.eq_scale);
        scale_rows(&mut d.jg, &self.in_scale);
        Ok(d)
    }
}

fn scale_rows(m: &mut DMatrix<f64>, s: &[f64]) {
    for (i, &si) in s.iter().enumerate() {
        if si != 1.0 {
            for v in m.row_mut(i).iter_mut() {
                *v *= si;
            }
        }
    }
}

/// Constraint rows are brought to unit gradient norm when larger, which keeps
/// `rho J^T c` from amplifying rounding in `c`.
fn row_scale(norm: f64) -> f64 {
    if norm > 1.0 {
        1.0 / norm
    } else {
        1.0
    }
}

fn gradient_scale(norm: f64) -> f64 {
    if norm > 100.0 {
        100.0 / norm
    } else {
        1.0
    }
}

fn row_norms(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .collect()
}

struct Multipliers {
    lambda: Vec<f64>,
    mu: Vec<f64>,
    rho: f64,
}

impl Multipliers {
    fn merit(&self, p: &Point) -> f64 {
        let rho = self.rho;
        let mut v = p.f;
        for (c, l) in p.c.iter().zip(&self.lambda) {
            v += l * c + 0.5 * rho * c * c;
        }
        for (g, m) in p.g.iter().zip(&self.mu) {
            let s = (m + rho * g).max(0.0);
            v += (s * s - m * m) / (2.0 * rho);
        }
        v
    }

    fn merit_gradient(&self, p: &Point, d: &Derivatives) -> Vec<f64> {
        let mut grad = d.grad.clone();
        let wc: Vec<f64> = p.c.iter().zip(&self.lambda).map(|(c, l)| l + self.rho * c).collect();
        let wg: Vec<f64> = p
            .g
            .iter()
            .zip(&self.mu)
            .map(|(g, m)| (m + self.rho * g).max(0.0))
            .collect();
        add_transpose_product(&mut grad, &d.jc, &wc);
        add_transpose_product(&mut grad, &d.jg, &wg);
        grad
    }
}

fn add_transpose_product(out: &mut [f64], m: &DMatrix<f64>, w: &[f64]) {
    for (i, &wi) in w.iter().enumerate() {
        if wi != 0.0 {
            for (o, v) in out.iter_mut().zip(m.row(i).iter()) {
                *o += wi * v;
            }
        }
    }
}

fn project(z: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &l), &u) in z.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(l, u);
    }
}

fn projected_gradient_norm(z: &[f64], grad: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    z.iter()
        .zip(grad)
        .zip(lower.iter().zip(upper))
        .map(|((&x, &g), (&l, &u))| ((x - g).clamp(l, u) - x).abs())
        .fold(0.0, f64::max)
}

fn violation(p: &Point) -> f64 {
    let ce = p.c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    p.g.iter().fold(ce, |a, v| a.max(v.max(0.0)))
}

struct InnerOutcome {
    z: Vec<f64>,
    point: Point,
    derivs: Derivatives,
    merit: f64,
    pg_norm: f64,
    iterations: usize,
}

/// Projected L-BFGS on the augmented Lagrangian at fixed multipliers.
#[allow(clippy::too_many_arguments)]
fn inner_solve<P: Nlp + ?Sized>(
    ev: &Evaluator<'_, P>,
    mult: &Multipliers,
    z0: Vec<f64>,
    p0: Point,
    d0: Derivatives,
    lower: &[f64],
    upper: &[f64],
    tol: f64,
    max_iter: usize,
    memory: usize,
) -> InnerOutcome {
    let n = z0.len();
    let mut z = z0;
    let mut point = p0;
    let mut derivs = d0;
    let mut merit = mult.merit(&point);
    let mut grad = mult.merit_gradient(&point, &derivs);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut pg = projected_gradient_norm(&z, &grad, lower, upper);

    while iterations < max_iter && pg > tol {
        iterations += 1;
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lower = z[i] <= lower[i] && grad[i] > 0.0;
                let at_upper = z[i] >= upper[i] && grad[i] < 0.0;
                !(at_lower || at_upper)
            })
            .collect();
        let mut dir = two_loop(&grad, &free, &hist);
        let mut slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            hist.clear();
            dir = (0..n).map(|i| if free[i] { -grad[i] } else { 0.0 }).collect();
            slope = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
            if !(slope < 0.0) {
                break;
            }
        }
        let mut step = if hist.is_empty() {
            let dn = dir.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (1.0 / dn).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = z.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            project(&mut trial, lower, upper);
            let moved: f64 = trial.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
            if moved == 0.0 {
                break;
            }
            let decrease: f64 = trial.iter().zip(&z).zip(&grad).map(|((a, b), g)| g * (a - b)).sum();
            if let Ok(tp) = ev.scaled(&trial) {
                let tm = mult.merit(&tp);
                if tm.is_finite() && tm <= merit + 1e-4 * decrease.min(0.0) && tm <= merit {
                    accepted = Some((trial, tp, tm));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((trial, tp, tm)) = accepted else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            continue;
        };
        let td = match ev.derivatives(&trial) {
            Ok(d) => d,
            Err(_) => {
                // Derivatives failed where values did not; treat as a stall.
                break;
            }
        };
        let tg = mult.merit_gradient(&tp, &td);
        let s: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = tg.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if sy > 1e-16 * yy.sqrt() * s.iter().map(|v| v * v).sum::<f64>().sqrt() && sy > 0.0 {
            if hist.len() == memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let stalled = tm >= merit - 1e-16 * merit.abs().max(1.0) && (merit - tm).abs() == 0.0;
        z = trial;
        point = tp;
        derivs = td;
        merit = tm;
        grad = tg;
        pg = projected_gradient_norm(&z, &grad, lower, upper);
        if stalled && hist.is_empty() {
            break;
        }
    }
    InnerOutcome {
        z,
        point,
        derivs,
        merit,
        pg_norm: pg,
        iterations,
    }
}

/// Gradient of `f + w_c^T c + w_g^T g` for fixed weights.
fn weighted_gradient(d: &Derivatives, wc: &[f64], wg: &[f64]) -> Vec<f64> {
    let mut grad = d.grad.clone();
    add_transpose_product(&mut grad, &d.jc, wc);
    add_transpose_product(&mut grad, &d.jg, wg);
    grad
}

fn penalty_weights(p: &Point, mult: &Multipliers) -> (Vec<f64>, Vec<f64>) {
    let wc = p.c.iter().zip(&mult.lambda).map(|(c, l)| l + mult.rho * c).collect();
    let wg = p
        .g
        .iter()
        .zip(&mult.mu)
        .map(|(g, m)| (m + mult.rho * g).max(0.0))
        .collect();
    (wc, wg)
}

/// `B + rho (J_c^T J_c + J_A^T J_A)` over the active inequalities `A`.
fn model_hessian(b: &DMatrix<f64>, p: &Point, d: &Derivatives, mult: &Multipliers) -> DMatrix<f64> {
    let mut h = b.clone();
    if d.jc.nrows() > 0 {
        h += (d.jc.transpose() * &d.jc) * mult.rho;
    }
    let active: Vec<usize> = (0..p.g.len())
        .filter(|&i| mult.mu[i] + mult.rho * p.g[i] > 0.0)
        .collect();
    if !active.is_empty() {
        let ja = d.jg.select_rows(active.iter());
        h += (ja.transpose() * &ja) * mult.rho;
    }
    h
}

const MAX_INITIAL_MULTIPLIER: f64 = 1e3;

/// The KKT polish is tried once the iterate is this close to a KKT point,
/// and again after each tenfold drop in the residual.
const POLISH_VIOLATION: f64 = 1e-6;
const POLISH_OPTIMALITY: f64 = 1e-4;
const MAX_POLISH_ATTEMPTS: usize = 10;

/// Relative merit change treated as rounding noise by the line search.
const MERIT_NOISE: f64 = 1e-13;

/// Forward-difference Hessian of `f + wc^T c + wg^T g` at fixed weights, symmetrized.
fn fd_lagrangian_hessian<P: Nlp + ?Sized>(
    ev: &Evaluator<'_, P>,
    z: &[f64],
    d: &Derivatives,
    wc: &[f64],
    wg: &[f64],
    upper: &[f64],
) -> Result<DMatrix<f64>> {
    let n = z.len();
    let base = weighted_gradient(d, wc, wg);
    let mut work = z.to_vec();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut step = 1e-7 * (1.0 + z[j].abs());
        if z[j] + step > upper[j] {
            step = -step;
        }
        work[j] = z[j] + step;
        let dj = ev.derivatives(&work)?;
        work[j] = z[j];
        for (i, (a, b)) in weighted_gradient(&dj, wc, wg).iter().zip(&base).enumerate() {
            h[(i, j)] = (a - b) / step;
        }
    }
    let ht = h.transpose();
    Ok((h + ht) * 0.5)
}

/// Damped (Powell) BFGS update keeping `b` positive definite.
fn damped_bfgs(b: &mut DMatrix<f64>, s: &[f64], y: &[f64]) {
    let n = s.len();
    let sv = nalgebra::DVector::from_column_slice(s);
    let yv = nalgebra::DVector::from_column_slice(y);
    let bs = &*b * &sv;
    let sbs = sv.dot(&bs);
    if !(sbs > 0.0) || !sbs.is_finite() {
        return;
    }
    let sy = sv.dot(&yv);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = &yv * theta + &bs * (1.0 - theta);
    let sr = sv.dot(&r);
    if !(sr > 1e-300) {
        return;
    }
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] += r[i] * r[j] / sr - bs[i] * bs[j] / sbs;
        }
    }
}

/// Projected Newton iterations on the augmented Lagrangian at fixed multipliers.
#[allow(clippy::too_many_arguments)]
fn inner_solve_structured<P: Nlp + ?Sized>(
    ev: &Evaluator<'_, P>,
    mult: &Multipliers,
    z0: Vec<f64>,
    p0: Point,
    d0: Derivatives,
    lower: &[f64],
    upper: &[f64],
    tol: f64,
    max_iter: usize,
    curvature: &mut DMatrix<f64>,
) -> InnerOutcome {
    let n = z0.len();
    let mut z = z0;
    let mut point = p0;
    let mut derivs = d0;
    let mut merit = mult.merit(&point);
    let mut grad = mult.merit_gradient(&point, &derivs);
    let mut pg = projected_gradient_norm(&z, &grad, lower, upper);
    let mut iterations = 0;
    let mut failures = 0;

    while iterations < max_iter && pg > tol {
        iterations += 1;
        // Bertsekas' epsilon-active set keeps the projected step a descent direction.
        let eps = pg.min(1e-6);
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let near_lower = z[i] <= lower[i] + eps && grad[i] > 0.0;
                let near_upper = z[i] >= upper[i] - eps && grad[i] < 0.0;
                !(near_lower || near_upper)
            })
            .collect();
        let h = model_hessian(curvature, &point, &derivs, mult);
        let mut dir = vec![0.0; n];
        if !free.is_empty() {
            let hf = h.select_rows(free.iter()).select_columns(free.iter());
            let gf = nalgebra::DVector::from_iterator(free.len(), free.iter().map(|&i| -grad[i]));
            let diag_scale = (0..free.len()).fold(0.0f64, |a, i| a.max(hf[(i, i)].abs())).max(1.0);
            let mut shift = 0.0;
            let step = loop {
                let mut m = hf.clone();
                for i in 0..free.len() {
                    m[(i, i)] += shift;
                }
                if let Some(ch) = m.cholesky() {
                    break Some(ch.solve(&gf));
                }
                shift = if shift == 0.0 { 1e-10 * diag_scale } else { shift * 10.0 };
                if shift > 1e10 * diag_scale {
                    break None;
                }
            };
            match step {
                Some(sf) => {
                    for (j, &i) in free.iter().enumerate() {
                        dir[i] = sf[j];
                    }
                }
                None => {
                    for &i in &free {
                        dir[i] = -grad[i];
                    }
                }
            }
        }
        // Variables held at a bound move along the projected steepest descent.
        for i in 0..n {
            if !free.contains(&i) {
                dir[i] = -grad[i];
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut trial: Vec<f64> = z.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            project(&mut trial, lower, upper);
            if trial == z {
                break;
            }
            let decrease: f64 = trial.iter().zip(&z).zip(&grad).map(|((a, b), g)| g * (a - b)).sum();
            if let Ok(tp) = ev.scaled(&trial) {
                let tm = mult.merit(&tp);
                if tm.is_finite() && tm <= merit + 1e-4 * decrease.min(0.0) && tm <= merit {
                    accepted = Some((trial, tp, tm));
                    break;
                }
                // Near a solution merit differences drown in rounding; accept a
                // non-increasing step that reduces the projected gradient.
                if step == 1.0 && tm.is_finite() && tm <= merit + MERIT_NOISE * merit.abs().max(1.0) {
                    if let Ok(td) = ev.derivatives(&trial) {
                        let tg = mult.merit_gradient(&tp, &td);
                        if projected_gradient_norm(&trial, &tg, lower, upper) < 0.5 * pg {
                            accepted = Some((trial, tp, tm));
                            break;
                        }
                    }
                }
            }
            step *= 0.5;
        }
        let Some((trial, tp, tm)) = accepted else {
            failures += 1;
            if failures > 2 {
                break;
            }
            *curvature = DMatrix::identity(n, n);
            continue;
        };
        let Ok(td) = ev.derivatives(&trial) else {
            break;
        };
        let (wc, wg) = penalty_weights(&tp, mult);
        let y: Vec<f64> = weighted_gradient(&td, &wc, &wg)
            .iter()
            .zip(weighted_gradient(&derivs, &wc, &wg))
            .map(|(a, b)| a - b)
            .collect();
        let s: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
        damped_bfgs(curvature, &s, &y);
        let progress = merit - tm;
        z = trial;
        point = tp;
        derivs = td;
        merit = tm;
        grad = mult.merit_gradient(&point, &derivs);
        pg = projected_gradient_norm(&z, &grad, lower, upper);
        if progress <= 1e-15 * merit.abs().max(1e-300) {
            failures += 1;
            if failures > 5 {
                break;
            }
        }
    }
    InnerOutcome {
        z,
        point,
        derivs,
        merit,
        pg_norm: pg,
        iterations,
    }
}

/// L-BFGS two-loop recursion restricted to free variables.
fn two_loop(grad: &[f64], free: &[bool], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(free).map(|(x, &f)| if f { *x } else { 0.0 }).collect() };
    let dot = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(free).filter(|(_, &f)| f).map(|((x, y), _)| x * y).sum()
    };
    let mut q = mask(grad);
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, _) in hist.iter().rev() {
        let sy = dot(s, y);
        if sy <= 0.0 {
            alphas.push(0.0);
            continue;
        }
        let a = dot(s, &q) / sy;
        for ((qi, yi), &f) in q.iter_mut().zip(y).zip(free) {
            if f {
                *qi -= a * yi;
            }
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let sy = dot(s, y);
        let yy = dot(y, y);
        if sy > 0.0 && yy > 0.0 {
            let gamma = sy / yy;
            for v in &mut q {
                *v *= gamma;
            }
        }
    }
    for ((s, y, _), a) in hist.iter().zip(alphas.iter().rev()) {
        let sy = dot(s, y);
        if sy <= 0.0 {
            continue;
        }
        let b = dot(y, &q) / sy;
        for ((qi, si), &f) in q.iter_mut().zip(s).zip(free) {
            if f {
                *qi += (a - b) * si;
            }
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Solves `nlp` from the configured initial guess.
pub fn solve<P: Nlp + ?Sized>(nlp: &P, config: &SolverConfig) -> Result<SolveResult> {
    let z0 = nlp.initial_point(&config.initial_guess)?;
    solve_from(nlp, config, z0)
}

/// Solves `nlp` from an explicit starting point.
pub fn solve_from<P: Nlp + ?Sized>(nlp: &P, config: &SolverConfig, z0: Vec<f64>) -> Result<SolveResult> {
    config.validate()?;
    let start = Instant::now();
    let n = nlp.num_variables();
    if z0.len() != n {
        return Err(OcpError::LengthMismatch {
            expected: n,
            found: z0.len(),
        });
    }
    let (lower, upper) = nlp.variable_bounds();
    let mut z = z0;
    project(&mut z, &lower, &upper);

    let mut ev = Evaluator {
        nlp,
        mode: config.gradient_mode,
        fd_step: config.fd_step,
        obj_scale: 1.0,
        eq_scale: Vec::new(),
        in_scale: Vec::new(),
    };
    let raw = ev.raw(&z)?;
    ev.eq_scale = vec![1.0; raw.c.len()];
    ev.in_scale = vec![1.0; raw.g.len()];
    let d_raw = ev.raw_derivatives(&z)?;
    ev.obj_scale = gradient_scale(d_raw.grad.iter().fold(0.0, |a: f64, v| a.max(v.abs())));
    ev.eq_scale = row_norms(&d_raw.jc).into_iter().map(row_scale).collect();
    ev.in_scale = row_norms(&d_raw.jg).into_iter().map(row_scale).collect();

    let mut point = ev.scaled(&z)?;
    let mut derivs = ev.derivatives(&z)?;
    let mut mult = Multipliers {
        lambda: least_squares_multipliers(&derivs),
        mu: vec![0.0; point.g.len()],
        rho: config.penalty_initial,
    };
    let mut inner_tol = (1e-2f64).max(config.optimality_tolerance);
    let mut prev_violation = scaled_violation(&point, &mult);
    let mut history = Vec::new();
    let mut total_inner = 0;
    let mut status = SolveStatus::MaxIterations;
    let mut optimality = f64::INFINITY;
    let mut stall_count = 0;
    let mut polish_attempts = 0;
    let mut last_polish_residual = f64::INFINITY;
    let mut curvature = DMatrix::identity(n, n);

    for _ in 0..config.max_outer {
        let merit_start = mult.merit(&point);
        let out = match config.inner_method {
            InnerMethod::Lbfgs => inner_solve(
                &ev,
                &mult,
                z,
                point,
                derivs,
                &lower,
                &upper,
                inner_tol,
                config.max_inner,
                config.lbfgs_memory,
            ),
            InnerMethod::StructuredQuasiNewton => inner_solve_structured(
                &ev,
                &mult,
                z,
                point,
                derivs,
                &lower,
                &upper,
                inner_tol,
                config.max_inner,
                &mut curvature,
            ),
        };
        total_inner += out.iterations;
        // An exhausted inner budget means the curvature estimate has gone stale.
        if out.iterations >= config.max_inner && out.pg_norm > inner_tol {
            curvature = DMatrix::identity(n, n);
        }
        z = out.z;
        point = out.point;
        derivs = out.derivs;
        let merit_end = out.merit;

        let sv = scaled_violation(&point, &mult);
        for (l, c) in mult.lambda.iter_mut().zip(&point.c) {
            *l += mult.rho * c;
        }
        for (m, g) in mult.mu.iter_mut().zip(&point.g) {
            *m = (*m + mult.rho * g).max(0.0);
        }
        let lag_grad = lagrangian_gradient(&derivs, &mult.lambda, &mult.mu);
        optimality = projected_gradient_norm(&z, &lag_grad, &lower, &upper);
        let raw_violation = unscaled_violation(&point, &ev);
        history.push(OuterRecord {
            penalty: mult.rho,
            merit_start,
            merit_end,
            violation: raw_violation,
            optimality,
            inner_iterations: out.iterations,
        });
        let complementarity = point
            .g
            .iter()
            .zip(&mult.mu)
            .fold(0.0f64, |a, (g, m)| a.max((g * m).abs()));
        if raw_violation <= config.constraint_tolerance
            && optimality <= config.optimality_tolerance
            && complementarity <= config.optimality_tolerance.max(config.constraint_tolerance)
        {
            status = SolveStatus::Optimal;
            break;
        }
        let kkt_residual = raw_violation.max(optimality);
        if polish_attempts < MAX_POLISH_ATTEMPTS
            && raw_violation <= POLISH_VIOLATION
            && optimality <= POLISH_OPTIMALITY
            && kkt_residual <= 0.1 * last_polish_residual
        {
            polish_attempts += 1;
            last_polish_residual = kkt_residual;
            if let Some(pol) = polish(&ev, &z, &point, &derivs, &mult.lambda, &mult.mu, &lower, &upper, config) {
                z = pol.z;
                point = pol.point;
                mult.lambda = pol.lambda;
                mult.mu = pol.mu;
                optimality = pol.optimality;
                if let Some(last) = history.last_mut() {
                    last.violation = unscaled_violation(&point, &ev);
                    last.optimality = optimality;
                }
                status = SolveStatus::Optimal;
                break;
            }
        }
        if sv > 0.25 * prev_violation && raw_violation > config.constraint_tolerance {
            mult.rho *= config.penalty_growth;
            if out.pg_norm <= inner_tol {
                stall_count += 1;
            }
        } else {
            stall_count = 0;
        }
        if mult.rho > 1e16 || (stall_count >= 8 && raw_violation > config.constraint_tolerance * 1e3) {
            status = SolveStatus::InfeasibleStall;
            break;
        }
        prev_violation = sv.min(prev_violation.max(sv));
        inner_tol = (inner_tol * 0.1).max(0.1 * config.optimality_tolerance);
    }

    let raw = ev.raw(&z)?;
    let violation_final = violation(&raw);
    if status == SolveStatus::Optimal && violation_final > config.constraint_tolerance {
        status = SolveStatus::MaxIterations;
    }
    Ok(SolveResult {
        objective: raw.f,
        constraint_violation: violation_final,
        optimality,
        status,
        outer_iterations: history.len(),
        inner_iterations: total_inner,
        wall_time: start.elapsed(),
        equality_multipliers: mult.lambda.iter().zip(&ev.eq_scale).map(|(l, s)| l * s / ev.obj_scale).collect(),
        inequality_multipliers: mult.mu.iter().zip(&ev.in_scale).map(|(m, s)| m * s / ev.obj_scale).collect(),
        history,
        decision: z,
    })
}

/// Outcome of a successful KKT polish.
struct Polished {
    z: Vec<f64>,
    point: Point,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    optimality: f64,
}

const POLISH_ITERATIONS: usize = 8;
const POLISH_BACKTRACKS: usize = 10;

/// Solution of one equality-constrained Newton system.
struct KktStep {
    dz: Vec<f64>,
    lambda: Vec<f64>,
    mu: Vec<f64>,
}

/// Solves
///
/// ```text
/// [H_FF  J_F^T] [dz_F  ]     [grad f_F + H_FX dz_X]
/// [J_F   0    ] [lambda] = - [c_W + J_X dz_X      ]
/// ```
///
/// with `W` the equalities plus `working`, `F` the free variables and `X`
/// the pinned ones, whose displacement `dz_X` is given.
fn kkt_step(
    hess: &DMatrix<f64>,
    p: &Point,
    d: &Derivatives,
    working: &[usize],
    pinned: &[Option<f64>],
) -> Option<KktStep> {
    let n = pinned.len();
    let me = p.c.len();
    let free: Vec<usize> = (0..n).filter(|&i| pinned[i].is_none()).collect();
    let nf = free.len();
    let mw = me + working.len();
    let fixed_dz: Vec<f64> = pinned.iter().map(|v| v.unwrap_or(0.0)).collect();
    let mut kkt = DMatrix::zeros(nf + mw, nf + mw);
    let mut rhs = nalgebra::DVector::zeros(nf + mw);
    let scale = free.iter().fold(1.0f64, |a, &i| a.max(hess[(i, i)].abs()));
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = hess[(i, j)];
        }
        kkt[(a, a)] += 1e-12 * scale;
        let coupling: f64 = (0..n).map(|j| hess[(i, j)] * fixed_dz[j]).sum();
        rhs[a] = -d.grad[i] - coupling;
    }
    for r in 0..mw {
        let (row, value) = if r < me {
            (d.jc.row(r), p.c[r])
        } else {
            let k = working[r - me];
            (d.jg.row(k), p.g[k])
        };
        for (a, &i) in free.iter().enumerate() {
            kkt[(nf + r, a)] = row[i];
            kkt[(a, nf + r)] = row[i];
        }
        kkt[(nf + r, nf + r)] = -1e-14;
        let shift: f64 = row.iter().zip(&fixed_dz).map(|(a, b)| a * b).sum();
        rhs[nf + r] = -value - shift;
    }
    // Shift H until the reduced Hessian is positive definite, read off the inertia.
    let mut shift = 0.0;
    let sol = loop {
        let mut m = kkt.clone();
        for a in 0..nf {
            m[(a, a)] += shift;
        }
        let eig = m.clone().symmetric_eigenvalues();
        let positive = eig.iter().filter(|&&v| v > 0.0).count();
        let negative = eig.iter().filter(|&&v| v < 0.0).count();
        if positive == nf && negative == mw {
            break m.lu().solve(&rhs)?;
        }
        shift = if shift == 0.0 { 1e-8 * scale } else { shift * 10.0 };
        if shift > 1e4 * scale {
            return None;
        }
    };
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut dz = fixed_dz;
    for (a, &i) in free.iter().enumerate() {
        dz[i] = sol[a];
    }
    let mut mu = vec![0.0; p.g.len()];
    for (w, &k) in working.iter().enumerate() {
        mu[k] = sol[nf + me + w];
    }
    Some(KktStep {
        dz,
        lambda: (0..me).map(|r| sol[nf + r]).collect(),
        mu,
    })
}

/// Active-set Newton iterations on the KKT conditions, with `H` the
/// finite-difference Hessian of the Lagrangian. Variables whose step would
/// cross a bound are pinned there and inequalities with negative multipliers
/// leave the working set. Returns a point meeting the stopping test, or
/// `None`.
#[allow(clippy::too_many_arguments)]
fn polish<P: Nlp + ?Sized>(
    ev: &Evaluator<'_, P>,
    z0: &[f64],
    p0: &Point,
    d0: &Derivatives,
    lambda0: &[f64],
    mu0: &[f64],
    lower: &[f64],
    upper: &[f64],
    config: &SolverConfig,
) -> Option<Polished> {
    let n = z0.len();
    let mut z = z0.to_vec();
    let mut point = Point {
        f: p0.f,
        c: p0.c.clone(),
        g: p0.g.clone(),
    };
    let mut derivs = Derivatives {
        grad: d0.grad.clone(),
        jc: d0.jc.clone(),
        jg: d0.jg.clone(),
    };
    let mut lambda = lambda0.to_vec();
    let mut mu = mu0.to_vec();
    let mut working: Vec<usize> = (0..point.g.len()).filter(|&i| mu[i] > 0.0 || point.g[i] > -1e-8).collect();
    let release = 0.1 * config.optimality_tolerance;
    let mut current = projected_gradient_norm(&z, &lagrangian_gradient(&derivs, &lambda, &mu), lower, upper)
        .max(violation(&point));

    for _ in 0..POLISH_ITERATIONS {
        let lag = lagrangian_gradient(&derivs, &lambda, &mu);
        // Rounding-level pulls off a bound do not release the variable.
        let mut pinned: Vec<Option<f64>> = (0..n)
            .map(|i| {
                let at_lower =
                    lower[i].is_finite() && z[i] - lower[i] <= 1e-12 * (1.0 + lower[i].abs()) && lag[i] >= -release;
                let at_upper =
                    upper[i].is_finite() && upper[i] - z[i] <= 1e-12 * (1.0 + upper[i].abs()) && lag[i] <= release;
                if at_lower {
                    Some(lower[i] - z[i])
                } else if at_upper {
                    Some(upper[i] - z[i])
                } else {
                    None
                }
            })
            .collect();
        let hess = fd_lagrangian_hessian(ev, &z, &derivs, &lambda, &mu, upper).ok()?;

        let mut step = None;
        let mut dropped: Vec<usize> = Vec::new();
        for _ in 0..2 * n + 2 * point.g.len() + 1 {
            let s = kkt_step(&hess, &point, &derivs, &working, &pinned)?;
            let crossing: Vec<(usize, f64)> = (0..n)
                .filter(|&i| pinned[i].is_none())
                .filter_map(|i| {
                    let t = z[i] + s.dz[i];
                    if t < lower[i] {
                        Some((i, lower[i] - z[i]))
                    } else if t > upper[i] {
                        Some((i, upper[i] - z[i]))
                    } else {
                        None
                    }
                })
                .collect();
            let negative: Vec<usize> = working.iter().copied().filter(|&k| s.mu[k] < 0.0).collect();
            let blocking: Vec<usize> = (0..point.g.len())
                .filter(|k| !working.contains(k) && !dropped.contains(k))
                .filter(|&k| point.g[k] + derivs.jg.row(k).iter().zip(&s.dz).map(|(a, b)| a * b).sum::<f64>() > 0.0)
                .collect();
            if crossing.is_empty() && negative.is_empty() && blocking.is_empty() {
                step = Some(s);
                break;
            }
            for (i, d) in crossing {
                pinned[i] = Some(d);
            }
            working.retain(|k| !negative.contains(k));
            dropped.extend(negative);
            working.extend(blocking);
        }
        let s = step?;
        // Backtrack on the primal-dual step until the KKT residual drops.
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..POLISH_BACKTRACKS {
            let mut trial: Vec<f64> = z.iter().zip(&s.dz).map(|(a, b)| a + alpha * b).collect();
            project(&mut trial, lower, upper);
            let tl: Vec<f64> = lambda.iter().zip(&s.lambda).map(|(a, b)| a + alpha * (b - a)).collect();
            let tm: Vec<f64> = mu.iter().zip(&s.mu).map(|(a, b)| (a + alpha * (b - a)).max(0.0)).collect();
            if let (Ok(tp), Ok(td)) = (ev.scaled(&trial), ev.derivatives(&trial)) {
                let optimality = projected_gradient_norm(&trial, &lagrangian_gradient(&td, &tl, &tm), lower, upper);
                let residual = optimality.max(violation(&tp));
                if residual < (1.0 - 1e-4 * alpha) * current {
                    accepted = Some((trial, tp, td, tl, tm, optimality, residual));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let (trial, tp, td, tl, tm, optimality, residual) = accepted?;
        let raw_violation = unscaled_violation(&tp, ev);
        let complementarity = tp.g.iter().zip(&tm).fold(0.0f64, |a, (g, m)| a.max((g * m).abs()));
        z = trial;
        point = tp;
        derivs = td;
        lambda = tl;
        mu = tm;
        current = residual;
        if raw_violation <= config.constraint_tolerance
            && optimality <= config.optimality_tolerance
            && complementarity <= config.optimality_tolerance.max(config.constraint_tolerance)
        {
            return Some(Polished {
                z,
                point,
                lambda,
                mu,
                optimality,
            });
        }
        // Newly violated inequalities join the working set.
        for (k, &g) in point.g.iter().enumerate() {
            if g > 0.0 && !working.contains(&k) {
                working.push(k);
            }
        }
    }
    None
}

/// Equality multipliers minimizing `|grad f + J_c^T lambda|`, or zeros when
/// the estimate exceeds `MAX_INITIAL_MULTIPLIER`.
fn least_squares_multipliers(d: &Derivatives) -> Vec<f64> {
    let m = d.jc.nrows();
    if m == 0 {
        return Vec::new();
    }
    let mut normal = &d.jc * d.jc.transpose();
    for i in 0..m {
        normal[(i, i)] += 1e-10;
    }
    let rhs = -(&d.jc * nalgebra::DVector::from_column_slice(&d.grad));
    match normal.cholesky() {
        Some(ch) => {
            let lambda = ch.solve(&rhs);
            if lambda.iter().all(|v| v.is_finite() && v.abs() <= MAX_INITIAL_MULTIPLIER) {
                lambda.iter().copied().collect()
            } else {
                vec![0.0; m]
            }
        }
        None => vec![0.0; m],
    }
}

fn scaled_violation(p: &Point, mult: &Multipliers) -> f64 {
    let ce = p.c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    p.g.iter()
        .zip(&mult.mu)
        .fold(ce, |a, (g, m)| a.max(g.max(-m / mult.rho).abs()))
}

fn unscaled_violation<P: Nlp + ?Sized>(p: &Point, ev: &Evaluator<'_, P>) -> f64 {
    let ce = p
        .c
        .iter()
        .zip(&ev.eq_scale)
        .fold(0.0f64, |a, (v, s)| a.max((v / s).abs()));
    p.g.iter()
        .zip(&ev.in_scale)
        .fold(ce, |a, (v, s)| a.max((v / s).max(0.0)))
}

fn lagrangian_gradient(d: &Derivatives, lambda: &[f64], mu: &[f64]) -> Vec<f64> {
    let mut grad = d.grad.clone();
    add_transpose_product(&mut grad, &d.jc, lambda);
    add_transpose_product(&mut grad, &d.jg, mu);
    grad
}

/// Maximum relative gap between the analytic objective gradient and central
/// differences over the given coordinates; `None` without an analytic gradient.
pub fn gradient_check<P: Nlp + ?Sized>(nlp: &P, z: &[f64], coords: &[usize], step: f64) -> Option<Result<f64>> {
    let analytic = match nlp.objective_gradient(z)? {
        Ok(g) => g,
        Err(e) => return Some(Err(e)),
    };
    let mut work = z.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let h = step * (1.0 + z[i].abs());
        work[i] = z[i] + h;
        let fp = nlp.objective(&work);
        work[i] = z[i] - h;
        let fm = nlp.objective(&work);
        work[i] = z[i];
        let (fp, fm) = match (fp, fm) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Some(Err(e)),
        };
        let fd = (fp - fm) / (2.0 * h);
        let scale = analytic[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max((analytic[i] - fd).abs() / scale);
    }
    Some(Ok(worst))
}

/// Lifts nodal states and control from one grid onto another.
///
/// `previous` holds the `r` state blocks followed by the control block
/// (extra trailing entries are ignored). States are interpolated; the
/// control is rebuilt from the lifted states through the dynamics.
pub fn warm_start(
    previous: &[f64],
    from_grid: &Arc<QuadratureGrid>,
    to_grid: &Arc<QuadratureGrid>,
    def: &OcpDefinition,
) -> Result<Vec<f64>> {
    let r = def.order_r;
    let m = from_grid.len();
    if previous.len() < (r + 1) * m {
        return Err(OcpError::LengthMismatch {
            expected: (r + 1) * m,
            found: previous.len(),
        });
    }
    if from_grid.order() == to_grid.order() {
        return Ok(previous[..(r + 1) * m].to_vec());
    }
    let states: Vec<PolyInterpolant> = (0..r)
        .map(|i| PolyInterpolant::new(from_grid.clone(), previous[i * m..(i + 1) * m].to_vec()))
        .collect::<Result<_>>()?;
    let p = to_grid.len();
    let mut out = vec![0.0; (r + 1) * p];
    for (i, s) in states.iter().enumerate() {
        for (k, &t) in to_grid.nodes().iter().enumerate() {
            out[i * p + k] = s.eval_unchecked(t);
        }
    }
    let dx = to_grid.apply_diff(&out[(r - 1) * p..r * p]);
    for (k, &t) in to_grid.nodes().iter().enumerate() {
        let x: Vec<f64> = (0..r).map(|i| out[i * p + k]).collect();
        out[r * p + k] = control_from_state(&def.drift, &def.gain, t, &x, dx[k], Some(k))?;
    }
    Ok(out)
}
