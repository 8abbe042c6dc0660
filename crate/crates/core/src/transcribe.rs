//! Transcription of a canonical problem into a finite-dimensional NLP.
//!
//! Decision layout: `r` state blocks of `N + 1` nodal values, the control
//! block, then (when the spectral bound is active) the split variables
//! `p` and `q` with `a = p - q` for the `N - r - m1 + 2` spectral coefficients.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{OcpError, Result};
use crate::interpolant::{barycentric_weights, control_from_state, PolyInterpolant, GAIN_FLOOR};
use crate::nlp::{self, InitialGuess, Nlp, SolverConfig};
use crate::numeric::{integrate_adaptive, kronrod_points, QUADRATURE_TOLERANCE};
use crate::problem::{to_canonical, OcpDefinition};
use crate::quadrature::{lgl_grid, QuadratureGrid, MAX_ORDER};
use crate::spectral::{coefficient_count, estimate_bound_and_variation, recommend_d, spectral_map};

/// Order of the reference interpolant used for derivative estimates.
pub const REFERENCE_ORDER: usize = 40;

/// Uniform sample count for box sizing.
const BOX_SAMPLES: usize = 1001;

/// Grid order of the unregularized solve used to size bounds without a reference.
const COARSE_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    /// LGL quadrature of the running cost.
    Quadrature,
    /// Adaptive quadrature along the reconstructed trajectory.
    Exact,
}

impl FromStr for CostMode {
    type Err = OcpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadrature" => Ok(CostMode::Quadrature),
            "exact" => Ok(CostMode::Exact),
            other => Err(OcpError::InvalidOptions(format!("unknown cost mode '{other}'"))),
        }
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMode::Quadrature => "quadrature",
            CostMode::Exact => "exact",
        })
    }
}

/// A bound that is absent, sized automatically, or given explicitly.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundSpec<T> {
    Off,
    Auto,
    Given(T),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptionOptions {
    pub nodes: usize,
    pub m1: usize,
    pub beta: f64,
    /// `r + 1` intervals for the states and the control.
    pub box_bounds: BoundSpec<Vec<(f64, f64)>>,
    /// `m1 - 1` intervals for the initial derivatives of `x_r`.
    pub derivative_bounds: BoundSpec<Vec<(f64, f64)>>,
    pub spectral_bound: BoundSpec<f64>,
    pub cost_mode: CostMode,
}

/// Regularization order for a problem: its declared preference, else the
/// corollary's rule for its smoothness, else 1.
pub fn default_m1(def: &OcpDefinition) -> usize {
    def.default_m1
        .or_else(|| def.smoothness.and_then(|m| advise_m1(m).ok()).map(|a| a.m1))
        .unwrap_or(1)
}

/// `beta = (m - m1) - 0.8`, kept inside `(0, m - m1 - 3/4)`.
pub fn default_beta(smoothness: Option<usize>, m1: usize) -> f64 {
    match smoothness {
        Some(m) if m as f64 - m1 as f64 - 0.75 > 0.0 => {
            let upper = m as f64 - m1 as f64 - 0.75;
            let beta = m as f64 - m1 as f64 - 0.8;
            if beta > 0.0 {
                beta
            } else {
                0.5 * upper
            }
        }
        _ => 1.0,
    }
}

/// Smallest admissible node count.
pub fn min_nodes(r: usize, m1: usize, endpoint_form: bool) -> usize {
    let base = (r + m1).max(2);
    if endpoint_form {
        base.max(r + 2)
    } else {
        base
    }
}

impl TranscriptionOptions {
    /// Full regularization with automatic bounds and the problem's defaults.
    pub fn for_problem(def: &OcpDefinition, nodes: usize) -> Self {
        let m1 = default_m1(def);
        TranscriptionOptions {
            nodes,
            m1,
            beta: default_beta(def.smoothness, m1),
            box_bounds: BoundSpec::Auto,
            derivative_bounds: BoundSpec::Auto,
            spectral_bound: BoundSpec::Auto,
            cost_mode: CostMode::Quadrature,
        }
    }

    /// Collocation, boundary conditions and cost only.
    pub fn unregularized(nodes: usize, m1: usize) -> Self {
        TranscriptionOptions {
            nodes,
            m1,
            beta: 1.0,
            box_bounds: BoundSpec::Off,
            derivative_bounds: BoundSpec::Off,
            spectral_bound: BoundSpec::Off,
            cost_mode: CostMode::Quadrature,
        }
    }

    pub fn validate(&self, def: &OcpDefinition) -> Result<()> {
        let r = def.order_r;
        if self.m1 == 0 {
            return Err(OcpError::InvalidOptions("m1 must be at least 1".into()));
        }
        let lo = min_nodes(r, self.m1, def.is_endpoint_form());
        if self.nodes < lo || self.nodes > MAX_ORDER {
            return Err(OcpError::InvalidOptions(format!(
                "N = {} outside [{lo}, {MAX_ORDER}] for r = {r}, m1 = {}",
                self.nodes, self.m1
            )));
        }
        if !(self.beta > 0.0) {
            return Err(OcpError::InvalidOptions("beta must be positive".into()));
        }
        if let BoundSpec::Given(b) = &self.box_bounds {
            if b.len() != r + 1 || b.iter().any(|(l, u)| !(l < u)) {
                return Err(OcpError::InvalidOptions(format!(
                    "box bounds need {} intervals with lower < upper",
                    r + 1
                )));
            }
        }
        if let BoundSpec::Given(b) = &self.derivative_bounds {
            if b.len() != self.m1 - 1 || b.iter().any(|(l, u)| !(l <= u)) {
                return Err(OcpError::InvalidOptions(format!(
                    "derivative bounds need {} intervals",
                    self.m1 - 1
                )));
            }
        }
        if let BoundSpec::Given(d) = self.spectral_bound {
            if !(d > 0.0) {
                return Err(OcpError::InvalidOptions("spectral bound d must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Bounds after automatic sizing, in canonical coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBounds {
    pub box_lower: Vec<f64>,
    pub box_upper: Vec<f64>,
    pub derivative: Vec<(f64, f64)>,
    pub spectral_d: Option<f64>,
}

/// Trajectory used to size automatic bounds.
struct Profile {
    states: Vec<PolyInterpolant>,
    control: Box<dyn Fn(f64) -> Result<f64>>,
}

fn reference_profile(def: &OcpDefinition) -> Result<Option<Profile>> {
    let Some(rf) = def.analytic_reference.clone() else {
        return Ok(None);
    };
    let grid = Arc::new(lgl_grid(REFERENCE_ORDER)?);
    let samples: Vec<Vec<f64>> = grid.nodes().iter().map(|&t| (rf.states)(t)).collect();
    let states = (0..def.order_r)
        .map(|i| PolyInterpolant::new(grid.clone(), samples.iter().map(|x| x[i]).collect()))
        .collect::<Result<_>>()?;
    let control = rf.control.clone();
    Ok(Some(Profile {
        states,
        control: Box::new(move |t| Ok(control(t))),
    }))
}

fn coarse_profile(def: &OcpDefinition) -> Result<Profile> {
    let m1 = default_m1(def).min(COARSE_ORDER - def.order_r).max(1);
    let opts = TranscriptionOptions::unregularized(COARSE_ORDER, m1);
    let grid = Arc::new(lgl_grid(COARSE_ORDER)?);
    let problem = assemble(def, &opts, grid.clone())?;
    let config = SolverConfig {
        initial_guess: InitialGuess::LinearInterpolantOfEndpoints,
        ..SolverConfig::default()
    };
    let sol = nlp::solve(&problem, &config)?;
    let (x, _) = problem.split_decision(&sol.decision);
    let states: Vec<PolyInterpolant> = x
        .into_iter()
        .map(|v| PolyInterpolant::new(grid.clone(), v))
        .collect::<Result<_>>()?;
    let dx = states.last().expect("r >= 1").derivative();
    let st = states.clone();
    let drift = def.drift.clone();
    let gain = def.gain.clone();
    Ok(Profile {
        states,
        control: Box::new(move |t| {
            let x: Vec<f64> = st.iter().map(|s| s.eval_unchecked(t)).collect();
            control_from_state(&drift, &gain, t, &x, dx.eval_unchecked(t), None)
        }),
    })
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    let mut span = hi - lo;
    if span < 1e-8 * lo.abs().max(hi.abs()).max(1.0) {
        span = 1.0;
    }
    (lo - 2.0 * span, hi + 2.0 * span)
}

/// Sizes every `Auto` bound from the reference (or a coarse solve).
/// `def` must be canonical.
pub fn resolve_bounds(def: &OcpDefinition, opts: &TranscriptionOptions) -> Result<ResolvedBounds> {
    let r = def.order_r;
    let needs_profile = matches!(opts.box_bounds, BoundSpec::Auto)
        || matches!(opts.derivative_bounds, BoundSpec::Auto) && opts.m1 >= 2
        || matches!(opts.spectral_bound, BoundSpec::Auto);
    let profile = if needs_profile {
        match reference_profile(def)? {
            Some(p) => Some(p),
            None => Some(coarse_profile(def)?),
        }
    } else {
        None
    };

    let (box_lower, box_upper) = match &opts.box_bounds {
        BoundSpec::Off => (vec![f64::NEG_INFINITY; r + 1], vec![f64::INFINITY; r + 1]),
        BoundSpec::Given(b) => b.iter().copied().unzip(),
        BoundSpec::Auto => {
            let p = profile.as_ref().expect("profile built for auto bounds");
            let mut lo = vec![f64::INFINITY; r + 1];
            let mut hi = vec![f64::NEG_INFINITY; r + 1];
            for i in 0..BOX_SAMPLES {
                let t = -1.0 + 2.0 * i as f64 / (BOX_SAMPLES - 1) as f64;
                let mut y: Vec<f64> = p.states.iter().map(|s| s.eval_unchecked(t)).collect();
                y.push((p.control)(t)?);
                for (j, v) in y.iter().enumerate() {
                    lo[j] = lo[j].min(*v);
                    hi[j] = hi[j].max(*v);
                }
            }
            let mut out = (Vec::with_capacity(r + 1), Vec::with_capacity(r + 1));
            for j in 0..=r {
                let (a, b) = match def.box_override[j] {
                    Some(fixed) => fixed,
                    None => widen(lo[j], hi[j]),
                };
                out.0.push(a);
                out.1.push(b);
            }
            out
        }
    };

    let derivative = if opts.m1 < 2 {
        Vec::new()
    } else {
        match &opts.derivative_bounds {
            BoundSpec::Off => Vec::new(),
            BoundSpec::Given(b) => b.clone(),
            BoundSpec::Auto => {
                let p = profile.as_ref().expect("profile built for auto bounds");
                let mut h = p.states[r - 1].clone();
                (1..opts.m1)
                    .map(|_| {
                        h = h.derivative();
                        let v = h.nodal_values()[0];
                        let half = 0.5 * v.abs().max(1.0);
                        (v - half, v + half)
                    })
                    .collect()
            }
        }
    };

    let spectral_d = match opts.spectral_bound {
        BoundSpec::Off => None,
        BoundSpec::Given(d) => Some(d),
        BoundSpec::Auto => {
            let p = profile.as_ref().expect("profile built for auto bounds");
            let (u, v) = estimate_bound_and_variation(&p.states[r - 1], opts.m1 + 1);
            Some(recommend_d(u, v))
        }
    };

    Ok(ResolvedBounds {
        box_lower,
        box_upper,
        derivative,
        spectral_d,
    })
}

/// Index arithmetic for the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub r: usize,
    pub nodes: usize,
    pub split: usize,
}

impl Layout {
    pub fn state(&self, i: usize, k: usize) -> usize {
        i * self.nodes + k
    }
    pub fn control(&self, k: usize) -> usize {
        self.r * self.nodes + k
    }
    pub fn p(&self, j: usize) -> usize {
        (self.r + 1) * self.nodes + j
    }
    pub fn q(&self, j: usize) -> usize {
        (self.r + 1) * self.nodes + self.split + j
    }
    pub fn trajectory_len(&self) -> usize {
        (self.r + 1) * self.nodes
    }
    pub fn len(&self) -> usize {
        self.trajectory_len() + 2 * self.split
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The transcribed problem.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    def: Arc<OcpDefinition>,
    grid: Arc<QuadratureGrid>,
    opts: TranscriptionOptions,
    bounds: ResolvedBounds,
    layout: Layout,
    spectral: Option<DMatrix<f64>>,
    derivative_rows: Vec<Vec<f64>>,
    margin: Option<f64>,
    bary: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Builds the NLP. `def` is mapped onto `[-1, 1]` first if needed.
pub fn assemble(def: &OcpDefinition, opts: &TranscriptionOptions, grid: Arc<QuadratureGrid>) -> Result<NlpProblem> {
    let def = to_canonical(def)?;
    if grid.order() != opts.nodes {
        return Err(OcpError::Dimension(format!(
            "grid order {} differs from requested N = {}",
            grid.order(),
            opts.nodes
        )));
    }
    opts.validate(&def)?;
    let bounds = resolve_bounds(&def, opts)?;
    assemble_with_bounds(def, opts.clone(), bounds, grid)
}

/// Builds the NLP with bounds that are already resolved (canonical `def`).
pub fn assemble_with_bounds(
    def: OcpDefinition,
    opts: TranscriptionOptions,
    bounds: ResolvedBounds,
    grid: Arc<QuadratureGrid>,
) -> Result<NlpProblem> {
    let r = def.order_r;
    let nodes = grid.len();
    let n = grid.order();
    if bounds.box_lower.len() != r + 1 || bounds.box_upper.len() != r + 1 {
        return Err(OcpError::Dimension("box bounds need r + 1 entries".into()));
    }
    let spectral = match bounds.spectral_d {
        Some(_) => Some(spectral_map(&grid, r, opts.m1)?),
        None => {
            coefficient_count(n, r, opts.m1)?;
            None
        }
    };
    let split = spectral.as_ref().map_or(0, |m| m.nrows());
    let layout = Layout { r, nodes, split };

    let mut derivative_rows = Vec::new();
    let mut power = grid.diff_matrix().clone();
    for j in 0..bounds.derivative.len() {
        if j > 0 {
            power = grid.diff_matrix() * &power;
        }
        derivative_rows.push(power.row(0).iter().copied().collect());
    }

    let margin = def
        .is_endpoint_form()
        .then(|| ((n - r - 1) as f64).powf(-opts.beta));

    let mut lower = vec![f64::NEG_INFINITY; layout.len()];
    let mut upper = vec![f64::INFINITY; layout.len()];
    for j in 0..=r {
        for k in 0..nodes {
            lower[j * nodes + k] = bounds.box_lower[j];
            upper[j * nodes + k] = bounds.box_upper[j];
        }
    }
    for j in 0..split {
        lower[layout.p(j)] = 0.0;
        lower[layout.q(j)] = 0.0;
    }
    let bary = barycentric_weights(&grid);
    Ok(NlpProblem {
        def: Arc::new(def),
        grid,
        opts,
        bounds,
        layout,
        spectral,
        derivative_rows,
        margin,
        bary,
        lower,
        upper,
    })
}

impl NlpProblem {
    pub fn definition(&self) -> &Arc<OcpDefinition> {
        &self.def
    }
    pub fn grid(&self) -> &Arc<QuadratureGrid> {
        &self.grid
    }
    pub fn options(&self) -> &TranscriptionOptions {
        &self.opts
    }
    pub fn bounds(&self) -> &ResolvedBounds {
        &self.bounds
    }
    pub fn layout(&self) -> Layout {
        self.layout
    }
    /// Relaxation margin `(N - r - 1)^(-beta)` of the endpoint form.
    pub fn margin(&self) -> Option<f64> {
        self.margin
    }
    pub fn spectral_matrix(&self) -> Option<&DMatrix<f64>> {
        self.spectral.as_ref()
    }

    /// Nodal state blocks and control.
    pub fn split_decision(&self, z: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let m = self.layout.nodes;
        let states = (0..self.layout.r).map(|i| z[i * m..(i + 1) * m].to_vec()).collect();
        let control = z[self.layout.r * m..(self.layout.r + 1) * m].to_vec();
        (states, control)
    }

    /// Extends states and control with the canonical split `p = max(a, 0)`, `q = max(-a, 0)`.
    pub fn complete_decision(&self, trajectory: &[f64]) -> Result<Vec<f64>> {
        let len = self.layout.trajectory_len();
        if trajectory.len() != len && trajectory.len() != self.layout.len() {
            return Err(OcpError::LengthMismatch {
                expected: len,
                found: trajectory.len(),
            });
        }
        let mut z = trajectory[..len].to_vec();
        z.resize(self.layout.len(), 0.0);
        if let Some(a) = self.spectral_values(&z) {
            for (j, aj) in a.iter().enumerate() {
                z[self.layout.p(j)] = aj.max(0.0);
                z[self.layout.q(j)] = (-aj).max(0.0);
            }
        }
        Ok(z)
    }

    /// Reapplies the canonical split to a solved decision vector.
    pub fn canonicalize_split(&self, z: &[f64]) -> Vec<f64> {
        self.complete_decision(z).unwrap_or_else(|_| z.to_vec())
    }

    /// Spectral coefficients `a = A x_r`, when the spectral bound is active.
    pub fn spectral_values(&self, z: &[f64]) -> Option<Vec<f64>> {
        let a = self.spectral.as_ref()?;
        let m = self.layout.nodes;
        let xr = &z[(self.layout.r - 1) * m..self.layout.r * m];
        Some((0..a.nrows()).map(|i| a.row(i).iter().zip(xr).map(|(u, v)| u * v).sum()).collect())
    }

    fn node_state(&self, z: &[f64], k: usize) -> Vec<f64> {
        (0..self.layout.r).map(|i| z[self.layout.state(i, k)]).collect()
    }

    fn node_packed(&self, z: &[f64], k: usize) -> Vec<f64> {
        let mut y = self.node_state(z, k);
        y.push(z[self.layout.control(k)]);
        y
    }

    fn endpoints(&self, z: &[f64]) -> Vec<f64> {
        let n = self.layout.nodes - 1;
        let mut y = self.node_state(z, 0);
        y.extend(self.node_state(z, n));
        y
    }

    fn diff_block(&self, z: &[f64], i: usize) -> Vec<f64> {
        let m = self.layout.nodes;
        self.grid.apply_diff(&z[i * m..(i + 1) * m])
    }

    /// Collocation residuals, `r (N + 1)` entries ordered by level then node.
    pub fn collocation_residuals(&self, z: &[f64]) -> Vec<f64> {
        let r = self.layout.r;
        let nodes = self.grid.nodes();
        let mut out = Vec::with_capacity(r * nodes.len());
        for i in 0..r {
            let dx = self.diff_block(z, i);
            for (k, &t) in nodes.iter().enumerate() {
                let x = self.node_state(z, k);
                let rhs = if i + 1 < r {
                    self.def.chain_rhs(i, t, &x)
                } else {
                    self.def.drift.eval(t, &x) + self.def.gain.eval(t, &x) * z[self.layout.control(k)]
                };
                out.push(dx[k] - rhs);
            }
        }
        out
    }

    fn check_gain(&self, z: &[f64]) -> Result<()> {
        for (k, &t) in self.grid.nodes().iter().enumerate() {
            let g = self.def.gain.eval(t, &self.node_state(z, k));
            if !(g.abs() > GAIN_FLOOR) {
                return Err(OcpError::SingularDynamics {
                    t,
                    gain: g.abs(),
                    node: Some(k),
                });
            }
        }
        Ok(())
    }

    /// Discrete cost `sum_k w_k F(t_k, x_k, u_k) + E(x_0, x_N)`.
    pub fn quadrature_cost(&self, z: &[f64]) -> f64 {
        let nodes = self.grid.nodes();
        let w = self.grid.weights();
        let running: f64 = (0..nodes.len())
            .map(|k| w[k] * self.def.running_cost.eval(nodes[k], &self.node_packed(z, k)))
            .sum();
        running + self.def.terminal_cost.eval(1.0, &self.endpoints(z))
    }

    fn interpolants(&self, z: &[f64]) -> (Vec<PolyInterpolant>, PolyInterpolant) {
        let (states, _) = self.split_decision(z);
        let states: Vec<PolyInterpolant> = states
            .into_iter()
            .map(|v| PolyInterpolant::new(self.grid.clone(), v).expect("block length matches grid"))
            .collect();
        let dx = states.last().expect("r >= 1").derivative();
        (states, dx)
    }

    fn exact_integrand(&self, states: &[PolyInterpolant], dx: &PolyInterpolant, t: f64) -> Result<f64> {
        let mut y: Vec<f64> = states.iter().map(|s| s.eval_unchecked(t)).collect();
        let u = control_from_state(&self.def.drift, &self.def.gain, t, &y, dx.eval_unchecked(t), None)?;
        y.push(u);
        let v = self.def.running_cost.eval(t, &y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(OcpError::NonFinite {
                what: "running cost",
                node: None,
            })
        }
    }

    /// Cost with the running term integrated adaptively along the
    /// reconstructed trajectory; also returns the panel partition.
    pub fn exact_cost(&self, z: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
        let (states, dx) = self.interpolants(z);
        let integral = integrate_adaptive(|t| self.exact_integrand(&states, &dx, t), -1.0, 1.0, QUADRATURE_TOLERANCE)?;
        let terminal = self.def.terminal_cost.eval(1.0, &self.endpoints(z));
        Ok((integral.value + terminal, integral.panels))
    }

    fn exact_gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (_, panels) = self.exact_cost(z)?;
        let (states, dx) = self.interpolants(z);
        let r = self.layout.r;
        let m = self.layout.nodes;
        let d = self.grid.diff_matrix();
        let mut grad = vec![0.0; self.layout.len()];
        for &(a, b) in &panels {
            for (t, w) in kronrod_points(a, b) {
                let phi = PolyInterpolant::basis_at(&self.grid, &self.bary, t);
                let psi: Vec<f64> = (0..m)
                    .map(|k| (0..m).map(|j| phi[j] * d[(j, k)]).sum())
                    .collect();
                let x: Vec<f64> = states.iter().map(|s| s.eval_unchecked(t)).collect();
                let g = self.def.gain.eval(t, &x);
                let u = control_from_state(&self.def.drift, &self.def.gain, t, &x, dx.eval_unchecked(t), None)?;
                let fx = self.def.drift.gradient(t, &x);
                let gx = self.def.gain.gradient(t, &x);
                let mut y = x.clone();
                y.push(u);
                let fy = self.def.running_cost.gradient(t, &y);
                let fu = fy[r];
                for l in 0..r {
                    let coupling = fy[l] - fu * (fx[l] + u * gx[l]) / g;
                    for k in 0..m {
                        let mut v = coupling * phi[k];
                        if l == r - 1 {
                            v += fu * psi[k] / g;
                        }
                        grad[self.layout.state(l, k)] += w * v;
                    }
                }
            }
        }
        self.add_terminal_gradient(z, &mut grad);
        Ok(grad)
    }

    fn add_terminal_gradient(&self, z: &[f64], grad: &mut [f64]) {
        let r = self.layout.r;
        let n = self.layout.nodes - 1;
        let ge = self.def.terminal_cost.gradient(1.0, &self.endpoints(z));
        for i in 0..r {
            grad[self.layout.state(i, 0)] += ge[i];
            grad[self.layout.state(i, n)] += ge[r + i];
        }
    }

    fn quadrature_gradient(&self, z: &[f64]) -> Vec<f64> {
        let r = self.layout.r;
        let nodes = self.grid.nodes();
        let w = self.grid.weights();
        let mut grad = vec![0.0; self.layout.len()];
        for k in 0..nodes.len() {
            let gy = self.def.running_cost.gradient(nodes[k], &self.node_packed(z, k));
            for i in 0..r {
                grad[self.layout.state(i, k)] += w[k] * gy[i];
            }
            grad[self.layout.control(k)] += w[k] * gy[r];
        }
        self.add_terminal_gradient(z, &mut grad);
        grad
    }

    pub fn num_equalities(&self) -> usize {
        let r = self.layout.r;
        r * self.layout.nodes + if self.def.is_endpoint_form() { 0 } else { r } + self.layout.split
    }

    pub fn num_inequalities(&self) -> usize {
        let ne = self.def.endpoint_constraint.as_ref().map_or(0, |e| 2 * e.dim());
        let nh = self.def.path_constraint.as_ref().map_or(0, |h| h.dim() * self.layout.nodes);
        ne + nh + 2 * self.derivative_rows.len() + usize::from(self.layout.split > 0)
    }

    /// Maximum violation over all equalities, inequalities and bounds.
    pub fn constraint_violation(&self, z: &[f64]) -> Result<f64> {
        let c = self.equalities(z)?;
        let g = self.inequalities(z)?;
        let mut v = c.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        v = g.iter().fold(v, |a, x| a.max(x.max(0.0)));
        for ((x, l), u) in z.iter().zip(&self.lower).zip(&self.upper) {
            v = v.max(l - x).max(x - u);
        }
        Ok(v)
    }

    fn initial_trajectory(&self, guess: &InitialGuess) -> Result<Vec<f64>> {
        let r = self.layout.r;
        let m = self.layout.nodes;
        let nodes = self.grid.nodes();
        match guess {
            InitialGuess::WarmStart(z) => Ok(z.clone()),
            InitialGuess::Zeros => Ok(vec![0.0; self.layout.trajectory_len()]),
            InitialGuess::ReferenceSample => {
                let rf = self.def.reference()?;
                let mut z = vec![0.0; self.layout.trajectory_len()];
                for (k, &t) in nodes.iter().enumerate() {
                    let x = (rf.states)(t);
                    for i in 0..r {
                        z[self.layout.state(i, k)] = x[i];
                    }
                    z[self.layout.control(k)] = (rf.control)(t);
                }
                Ok(z)
            }
            InitialGuess::LinearInterpolantOfEndpoints => {
                let (start, end) = match (&self.def.endpoint_hint, &self.def.initial_state) {
                    (Some((a, b)), _) => (a.clone(), b.clone()),
                    (None, Some(x0)) => (x0.clone(), x0.clone()),
                    (None, None) => (vec![0.0; r], vec![0.0; r]),
                };
                let mut z = vec![0.0; self.layout.trajectory_len()];
                for (k, &t) in nodes.iter().enumerate() {
                    let s = 0.5 * (t + 1.0);
                    for i in 0..r {
                        z[self.layout.state(i, k)] = (1.0 - s) * start[i] + s * end[i];
                    }
                }
                let dx = self.grid.apply_diff(&z[(r - 1) * m..r * m]);
                for (k, &t) in nodes.iter().enumerate() {
                    let x = self.node_state(&z, k);
                    z[self.layout.control(k)] =
                        control_from_state(&self.def.drift, &self.def.gain, t, &x, dx[k], Some(k)).unwrap_or(0.0);
                }
                Ok(z)
            }
        }
    }
}

impl Nlp for NlpProblem {
    fn num_variables(&self) -> usize {
        self.layout.len()
    }

    fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }

    fn objective(&self, z: &[f64]) -> Result<f64> {
        self.check_gain(z)?;
        match self.opts.cost_mode {
            CostMode::Quadrature => Ok(self.quadrature_cost(z)),
            CostMode::Exact => Ok(self.exact_cost(z)?.0),
        }
    }

    fn equalities(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut c = self.collocation_residuals(z);
        if let (false, Some(x0)) = (self.def.is_endpoint_form(), &self.def.initial_state) {
            for (i, v) in x0.iter().enumerate() {
                c.push(z[self.layout.state(i, 0)] - v);
            }
        }
        if let Some(a) = self.spectral_values(z) {
            for (j, aj) in a.iter().enumerate() {
                c.push(aj - z[self.layout.p(j)] + z[self.layout.q(j)]);
            }
        }
        Ok(c)
    }

    fn inequalities(&self, z: &[f64]) -> Result<Vec<f64>> {
        let eta = self.margin.unwrap_or(0.0);
        let mut g = Vec::with_capacity(self.num_inequalities());
        if let Some(e) = &self.def.endpoint_constraint {
            for v in e.eval(0.0, &self.endpoints(z)) {
                g.push(v - eta);
                g.push(-v - eta);
            }
        }
        if let Some(h) = &self.def.path_constraint {
            for (k, &t) in self.grid.nodes().iter().enumerate() {
                for v in h.eval(t, &self.node_packed(z, k)) {
                    g.push(v - eta);
                }
            }
        }
        let m = self.layout.nodes;
        let xr = &z[(self.layout.r - 1) * m..self.layout.r * m];
        for (row, (lo, hi)) in self.derivative_rows.iter().zip(&self.bounds.derivative) {
            let v: f64 = row.iter().zip(xr).map(|(a, b)| a * b).sum();
            g.push(lo - v);
            g.push(v - hi);
        }
        if let Some(d) = self.bounds.spectral_d {
            let total: f64 = (0..self.layout.split)
                .map(|j| z[self.layout.p(j)] + z[self.layout.q(j)])
                .sum();
            g.push(total - d);
        }
        Ok(g)
    }

    fn objective_gradient(&self, z: &[f64]) -> Option<Result<Vec<f64>>> {
        Some(match self.opts.cost_mode {
            CostMode::Quadrature => Ok(self.quadrature_gradient(z)),
            CostMode::Exact => self.exact_gradient(z),
        })
    }

    fn equality_jacobian(&self, z: &[f64]) -> Option<Result<DMatrix<f64>>> {
        let r = self.layout.r;
        let m = self.layout.nodes;
        let nodes = self.grid.nodes();
        let d = self.grid.diff_matrix();
        let mut jac = DMatrix::zeros(self.num_equalities(), self.layout.len());
        for i in 0..r {
            for k in 0..m {
                let row = i * m + k;
                for j in 0..m {
                    jac[(row, self.layout.state(i, j))] += d[(k, j)];
                }
                let t = nodes[k];
                let x = self.node_state(z, k);
                if i + 1 < r {
                    match &self.def.chain_maps[i] {
                        Some(map) => {
                            for (l, gl) in map.gradient(t, &x).iter().enumerate() {
                                jac[(row, self.layout.state(l, k))] -= gl;
                            }
                        }
                        None => jac[(row, self.layout.state(i + 1, k))] -= 1.0,
                    }
                } else {
                    let u = z[self.layout.control(k)];
                    let fx = self.def.drift.gradient(t, &x);
                    let gx = self.def.gain.gradient(t, &x);
                    for l in 0..r {
                        jac[(row, self.layout.state(l, k))] -= fx[l] + u * gx[l];
                    }
                    jac[(row, self.layout.control(k))] -= self.def.gain.eval(t, &x);
                }
            }
        }
        let mut row = r * m;
        if !self.def.is_endpoint_form() {
            for i in 0..r {
                jac[(row, self.layout.state(i, 0))] = 1.0;
                row += 1;
            }
        }
        if let Some(a) = &self.spectral {
            for j in 0..a.nrows() {
                for k in 0..m {
                    jac[(row, self.layout.state(r - 1, k))] = a[(j, k)];
                }
                jac[(row, self.layout.p(j))] = -1.0;
                jac[(row, self.layout.q(j))] = 1.0;
                row += 1;
            }
        }
        Some(Ok(jac))
    }

    fn inequality_jacobian(&self, z: &[f64]) -> Option<Result<DMatrix<f64>>> {
        let r = self.layout.r;
        let m = self.layout.nodes;
        let mut jac = DMatrix::zeros(self.num_inequalities(), self.layout.len());
        let mut row = 0;
        if let Some(e) = &self.def.endpoint_constraint {
            let je = e.jacobian(0.0, &self.endpoints(z));
            for jr in &je {
                for i in 0..r {
                    let c0 = self.layout.state(i, 0);
                    let cn = self.layout.state(i, m - 1);
                    jac[(row, c0)] += jr[i];
                    jac[(row, cn)] += jr[r + i];
                    jac[(row + 1, c0)] -= jr[i];
                    jac[(row + 1, cn)] -= jr[r + i];
                }
                row += 2;
            }
        }
        if let Some(h) = &self.def.path_constraint {
            for (k, &t) in self.grid.nodes().iter().enumerate() {
                for jr in h.jacobian(t, &self.node_packed(z, k)) {
                    for i in 0..r {
                        jac[(row, self.layout.state(i, k))] = jr[i];
                    }
                    jac[(row, self.layout.control(k))] = jr[r];
                    row += 1;
                }
            }
        }
        for dr in &self.derivative_rows {
            for k in 0..m {
                jac[(row, self.layout.state(r - 1, k))] = -dr[k];
                jac[(row + 1, self.layout.state(r - 1, k))] = dr[k];
            }
            row += 2;
        }
        if self.bounds.spectral_d.is_some() {
            for j in 0..self.layout.split {
                jac[(row, self.layout.p(j))] = 1.0;
                jac[(row, self.layout.q(j))] = 1.0;
            }
        }
        Some(Ok(jac))
    }

    fn initial_point(&self, guess: &InitialGuess) -> Result<Vec<f64>> {
        let traj = self.initial_trajectory(guess)?;
        let mut z = self.complete_decision(&traj)?;
        for ((v, l), u) in z.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
        Ok(z)
    }
}

/// The feasible family `x_k = e^-1 + alpha (t_k + 1)`, `u_k = alpha` of the
/// unregularized counterexample, as `[x; u]`.
pub fn alpha_family_point(alpha: f64, grid: &QuadratureGrid) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(OcpError::InvalidOptions("alpha must be positive".into()));
    }
    let x0 = (-1.0f64).exp();
    let mut z: Vec<f64> = grid.nodes().iter().map(|t| x0 + alpha * (t + 1.0)).collect();
    z.extend(std::iter::repeat_n(alpha, grid.len()));
    Ok(z)
}

/// Regularization order recommended for smoothness `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct M1Advice {
    pub m1: usize,
    /// Predicted rate exponent `min{2m - 2m1 - 1, m1 - 1}`.
    pub exponent: f64,
    /// `2m/3` is an integer: the rate is only attained up to an arbitrarily
    /// small loss and `exponent` is the supremum.
    pub open_case: bool,
}

/// `m1 = [2m/3]`, or `[2m/3] + 1` when the fractional part is `2/3`.
pub fn advise_m1(m: usize) -> Result<M1Advice> {
    if m < 3 {
        return Err(OcpError::InvalidOptions(format!("smoothness m = {m} must be at least 3")));
    }
    let base = 2 * m / 3;
    let remainder = (2 * m) % 3;
    let m1 = if remainder == 2 { base + 1 } else { base };
    let exponent = (2 * m - 2 * m1 - 1).min(m1 - 1) as f64;
    Ok(M1Advice {
        m1,
        exponent,
        open_case: remainder == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::builtin;

    fn grid(n: usize) -> Arc<QuadratureGrid> {
        Arc::new(lgl_grid(n).unwrap())
    }

    #[test]
    fn advise_m1_examples() {
        let a = advise_m1(6).unwrap();
        assert_eq!((a.m1, a.exponent, a.open_case), (4, 3.0, true));
        let a = advise_m1(5).unwrap();
        assert_eq!((a.m1, a.exponent, a.open_case), (3, 2.0, false));
        let a = advise_m1(4).unwrap();
        assert_eq!((a.m1, a.exponent), (3, 1.0));
        assert!(advise_m1(2).is_err());
    }

    #[test]
    fn alpha_family_is_feasible_for_collocation() {
        let def = builtin("counterexample").unwrap();
        let g = grid(8);
        let p = assemble(&def, &TranscriptionOptions::unregularized(8, 1), g.clone()).unwrap();
        for alpha in [1.0, 10.0] {
            let z = alpha_family_point(alpha, &g).unwrap();
            let c = p.equalities(&z).unwrap();
            assert!(c.iter().all(|v| v.abs() < 1e-12), "{c:?}");
            let bound = 2.0 * ((-1.0f64).exp() + alpha).powi(2) / alpha.powi(4);
            let j = p.objective(&z).unwrap();
            assert!(j > 0.0 && j <= bound);
        }
    }

    #[test]
    fn layout_sizes() {
        let def = builtin("sine_tracking").unwrap();
        let p = assemble(&def, &TranscriptionOptions::for_problem(&def, 10), grid(10)).unwrap();
        let l = p.layout();
        assert_eq!(l.trajectory_len(), 33);
        assert_eq!(l.split, 10 - 2 - 2 + 2);
        assert_eq!(p.num_equalities(), 22 + 8);
        assert_eq!(p.num_inequalities(), 8 + 2 + 1);
        let z = p.initial_point(&InitialGuess::ReferenceSample).unwrap();
        assert_eq!(p.equalities(&z).unwrap().len(), p.num_equalities());
        assert_eq!(p.inequalities(&z).unwrap().len(), p.num_inequalities());
    }

    #[test]
    fn too_few_nodes_is_rejected() {
        let def = builtin("sine_tracking").unwrap();
        let opts = TranscriptionOptions::for_problem(&def, 3);
        assert!(assemble(&def, &opts, grid(3)).is_err());
        let opts = TranscriptionOptions::for_problem(&def, 4);
        assert!(assemble(&def, &opts, grid(5)).is_err());
    }

    fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, z: &[f64]) -> DMatrix<f64> {
        let mut w = z.to_vec();
        let cols: Vec<Vec<f64>> = (0..z.len())
            .map(|i| {
                let h = 1e-6 * (1.0 + z[i].abs());
                w[i] = z[i] + h;
                let a = f(&w);
                w[i] = z[i] - h;
                let b = f(&w);
                w[i] = z[i];
                a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect()
            })
            .collect();
        DMatrix::from_fn(cols[0].len(), z.len(), |r, c| cols[c][r])
    }

    #[test]
    fn structured_derivatives_match_differences() {
        for name in ["sine_tracking", "cubic_chain", "counterexample"] {
            let def = builtin(name).unwrap();
            for mode in [CostMode::Quadrature, CostMode::Exact] {
                let mut opts = TranscriptionOptions::for_problem(&def, 8);
                opts.cost_mode = mode;
                let p = assemble(&def, &opts, grid(8)).unwrap();
                let mut z = p.initial_point(&InitialGuess::ReferenceSample).unwrap();
                for (i, v) in z.iter_mut().enumerate() {
                    *v += 0.01 * ((i * 7 % 5) as f64 - 2.0);
                }
                let je = p.equality_jacobian(&z).unwrap().unwrap();
                let fe = fd_jacobian(|w| p.equalities(w).unwrap(), &z);
                assert!((je - fe).abs().max() < 1e-7, "{name} equalities");
                let ji = p.inequality_jacobian(&z).unwrap().unwrap();
                let fi = fd_jacobian(|w| p.inequalities(w).unwrap(), &z);
                assert!((ji - fi).abs().max() < 1e-7, "{name} inequalities");
                let coords: Vec<usize> = (0..z.len()).collect();
                let gap = nlp::gradient_check(&p, &z, &coords, 1e-6).unwrap().unwrap();
                assert!(gap < 1e-6, "{name} {mode}: {gap}");
            }
        }
    }

    #[test]
    fn reference_collocation_residual_decreases() {
        for name in ["sine_tracking", "cubic_chain"] {
            let def = builtin(name).unwrap();
            let mut last = f64::INFINITY;
            for n in [8, 12, 16] {
                let p = assemble(&def, &TranscriptionOptions::for_problem(&def, n), grid(n)).unwrap();
                let z = p.initial_point(&InitialGuess::ReferenceSample).unwrap();
                let res = p.collocation_residuals(&z).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(res < last, "{name} N={n}: {res:e}");
                last = res;
            }
        }
    }

    #[test]
    fn split_matches_absolute_sum() {
        let def = builtin("sine_tracking").unwrap();
        let p = assemble(&def, &TranscriptionOptions::for_problem(&def, 12), grid(12)).unwrap();
        let z = p.initial_point(&InitialGuess::ReferenceSample).unwrap();
        let a = p.spectral_values(&z).unwrap();
        let l = p.layout();
        let split: f64 = (0..l.split).map(|j| z[l.p(j)] + z[l.q(j)]).sum();
        let direct: f64 = a.iter().map(|v| v.abs()).sum();
        assert!((split - direct).abs() < 1e-12);
    }

    #[test]
    fn cost_mode_parses() {
        assert_eq!("exact".parse::<CostMode>().unwrap(), CostMode::Exact);
        assert!("simpson".parse::<CostMode>().is_err());
    }

    #[test]
    fn default_beta_stays_admissible() {
        assert!((default_beta(Some(8), 2) - 5.2).abs() < 1e-12);
        let b = default_beta(Some(4), 3);
        assert!(b > 0.0 && b < 0.25);
        assert_eq!(default_beta(None, 2), 1.0);
    }
}
