//! Post-solve checks: continuous reconstruction, independent re-integration
//! and errors against analytic references.

use std::sync::Arc;

use crate::error::{OcpError, Result};
use crate::interpolant::{ControlReconstruction, PolyInterpolant};
use crate::numeric::{integrate_adaptive, integrate_ode, ODE_TOLERANCE, QUADRATURE_TOLERANCE};
use crate::problem::{to_canonical, OcpDefinition};
use crate::quadrature::QuadratureGrid;

/// Uniform points used for the dynamics defect.
pub const DEFECT_SAMPLES: usize = 2001;

/// Uniform points used to compare trajectories.
pub const COMPARISON_SAMPLES: usize = 1001;

/// Continuous trajectories rebuilt from a decision vector, in canonical time.
#[derive(Debug, Clone)]
pub struct ContinuousSolution {
    pub definition: Arc<OcpDefinition>,
    pub states: Vec<PolyInterpolant>,
    pub control: ControlReconstruction,
    /// Decision control values `u_bar_k`.
    pub nodal_control: Vec<f64>,
    pub discrete_cost: f64,
    pub integrated_cost: f64,
    /// Largest residual of the chain equations on a uniform grid.
    pub dynamics_defect: f64,
}

impl ContinuousSolution {
    /// Rows `[t, x_1, .., x_r, u]` at the nodes, in the problem's original
    /// time and state units.
    pub fn nodal_trajectory(&self) -> Vec<Vec<f64>> {
        let scale = self.definition.state_scale();
        let map = self.definition.scaling.as_ref().map(|s| s.map);
        let grid = self.states[0].grid();
        grid.nodes()
            .iter()
            .enumerate()
            .map(|(k, &tau)| {
                let mut row = vec![map.map_or(tau, |m| m.to_physical(tau))];
                row.extend(self.states.iter().zip(&scale).map(|(s, c)| s.nodal_values()[k] / c));
                row.push(self.nodal_control[k]);
                row
            })
            .collect()
    }
}

fn uniform(count: usize) -> impl Iterator<Item = f64> {
    (0..count).map(move |i| -1.0 + 2.0 * i as f64 / (count - 1) as f64)
}

pub fn reconstruct(decision: &[f64], def: &OcpDefinition, grid: &Arc<QuadratureGrid>) -> Result<ContinuousSolution> {
    let def = Arc::new(to_canonical(def)?);
    let r = def.order_r;
    let m = grid.len();
    if decision.len() < (r + 1) * m {
        return Err(OcpError::LengthMismatch {
            expected: (r + 1) * m,
            found: decision.len(),
        });
    }
    let states: Vec<PolyInterpolant> = (0..r)
        .map(|i| PolyInterpolant::new(grid.clone(), decision[i * m..(i + 1) * m].to_vec()))
        .collect::<Result<_>>()?;
    let nodal_control = decision[r * m..(r + 1) * m].to_vec();
    let control = ControlReconstruction::new(states.clone(), def.drift.clone(), def.gain.clone())?;

    let x0: Vec<f64> = states.iter().map(|s| s.nodal_values()[0]).collect();
    let xf: Vec<f64> = states.iter().map(|s| s.nodal_values()[m - 1]).collect();
    let ends: Vec<f64> = x0.iter().chain(&xf).copied().collect();
    let terminal = def.terminal_cost.eval(1.0, &ends);

    let running: f64 = grid
        .nodes()
        .iter()
        .zip(grid.weights())
        .enumerate()
        .map(|(k, (&t, &w))| {
            let mut y: Vec<f64> = states.iter().map(|s| s.nodal_values()[k]).collect();
            y.push(nodal_control[k]);
            w * def.running_cost.eval(t, &y)
        })
        .sum();

    let integral = integrate_adaptive(
        |t| {
            let mut y = control.state_at(t)?;
            y.push(control.eval(t)?);
            Ok(def.running_cost.eval(t, &y))
        },
        -1.0,
        1.0,
        QUADRATURE_TOLERANCE,
    )?;

    let derivatives: Vec<PolyInterpolant> = states.iter().map(|s| s.derivative()).collect();
    let mut defect: f64 = 0.0;
    for t in uniform(DEFECT_SAMPLES) {
        let x: Vec<f64> = states.iter().map(|s| s.eval_unchecked(t)).collect();
        for i in 0..r - 1 {
            let v = derivatives[i].eval_unchecked(t) - def.chain_rhs(i, t, &x);
            defect = defect.max(v.abs());
        }
    }

    Ok(ContinuousSolution {
        definition: def,
        states,
        control,
        nodal_control,
        discrete_cost: running + terminal,
        integrated_cost: integral.value + terminal,
        dynamics_defect: defect,
    })
}

/// Gaps between the interpolated states and an independent RK solution,
/// in the problem's original units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReintegrationErrors {
    pub max_state_error: f64,
    pub endpoint_error: f64,
}

/// Integrates the dynamics from `x^N(-1)` under `u^N(t)` with Dormand-Prince.
pub fn reintegrate(sol: &ContinuousSolution) -> Result<ReintegrationErrors> {
    let def = &sol.definition;
    let scale = def.state_scale();
    let x0 = sol.control.state_at(-1.0)?;
    let times: Vec<f64> = uniform(COMPARISON_SAMPLES).collect();
    let path = integrate_ode(
        |t, x| {
            let u = sol.control.eval(t.clamp(-1.0, 1.0))?;
            Ok(def.dynamics(t, x, u))
        },
        -1.0,
        &x0,
        &times,
        ODE_TOLERANCE,
        ODE_TOLERANCE,
    )?;
    let mut worst: f64 = 0.0;
    let mut last = 0.0;
    for (t, x) in times.iter().zip(&path) {
        let xn = sol.control.state_at(*t)?;
        let gap = x
            .iter()
            .zip(&xn)
            .zip(&scale)
            .fold(0.0f64, |a, ((p, q), s)| a.max((p - q).abs() / s));
        worst = worst.max(gap);
        last = gap;
    }
    Ok(ReintegrationErrors {
        max_state_error: worst,
        endpoint_error: last,
    })
}

/// Errors against the analytic reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkErrors {
    pub discrete_cost_error: f64,
    pub integrated_cost_error: f64,
    /// `max_k |u^N(t_k) - u*(t_k)|`.
    pub control_error: f64,
    /// Sup-norm state error on a uniform grid, original units.
    pub state_error: f64,
}

pub fn benchmark_errors(sol: &ContinuousSolution) -> Result<BenchmarkErrors> {
    let def = &sol.definition;
    let rf = def.reference()?;
    let grid = sol.states[0].grid();
    let mut control_error: f64 = 0.0;
    for &t in grid.nodes() {
        control_error = control_error.max((sol.control.eval(t)? - (rf.control)(t)).abs());
    }
    let scale = def.state_scale();
    let mut state_error: f64 = 0.0;
    for t in uniform(COMPARISON_SAMPLES) {
        let x = sol.control.state_at(t)?;
        let xs = (rf.states)(t);
        for ((a, b), s) in x.iter().zip(&xs).zip(&scale) {
            state_error = state_error.max((a - b).abs() / s);
        }
    }
    Ok(BenchmarkErrors {
        discrete_cost_error: (sol.discrete_cost - rf.cost).abs(),
        integrated_cost_error: (sol.integrated_cost - rf.cost).abs(),
        control_error,
        state_error,
    })
}
