//! Bolza problems in feedback-linearizable normal form.
//!
//! A problem has state `x in R^r`, scalar control `u`, and dynamics
//!
//! ```text
//! x_i' = phi_i(t, x)          i < r   (phi_i = x_{i+1} unless a chain map is set)
//! x_r' = f(t, x) + g(t, x) u
//! ```
//!
//! Callables use packed arguments: the running cost and path constraint
//! receive `[x_1, .., x_r, u]`, the terminal cost and endpoint constraint
//! receive `[x(t_start), x(t_end)]` (length `2r`).

use std::f64::consts::{E, PI};
use std::fmt;
use std::sync::Arc;

use crate::error::{OcpError, Result};

type ScalarValue = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;
type ScalarGradient = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;
type VectorValue = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;
type VectorJacobian = dyn Fn(f64, &[f64]) -> Vec<Vec<f64>> + Send + Sync;

/// Default relative step for central differences, `h = step * (1 + |x|)`.
pub const FD_STEP: f64 = 1e-6;

/// Scalar callable `(t, y) -> R` with an optional analytic gradient in `y`.
#[derive(Clone)]
pub struct SmoothFn {
    value: Arc<ScalarValue>,
    gradient: Option<Arc<ScalarGradient>>,
}

impl SmoothFn {
    pub fn new(value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        SmoothFn {
            value: Arc::new(value),
            gradient: None,
        }
    }

    /// Attaches an analytic gradient with respect to the packed argument.
    pub fn with_gradient(mut self, gradient: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn zero() -> Self {
        SmoothFn::new(|_, _| 0.0).with_gradient(|_, y| vec![0.0; y.len()])
    }

    pub fn constant(c: f64) -> Self {
        SmoothFn::new(move |_, _| c).with_gradient(|_, y| vec![0.0; y.len()])
    }

    /// `y -> y[index]`.
    pub fn coordinate(index: usize) -> Self {
        SmoothFn::new(move |_, y| y[index]).with_gradient(move |_, y| {
            let mut g = vec![0.0; y.len()];
            g[index] = 1.0;
            g
        })
    }

    pub fn eval(&self, t: f64, y: &[f64]) -> f64 {
        (self.value)(t, y)
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Analytic gradient when attached, central differences otherwise.
    pub fn gradient(&self, t: f64, y: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(g) => g(t, y),
            None => self.gradient_fd(t, y, FD_STEP),
        }
    }

    pub fn gradient_fd(&self, t: f64, y: &[f64], step: f64) -> Vec<f64> {
        let mut work = y.to_vec();
        (0..y.len())
            .map(|i| {
                let h = step * (1.0 + y[i].abs());
                work[i] = y[i] + h;
                let fp = self.eval(t, &work);
                work[i] = y[i] - h;
                let fm = self.eval(t, &work);
                work[i] = y[i];
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// `(t, y) -> self(t, M y)` for a diagonal `M`; gradients follow the chain rule.
    pub(crate) fn compose_diag(&self, scale: Vec<f64>, outer: f64, time: impl Fn(f64) -> f64 + Send + Sync + Clone + 'static) -> SmoothFn {
        let inner = self.clone();
        let s1 = Arc::new(scale);
        let s2 = s1.clone();
        let time2 = time.clone();
        let inner2 = self.clone();
        SmoothFn::new(move |t, y| {
            let z: Vec<f64> = y.iter().zip(s1.iter()).map(|(a, b)| a * b).collect();
            outer * inner.eval(time(t), &z)
        })
        .with_optional_gradient(self.has_gradient().then(|| {
            Arc::new(move |t: f64, y: &[f64]| {
                let z: Vec<f64> = y.iter().zip(s2.iter()).map(|(a, b)| a * b).collect();
                inner2
                    .gradient(time2(t), &z)
                    .iter()
                    .zip(s2.iter())
                    .map(|(g, s)| outer * g * s)
                    .collect::<Vec<f64>>()
            }) as Arc<ScalarGradient>
        }))
    }

    fn with_optional_gradient(mut self, gradient: Option<Arc<ScalarGradient>>) -> Self {
        self.gradient = gradient;
        self
    }
}

impl fmt::Debug for SmoothFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothFn")
            .field("analytic_gradient", &self.has_gradient())
            .finish()
    }
}

/// Vector-valued callable `(t, y) -> R^m` with an optional analytic Jacobian
/// (row-major, one row per output).
#[derive(Clone)]
pub struct VectorFn {
    dim: usize,
    value: Arc<VectorValue>,
    jacobian: Option<Arc<VectorJacobian>>,
}

impl VectorFn {
    pub fn new(dim: usize, value: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        VectorFn {
            dim,
            value: Arc::new(value),
            jacobian: None,
        }
    }

    pub fn with_jacobian(mut self, jacobian: impl Fn(f64, &[f64]) -> Vec<Vec<f64>> + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, t: f64, y: &[f64]) -> Vec<f64> {
        (self.value)(t, y)
    }

    pub fn jacobian(&self, t: f64, y: &[f64]) -> Vec<Vec<f64>> {
        if let Some(j) = &self.jacobian {
            return j(t, y);
        }
        let mut rows = vec![vec![0.0; y.len()]; self.dim];
        let mut work = y.to_vec();
        for i in 0..y.len() {
            let h = FD_STEP * (1.0 + y[i].abs());
            work[i] = y[i] + h;
            let fp = self.eval(t, &work);
            work[i] = y[i] - h;
            let fm = self.eval(t, &work);
            work[i] = y[i];
            for (row, (p, m)) in rows.iter_mut().zip(fp.iter().zip(&fm)) {
                row[i] = (p - m) / (2.0 * h);
            }
        }
        rows
    }

    fn compose_diag(&self, scale: Vec<f64>, time: impl Fn(f64) -> f64 + Send + Sync + Clone + 'static) -> VectorFn {
        let inner = self.clone();
        let s1 = Arc::new(scale);
        let s2 = s1.clone();
        let time2 = time.clone();
        let inner2 = self.clone();
        let mut out = VectorFn::new(self.dim, move |t, y| {
            let z: Vec<f64> = y.iter().zip(s1.iter()).map(|(a, b)| a * b).collect();
            inner.eval(time(t), &z)
        });
        if self.jacobian.is_some() {
            out = out.with_jacobian(move |t, y| {
                let z: Vec<f64> = y.iter().zip(s2.iter()).map(|(a, b)| a * b).collect();
                let mut rows = inner2.jacobian(time2(t), &z);
                for row in &mut rows {
                    for (v, s) in row.iter_mut().zip(s2.iter()) {
                        *v *= s;
                    }
                }
                rows
            });
        }
        out
    }
}

impl fmt::Debug for VectorFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorFn")
            .field("dim", &self.dim)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

type TimeCurve = dyn Fn(f64) -> Vec<f64> + Send + Sync;
type ScalarCurve = dyn Fn(f64) -> f64 + Send + Sync;

/// Known optimal solution used for benchmarking.
#[derive(Clone)]
pub struct AnalyticReference {
    pub states: Arc<TimeCurve>,
    pub control: Arc<ScalarCurve>,
    pub cost: f64,
}

impl fmt::Debug for AnalyticReference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticReference").field("cost", &self.cost).finish()
    }
}

/// Affine map between the canonical interval `[-1, 1]` and `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainMap {
    pub t_start: f64,
    pub t_end: f64,
    pub jacobian: f64,
}

impl DomainMap {
    pub fn new(t_start: f64, t_end: f64) -> Result<Self> {
        if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(OcpError::InvalidOptions(format!(
                "time interval [{t_start}, {t_end}] is empty or non-finite"
            )));
        }
        Ok(DomainMap {
            t_start,
            t_end,
            jacobian: (t_end - t_start) / 2.0,
        })
    }

    /// `tau in [-1, 1] -> t`.
    pub fn to_physical(&self, tau: f64) -> f64 {
        let mid = 0.5 * (self.t_start + self.t_end);
        mid + self.jacobian * tau
    }

    /// `t -> tau in [-1, 1]`.
    pub fn to_canonical(&self, t: f64) -> f64 {
        let mid = 0.5 * (self.t_start + self.t_end);
        (t - mid) / self.jacobian
    }

    pub fn is_identity(&self) -> bool {
        self.t_start == -1.0 && self.t_end == 1.0
    }
}

/// Scaling applied by [`to_canonical`]; `x_tilde_i = state_scale[i] * x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalScaling {
    pub map: DomainMap,
    pub state_scale: Vec<f64>,
}

/// A Bolza problem in normal form.
#[derive(Debug, Clone)]
pub struct OcpDefinition {
    pub name: String,
    pub order_r: usize,
    /// `F(t, [x, u])`.
    pub running_cost: SmoothFn,
    /// `E(t_end, [x(t_start), x(t_end)])`.
    pub terminal_cost: SmoothFn,
    pub drift: SmoothFn,
    pub gain: SmoothFn,
    /// `r - 1` entries; `None` keeps `x_i' = x_{i+1}`.
    pub chain_maps: Vec<Option<SmoothFn>>,
    pub endpoint_constraint: Option<VectorFn>,
    pub path_constraint: Option<VectorFn>,
    pub initial_state: Option<Vec<f64>>,
    pub time_interval: (f64, f64),
    pub analytic_reference: Option<AnalyticReference>,
    /// Declared smoothness `m` of the optimal trajectory.
    pub smoothness: Option<usize>,
    /// Preferred regularization order when none is given.
    pub default_m1: Option<usize>,
    /// Fixed box for states and control (`r + 1` entries), replacing the
    /// automatic bound for that component.
    pub box_override: Vec<Option<(f64, f64)>>,
    /// Endpoint states used to build a cold-start guess.
    pub endpoint_hint: Option<(Vec<f64>, Vec<f64>)>,
    /// Set once the problem has been mapped onto `[-1, 1]`.
    pub scaling: Option<CanonicalScaling>,
}

impl OcpDefinition {
    /// Problem on `time_interval` with the strict chain, zero costs and no constraints.
    pub fn normal_form(name: &str, order_r: usize, time_interval: (f64, f64)) -> Self {
        let r = order_r.max(1);
        OcpDefinition {
            name: name.to_string(),
            order_r: r,
            running_cost: SmoothFn::zero(),
            terminal_cost: SmoothFn::zero(),
            drift: SmoothFn::zero(),
            gain: SmoothFn::constant(1.0),
            chain_maps: vec![None; r - 1],
            endpoint_constraint: None,
            path_constraint: None,
            initial_state: None,
            time_interval,
            analytic_reference: None,
            smoothness: None,
            default_m1: None,
            box_override: vec![None; r + 1],
            endpoint_hint: None,
            scaling: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.order_r;
        if r == 0 {
            return Err(OcpError::Dimension("order r must be at least 1".into()));
        }
        DomainMap::new(self.time_interval.0, self.time_interval.1)?;
        if self.chain_maps.len() != r - 1 {
            return Err(OcpError::Dimension(format!(
                "expected {} chain maps, found {}",
                r - 1,
                self.chain_maps.len()
            )));
        }
        if self.box_override.len() != r + 1 {
            return Err(OcpError::Dimension(format!(
                "expected {} box entries, found {}",
                r + 1,
                self.box_override.len()
            )));
        }
        match (&self.initial_state, &self.endpoint_constraint) {
            (Some(x0), None) if x0.len() == r => Ok(()),
            (Some(x0), None) => Err(OcpError::LengthMismatch {
                expected: r,
                found: x0.len(),
            }),
            (None, Some(_)) => Ok(()),
            _ => Err(OcpError::InvalidOptions(
                "exactly one of initial_state and endpoint_constraint must be set".into(),
            )),
        }
    }

    /// `true` when the problem uses relaxed endpoint constraints.
    pub fn is_endpoint_form(&self) -> bool {
        self.endpoint_constraint.is_some()
    }

    /// Right-hand side of chain level `i < r - 1` (0-based).
    pub fn chain_rhs(&self, level: usize, t: f64, x: &[f64]) -> f64 {
        match &self.chain_maps[level] {
            Some(map) => map.eval(t, x),
            None => x[level + 1],
        }
    }

    /// Full right-hand side `x'(t)` for control `u`.
    pub fn dynamics(&self, t: f64, x: &[f64], u: f64) -> Vec<f64> {
        let r = self.order_r;
        let mut dx: Vec<f64> = (0..r - 1).map(|i| self.chain_rhs(i, t, x)).collect();
        dx.push(self.drift.eval(t, x) + self.gain.eval(t, x) * u);
        dx
    }

    pub fn state_scale(&self) -> Vec<f64> {
        match &self.scaling {
            Some(s) => s.state_scale.clone(),
            None => vec![1.0; self.order_r],
        }
    }

    pub fn reference(&self) -> Result<&AnalyticReference> {
        self.analytic_reference
            .as_ref()
            .ok_or_else(|| OcpError::MissingReference(self.name.clone()))
    }
}

/// Rewrites a problem on `[-1, 1]` while keeping the normal form.
///
/// With `J = (t_end - t_start)/2` and `x_tilde_i = J^(i-1) x_i`, every chain
/// level becomes `x_tilde_i' = s_i J phi_i(t, S^-1 x_tilde)`, which reduces
/// to `x_tilde_{i+1}` for the identity map. The control is unchanged.
pub fn to_canonical(def: &OcpDefinition) -> Result<OcpDefinition> {
    def.validate()?;
    if def.scaling.is_some() {
        return Ok(def.clone());
    }
    let map = DomainMap::new(def.time_interval.0, def.time_interval.1)?;
    let r = def.order_r;
    let jac = map.jacobian;
    let scale: Vec<f64> = (0..r).map(|i| jac.powi(i as i32)).collect();
    let inv: Vec<f64> = scale.iter().map(|s| 1.0 / s).collect();
    let time = move |tau: f64| map.to_physical(tau);

    let mut inv_u = inv.clone();
    inv_u.push(1.0);
    let inv_ends: Vec<f64> = inv.iter().chain(inv.iter()).copied().collect();

    let chain_maps = def
        .chain_maps
        .iter()
        .enumerate()
        .map(|(i, m)| m.as_ref().map(|m| m.compose_diag(inv.clone(), scale[i] * jac, time)))
        .collect();

    let reference = def.analytic_reference.as_ref().map(|rf| {
        let states = rf.states.clone();
        let control = rf.control.clone();
        let s = scale.clone();
        AnalyticReference {
            states: Arc::new(move |tau| {
                states(map.to_physical(tau))
                    .iter()
                    .zip(&s)
                    .map(|(x, s)| x * s)
                    .collect()
            }),
            control: Arc::new(move |tau| control(map.to_physical(tau))),
            cost: rf.cost,
        }
    });

    let scale_vec = |v: &Vec<f64>| v.iter().zip(&scale).map(|(x, s)| x * s).collect::<Vec<f64>>();
    let mut box_override = def.box_override.clone();
    for (entry, s) in box_override.iter_mut().zip(&scale) {
        if let Some((lo, hi)) = entry {
            *entry = Some((*lo * s, *hi * s));
        }
    }

    Ok(OcpDefinition {
        name: def.name.clone(),
        order_r: r,
        running_cost: def.running_cost.compose_diag(inv_u.clone(), jac, time),
        terminal_cost: def.terminal_cost.compose_diag(inv_ends.clone(), 1.0, |t| t),
        drift: def.drift.compose_diag(inv.clone(), scale[r - 1] * jac, time),
        gain: def.gain.compose_diag(inv.clone(), scale[r - 1] * jac, time),
        chain_maps,
        endpoint_constraint: def
            .endpoint_constraint
            .as_ref()
            .map(|e| e.compose_diag(inv_ends.clone(), |t| t)),
        path_constraint: def
            .path_constraint
            .as_ref()
            .map(|h| h.compose_diag(inv_u.clone(), time)),
        initial_state: def.initial_state.as_ref().map(scale_vec),
        time_interval: (-1.0, 1.0),
        analytic_reference: reference,
        smoothness: def.smoothness,
        default_m1: def.default_m1,
        box_override,
        endpoint_hint: def
            .endpoint_hint
            .as_ref()
            .map(|(a, b)| (scale_vec(a), scale_vec(b))),
        scaling: Some(CanonicalScaling {
            map,
            state_scale: scale,
        }),
    })
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 3] = ["counterexample", "cubic_chain", "sine_tracking"];

/// One-line descriptions for listing.
pub fn builtin_summary(name: &str) -> Option<&'static str> {
    match name {
        "counterexample" => Some("min int (x-u)^2/u^4, x' = u, x(-1) = 1/e; no discrete minimum without bounds"),
        "cubic_chain" => Some("min 4x1(2) + x2(2) + 4 int u^2, x1' = x2^3, x2' = u, x(0) = (0, 1)"),
        "sine_tracking" => Some("min int (1 - x1 + x1 x2 + x1 u)^2 on [0, pi] with fixed endpoints, optimal cost 0"),
        _ => None,
    }
}

/// Optimal cost of `cubic_chain`, from the closed-form solution.
pub const CUBIC_CHAIN_COST: f64 = 3.35;

pub fn builtin(name: &str) -> Result<OcpDefinition> {
    match name {
        "counterexample" => Ok(counterexample()),
        "cubic_chain" => Ok(cubic_chain()),
        "sine_tracking" => Ok(sine_tracking()),
        other => Err(OcpError::UnknownProblem(other.to_string())),
    }
}

fn counterexample() -> OcpDefinition {
    let mut def = OcpDefinition::normal_form("counterexample", 1, (-1.0, 1.0));
    def.running_cost = SmoothFn::new(|_, y| {
        let (x, u) = (y[0], y[1]);
        (x - u).powi(2) / u.powi(4)
    })
    .with_gradient(|_, y| {
        let (x, u) = (y[0], y[1]);
        let d = x - u;
        vec![2.0 * d / u.powi(4), -2.0 * d / u.powi(4) - 4.0 * d * d / u.powi(5)]
    });
    def.initial_state = Some(vec![(-1.0f64).exp()]);
    def.analytic_reference = Some(AnalyticReference {
        states: Arc::new(|t: f64| vec![t.exp()]),
        control: Arc::new(f64::exp),
        cost: 0.0,
    });
    def.smoothness = Some(8);
    def.default_m1 = Some(1);
    def.endpoint_hint = Some((vec![(-1.0f64).exp()], vec![E]));
    def
}

fn cubic_chain() -> OcpDefinition {
    let mut def = OcpDefinition::normal_form("cubic_chain", 2, (0.0, 2.0));
    def.running_cost = SmoothFn::new(|_, y| 4.0 * y[2] * y[2]).with_gradient(|_, y| vec![0.0, 0.0, 8.0 * y[2]]);
    def.terminal_cost =
        SmoothFn::new(|_, y| 4.0 * y[2] + y[3]).with_gradient(|_, _| vec![0.0, 0.0, 4.0, 1.0]);
    def.chain_maps = vec![Some(
        SmoothFn::new(|_, x| x[1].powi(3)).with_gradient(|_, x| vec![0.0, 3.0 * x[1] * x[1]]),
    )];
    def.initial_state = Some(vec![0.0, 1.0]);
    def.analytic_reference = Some(AnalyticReference {
        states: Arc::new(|t: f64| {
            let s = 2.0 + t;
            vec![64.0 / 5.0 * (1.0 / 32.0 - 1.0 / s.powi(5)), 4.0 / (s * s)]
        }),
        control: Arc::new(|t: f64| -8.0 / (2.0 + t).powi(3)),
        cost: CUBIC_CHAIN_COST,
    });
    def.smoothness = Some(8);
    def.default_m1 = Some(2);
    def.endpoint_hint = Some((vec![0.0, 1.0], vec![0.0, 1.0]));
    def
}

fn sine_tracking() -> OcpDefinition {
    let mut def = OcpDefinition::normal_form("sine_tracking", 2, (0.0, PI));
    def.running_cost = SmoothFn::new(|_, y| {
        let (x1, x2, u) = (y[0], y[1], y[2]);
        (1.0 - x1 + x1 * x2 + x1 * u).powi(2)
    })
    .with_gradient(|_, y| {
        let (x1, x2, u) = (y[0], y[1], y[2]);
        let s = 1.0 - x1 + x1 * x2 + x1 * u;
        vec![2.0 * s * (-1.0 + x2 + u), 2.0 * s * x1, 2.0 * s * x1]
    });
    def.chain_maps = vec![Some(
        SmoothFn::new(|_, x| -x[0] * x[0] * x[1]).with_gradient(|_, x| vec![-2.0 * x[0] * x[1], -x[0] * x[0]]),
    )];
    def.drift = SmoothFn::new(|t, x| -1.0 + 1.0 / x[0] + x[1] + t.sin())
        .with_gradient(|_, x| vec![-1.0 / (x[0] * x[0]), 1.0]);
    let target = [1.0 / (PI + 1.0), 2.0];
    def.endpoint_constraint = Some(
        VectorFn::new(4, move |_, y| vec![y[0] - 1.0, y[1], y[2] - target[0], y[3] - target[1]]).with_jacobian(
            |_, _| {
                (0..4)
                    .map(|i| {
                        let mut row = vec![0.0; 4];
                        row[i] = 1.0;
                        row
                    })
                    .collect()
            },
        ),
    );
    def.analytic_reference = Some(AnalyticReference {
        states: Arc::new(|t: f64| vec![1.0 / (1.0 - t.sin() + t), 1.0 - t.cos()]),
        control: Arc::new(|t: f64| -(t + 1.0) + t.sin() + t.cos()),
        cost: 0.0,
    });
    def.smoothness = Some(8);
    def.default_m1 = Some(2);
    def.box_override = vec![Some((0.1, 2.0)), None, None];
    def.endpoint_hint = Some((vec![1.0, 0.0], target.to_vec()));
    def
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_residual(def: &OcpDefinition) -> f64 {
        let rf = def.reference().unwrap();
        let (a, b) = def.time_interval;
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for i in 0..=1000 {
            let t = (a + (b - a) * (i as f64) / 1000.0).clamp(a + 2.0 * h, b - 2.0 * h);
            let rhs = def.dynamics(t, &(rf.states)(t), (rf.control)(t));
            let at = |s: f64| (rf.states)(t + s * h);
            let (p1, m1, p2, m2, p3, m3) = (at(1.0), at(-1.0), at(2.0), at(-2.0), at(3.0), at(-3.0));
            for k in 0..def.order_r {
                // sixth-order central difference
                let d = (45.0 * (p1[k] - m1[k]) - 9.0 * (p2[k] - m2[k]) + (p3[k] - m3[k])) / (60.0 * h);
                worst = worst.max((d - rhs[k]).abs());
            }
        }
        worst
    }

    #[test]
    fn builtin_references_satisfy_dynamics() {
        for name in BUILTIN_NAMES {
            let def = builtin(name).unwrap();
            def.validate().unwrap();
            let res = reference_residual(&def);
            assert!(res < 1e-10, "{name}: {res:e}");
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(builtin("nope"), Err(OcpError::UnknownProblem(_))));
    }

    #[test]
    fn counterexample_reference_cost_is_zero() {
        assert_eq!(builtin("counterexample").unwrap().reference().unwrap().cost, 0.0);
    }

    #[test]
    fn sine_tracking_terminal_value() {
        let def = builtin("sine_tracking").unwrap();
        let x = (def.reference().unwrap().states)(PI);
        assert!((x[0] - 1.0 / (PI + 1.0)).abs() < 1e-15);
        assert!((x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn domain_map_round_trip() {
        let m = DomainMap::new(0.0, PI).unwrap();
        for i in 0..=100 {
            let tau = -1.0 + 0.02 * i as f64;
            assert!((m.to_canonical(m.to_physical(tau)) - tau).abs() < 1e-14);
        }
        assert_eq!(m.to_physical(-1.0), 0.0);
        assert!((m.to_physical(1.0) - PI).abs() < 1e-15);
        assert!(DomainMap::new(1.0, 1.0).is_err());
    }

    #[test]
    fn canonical_identity_interval() {
        let def = builtin("counterexample").unwrap();
        let c = to_canonical(&def).unwrap();
        assert_eq!(c.state_scale(), vec![1.0]);
        let y = [0.7, 1.3];
        assert_eq!(c.running_cost.eval(0.2, &y), def.running_cost.eval(0.2, &y));
        assert_eq!((c.analytic_reference.unwrap().control)(0.3), 0.3f64.exp());
    }

    #[test]
    fn canonical_translation_keeps_dynamics() {
        let def = builtin("cubic_chain").unwrap();
        let c = to_canonical(&def).unwrap();
        let x = [0.2, 0.9];
        assert_eq!(c.dynamics(0.0, &x, -0.5), def.dynamics(1.0, &x, -0.5));
        let rf = c.reference().unwrap();
        let orig = def.reference().unwrap();
        for tau in [-1.0, -0.3, 0.4, 1.0] {
            let a = (rf.states)(tau);
            let b = (orig.states)(tau + 1.0);
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_dilation_preserves_chain() {
        let def = builtin("sine_tracking").unwrap();
        let c = to_canonical(&def).unwrap();
        let j = PI / 2.0;
        assert_eq!(c.state_scale(), vec![1.0, j]);
        let rf = c.reference().unwrap();
        let h = 1e-5;
        for tau in [-0.8, -0.1, 0.5, 0.9] {
            let x = (rf.states)(tau);
            let rhs = c.dynamics(tau, &x, (rf.control)(tau));
            for k in 0..2 {
                let d = ((rf.states)(tau + h)[k] - (rf.states)(tau - h)[k]) / (2.0 * h);
                assert!((d - rhs[k]).abs() < 1e-8, "{k}: {d} vs {}", rhs[k]);
            }
            let mut y = x.clone();
            y.push((rf.control)(tau));
            assert!(c.running_cost.eval(tau, &y).abs() < 1e-24);
        }
        let e = c.endpoint_constraint.as_ref().unwrap();
        let ends: Vec<f64> = (rf.states)(-1.0).into_iter().chain((rf.states)(1.0)).collect();
        assert!(e.eval(0.0, &ends).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn canonical_analytic_gradients_match_differences() {
        let c = to_canonical(&builtin("sine_tracking").unwrap()).unwrap();
        let y = [0.6, 0.4, -0.2];
        let ga = c.running_cost.gradient(0.3, &y);
        let gf = c.running_cost.gradient_fd(0.3, &y, 1e-6);
        for (a, b) in ga.iter().zip(&gf) {
            assert!((a - b).abs() < 1e-8);
        }
        let x = [0.6, 0.4];
        let ga = c.drift.gradient(0.3, &x);
        let gf = c.drift.gradient_fd(0.3, &x, 1e-6);
        for (a, b) in ga.iter().zip(&gf) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn reference_round_trip_through_canonical_map() {
        for name in BUILTIN_NAMES {
            let def = builtin(name).unwrap();
            let c = to_canonical(&def).unwrap();
            let scaling = c.scaling.clone().unwrap();
            let (rc, ro) = (c.reference().unwrap(), def.reference().unwrap());
            for i in 0..=50 {
                let tau = -1.0 + 0.04 * i as f64;
                let t = scaling.map.to_physical(tau);
                let xc = (rc.states)(tau);
                let xo = (ro.states)(t);
                for k in 0..def.order_r {
                    assert!((xc[k] / scaling.state_scale[k] - xo[k]).abs() < 1e-12);
                }
                assert!(((rc.control)(tau) - (ro.control)(t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn validation_requires_one_boundary_form() {
        let mut def = builtin("cubic_chain").unwrap();
        def.endpoint_constraint = Some(VectorFn::new(1, |_, y| vec![y[0]]));
        assert!(def.validate().is_err());
        def.initial_state = None;
        assert!(def.validate().is_ok());
        def.endpoint_constraint = None;
        assert!(def.validate().is_err());
    }
}
