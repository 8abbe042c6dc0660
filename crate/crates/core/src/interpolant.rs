//! Continuous reconstruction of nodal data.
//!
//! States are represented by their degree-`N` Lagrange interpolants on the
//! LGL grid, evaluated in barycentric form. The control is not a polynomial:
//! it is recovered from the last state equation,
//! `u(t) = (x_r'(t) - f(t, x(t))) / g(t, x(t))`.

use std::sync::Arc;

use crate::error::{OcpError, Result};
use crate::problem::SmoothFn;
use crate::quadrature::{legendre_table, QuadratureGrid};

/// Evaluation points closer than this to a node return the nodal value.
pub const NODE_COINCIDENCE: f64 = 1e-14;

/// `|g(x)|` at or below this is reported as singular dynamics.
pub const GAIN_FLOOR: f64 = 1e-10;

const DOMAIN_SLACK: f64 = 1e-12;

/// Barycentric Lagrange interpolant through the nodes of a grid.
#[derive(Debug, Clone)]
pub struct PolyInterpolant {
    grid: Arc<QuadratureGrid>,
    nodal_values: Vec<f64>,
    barycentric_weights: Arc<Vec<f64>>,
}

/// Barycentric weights of an LGL grid.
///
/// For these nodes the weights are proportional to `1 / L_N(t_k)`, the
/// same ratio that appears in the off-diagonal entries of `D`.
pub fn barycentric_weights(grid: &QuadratureGrid) -> Vec<f64> {
    grid.legendre_at_nodes().iter().map(|l| 1.0 / l).collect()
}

impl PolyInterpolant {
    pub fn new(grid: Arc<QuadratureGrid>, nodal_values: Vec<f64>) -> Result<Self> {
        grid.check_len(nodal_values.len())?;
        let barycentric_weights = Arc::new(barycentric_weights(&grid));
        Ok(PolyInterpolant {
            grid,
            nodal_values,
            barycentric_weights,
        })
    }

    /// Samples `f` at the grid nodes.
    pub fn from_fn(grid: Arc<QuadratureGrid>, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().iter().map(|&t| f(t)).collect();
        PolyInterpolant::new(grid, values).expect("sampled length always matches")
    }

    pub fn grid(&self) -> &Arc<QuadratureGrid> {
        &self.grid
    }

    pub fn nodal_values(&self) -> &[f64] {
        &self.nodal_values
    }

    pub fn barycentric_weights(&self) -> &[f64] {
        &self.barycentric_weights
    }

    /// Evaluates the interpolant at `t` in `[-1, 1]`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        check_domain(t)?;
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> f64 {
        let nodes = self.grid.nodes();
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, (&tk, &lam)) in nodes.iter().zip(self.barycentric_weights.iter()).enumerate() {
            let diff = t - tk;
            if diff.abs() < NODE_COINCIDENCE {
                return self.nodal_values[k];
            }
            let c = lam / diff;
            num += c * self.nodal_values[k];
            den += c;
        }
        num / den
    }

    /// The interpolant of `D * nodal_values`, i.e. the exact derivative.
    pub fn derivative(&self) -> PolyInterpolant {
        PolyInterpolant {
            grid: self.grid.clone(),
            nodal_values: self.grid.apply_diff(&self.nodal_values),
            barycentric_weights: self.barycentric_weights.clone(),
        }
    }

    /// Coefficients `c_0 .. c_N` of the Legendre expansion of the interpolant.
    ///
    /// Uses the discrete transform, which is exact for polynomials of
    /// degree `N`: the top mode is normalised by the discrete norm
    /// `sum_k w_k L_N(t_k)^2 = 2 / N` instead of `2 / (2N + 1)`.
    pub fn legendre_coefficients(&self) -> Vec<f64> {
        let n = self.grid.order();
        let mut coeffs = vec![0.0; n + 1];
        for ((&t, &w), &v) in self
            .grid
            .nodes()
            .iter()
            .zip(self.grid.weights())
            .zip(&self.nodal_values)
        {
            let table = legendre_table(n, t);
            for (c, l) in coeffs.iter_mut().zip(&table) {
                *c += w * l * v;
            }
        }
        for (j, c) in coeffs.iter_mut().enumerate() {
            if j < n {
                *c *= j as f64 + 0.5;
            } else {
                *c *= n as f64 / 2.0;
            }
        }
        coeffs
    }

    /// Lagrange basis values `phi_k(t)` at an arbitrary point.
    pub(crate) fn basis_at(grid: &QuadratureGrid, weights: &[f64], t: f64) -> Vec<f64> {
        let nodes = grid.nodes();
        let mut out = vec![0.0; nodes.len()];
        if let Some(k) = nodes.iter().position(|&tk| (t - tk).abs() < NODE_COINCIDENCE) {
            out[k] = 1.0;
            return out;
        }
        let mut den = 0.0;
        for ((o, &tk), &lam) in out.iter_mut().zip(nodes).zip(weights) {
            *o = lam / (t - tk);
            den += *o;
        }
        for o in &mut out {
            *o /= den;
        }
        out
    }
}

pub fn eval_state(interp: &PolyInterpolant, t: f64) -> Result<f64> {
    interp.eval(t)
}

pub fn derivative_interpolant(interp: &PolyInterpolant) -> PolyInterpolant {
    interp.derivative()
}

fn check_domain(t: f64) -> Result<()> {
    if !(t.abs() <= 1.0 + DOMAIN_SLACK) {
        return Err(OcpError::Domain { value: t });
    }
    Ok(())
}

/// Non-polynomial control reconstruction from state interpolants.
#[derive(Debug, Clone)]
pub struct ControlReconstruction {
    states: Vec<PolyInterpolant>,
    state_derivative: PolyInterpolant,
    drift: SmoothFn,
    gain: SmoothFn,
}

impl ControlReconstruction {
    /// `states` must hold the `r` state interpolants; the derivative of the
    /// last one drives the reconstruction.
    pub fn new(states: Vec<PolyInterpolant>, drift: SmoothFn, gain: SmoothFn) -> Result<Self> {
        let last = states
            .last()
            .ok_or_else(|| OcpError::Dimension("control reconstruction needs at least one state".into()))?;
        let state_derivative = last.derivative();
        Ok(ControlReconstruction {
            states,
            state_derivative,
            drift,
            gain,
        })
    }

    pub fn states(&self) -> &[PolyInterpolant] {
        &self.states
    }

    pub fn state_derivative(&self) -> &PolyInterpolant {
        &self.state_derivative
    }

    /// State vector `x^N(t)`.
    pub fn state_at(&self, t: f64) -> Result<Vec<f64>> {
        check_domain(t)?;
        Ok(self.states.iter().map(|s| s.eval_unchecked(t)).collect())
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        let x = self.state_at(t)?;
        let dx = self.state_derivative.eval_unchecked(t);
        control_from_state(&self.drift, &self.gain, t, &x, dx, None)
    }
}

pub fn eval_control(rec: &ControlReconstruction, t: f64) -> Result<f64> {
    rec.eval(t)
}

/// `(dx_r - f(t, x)) / g(t, x)` with the singularity check.
pub(crate) fn control_from_state(
    drift: &SmoothFn,
    gain: &SmoothFn,
    t: f64,
    x: &[f64],
    dx_last: f64,
    node: Option<usize>,
) -> Result<f64> {
    let g = gain.eval(t, x);
    if !(g.abs() > GAIN_FLOOR) {
        return Err(OcpError::SingularDynamics { t, gain: g.abs(), node });
    }
    Ok((dx_last - drift.eval(t, x)) / g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::lgl_grid;

    fn grid(n: usize) -> Arc<QuadratureGrid> {
        Arc::new(lgl_grid(n).unwrap())
    }

    #[test]
    fn constant_is_reproduced_everywhere() {
        let p = PolyInterpolant::from_fn(grid(7), |_| 1.0);
        for t in [-1.0, -0.77, 0.0, 0.123, 0.999, 1.0] {
            assert!((p.eval(t).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_data_on_order_three_grid() {
        let p = PolyInterpolant::from_fn(grid(3), |t| t);
        assert!((p.eval(0.3).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sine_on_order_twelve_grid() {
        let p = PolyInterpolant::from_fn(grid(12), f64::sin);
        assert!((p.eval(0.5).unwrap() - 0.5f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn nodes_return_stored_values() {
        let g = grid(9);
        let p = PolyInterpolant::from_fn(g.clone(), |t| (3.0 * t).exp());
        for (k, &t) in g.nodes().iter().enumerate() {
            assert_eq!(p.eval(t).unwrap(), p.nodal_values()[k]);
        }
    }

    #[test]
    fn evaluation_outside_interval_is_rejected() {
        let p = PolyInterpolant::from_fn(grid(4), |t| t);
        assert!(matches!(p.eval(1.1), Err(OcpError::Domain { .. })));
        assert!(matches!(p.eval(-1.0 - 1e-9), Err(OcpError::Domain { .. })));
        assert!(p.eval(1.0 + 1e-13).is_ok());
    }

    #[test]
    fn barycentric_weights_match_product_formula() {
        let g = grid(6);
        let lam = barycentric_weights(&g);
        let nodes = g.nodes();
        let direct: Vec<f64> = (0..nodes.len())
            .map(|k| {
                1.0 / (0..nodes.len())
                    .filter(|&j| j != k)
                    .map(|j| nodes[k] - nodes[j])
                    .product::<f64>()
            })
            .collect();
        let ratio = direct[0] / lam[0];
        for (d, l) in direct.iter().zip(&lam) {
            assert!((d / l - ratio).abs() < 1e-12 * ratio.abs());
        }
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let p = PolyInterpolant::from_fn(grid(8), |_| 2.5);
        let d = p.derivative();
        assert!(d.nodal_values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn derivative_drops_top_legendre_mode() {
        let g = grid(8);
        let p = PolyInterpolant::from_fn(g, |t| t.powi(8) - 0.3 * t.powi(5) + t);
        let c = p.legendre_coefficients();
        assert!(c[8].abs() > 1e-3);
        let dc = p.derivative().legendre_coefficients();
        assert!(dc[8].abs() < 1e-11, "{}", dc[8]);
    }

    #[test]
    fn legendre_coefficients_recover_basis_polynomial() {
        let g = grid(10);
        for degree in [0usize, 3, 10] {
            let p = PolyInterpolant::from_fn(g.clone(), |t| legendre_table(degree, t)[degree]);
            let c = p.legendre_coefficients();
            for (j, cj) in c.iter().enumerate() {
                let expected = if j == degree { 1.0 } else { 0.0 };
                assert!((cj - expected).abs() < 1e-12, "degree {degree}, mode {j}: {cj}");
            }
        }
    }

    #[test]
    fn resampling_is_idempotent() {
        let g = grid(11);
        let p = PolyInterpolant::from_fn(g.clone(), |t| (t * 2.0).cos());
        let again = PolyInterpolant::from_fn(g, |t| p.eval(t).unwrap());
        assert_eq!(p.nodal_values(), again.nodal_values());
    }

    #[test]
    fn control_of_integrator_is_state_derivative() {
        let g = grid(4);
        let x = PolyInterpolant::from_fn(g, |t| t * t);
        let rec = ControlReconstruction::new(
            vec![x],
            SmoothFn::new(|_, _| 0.0),
            SmoothFn::new(|_, _| 1.0),
        )
        .unwrap();
        assert!((rec.eval(0.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vanishing_gain_is_singular() {
        let g = grid(4);
        let x = PolyInterpolant::from_fn(g, |t| t);
        let rec = ControlReconstruction::new(
            vec![x],
            SmoothFn::new(|_, _| 0.0),
            SmoothFn::new(|_, x| x[0]),
        )
        .unwrap();
        assert!(matches!(rec.eval(0.0), Err(OcpError::SingularDynamics { .. })));
        assert!(rec.eval(0.5).is_ok());
    }
}
