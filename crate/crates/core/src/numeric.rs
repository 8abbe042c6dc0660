//! Adaptive integration: Gauss-Kronrod quadrature and Dormand-Prince ODE steps.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{OcpError, Result};

/// Absolute tolerance used wherever an "exact" integral is required.
pub const QUADRATURE_TOLERANCE: f64 = 1e-12;

/// Relative and absolute tolerance of the reference ODE integrator.
pub const ODE_TOLERANCE: f64 = 1e-11;

const MAX_PANELS: usize = 20_000;
const MAX_STEPS: usize = 2_000_000;

#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];

#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

/// Gauss weights for the odd-indexed Kronrod abscissae (1, 3, 5) and the centre.
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// The fifteen Kronrod points and weights mapped onto `[a, b]`.
pub fn kronrod_points(a: f64, b: f64) -> [(f64, f64); 15] {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut out = [(0.0, 0.0); 15];
    for j in 0..7 {
        out[2 * j] = (c - h * XGK[j], h * WGK[j]);
        out[2 * j + 1] = (c + h * XGK[j], h * WGK[j]);
    }
    out[14] = (c, h * WGK[7]);
    out
}

fn gk15(f: &mut impl FnMut(f64) -> Result<f64>, a: f64, b: f64) -> Result<(f64, f64)> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let pair = f(c - h * XGK[j])? + f(c + h * XGK[j])?;
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Ok((kronrod * h, ((kronrod - gauss) * h).abs()))
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.a.total_cmp(&self.a))
    }
}

/// Result of [`integrate_adaptive`]; `panels` is sorted by left endpoint.
#[derive(Debug, Clone)]
pub struct AdaptiveIntegral {
    pub value: f64,
    pub error: f64,
    pub panels: Vec<(f64, f64)>,
}

/// Globally adaptive G7/K15 quadrature to absolute tolerance `tol`.
///
/// The panel with the largest error estimate is bisected until the summed
/// estimate drops below `tol`.
pub fn integrate_adaptive(mut f: impl FnMut(f64) -> Result<f64>, a: f64, b: f64, tol: f64) -> Result<AdaptiveIntegral> {
    let (value, error) = gk15(&mut f, a, b)?;
    check_finite(value, a)?;
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, value, error });
    let mut total_error = error;
    while total_error > tol {
        if heap.len() >= MAX_PANELS {
            return Err(OcpError::Integration {
                t: heap.peek().map_or(a, |p| p.a),
                reason: format!("panel limit reached with error estimate {total_error:e}"),
            });
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if !(mid > worst.a && mid < worst.b) {
            return Err(OcpError::Integration {
                t: worst.a,
                reason: "panel width underflow".into(),
            });
        }
        let (v1, e1) = gk15(&mut f, worst.a, mid)?;
        let (v2, e2) = gk15(&mut f, mid, worst.b)?;
        check_finite(v1 + v2, worst.a)?;
        total_error += e1 + e2 - worst.error;
        heap.push(Panel { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Panel { a: mid, b: worst.b, value: v2, error: e2 });
        // Refresh the running sum occasionally to avoid cancellation drift.
        if heap.len() % 64 == 0 {
            total_error = heap.iter().map(|p| p.error).sum();
        }
    }
    let mut panels: Vec<Panel> = heap.into_vec();
    panels.sort_by(|p, q| p.a.total_cmp(&q.a));
    Ok(AdaptiveIntegral {
        value: panels.iter().map(|p| p.value).sum(),
        error: panels.iter().map(|p| p.error).sum(),
        panels: panels.iter().map(|p| (p.a, p.b)).collect(),
    })
}

fn check_finite(v: f64, t: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(OcpError::Integration {
            t,
            reason: "non-finite integrand".into(),
        })
    }
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn axpy(y: &[f64], terms: &[(f64, &[f64])], h: f64) -> Vec<f64> {
    y.iter()
        .enumerate()
        .map(|(i, &yi)| yi + h * terms.iter().map(|(c, k)| c * k[i]).sum::<f64>())
        .collect()
}

/// Integrates `y' = f(t, y)` from `t0` and returns the state at every time in
/// `outputs` (ascending, all `>= t0`). Steps are clipped to land on each output.
pub fn integrate_ode(
    mut f: impl FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    t0: f64,
    y0: &[f64],
    outputs: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Vec<Vec<f64>>> {
    let span = outputs.last().map_or(0.0, |&t| t - t0);
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = f(t, &y)?;
    let mut h = if span > 0.0 { 1e-3 * span } else { 0.0 };
    let mut out = Vec::with_capacity(outputs.len());
    let mut steps = 0usize;
    for &target in outputs {
        if target < t {
            return Err(OcpError::Integration {
                t: target,
                reason: "output times must be ascending".into(),
            });
        }
        while t < target {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(OcpError::Integration { t, reason: "step limit reached".into() });
            }
            let last = h >= target - t;
            let step = if last { target - t } else { h };
            let k2 = f(t + C2 * step, &axpy(&y, &[(A21, &k1)], step))?;
            let k3 = f(t + C3 * step, &axpy(&y, &[(A31, &k1), (A32, &k2)], step))?;
            let k4 = f(t + C4 * step, &axpy(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)], step))?;
            let k5 = f(
                t + C5 * step,
                &axpy(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], step),
            )?;
            let k6 = f(
                t + step,
                &axpy(&y, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)], step),
            )?;
            let y_new = axpy(&y, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)], step);
            let t_new = if last { target } else { t + step };
            let k7 = f(t_new, &y_new)?;
            let mut err: f64 = 0.0;
            for i in 0..y.len() {
                let e = step * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = atol + rtol * y[i].abs().max(y_new[i].abs());
                err = err.max((e / sc).abs());
            }
            if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                err = f64::INFINITY;
            }
            if err <= 1.0 {
                t = t_new;
                y = y_new;
                k1 = k7;
                let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if !last || grow < 1.0 {
                    h = step * grow;
                }
            } else {
                let shrink = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.1, 1.0) } else { 0.1 };
                h = step * shrink;
            }
            if h <= 1e-14 * t.abs().max(1.0) {
                return Err(OcpError::Integration { t, reason: "step size underflow".into() });
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn kronrod_rule_integrates_smooth_functions() {
        let r = integrate_adaptive(|x| Ok(x.sin()), 0.0, PI, 1e-13).unwrap();
        assert!((r.value - 2.0).abs() < 1e-13);
        let r = integrate_adaptive(|x| Ok(x.exp()), -1.0, 1.0, 1e-13).unwrap();
        assert!((r.value - (1f64.exp() - (-1f64).exp())).abs() < 1e-13);
    }

    #[test]
    fn adaptive_refines_near_a_peak() {
        let f = |x: f64| Ok(1.0 / (1e-4 + x * x));
        let r = integrate_adaptive(f, -1.0, 1.0, 1e-10).unwrap();
        let exact = 2.0 / 1e-2 * (1.0f64 / 1e-2).atan();
        assert!((r.value - exact).abs() < 1e-8, "{}", r.value - exact);
        assert!(r.panels.len() > 4);
    }

    #[test]
    fn kronrod_points_sum_to_length() {
        let pts = kronrod_points(0.5, 2.0);
        let total: f64 = pts.iter().map(|p| p.1).sum();
        assert!((total - 1.5).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_integrand_is_reported() {
        assert!(integrate_adaptive(|x| Ok(1.0 / x), 0.0, 1.0, 1e-12).is_err());
    }

    #[test]
    fn dormand_prince_exponential() {
        let out = integrate_ode(|_, y| Ok(vec![y[0]]), 0.0, &[1.0], &[0.5, 1.0], 1e-11, 1e-11).unwrap();
        assert!((out[1][0] - 1f64.exp()).abs() < 1e-9);
        assert!((out[0][0] - 0.5f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn dormand_prince_oscillator() {
        let ts: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let out = integrate_ode(|_, y| Ok(vec![y[1], -y[0]]), 0.0, &[0.0, 1.0], &ts, 1e-11, 1e-11).unwrap();
        for (t, y) in ts.iter().zip(&out) {
            assert!((y[0] - t.sin()).abs() < 1e-8);
        }
    }

    #[test]
    fn ode_output_at_start_is_initial_state() {
        let out = integrate_ode(|_, _| Ok(vec![1.0]), 0.0, &[3.0], &[0.0], 1e-11, 1e-11).unwrap();
        assert_eq!(out[0], vec![3.0]);
    }
}
