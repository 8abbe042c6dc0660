//! Legendre-Gauss-Lobatto grids.
//!
//! A [`QuadratureGrid`] of order `N` carries the `N + 1` LGL nodes on
//! `[-1, 1]`, the matching quadrature weights and the collocation
//! differentiation matrix. Interior nodes are the roots of the derivative
//! of the Legendre polynomial `L_N`; the weights and the matrix are built
//! from the closed forms in terms of `L_N(t_k)`.

use nalgebra::DMatrix;

use crate::error::{OcpError, Result};

/// Largest order accepted by [`lgl_grid`].
pub const MAX_ORDER: usize = 200;

/// Absolute tolerance on `|L_N'(t_k)|` for interior nodes.
pub const NODE_TOLERANCE: f64 = 1e-14;

const MAX_NEWTON_ITERATIONS: usize = 100;
const DOMAIN_SLACK: f64 = 1e-12;

/// Evaluates `L_n(t)` and `L_n'(t)` by the three-term recurrence.
///
/// The derivative uses `L'_{k+1} = L'_{k-1} + (2k + 1) L_k`, which stays
/// finite at the endpoints.
pub fn legendre_eval(n: usize, t: f64) -> Result<(f64, f64)> {
    if !(t.abs() <= 1.0 + DOMAIN_SLACK) {
        return Err(OcpError::Domain { value: t });
    }
    Ok(legendre_unchecked(n, t))
}

pub(crate) fn legendre_unchecked(n: usize, t: f64) -> (f64, f64) {
    match n {
        0 => (1.0, 0.0),
        1 => (t, 1.0),
        _ => {
            let (mut p_prev, mut p) = (1.0, t);
            let (mut d_prev, mut d) = (0.0, 1.0);
            for k in 1..n {
                let kf = k as f64;
                let p_next = ((2.0 * kf + 1.0) * t * p - kf * p_prev) / (kf + 1.0);
                let d_next = d_prev + (2.0 * kf + 1.0) * p;
                p_prev = p;
                p = p_next;
                d_prev = d;
                d = d_next;
            }
            (p, d)
        }
    }
}

/// Values `L_0(t), ..., L_n(t)`.
pub(crate) fn legendre_table(n: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(1.0);
    if n >= 1 {
        out.push(t);
    }
    for k in 1..n {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * t * out[k] - kf * out[k - 1]) / (kf + 1.0);
        out.push(next);
    }
    out
}

/// LGL nodes, weights and differentiation matrix of a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    order: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    legendre_at_nodes: Vec<f64>,
    diff_matrix: DMatrix<f64>,
}

impl QuadratureGrid {
    /// The order `N`; the grid has `N + 1` nodes.
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.order + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `L_N(t_k)` for every node.
    pub fn legendre_at_nodes(&self) -> &[f64] {
        &self.legendre_at_nodes
    }

    pub fn diff_matrix(&self) -> &DMatrix<f64> {
        &self.diff_matrix
    }

    /// `D^power`, with `D^0 = I`.
    pub fn diff_matrix_power(&self, power: usize) -> DMatrix<f64> {
        let n = self.len();
        let mut out = DMatrix::identity(n, n);
        for _ in 0..power {
            out = &self.diff_matrix * out;
        }
        out
    }

    /// Gauss-Lobatto rule `sum_k values_k w_k`.
    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        self.check_len(values.len())?;
        Ok(values.iter().zip(&self.weights).map(|(v, w)| v * w).sum())
    }

    /// Nodal derivatives `D values` of the degree-`N` interpolant.
    pub fn differentiate(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_len(values.len())?;
        Ok(self.apply_diff(values))
    }

    pub(crate) fn apply_diff(&self, values: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| (0..n).map(|k| self.diff_matrix[(i, k)] * values[k]).sum())
            .collect()
    }

    pub(crate) fn check_len(&self, found: usize) -> Result<()> {
        if found != self.len() {
            return Err(OcpError::LengthMismatch {
                expected: self.len(),
                found,
            });
        }
        Ok(())
    }
}

/// Integrates nodal values with the grid's Gauss-Lobatto rule.
pub fn integrate(values: &[f64], grid: &QuadratureGrid) -> Result<f64> {
    grid.integrate(values)
}

/// Applies the differentiation matrix to nodal values.
pub fn differentiate(values: &[f64], grid: &QuadratureGrid) -> Result<Vec<f64>> {
    grid.differentiate(values)
}

/// Builds the order-`n` LGL grid.
///
/// Interior nodes come from Newton's method on `L_n'` started at the
/// Chebyshev-Gauss-Lobatto points, with a bisection fallback. Roots are
/// polished in double-double arithmetic so that node differences near the
/// endpoints, and hence the entries of `D`, keep full double precision.
/// The node set is symmetrised afterwards.
pub fn lgl_grid(n: usize) -> Result<QuadratureGrid> {
    if n == 0 {
        return Err(OcpError::InvalidOptions(
            "LGL grid order must be at least 1".into(),
        ));
    }
    if n > MAX_ORDER {
        return Err(OcpError::InvalidOptions(format!(
            "LGL grid order {n} exceeds the supported maximum {MAX_ORDER}"
        )));
    }

    let mut fine = vec![Dd::from(0.0); n + 1];
    fine[0] = Dd::from(-1.0);
    fine[n] = Dd::from(1.0);
    let guess = |k: usize| -(std::f64::consts::PI * k as f64 / n as f64).cos();
    for k in 1..n {
        let lo = 0.5 * (guess(k - 1) + guess(k));
        let hi = 0.5 * (guess(k) + guess(k + 1));
        let coarse = interior_root(n, k, guess(k), lo, hi)?;
        fine[k] = polish_root(n, coarse);
    }
    for k in 1..=(n / 2) {
        if 2 * k == n {
            fine[k] = Dd::from(0.0);
        } else {
            let left = (fine[k] - fine[n - k]).scale(0.5);
            fine[k] = left;
            fine[n - k] = -left;
        }
    }

    let legendre_fine: Vec<Dd> = fine.iter().map(|&t| legendre_dd(n, t).0).collect();
    let nodes: Vec<f64> = fine.iter().map(|t| t.hi).collect();
    let legendre_at_nodes: Vec<f64> = legendre_fine.iter().map(|l| l.to_f64()).collect();
    let scale = Dd::from(2.0) / Dd::from((n * (n + 1)) as f64);
    let weights = legendre_fine
        .iter()
        .map(|&l| (scale / (l * l)).to_f64())
        .collect();

    let size = n + 1;
    let corner = n as f64 * (n as f64 + 1.0) / 4.0;
    let diff_matrix = DMatrix::from_fn(size, size, |i, k| {
        if i != k {
            (legendre_fine[i] / legendre_fine[k] / (fine[i] - fine[k])).to_f64()
        } else if i == 0 {
            -corner
        } else if i == n {
            corner
        } else {
            0.0
        }
    });

    Ok(QuadratureGrid {
        order: n,
        nodes,
        weights,
        legendre_at_nodes,
        diff_matrix,
    })
}

fn interior_root(n: usize, index: usize, start: f64, lo: f64, hi: f64) -> Result<f64> {
    let nn = (n * (n + 1)) as f64;
    let mut t = start;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_NEWTON_ITERATIONS {
        let (p, d) = legendre_unchecked(n, t);
        residual = d.abs();
        if residual < NODE_TOLERANCE {
            return Ok(t);
        }
        // Legendre's equation gives L'' without another recurrence.
        let dd = (2.0 * t * d - nn * p) / (1.0 - t * t);
        let mut step = d / dd;
        // Damping keeps the iterate inside its bracket.
        while t - step <= lo || t - step >= hi {
            step *= 0.5;
            if step.abs() < f64::EPSILON {
                break;
            }
        }
        let next = t - step;
        if (next - t).abs() <= 4.0 * f64::EPSILON * t.abs().max(f64::MIN_POSITIVE) {
            // Stagnated at the resolution of double arithmetic.
            return Ok(next);
        }
        t = next;
    }
    bisect_root(n, lo, hi).ok_or(OcpError::NodeConvergence {
        order: n,
        index,
        residual,
    })
}

fn bisect_root(n: usize, mut lo: f64, mut hi: f64) -> Option<f64> {
    let f = |t: f64| legendre_unchecked(n, t).1;
    let (mut flo, fhi) = (f(lo), f(hi));
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() < NODE_TOLERANCE || hi - lo <= 2.0 * f64::EPSILON {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Two Newton steps in double-double starting from a double-precision root.
fn polish_root(n: usize, start: f64) -> Dd {
    let nn = Dd::from((n * (n + 1)) as f64);
    let mut t = Dd::from(start);
    for _ in 0..2 {
        let (p, d) = legendre_dd(n, t);
        let one_minus = Dd::from(1.0) - t * t;
        let second = (Dd::from(2.0) * t * d - nn * p) / one_minus;
        t = t - d / second;
    }
    t
}

fn legendre_dd(n: usize, t: Dd) -> (Dd, Dd) {
    match n {
        0 => (Dd::from(1.0), Dd::from(0.0)),
        1 => (t, Dd::from(1.0)),
        _ => {
            let (mut p_prev, mut p) = (Dd::from(1.0), t);
            let (mut d_prev, mut d) = (Dd::from(0.0), Dd::from(1.0));
            for k in 1..n {
                let kf = k as f64;
                let p_next =
                    (t * p).scale(2.0 * kf + 1.0) - p_prev.scale(kf);
                let p_next = p_next / Dd::from(kf + 1.0);
                let d_next = d_prev + p.scale(2.0 * kf + 1.0);
                p_prev = p;
                p = p_next;
                d_prev = d;
                d = d_next;
            }
            (p, d)
        }
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl From<f64> for Dd {
    fn from(hi: f64) -> Self {
        Dd { hi, lo: 0.0 }
    }
}

impl Dd {
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn scale(self, s: f64) -> Dd {
        let (p, e) = two_prod(self.hi, s);
        quick_two_sum(p, e + self.lo * s)
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd {
        hi: s,
        lo: b - (s - a),
    }
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl std::ops::Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }
}

impl std::ops::Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl std::ops::Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl std::ops::Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl std::ops::Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o.scale(q1);
        let q2 = r.hi / o.hi;
        let r = r - o.scale(q2);
        let q3 = r.hi / o.hi;
        let q = quick_two_sum(q1, q2);
        q + Dd::from(q3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn legendre_low_orders() {
        assert_eq!(legendre_eval(0, 0.37).unwrap(), (1.0, 0.0));
        assert_eq!(legendre_eval(1, -0.5).unwrap(), (-0.5, 1.0));
        assert_eq!(legendre_eval(2, 0.0).unwrap(), (-0.5, 0.0));
    }

    #[test]
    fn legendre_matches_closed_forms() {
        for &t in &[-1.0, -0.7, 0.1, 0.55, 1.0] {
            let (p3, d3) = legendre_eval(3, t).unwrap();
            assert!(close(p3, 0.5 * (5.0 * t * t * t - 3.0 * t), 1e-15));
            assert!(close(d3, 0.5 * (15.0 * t * t - 3.0), 1e-14));
            let (p4, _) = legendre_eval(4, t).unwrap();
            assert!(close(p4, (35.0 * t.powi(4) - 30.0 * t * t + 3.0) / 8.0, 1e-15));
        }
    }

    #[test]
    fn legendre_endpoint_values() {
        for n in 0..40 {
            let (p, d) = legendre_eval(n, 1.0).unwrap();
            assert!(close(p, 1.0, 1e-13));
            let nf = n as f64;
            assert!(close(d, nf * (nf + 1.0) / 2.0, 1e-12 * nf * nf));
        }
    }

    #[test]
    fn legendre_rejects_points_outside_interval() {
        assert!(legendre_eval(3, 1.0 + 1e-13).is_ok());
        assert!(matches!(legendre_eval(3, 1.01), Err(OcpError::Domain { .. })));
        assert!(legendre_eval(3, f64::NAN).is_err());
    }

    #[test]
    fn order_one_is_trapezoid() {
        let g = lgl_grid(1).unwrap();
        assert_eq!(g.nodes(), &[-1.0, 1.0]);
        assert_eq!(g.weights(), &[1.0, 1.0]);
    }

    #[test]
    fn order_two_is_simpson() {
        let g = lgl_grid(2).unwrap();
        assert_eq!(g.nodes(), &[-1.0, 0.0, 1.0]);
        let expected = [1.0 / 3.0, 4.0 / 3.0, 1.0 / 3.0];
        for (w, e) in g.weights().iter().zip(expected) {
            assert!(close(*w, e, 1e-15));
        }
    }

    #[test]
    fn order_sixteen_clusters_at_endpoints() {
        let g = lgl_grid(16).unwrap();
        let t = g.nodes();
        assert_eq!(t.len(), 17);
        assert_eq!((t[0], t[16]), (-1.0, 1.0));
        let gaps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        // spacing grows toward the centre
        for k in 0..7 {
            assert!(gaps[k] < gaps[k + 1], "{gaps:?}");
            assert!(gaps[15 - k] < gaps[14 - k], "{gaps:?}");
        }
    }

    #[test]
    fn corners_of_differentiation_matrix() {
        for n in [1, 2, 7, 30, 200] {
            let g = lgl_grid(n).unwrap();
            let c = n as f64 * (n as f64 + 1.0) / 4.0;
            assert_eq!(g.diff_matrix()[(0, 0)], -c);
            assert_eq!(g.diff_matrix()[(n, n)], c);
        }
    }

    #[test]
    fn rejects_bad_orders() {
        assert!(lgl_grid(0).is_err());
        assert!(lgl_grid(MAX_ORDER).is_ok());
        assert!(lgl_grid(MAX_ORDER + 1).is_err());
    }

    #[test]
    fn integrate_examples() {
        let g = lgl_grid(9).unwrap();
        assert!(close(g.integrate(&[1.0; 10]).unwrap(), 2.0, 1e-15));
        let g2 = lgl_grid(2).unwrap();
        let sq: Vec<f64> = g2.nodes().iter().map(|t| t * t).collect();
        assert!(close(integrate(&sq, &g2).unwrap(), 2.0 / 3.0, 1e-15));
    }

    #[test]
    fn integrate_fails_just_past_exactness() {
        for n in [2, 5, 10] {
            let g = lgl_grid(n).unwrap();
            let v: Vec<f64> = g.nodes().iter().map(|t| t.powi(2 * n as i32)).collect();
            let gap = (g.integrate(&v).unwrap() - 2.0 / (2 * n + 1) as f64).abs();
            assert!(gap > 1e-6, "n={n} gap={gap}");
        }
    }

    #[test]
    fn differentiate_examples() {
        let g = lgl_grid(4).unwrap();
        let zero = differentiate(&[2.5; 5], &g).unwrap();
        assert!(zero.iter().all(|v| v.abs() < 1e-13));
        let ones = g.differentiate(g.nodes()).unwrap();
        assert!(ones.iter().all(|v| close(*v, 1.0, 1e-13)));
        let cube: Vec<f64> = g.nodes().iter().map(|t| t * t * t).collect();
        for (d, t) in g.differentiate(&cube).unwrap().iter().zip(g.nodes()) {
            assert!(close(*d, 3.0 * t * t, 1e-13));
        }
    }

    #[test]
    fn length_mismatch_is_reported() {
        let g = lgl_grid(4).unwrap();
        assert!(matches!(
            g.integrate(&[0.0; 4]),
            Err(OcpError::LengthMismatch { expected: 5, found: 4 })
        ));
        assert!(g.differentiate(&[0.0; 6]).is_err());
    }

    #[test]
    fn matrix_powers() {
        let g = lgl_grid(5).unwrap();
        assert_eq!(g.diff_matrix_power(0), DMatrix::identity(6, 6));
        assert_eq!(&g.diff_matrix_power(1), g.diff_matrix());
        // D^(N+1) annihilates every degree-N polynomial
        assert!(g.diff_matrix_power(6).amax() < 1e-8);
    }

    #[test]
    fn double_double_division_round_trips() {
        let a = Dd::from(1.0) / Dd::from(3.0);
        let back = a * Dd::from(3.0) - Dd::from(1.0);
        assert!(back.to_f64().abs() < 1e-30);
    }
}
