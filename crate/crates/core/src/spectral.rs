//! Legendre coefficients of derivatives of nodal data and the bound `d` on
//! their absolute sum.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{OcpError, Result};
use crate::interpolant::PolyInterpolant;
use crate::quadrature::{legendre_table, QuadratureGrid};

/// Margin applied on top of the strict inequality for `d`.
pub const SAFETY_FACTOR: f64 = 1.1;

/// Sample count used to estimate sup-norms and total variations.
pub const ESTIMATE_SAMPLES: usize = 10_001;

const ZETA_TERMS: u64 = 1_000_000;

/// Legendre coefficients `a_0 .. a_{N-r-m1+1}` of `(x_r^N)^(m1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCoefficients {
    pub derivative_order: usize,
    pub coefficients: Vec<f64>,
    pub l1_sum: f64,
}

/// Number of retained coefficients, `N - r - m1 + 2`.
pub fn coefficient_count(n: usize, r: usize, m1: usize) -> Result<usize> {
    if m1 == 0 {
        return Err(OcpError::Dimension("derivative order m1 must be at least 1".into()));
    }
    let count = (n + 2).checked_sub(r + m1).filter(|&c| c >= 1);
    count.ok_or_else(|| {
        OcpError::Dimension(format!(
            "N - r - m1 + 1 = {} - {} - {} + 1 is negative",
            n, r, m1
        ))
    })
}

/// The linear map `x_r -> a`, i.e. `diag(n + 1/2) L W D^m1`, as a dense
/// `(N - r - m1 + 2) x (N + 1)` matrix.
pub fn spectral_map(grid: &QuadratureGrid, r: usize, m1: usize) -> Result<DMatrix<f64>> {
    let count = coefficient_count(grid.order(), r, m1)?;
    let cols = grid.len();
    let mut lw = DMatrix::zeros(count, cols);
    for (k, (&t, &w)) in grid.nodes().iter().zip(grid.weights()).enumerate() {
        let table = legendre_table(count - 1, t);
        for (n, l) in table.iter().enumerate() {
            lw[(n, k)] = (n as f64 + 0.5) * l * w;
        }
    }
    Ok(lw * grid.diff_matrix_power(m1))
}

pub fn spectral_coefficients(xr_nodal: &[f64], m1: usize, r: usize, grid: &QuadratureGrid) -> Result<SpectralCoefficients> {
    grid.check_len(xr_nodal.len())?;
    let map = spectral_map(grid, r, m1)?;
    let coefficients: Vec<f64> = (0..map.nrows())
        .map(|i| map.row(i).iter().zip(xr_nodal).map(|(a, b)| a * b).sum())
        .collect();
    let l1_sum = coefficients.iter().map(|c| c.abs()).sum();
    Ok(SpectralCoefficients {
        derivative_order: m1,
        coefficients,
        l1_sum,
    })
}

/// `zeta(3/2)` from a partial sum of 10^6 terms plus the midpoint tail
/// integral `2 / sqrt(K + 1/2)`, whose error is below 1e-10.
pub fn zeta_three_halves() -> f64 {
    static ZETA: OnceLock<f64> = OnceLock::new();
    *ZETA.get_or_init(|| {
        // Sum small terms first to limit rounding.
        let partial: f64 = (1..=ZETA_TERMS).rev().map(|k| (k as f64).powf(-1.5)).sum();
        partial + 2.0 / (ZETA_TERMS as f64 + 0.5).sqrt()
    })
}

fn jackson_constant() -> f64 {
    6.0 / PI.sqrt()
}

/// Recommended spectral-sum bound `(6/sqrt(pi)) (U + V) zeta(3/2)` times the safety factor.
pub fn recommend_d(upper_bound: f64, total_variation: f64) -> f64 {
    jackson_constant() * (upper_bound + total_variation) * zeta_three_halves() * SAFETY_FACTOR
}

/// Jackson's bound `(6/sqrt(pi)) (U + V) / n^(3/2)` on the n-th coefficient.
pub fn jackson_coefficient_bound(upper_bound: f64, total_variation: f64, n: usize) -> f64 {
    jackson_constant() * (upper_bound + total_variation) / (n as f64).powf(1.5)
}

/// Sup-norm and total variation of the `order`-th derivative of an
/// interpolant, from uniform samples.
pub fn estimate_bound_and_variation(interp: &PolyInterpolant, order: usize) -> (f64, f64) {
    let mut h = interp.clone();
    for _ in 0..order {
        h = h.derivative();
    }
    let samples: Vec<f64> = (0..ESTIMATE_SAMPLES)
        .map(|i| {
            let t = -1.0 + 2.0 * i as f64 / (ESTIMATE_SAMPLES - 1) as f64;
            h.eval_unchecked(t)
        })
        .collect();
    let sup = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let variation = samples.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    (sup, variation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::lgl_grid;

    #[test]
    fn constant_data_has_zero_coefficients() {
        let g = lgl_grid(8).unwrap();
        let s = spectral_coefficients(&[3.0; 9], 1, 1, &g).unwrap();
        assert_eq!(s.coefficients.len(), 8);
        assert!(s.coefficients.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn square_gives_twice_first_mode() {
        let g = lgl_grid(6).unwrap();
        let x: Vec<f64> = g.nodes().iter().map(|t| t * t).collect();
        let s = spectral_coefficients(&x, 1, 1, &g).unwrap();
        assert_eq!(s.coefficients.len(), 6);
        for (n, c) in s.coefficients.iter().enumerate() {
            let expected = if n == 1 { 2.0 } else { 0.0 };
            assert!((c - expected).abs() < 1e-12, "{n}: {c}");
        }
        assert!((s.l1_sum - 2.0).abs() < 1e-12);
    }

    #[test]
    fn too_high_order_is_rejected() {
        let g = lgl_grid(4).unwrap();
        assert!(spectral_coefficients(&[0.0; 5], 4, 2, &g).is_err());
        assert!(spectral_coefficients(&[0.0; 5], 3, 2, &g).is_ok());
        assert!(spectral_coefficients(&[0.0; 5], 0, 2, &g).is_err());
    }

    #[test]
    fn zeta_matches_known_value() {
        assert!((zeta_three_halves() - 2.612_375_348_685_488).abs() < 1e-10);
    }

    #[test]
    fn recommend_d_scales_linearly() {
        assert_eq!(recommend_d(0.0, 0.0), 0.0);
        let unit = recommend_d(1.0, 0.0);
        assert!((recommend_d(2.0, 3.0) - 5.0 * unit).abs() < 1e-12);
    }

    #[test]
    fn jackson_bound_values() {
        let c = 12.0 / PI.sqrt();
        assert_eq!(jackson_coefficient_bound(0.0, 0.0, 5), 0.0);
        assert!((jackson_coefficient_bound(1.0, 1.0, 1) - c).abs() < 1e-14);
        assert!((jackson_coefficient_bound(1.0, 1.0, 4) - c / 8.0).abs() < 1e-14);
    }

    #[test]
    fn bound_and_variation_of_sine_derivative() {
        let g = std::sync::Arc::new(lgl_grid(30).unwrap());
        let p = PolyInterpolant::from_fn(g, |t| (2.0 * t).sin());
        // second derivative -4 sin(2t) peaks at |t| = pi/4 and turns back near the ends
        let (u, v) = estimate_bound_and_variation(&p, 2);
        let expected_v = 4.0 * (2.0 + 2.0 * (1.0 - 2.0f64.sin()));
        assert!((u - 4.0).abs() < 1e-6, "{u}");
        assert!((v - expected_v).abs() < 1e-6, "{v}");
    }
}
