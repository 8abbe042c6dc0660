use std::sync::Arc;

use lgl_ocp::interpolant::{derivative_interpolant, eval_control, eval_state, ControlReconstruction, PolyInterpolant};
use lgl_ocp::problem::SmoothFn;
use lgl_ocp::quadrature::lgl_grid;
use proptest::prelude::*;

fn horner(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

fn case() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (4usize..=24).prop_flat_map(|n| (Just(n), prop::collection::vec(-1.0..1.0f64, n + 1)))
}

/// Nodal values of a collocation-feasible chain `x_{i+1} = x_i'` from a
/// random degree-N polynomial `x_1`.
fn chain(n: usize, coeffs: &[f64], r: usize) -> Vec<PolyInterpolant> {
    let grid = Arc::new(lgl_grid(n).unwrap());
    let first = PolyInterpolant::from_fn(grid, |t| horner(coeffs, t));
    let mut out = vec![first];
    for _ in 1..r {
        let next = derivative_interpolant(out.last().unwrap());
        out.push(next);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nodes_are_interpolated_exactly((n, values) in case()) {
        let g = Arc::new(lgl_grid(n).unwrap());
        let p = PolyInterpolant::new(g.clone(), values.clone()).unwrap();
        for (&t, &v) in g.nodes().iter().zip(&values) {
            prop_assert_eq!(eval_state(&p, t).unwrap(), v);
        }
    }

    #[test]
    fn resampling_is_idempotent((n, values) in case()) {
        let g = Arc::new(lgl_grid(n).unwrap());
        let p = PolyInterpolant::new(g.clone(), values).unwrap();
        let q = PolyInterpolant::from_fn(g, |t| p.eval(t).unwrap());
        prop_assert_eq!(p.nodal_values(), q.nodal_values());
    }

    #[test]
    fn polynomials_of_degree_n_are_reproduced((n, c) in case(), t in -1.0..1.0f64) {
        let g = Arc::new(lgl_grid(n).unwrap());
        let p = PolyInterpolant::from_fn(g, |s| horner(&c, s));
        prop_assert!((p.eval(t).unwrap() - horner(&c, t)).abs() < 1e-12);
    }

    #[test]
    fn chain_degrees_drop_by_one((n, c) in case(), r in 1usize..=3) {
        let states = chain(n, &c, r);
        for (i, s) in states.iter().enumerate() {
            let a = s.legendre_coefficients();
            prop_assert_eq!(a.len(), n + 1);
            // x_{i+1} (1-based) has degree at most N - i
            for (k, ak) in a.iter().enumerate().skip(n - i + 1) {
                prop_assert!(ak.abs() < 1e-9, "state {} coefficient {} = {}", i + 1, k, ak);
            }
        }
    }

    #[test]
    fn repeated_derivative_reproduces_last_state((n, c) in case()) {
        let states = chain(n, &c, 3);
        let twice = derivative_interpolant(&derivative_interpolant(&states[0]));
        let scale = states[2].nodal_values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in twice.nodal_values().iter().zip(states[2].nodal_values()) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn control_matches_collocation_data((n, c) in case()) {
        let states = chain(n, &c, 2);
        let drift = SmoothFn::new(|t, x| -x[0] * x[0] + t.sin() * x[1]);
        let gain = SmoothFn::new(|_, x| 2.0 + x[0] * x[0]);
        let grid = states[0].grid().clone();
        let dx = derivative_interpolant(&states[1]);
        let nodal_u: Vec<f64> = (0..=n)
            .map(|k| {
                let t = grid.nodes()[k];
                let x = [states[0].nodal_values()[k], states[1].nodal_values()[k]];
                (dx.nodal_values()[k] - drift.eval(t, &x)) / gain.eval(t, &x)
            })
            .collect();
        let rec = ControlReconstruction::new(states, drift, gain).unwrap();
        for (&t, u) in grid.nodes().iter().zip(&nodal_u) {
            prop_assert!((eval_control(&rec, t).unwrap() - u).abs() < 1e-9);
        }
    }
}
