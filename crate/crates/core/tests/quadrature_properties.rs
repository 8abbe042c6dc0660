use lgl_ocp::quadrature::{differentiate, integrate, legendre_eval, lgl_grid, NODE_TOLERANCE};
use proptest::prelude::*;

const EPS: f64 = f64::EPSILON;

fn horner(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

fn exact_integral(coeffs: &[f64]) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .filter(|(p, _)| p % 2 == 0)
        .map(|(p, c)| 2.0 * c / (p + 1) as f64)
        .sum()
}

fn derivative(coeffs: &[f64]) -> Vec<f64> {
    coeffs.iter().enumerate().skip(1).map(|(p, c)| p as f64 * c).collect()
}

fn order() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![2usize, 5, 10, 20, 50])
}

fn poly(max_degree: usize) -> impl Strategy<Value = Vec<f64>> {
    (0..=max_degree).prop_flat_map(|d| prop::collection::vec(-1.0..1.0f64, d + 1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn integration_is_exact_to_degree_2n_minus_1((n, c) in order().prop_flat_map(|n| (Just(n), poly(2 * n - 1)))) {
        let g = lgl_grid(n).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|&t| horner(&c, t)).collect();
        let degree = c.len() - 1;
        let err = (integrate(&v, &g).unwrap() - exact_integral(&c)).abs();
        prop_assert!(err <= 1e-12 * (degree as f64 + 1.0), "n={} deg={} err={}", n, degree, err);
    }

    #[test]
    fn differentiation_is_exact_to_degree_n((n, c) in order().prop_flat_map(|n| (Just(n), poly(n)))) {
        let g = lgl_grid(n).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|&t| horner(&c, t)).collect();
        let dc = derivative(&c);
        let tol = 1e-10 * (n * n) as f64;
        for (d, &t) in differentiate(&v, &g).unwrap().iter().zip(g.nodes()) {
            prop_assert!((d - horner(&dc, t)).abs() <= tol, "n={} t={} got={} want={}", n, t, d, horner(&dc, t));
        }
    }

    #[test]
    fn second_derivative_is_exact_to_degree_n((n, c) in order().prop_flat_map(|n| (Just(n), poly(n)))) {
        let g = lgl_grid(n).unwrap();
        let v: Vec<f64> = g.nodes().iter().map(|&t| horner(&c, t)).collect();
        let d2 = differentiate(&differentiate(&v, &g).unwrap(), &g).unwrap();
        let ddc = derivative(&derivative(&c));
        let tol = 1e-10 * (n as f64).powi(4);
        for (d, &t) in d2.iter().zip(g.nodes()) {
            prop_assert!((d - horner(&ddc, t)).abs() <= tol);
        }
    }

}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn generation_is_deterministic(n in 1usize..=200) {
        prop_assert_eq!(lgl_grid(n).unwrap(), lgl_grid(n).unwrap());
    }
}

#[test]
fn monomial_derivatives() {
    for n in [1usize, 2, 3, 5, 8, 13, 20, 35, 50, 80] {
        let g = lgl_grid(n).unwrap();
        let tol = 1e-10 * (n * n) as f64;
        for p in 0..=n {
            let v: Vec<f64> = g.nodes().iter().map(|t| t.powi(p as i32)).collect();
            let d = g.differentiate(&v).unwrap();
            for (dk, &t) in d.iter().zip(g.nodes()) {
                let want = if p == 0 { 0.0 } else { p as f64 * t.powi(p as i32 - 1) };
                assert!((dk - want).abs() <= tol, "n={n} p={p} t={t}: {dk} vs {want}");
            }
        }
    }
}

#[test]
fn grid_structure_up_to_order_200() {
    for n in 1..=200usize {
        let g = lgl_grid(n).unwrap();
        let t = g.nodes();
        let w = g.weights();
        let tol = 10.0 * EPS * (n + 1) as f64;
        assert_eq!(t[0], -1.0);
        assert_eq!(t[n], 1.0);
        assert!(t.windows(2).all(|p| p[0] < p[1]), "n={n}");
        for k in 0..=n {
            assert!((t[k] + t[n - k]).abs() <= NODE_TOLERANCE, "n={n} k={k}");
            assert!((w[k] - w[n - k]).abs() <= tol, "n={n} k={k}");
            assert!(w[k] > 0.0);
        }
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() <= tol, "n={n} sum={total}");
    }
}

/// `|L_N'(t_k)| / |L_N''(t_k)|` bounds the distance from t_k to the true root.
#[test]
fn interior_nodes_are_derivative_roots() {
    for n in 2..=200usize {
        let g = lgl_grid(n).unwrap();
        let nn = (n * (n + 1)) as f64;
        for &t in &g.nodes()[1..n] {
            let (p, d) = legendre_eval(n, t).unwrap();
            let second = (2.0 * t * d - nn * p) / (1.0 - t * t);
            assert!((d / second).abs() <= NODE_TOLERANCE, "n={n} t={t}");
            if n <= 8 {
                assert!(d.abs() <= NODE_TOLERANCE, "n={n} t={t} d={d}");
            }
        }
    }
}

#[test]
fn weights_match_closed_form() {
    for n in [3usize, 9, 27, 81] {
        let g = lgl_grid(n).unwrap();
        for (&t, &w) in g.nodes().iter().zip(g.weights()) {
            let (p, _) = legendre_eval(n, t).unwrap();
            let want = 2.0 / (n * (n + 1)) as f64 / (p * p);
            assert!((w - want).abs() <= 1e-12 * want, "n={n} t={t}");
        }
    }
}

#[test]
fn row_sums_vanish_for_moderate_orders() {
    // Orders above ~58 exceed the 10 eps (N+1) budget in rows 0 and N; the
    // acceptance suite reports that range.
    for n in 1..=50usize {
        let g = lgl_grid(n).unwrap();
        let tol = 10.0 * EPS * (n + 1) as f64;
        for (i, row) in g.diff_matrix().row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            assert!(s.abs() <= tol, "n={n} row={i} sum={s}");
        }
    }
}
