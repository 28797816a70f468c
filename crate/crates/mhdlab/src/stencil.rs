//! Finite-difference stencil weights (Fornberg's algorithm) and 1D
//! quadrature weights built from piecewise-cubic interpolation.

/// Weights for the m-th derivative at `x0` from samples at `xs`, via
/// Fornberg's recursion. Exact for polynomials of degree `xs.len()-1`.
pub fn fd_weights(x0: f64, xs: &[f64], m: usize) -> Vec<f64> {
    let n = xs.len();
    assert!(n > m, "need more than {m} points for derivative order {m}");
    // c[k][j]: weight of sample j for k-th derivative, built incrementally.
    let mut c = vec![vec![0.0; n]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c[m].clone()
}

/// A 1D derivative plan along one logical axis: per grid position, the
/// sample offsets and weights (already divided by spacing powers).
#[derive(Clone, Debug)]
pub struct DerivPlan {
    /// plan[i] = list of (signed offset, weight)
    pub rows: Vec<Vec<(isize, f64)>>,
}

/// Builds the 4th-order first-derivative plan for an axis of length `n`
/// with spacing `h`.
///
/// `lower_open`/`upper_open`: whether indices may run past that end (the
/// caller resolves them, e.g. periodical wrap or pass-through-pole). A
/// closed end gets one-sided 5-point closures of the same order.
pub fn first_derivative_plan(n: usize, h: f64, lower_open: bool, upper_open: bool) -> DerivPlan {
    assert!(n >= 5, "need at least 5 nodes per axis, got {n}");
    let centered: Vec<f64> = fd_weights(0.0, &[-2.0, -1.0, 0.0, 1.0, 2.0], 1);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let lo_room = if lower_open { 2 } else { i.min(2) };
        let hi_room = if upper_open { 2 } else { (n - 1 - i).min(2) };
        let row: Vec<(isize, f64)> = if lo_room >= 2 && hi_room >= 2 {
            (-2..=2)
                .zip(centered.iter())
                .map(|(o, &w)| (o, w / h))
                .collect()
        } else {
            // biased 5-point stencil shifted to stay inside the closed end(s)
            let shift: isize = if lo_room < 2 {
                2 - lo_room as isize
            } else {
                -(2 - hi_room as isize)
            };
            let offsets: Vec<isize> = (-2..=2).map(|o| o + shift).collect();
            let xs: Vec<f64> = offsets.iter().map(|&o| o as f64).collect();
            let w = fd_weights(0.0, &xs, 1);
            offsets
                .into_iter()
                .zip(w.into_iter())
                .map(|(o, w)| (o, w / h))
                .collect()
        };
        rows.push(row);
    }
    DerivPlan { rows }
}

/// Quadrature weights for nodes `xs` (strictly increasing) over [a, b],
/// integrating the piecewise cubic through 4 neighbouring nodes on each
/// panel. End panels ([a, xs[0]] and [xs[last], b]) use the outermost
/// cubics; 4th-order accurate for smooth integrands.
pub fn cubic_quadrature_weights(xs: &[f64], a: f64, b: f64) -> Vec<f64> {
    let n = xs.len();
    assert!(n >= 4);
    let mut w = vec![0.0; n];
    let mut add_panel = |lo: f64, hi: f64, base: usize| {
        // integrate Lagrange basis of nodes xs[base..base+4] over [lo, hi]
        for k in 0..4 {
            let xk = xs[base + k];
            // polynomial coefficients of the Lagrange basis via expansion
            let mut num = [1.0, 0.0, 0.0, 0.0]; // constant 1, degree 0
            let mut deg = 0;
            let mut den = 1.0;
            for j in 0..4 {
                if j == k {
                    continue;
                }
                let xj = xs[base + j];
                den *= xk - xj;
                // multiply num by (x - xj)
                let mut next = [0.0; 4];
                for (p, &c) in num.iter().enumerate().take(deg + 1) {
                    next[p + 1] += c;
                    next[p] -= xj * c;
                }
                num = next;
                deg += 1;
            }
            // ∫ num/den over [lo, hi]
            let mut integral = 0.0;
            for (p, &c) in num.iter().enumerate().take(deg + 1) {
                let p1 = (p + 1) as f64;
                integral += c * (hi.powi(p as i32 + 1) - lo.powi(p as i32 + 1)) / p1;
            }
            w[base + k] += integral / den;
        }
    };
    if a < xs[0] {
        add_panel(a, xs[0], 0);
    }
    for i in 0..n - 1 {
        let base = if i == 0 {
            0
        } else if i >= n - 2 {
            n - 4
        } else {
            i - 1
        };
        add_panel(xs[i], xs[i + 1], base);
    }
    if b > xs[n - 1] {
        add_panel(xs[n - 1], b, n - 4);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fornberg_centered_first_derivative() {
        let w = fd_weights(0.0, &[-2.0, -1.0, 0.0, 1.0, 2.0], 1);
        let expected = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
        for (a, b) in w.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn fornberg_exact_on_quartic() {
        // one-sided stencil, derivative of x^4 at x=0 from [0..4]
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let w = fd_weights(0.0, &xs, 1);
        let d: f64 = xs.iter().zip(w.iter()).map(|(&x, &c)| c * x.powi(4)).sum();
        assert!(d.abs() < 1e-10);
        let d3: f64 = xs.iter().zip(w.iter()).map(|(&x, &c)| c * x.powi(3)).sum();
        assert!((d3 - 0.0).abs() < 1e-10);
        let d1: f64 = xs.iter().zip(w.iter()).map(|(&x, &c)| c * x).sum();
        assert!((d1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_exact_on_cubics_with_offset_nodes() {
        // nodes at (j+1/2)h like the radial axis, integrate over [0, 1]
        let n = 12;
        let h = 1.0 / (n as f64 - 0.5);
        let xs: Vec<f64> = (0..n).map(|j| (j as f64 + 0.5) * h).collect();
        let w = cubic_quadrature_weights(&xs, 0.0, 1.0);
        for p in 0..=3 {
            let q: f64 = xs
                .iter()
                .zip(w.iter())
                .map(|(&x, &c)| c * x.powi(p))
                .sum();
            let exact = 1.0 / (p as f64 + 1.0);
            assert!(
                (q - exact).abs() < 1e-13,
                "degree {p}: got {q}, want {exact}"
            );
        }
    }

    #[test]
    fn quadrature_fourth_order_on_smooth() {
        let err_at = |n: usize| -> f64 {
            let h = 1.0 / (n as f64 - 0.5);
            let xs: Vec<f64> = (0..n).map(|j| (j as f64 + 0.5) * h).collect();
            let w = cubic_quadrature_weights(&xs, 0.0, 1.0);
            let q: f64 = xs.iter().zip(w.iter()).map(|(&x, &c)| c * (3.0 * x).sin()).sum();
            let exact = (1.0 - (3.0_f64).cos()) / 3.0;
            (q - exact).abs()
        };
        let e1 = err_at(20);
        let e2 = err_at(40);
        assert!(e1 / e2 > 10.0, "ratio {} not ~16", e1 / e2);
    }
}
