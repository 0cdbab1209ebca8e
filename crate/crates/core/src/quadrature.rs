//! Conical-product Gauss rules on the reference triangle and tetrahedron.
//!
//! Rules are returned in barycentric form with weights normalised to sum to one,
//! so an integral over a simplex of measure `m` is `m * Σ w f(Σ λ_i x_i)`.

use std::sync::OnceLock;

/// Quadrature point on a simplex: barycentric coordinates and normalised weight.
#[derive(Debug, Clone, Copy)]
pub struct SimplexPoint<const N: usize> {
    pub bary: [f64; N],
    pub weight: f64,
}

pub type TetPoint = SimplexPoint<4>;
pub type TriPoint = SimplexPoint<3>;

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Newton on P_n starting from the Chebyshev-like guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pnm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn tet_rule_points(n: usize) -> Vec<TetPoint> {
    let (x, w) = gauss_legendre(n);
    let mut pts = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let (u, v, s) = (x[i], x[j], x[k]);
                let a = u;
                let b = v * (1.0 - u);
                let c = s * (1.0 - u) * (1.0 - v);
                let jac = (1.0 - u) * (1.0 - u) * (1.0 - v);
                pts.push(TetPoint {
                    bary: [1.0 - a - b - c, a, b, c],
                    weight: 6.0 * jac * w[i] * w[j] * w[k],
                });
            }
        }
    }
    pts
}

fn tri_rule_points(n: usize) -> Vec<TriPoint> {
    let (x, w) = gauss_legendre(n);
    let mut pts = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (u, v) = (x[i], x[j]);
            let a = u;
            let b = v * (1.0 - u);
            pts.push(TriPoint {
                bary: [1.0 - a - b, a, b],
                weight: 2.0 * (1.0 - u) * w[i] * w[j],
            });
        }
    }
    pts
}

static TET_RULES: OnceLock<Vec<Vec<TetPoint>>> = OnceLock::new();
static TRI_RULES: OnceLock<Vec<Vec<TriPoint>>> = OnceLock::new();

const MAX_DEGREE: usize = 12;

/// Tetrahedron rule exact for polynomials of total degree `degree`.
pub fn tet_rule(degree: usize) -> &'static [TetPoint] {
    assert!(degree <= MAX_DEGREE, "tetrahedron rule degree {degree} not tabulated");
    let rules = TET_RULES.get_or_init(|| {
        (0..=MAX_DEGREE)
            .map(|p| tet_rule_points((p + 3).div_ceil(2).max(1)))
            .collect()
    });
    &rules[degree]
}

/// Triangle rule exact for polynomials of total degree `degree`.
pub fn tri_rule(degree: usize) -> &'static [TriPoint] {
    assert!(degree <= MAX_DEGREE, "triangle rule degree {degree} not tabulated");
    let rules = TRI_RULES.get_or_init(|| {
        (0..=MAX_DEGREE)
            .map(|p| tri_rule_points((p + 2).div_ceil(2).max(1)))
            .collect()
    });
    &rules[degree]
}
