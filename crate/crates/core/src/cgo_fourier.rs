//! Complex geometrical optics probes and Fourier-side estimates of potential
//! differences.
//!
//! Fourier convention: `f̂(ξ) = ∫ f(x) e^{i x·ξ} dx`, so Plancherel reads
//! `∫ |f̂|² dξ = (2π)³ ∫ |f|² dx`.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use faer::Mat;
use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fem::{DomainKind, FrequencySpec, HelmholtzSystem, Mesh};
use crate::geometry::{Point3, Tetrahedron};
use crate::partition::{exact_l2_distance, PiecewiseField};
use crate::{Error, Result};

type CVec3 = Vector3<Complex64>;

/// Frequency `ξ`, decay parameter `μ`, orthonormal frame `η₁, η₂ ⊥ ξ` and the
/// pair `ζ₀, ζ₁` with `ζ₀ + ζ₁ = ξ`, `ζ_k·ζ_k = 0`, `|ζ_k| = max(μ, |ξ|/√2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgoSpec {
    pub xi: Vector3<f64>,
    pub mu: f64,
    pub eta1: Vector3<f64>,
    pub eta2: Vector3<f64>,
    pub zeta: [CVec3; 2],
}

/// Unit vectors `η₁, η₂` completing `ξ/|ξ|` to a right-handed orthonormal frame
/// (`e₁, e₂` when `ξ = 0`).
pub fn orthonormal_frame(xi: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n = xi.norm();
    if n == 0.0 {
        return (Vector3::x(), Vector3::y());
    }
    let u = xi / n;
    let axis = (0..3).min_by(|&a, &b| u[a].abs().total_cmp(&u[b].abs())).unwrap();
    let e = Vector3::ith(axis, 1.0);
    let eta1 = u.cross(&e).normalize();
    let eta2 = u.cross(&eta1);
    (eta1, eta2)
}

/// Builds `ζ₀, ζ₁` in the frame of [`orthonormal_frame`].
pub fn build_zeta(xi: Vector3<f64>, mu: f64) -> Result<CgoSpec> {
    let (eta1, eta2) = orthonormal_frame(&xi);
    build_zeta_in_frame(xi, mu, eta1, eta2)
}

/// Builds `ζ₀, ζ₁` for a caller-chosen orthonormal pair `η₁, η₂ ⊥ ξ`.
///
/// For `|ξ| < √2 μ`:
/// `ζ_k = (−1)^{k+1} (μ/√2) (√(1 − |ξ|²/2μ²) η₁ + (−1)^{k+1} ξ/(√2 μ) + i η₂)`,
/// otherwise
/// `ζ_k = (−1)^{k+1} (μ/√2) ((−1)^{k+1} ξ/(√2 μ) + i (√(|ξ|²/2μ² − 1) η₁ + η₂))`.
pub fn build_zeta_in_frame(xi: Vector3<f64>, mu: f64, eta1: Vector3<f64>, eta2: Vector3<f64>) -> Result<CgoSpec> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::InvalidInput(format!("mu must be positive, got {mu}")));
    }
    let frame_err = (eta1.norm() - 1.0).abs() + (eta2.norm() - 1.0).abs() + eta1.dot(&eta2).abs();
    let scale = xi.norm().max(1.0);
    if frame_err > 1e-12 || eta1.dot(&xi).abs() > 1e-12 * scale || eta2.dot(&xi).abs() > 1e-12 * scale {
        return Err(Error::InvalidInput("eta1, eta2 must be orthonormal and orthogonal to xi".into()));
    }
    let c = |v: Vector3<f64>| v.map(|x| Complex64::new(x, 0.0));
    let ic = |v: Vector3<f64>| v.map(|x| Complex64::new(0.0, x));
    let s2 = xi.norm_squared() / (2.0 * mu * mu);
    let zeta = [0usize, 1].map(|k| {
        let sign = if k == 0 { -1.0 } else { 1.0 };
        let shift = xi * (sign / (SQRT_2 * mu));
        let bracket = if s2 < 1.0 {
            c(eta1 * (1.0 - s2).sqrt() + shift) + ic(eta2)
        } else {
            c(shift) + ic(eta1 * (s2 - 1.0).sqrt() + eta2)
        };
        bracket * Complex64::new(sign * mu / SQRT_2, 0.0)
    });
    Ok(CgoSpec { xi, mu, eta1, eta2, zeta })
}

impl CgoSpec {
    /// Residuals of the three defining identities:
    /// `|ζ₀ + ζ₁ − ξ|`, `max_k |ζ_k·ζ_k|`, `max_k ||ζ_k| − max(μ, |ξ|/√2)|`.
    pub fn invariant_residuals(&self) -> [f64; 3] {
        let sum = self.zeta[0] + self.zeta[1] - self.xi.map(|x| Complex64::new(x, 0.0));
        let sum = sum.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let target = self.mu.max(self.xi.norm() / SQRT_2);
        let mut dot = 0.0f64;
        let mut modulus = 0.0f64;
        for z in &self.zeta {
            let zz: Complex64 = z.iter().map(|c| c * c).sum();
            dot = dot.max(zz.norm());
            let herm = z.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            modulus = modulus.max((herm - target).abs());
        }
        [sum, dot, modulus]
    }

    /// `|Im ζ_k|`, the exponential growth rate of the probe.
    pub fn growth_rate(&self) -> f64 {
        self.zeta[0].map(|z| z.im).norm()
    }

    /// `e^{i x·ζ_k}`.
    pub fn phase(&self, k: usize, x: &Point3) -> Complex64 {
        let arg: Complex64 = self.zeta[k].iter().zip(x.iter()).map(|(z, x)| z * x).sum();
        (Complex64::i() * arg).exp()
    }
}

/// Real and imaginary parts of `e^{i x·ζ_k}` at `points`.
pub fn cgo_trace(spec: &CgoSpec, k: usize, points: &[Point3]) -> (Vec<f64>, Vec<f64>) {
    points.iter().map(|x| spec.phase(k, x)).map(|z| (z.re, z.im)).unzip()
}

/// One Fourier-side estimate with its exact reference value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FourierSample {
    pub xi: [f64; 3],
    pub mu: f64,
    pub estimate: Complex64,
    pub oracle: Complex64,
    pub deviation: f64,
}

/// Shared factorizations for estimating `(q̂⁰ − q̂¹)(ξ)` at many `(ξ, μ)`.
pub struct FourierProbe<'m> {
    mesh: &'m Mesh,
    systems: [HelmholtzSystem<'m>; 2],
    fields: [PiecewiseField; 2],
    omega: f64,
    model: TraceModel,
    remainder: RemainderConfig,
}

impl<'m> FourierProbe<'m> {
    pub fn new(mesh: &'m Mesh, f0: &PiecewiseField, f1: &PiecewiseField, fs: &FrequencySpec) -> Result<Self> {
        Ok(Self {
            mesh,
            systems: [HelmholtzSystem::for_field(mesh, f0, fs)?, HelmholtzSystem::for_field(mesh, f1, fs)?],
            fields: [f0.clone(), f1.clone()],
            omega: fs.omega,
            model: TraceModel::default(),
            remainder: RemainderConfig::default(),
        })
    }

    pub fn with_traces(mut self, model: TraceModel, remainder: RemainderConfig) -> Self {
        self.model = model;
        self.remainder = remainder;
        self
    }

    fn traces(&self, spec: &CgoSpec, k: usize, pts: &[Point3]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self.model {
            TraceModel::PurePhase => Ok(cgo_trace(spec, k, pts)),
            TraceModel::Remainder => {
                let ext = match self.mesh.kind() {
                    DomainKind::Augmented { r_tilde, q_extension } => Some((r_tilde, q_extension)),
                    DomainKind::Omega => None,
                };
                cgo_solution_trace(spec, k, &self.fields[k], ext, self.omega, pts, &self.remainder)
            }
        }
    }

    /// `ω⁻² ⟨(Λ₁ − Λ₀) φ₀, φ₁⟩` where `φ_k` is the boundary trace of the probing
    /// solution for `q_k` and `ζ_k`, paired bilinearly (no conjugation).
    pub fn estimate(&self, spec: &CgoSpec) -> Result<FourierSample> {
        let pts = self.mesh.boundary_points();
        let (re0, im0) = self.traces(spec, 0, &pts)?;
        let (re1, im1) = self.traces(spec, 1, &pts)?;
        let nb = pts.len();
        let traces = Mat::from_fn(nb, 2, |i, c| if c == 0 { re0[i] } else { im0[i] });
        let mut n = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
        for (k, sys) in self.systems.iter().enumerate() {
            let u = sys.solve_traces(traces.as_ref())?;
            for c in 0..2 {
                let col: Vec<f64> = (0..u.nrows()).map(|i| u[(i, c)]).collect();
                n[k][c] = sys.neumann(&col);
            }
        }
        let mut pairing = Complex64::new(0.0, 0.0);
        for b in 0..nb {
            let dn = Complex64::new(n[1][0][b] - n[0][0][b], n[1][1][b] - n[0][1][b]);
            pairing += dn * Complex64::new(re1[b], im1[b]);
        }
        let estimate = pairing / (self.omega * self.omega);
        let oracle = exact_qdiff_ft(&self.fields[0], &self.fields[1], &spec.xi);
        Ok(FourierSample {
            xi: [spec.xi.x, spec.xi.y, spec.xi.z],
            mu: spec.mu,
            estimate,
            oracle,
            deviation: (estimate - oracle).norm(),
        })
    }
}

/// Single-shot [`FourierProbe::estimate`].
pub fn fourier_estimate(
    f0: &PiecewiseField,
    f1: &PiecewiseField,
    fs: &FrequencySpec,
    mesh: &Mesh,
    spec: &CgoSpec,
) -> Result<FourierSample> {
    FourierProbe::new(mesh, f0, f1, fs)?.estimate(spec)
}

/// Boundary data for the probing solutions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum TraceModel {
    /// The bare phase `e^{i x·ζ_k}`. The resulting Dirichlet solution is not the
    /// decaying-remainder solution and its error grows with `μ`.
    PurePhase,
    /// `e^{i x·ζ_k}(1 + φ_k)` with the remainder computed by [`CgoRemainder`].
    #[default]
    Remainder,
}

/// Discretization of the periodic remainder problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemainderConfig {
    /// Grid points per axis (even).
    pub grid: usize,
    /// Cube half-width as a multiple of the radius of the coefficient support.
    pub padding: f64,
    /// Sub-samples per axis when averaging `q` over a grid cell.
    pub subsamples: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RemainderConfig {
    fn default() -> Self {
        Self { grid: 64, padding: 1.15, subsamples: 3, tolerance: 1e-12, max_iterations: 400 }
    }
}

/// Remainder `φ` of a complex geometrical optics solution `u = e^{i x·ζ}(1 + φ)`
/// of `Δu + ω²qu = 0`.
///
/// `φ` solves `Δφ + 2iζ·∇φ = −ω²q(1 + φ)`. In coordinates `y` whose third axis
/// is `Im ζ`, it is expanded on the cube `[−L, L]³` in the shifted lattice
/// `e^{iα·y}`, `α ∈ (π/L)(ℤ³ + ½e₃)`, where the symbol `−|α|² − 2ζ·α` has
/// imaginary part at least `π|Im ζ|/L` in modulus. The fixed point is found by
/// iterating the inverse symbol with FFTs, which contracts when
/// `ω² max|q| L/(π|Im ζ|) < 1`.
#[derive(Debug, Clone)]
pub struct CgoRemainder {
    n: usize,
    half_width: f64,
    /// Columns: the `y` axes in `x` coordinates.
    frame: Matrix3<f64>,
    /// Periodic part: `φ(y) = e^{iπy₃/2L} p(y)`.
    p: Vec<Complex64>,
    pub iterations: usize,
    pub contraction: f64,
}

impl CgoRemainder {
    /// Solves for the remainder of `ζ_k` with the coefficient `q(x)`, which must
    /// vanish outside the ball of radius `support`.
    pub fn solve(
        spec: &CgoSpec,
        k: usize,
        q: impl Fn(&Point3) -> f64 + Sync,
        support: f64,
        omega: f64,
        cfg: &RemainderConfig,
    ) -> Result<Self> {
        let n = cfg.grid;
        if n < 8 || n % 2 != 0 {
            return Err(Error::InvalidInput(format!("remainder grid must be even and >= 8, got {n}")));
        }
        let zeta = spec.zeta[k];
        let im = zeta.map(|z| z.im);
        let re = zeta.map(|z| z.re);
        let e3 = im.normalize();
        let e1 = if re.norm() > 1e-12 * im.norm() { re.normalize() } else { orthonormal_frame(&e3).0 };
        let e2 = e3.cross(&e1);
        let frame = Matrix3::from_columns(&[e1, e2, e3]);
        let zeta_y: [Complex64; 3] = std::array::from_fn(|a| {
            let col = frame.column(a);
            (0..3).map(|i| zeta[i] * col[i]).sum()
        });
        let l = cfg.padding * support;
        let h = 2.0 * l / n as f64;
        let coord = |j: usize| -l + j as f64 * h;

        // cell-averaged coefficient
        let s = cfg.subsamples.max(1);
        let offsets: Vec<f64> = (0..s).map(|a| ((a as f64 + 0.5) / s as f64 - 0.5) * h).collect();
        let qgrid: Vec<f64> = (0..n * n * n)
            .into_par_iter()
            .map(|id| {
                let (i, j, m) = (id / (n * n), (id / n) % n, id % n);
                let mut acc = 0.0;
                for a in &offsets {
                    for b in &offsets {
                        for c in &offsets {
                            let y = Vector3::new(coord(i) + a, coord(j) + b, coord(m) + c);
                            acc += q(&(frame * y));
                        }
                    }
                }
                acc / (s * s * s) as f64
            })
            .collect();
        let qmax = qgrid.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let contraction = omega * omega * qmax * l / (PI * im.norm());
        if contraction >= 1.0 {
            return Err(Error::InvalidInput(format!(
                "remainder iteration does not contract (factor {contraction:.3}); increase mu"
            )));
        }

        let freq = |j: usize| -> f64 {
            let signed = if j < n / 2 { j as f64 } else { j as f64 - n as f64 };
            PI / l * signed
        };
        let inv_symbol: Vec<Complex64> = (0..n * n * n)
            .into_par_iter()
            .map(|id| {
                let (i, j, m) = (id / (n * n), (id / n) % n, id % n);
                let alpha = [freq(i), freq(j), freq(m) + PI / (2.0 * l)];
                let a2: f64 = alpha.iter().map(|a| a * a).sum();
                let za: Complex64 = (0..3).map(|c| zeta_y[c] * alpha[c]).sum();
                let sym = Complex64::new(-a2, 0.0) - za * 2.0;
                1.0 / sym / (n * n * n) as f64
            })
            .collect();
        let twist: Vec<Complex64> = (0..n)
            .map(|m| Complex64::new(0.0, -PI * coord(m) / (2.0 * l)).exp())
            .collect();

        let fft = Fft3::new(n);
        let w2 = omega * omega;
        let mut p = vec![Complex64::new(0.0, 0.0); n * n * n];
        let mut iterations = 0;
        loop {
            iterations += 1;
            let mut g: Vec<Complex64> = (0..n * n * n)
                .into_par_iter()
                .map(|id| -(twist[id % n] + p[id]) * (w2 * qgrid[id]))
                .collect();
            fft.forward(&mut g);
            g.par_iter_mut().zip(&inv_symbol).for_each(|(a, b)| *a *= b);
            fft.inverse(&mut g);
            let (diff, size) = g
                .par_iter()
                .zip(&p)
                .map(|(a, b)| ((a - b).norm(), a.norm()))
                .reduce(|| (0.0, 0.0), |x, y| (x.0.max(y.0), x.1.max(y.1)));
            p = g;
            if diff <= cfg.tolerance * size.max(f64::MIN_POSITIVE) || size == 0.0 {
                break;
            }
            if iterations >= cfg.max_iterations {
                return Err(Error::SolverResidual { residual: diff / size, tolerance: cfg.tolerance });
            }
        }
        Ok(Self { n, half_width: l, frame, p, iterations, contraction })
    }

    /// `φ(x)` by tensor-product cubic Lagrange interpolation of the periodic part.
    pub fn phi(&self, x: &Point3) -> Complex64 {
        let n = self.n;
        let l = self.half_width;
        let h = 2.0 * l / n as f64;
        let y = self.frame.transpose() * x;
        let mut base = [0i64; 3];
        let mut w = [[0.0; 4]; 3];
        for a in 0..3 {
            let t = (y[a] + l) / h;
            let j = t.floor();
            let f = t - j;
            base[a] = j as i64 - 1;
            // nodes at −1, 0, 1, 2 relative to j
            w[a] = [
                -f * (f - 1.0) * (f - 2.0) / 6.0,
                (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
                -(f + 1.0) * f * (f - 2.0) / 2.0,
                (f + 1.0) * f * (f - 1.0) / 6.0,
            ];
        }
        let wrap = |j: i64| j.rem_euclid(n as i64) as usize;
        let mut v = Complex64::new(0.0, 0.0);
        for (a, wa) in w[0].iter().enumerate() {
            let i = wrap(base[0] + a as i64);
            for (b, wb) in w[1].iter().enumerate() {
                let j = wrap(base[1] + b as i64);
                for (c, wc) in w[2].iter().enumerate() {
                    let m = wrap(base[2] + c as i64);
                    v += self.p[(i * n + j) * n + m] * (wa * wb * wc);
                }
            }
        }
        v * Complex64::new(0.0, PI * y.z / (2.0 * l)).exp()
    }
}

/// Three-dimensional FFT on an `n³` row-major grid built from 1-D transforms.
struct Fft3 {
    n: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Fft3 {
    fn new(n: usize) -> Self {
        let mut planner = rustfft::FftPlanner::new();
        Self { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.fwd);
    }

    fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.inv);
    }

    fn run(&self, data: &mut [Complex64], plan: &std::sync::Arc<dyn rustfft::Fft<f64>>) {
        let n = self.n;
        // last axis: contiguous lines
        data.par_chunks_mut(n).for_each(|line| plan.process(line));
        // middle axis: per slab, gather columns
        data.par_chunks_mut(n * n).for_each(|slab| {
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            for m in 0..n {
                for j in 0..n {
                    buf[j] = slab[j * n + m];
                }
                plan.process(&mut buf);
                for j in 0..n {
                    slab[j * n + m] = buf[j];
                }
            }
        });
        // first axis: gather strided lines
        let cols: Vec<Vec<Complex64>> = (0..n * n)
            .into_par_iter()
            .map(|jm| {
                let mut buf: Vec<Complex64> = (0..n).map(|i| data[i * n * n + jm]).collect();
                plan.process(&mut buf);
                buf
            })
            .collect();
        for (jm, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                data[i * n * n + jm] = *v;
            }
        }
    }
}

/// Coefficient of a field extended by zero outside the partition, or by a
/// constant inside a ball around it.
pub fn extended_coefficient<'a>(
    f: &'a PiecewiseField,
    extension: Option<(f64, f64)>,
) -> impl Fn(&Point3) -> f64 + Sync + 'a {
    let tets: Vec<(Tetrahedron, (Point3, Point3))> = f
        .partition()
        .tetrahedra()
        .into_iter()
        .map(|t| {
            let bb = crate::geometry::bounding_box(t.vertices().iter());
            (t, bb)
        })
        .collect();
    let q = f.q_values();
    move |x: &Point3| {
        for (j, (t, (lo, hi))) in tets.iter().enumerate() {
            if (0..3).all(|a| x[a] >= lo[a] && x[a] <= hi[a]) && t.contains(x, 0.0) {
                return q[j];
            }
        }
        match extension {
            Some((r, v)) if x.norm() <= r => v,
            _ => 0.0,
        }
    }
}

/// Values of `e^{i x·ζ_k}(1 + φ_k(x))` at `points` for the coefficient of `f`.
pub fn cgo_solution_trace(
    spec: &CgoSpec,
    k: usize,
    f: &PiecewiseField,
    extension: Option<(f64, f64)>,
    omega: f64,
    points: &[Point3],
    cfg: &RemainderConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let support = extension.map_or(f.partition().enclosing_radius(), |(r, _)| r.max(f.partition().enclosing_radius()));
    let rem = CgoRemainder::solve(spec, k, extended_coefficient(f, extension), support, omega, cfg)?;
    Ok(points
        .par_iter()
        .map(|x| spec.phase(k, x) * (1.0 + rem.phi(x)))
        .map(|z| (z.re, z.im))
        .unzip())
}

/// Divided difference `g[a₀, …, a_m]` of the entire function with
/// `g^{(n)}(z) = iⁿ⁺ˢ e^{iz}`.
///
/// Clusters of nodes spanning less than one radian are evaluated from the
/// Taylor expansion about their midpoint; wider sets use the recurrence on
/// the extreme nodes, whose gap is then at least one radian.
pub fn exp_divided_difference(nodes: &[f64], shift: i32) -> Complex64 {
    let mut a = nodes.to_vec();
    a.sort_by(f64::total_cmp);
    dd_sorted(&a, shift)
}

fn ipow(n: i32) -> Complex64 {
    match n.rem_euclid(4) {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

fn dd_sorted(a: &[f64], shift: i32) -> Complex64 {
    let m = a.len() - 1;
    let spread = a[m] - a[0];
    if spread < 1.0 {
        let c = 0.5 * (a[0] + a[m]);
        let d: Vec<f64> = a.iter().map(|x| x - c).collect();
        // h_j(d): complete homogeneous symmetric polynomials of the offsets
        const TERMS: usize = 30;
        let mut h = vec![0.0; TERMS];
        h[0] = 1.0;
        for (v, dv) in d.iter().enumerate() {
            if v == 0 {
                for j in 1..TERMS {
                    h[j] = h[j - 1] * dv;
                }
            } else {
                for j in 1..TERMS {
                    h[j] += h[j - 1] * dv;
                }
            }
        }
        let ec = Complex64::new(0.0, c).exp();
        let mut sum = Complex64::new(0.0, 0.0);
        let mut fact = (1..=m).map(|k| k as f64).product::<f64>();
        for (j, hj) in h.iter().enumerate() {
            let n = m + j;
            if j > 0 {
                fact *= n as f64;
            }
            sum += ipow(n as i32 + shift) * (hj / fact);
        }
        return sum * ec;
    }
    (dd_sorted(&a[1..], shift) - dd_sorted(&a[..m], shift)) / spread
}

/// `∫_T e^{i x·ξ} dx` in closed form.
pub fn tetrahedron_ft(t: &Tetrahedron, xi: &Vector3<f64>) -> Complex64 {
    let a = t.vertices().map(|v| v.dot(xi));
    exp_divided_difference(&a, -3) * (6.0 * t.volume())
}

/// `∫_S ρ(x) e^{i x·ξ} dA` over the triangle `tri` for the affine density with
/// vertex values `rho`.
pub fn triangle_ft(tri: &[Point3; 3], rho: &[f64; 3], xi: &Vector3<f64>) -> Complex64 {
    let area = 0.5 * (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm();
    let a = tri.map(|v| v.dot(xi));
    (0..3)
        .map(|k| exp_divided_difference(&[a[0], a[1], a[2], a[k]], -3) * rho[k])
        .sum::<Complex64>()
        * (2.0 * area)
}

/// `(q̂⁰ − q̂¹)(ξ) = Σ_j q⁰_j T̂⁰_j(ξ) − Σ_k q¹_k T̂¹_k(ξ)`.
pub fn exact_qdiff_ft(f0: &PiecewiseField, f1: &PiecewiseField, xi: &Vector3<f64>) -> Complex64 {
    let side = |f: &PiecewiseField| -> Complex64 {
        (0..f.partition().len())
            .map(|j| tetrahedron_ft(&f.partition().tetrahedron(j), xi) * f.q(j))
            .sum()
    };
    side(f0) - side(f1)
}

/// Samples on the cubic grid `spacing·ℤ³ ∩ {|ξ| ≤ radius}`.
#[derive(Debug, Clone)]
pub struct FourierGrid {
    pub spacing: f64,
    pub samples: Vec<FourierSample>,
}

/// Grid nodes `spacing·(i, j, k)` with `|ξ| ≤ radius`, in lexicographic order.
pub fn grid_nodes(spacing: f64, radius: f64) -> Vec<Vector3<f64>> {
    let n = (radius / spacing).floor() as i64;
    let mut out = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            for k in -n..=n {
                let xi = Vector3::new(i as f64, j as f64, k as f64) * spacing;
                if xi.norm() <= radius * (1.0 + 1e-12) {
                    out.push(xi);
                }
            }
        }
    }
    out
}

/// Oracle-only grid (estimate set equal to the exact transform).
pub fn oracle_grid(f0: &PiecewiseField, f1: &PiecewiseField, spacing: f64, radius: f64) -> FourierGrid {
    let samples = grid_nodes(spacing, radius)
        .into_par_iter()
        .map(|xi| {
            let v = exact_qdiff_ft(f0, f1, &xi);
            FourierSample { xi: [xi.x, xi.y, xi.z], mu: f64::NAN, estimate: v, oracle: v, deviation: 0.0 }
        })
        .collect();
    FourierGrid { spacing, samples }
}

/// Low/high frequency split of `‖q⁰ − q¹‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitNorm {
    /// `(2π)⁻³ ∫_{|ξ|≤ρ} |estimate|²`
    pub low: f64,
    /// Same quadrature applied to the exact transform.
    pub low_oracle: f64,
    /// `‖q⁰ − q¹‖²_{L²} − low_oracle`.
    pub high_bound: f64,
    /// `‖q⁰ − q¹‖²_{L²}`.
    pub total: f64,
}

/// Splits `‖q⁰ − q¹‖²` at `|ξ| = ρ` using midpoint quadrature on the grid cells.
pub fn frequency_split_norm(
    grid: &FourierGrid,
    rho: f64,
    f0: &PiecewiseField,
    f1: &PiecewiseField,
) -> Result<SplitNorm> {
    let limit = rho / 8.0;
    if grid.spacing > limit {
        return Err(Error::GridTooCoarse { spacing: grid.spacing, limit });
    }
    let cell = grid.spacing.powi(3) / (2.0 * PI).powi(3);
    let inside = |s: &&FourierSample| Vector3::from(s.xi).norm() <= rho * (1.0 + 1e-12);
    let low = grid.samples.iter().filter(inside).map(|s| s.estimate.norm_sqr()).sum::<f64>() * cell;
    let low_oracle = grid.samples.iter().filter(inside).map(|s| s.oracle.norm_sqr()).sum::<f64>() * cell;
    let total = exact_l2_distance(f0, f1)?.powi(2);
    Ok(SplitNorm { low, low_oracle, high_bound: total - low_oracle, total })
}

/// CSV rows `xi_x, xi_y, xi_z, mu, Re/Im estimate, Re/Im oracle, deviation`.
pub fn write_samples_csv<W: Write>(samples: &[FourierSample], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "xi_x[1/L]",
        "xi_y[1/L]",
        "xi_z[1/L]",
        "mu[1/L]",
        "re_estimate[L^3]",
        "im_estimate[L^3]",
        "re_oracle[L^3]",
        "im_oracle[L^3]",
        "deviation[L^3]",
    ])?;
    for s in samples {
        let v = [
            s.xi[0],
            s.xi[1],
            s.xi[2],
            s.mu,
            s.estimate.re,
            s.estimate.im,
            s.oracle.re,
            s.oracle.im,
            s.deviation,
        ];
        wr.write_record(v.iter().map(|x| format!("{x:e}")))?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::ElementOrder;
    use crate::fixtures;
    use crate::geometry::random_point_in;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeta_examples() {
        let s = build_zeta(Vector3::zeros(), 1.0).unwrap();
        for z in &s.zeta {
            assert!((z.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt() - 1.0).abs() < 1e-15);
        }
        assert!((s.zeta[0] + s.zeta[1]).iter().all(|c| c.norm() < 1e-15));
        let s = build_zeta(Vector3::new(2.0, 0.0, 0.0), 1.0).unwrap();
        assert!(s.invariant_residuals().iter().all(|r| *r < 1e-12));
        let herm = s.zeta[0].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert!((herm - SQRT_2).abs() < 1e-12);
        let s = build_zeta(Vector3::new(1.0, 0.0, 0.0), 2.0).unwrap();
        assert!(s.invariant_residuals().iter().all(|r| *r < 1e-12));
        let herm = s.zeta[1].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        assert!((herm - 2.0).abs() < 1e-12);
        assert!(build_zeta(Vector3::x(), 0.0).is_err());
    }

    #[test]
    fn trace_examples() {
        let s = build_zeta(Vector3::new(0.7, -1.1, 0.3), 3.0).unwrap();
        let (re, im) = cgo_trace(&s, 0, &[Point3::zeros()]);
        assert_eq!((re[0], im[0]), (1.0, 0.0));
        let m = Mesh::build_omega(&fixtures::reference_partition(), 0.5, ElementOrder::P1).unwrap();
        let pts = m.boundary_points();
        let radius = pts.iter().map(|p| p.norm()).fold(0.0, f64::max);
        for k in 0..2 {
            let (re, im) = cgo_trace(&s, k, &pts);
            let im_zeta = s.zeta[k].map(|z| z.im);
            let mut max = 0.0f64;
            for (i, x) in pts.iter().enumerate() {
                let modulus = re[i].hypot(im[i]);
                assert!((modulus - (-x.dot(&im_zeta)).exp()).abs() < 1e-12 * modulus);
                max = max.max(modulus);
            }
            assert!(max <= (radius * s.growth_rate()).exp() * (1.0 + 1e-12));
            assert!(max.ln() <= 2.0 * radius * (s.mu + s.xi.norm()));
        }
    }

    #[test]
    fn divided_differences_match_direct_formula() {
        // distinct well-separated nodes: explicit Newton formula
        let a = [0.0, 1.3, -2.1, 3.7];
        let g = |z: f64| ipow(-3) * Complex64::new(0.0, z).exp();
        let mut direct = Complex64::new(0.0, 0.0);
        for i in 0..4 {
            let den: f64 = (0..4).filter(|&j| j != i).map(|j| a[i] - a[j]).product();
            direct += g(a[i]) / den;
        }
        assert!((exp_divided_difference(&a, -3) - direct).norm() < 1e-14);
        // fully confluent: g'''(c)/3! = e^{ic}/6
        let c = 0.4;
        let v = exp_divided_difference(&[c; 4], -3);
        assert!((v - Complex64::new(0.0, c).exp() / 6.0).norm() < 1e-15);
        // continuity across the Taylor/recurrence switch
        let near = exp_divided_difference(&[0.0, 0.999_999, 0.5, 0.2], -3);
        let far = exp_divided_difference(&[0.0, 1.000_001, 0.5, 0.2], -3);
        assert!((near - far).norm() < 1e-6);
    }

    #[test]
    fn tetrahedron_ft_examples() {
        let t = Tetrahedron::unit_right();
        let v = tetrahedron_ft(&t, &Vector3::zeros());
        assert!((v - Complex64::new(1.0 / 6.0, 0.0)).norm() < 1e-15);
        // adaptive-style volumetric oracle: high-order rule on a refined split
        let xi = Vector3::new(3.1, -1.7, 2.2);
        let t = Tetrahedron::from_arrays([[0.1, 0.0, 0.2], [1.3, 0.2, -0.1], [0.4, 1.1, 0.3], [0.2, 0.3, 1.4]]);
        let oracle = quadrature_ft(&t, &xi, 3);
        assert!((tetrahedron_ft(&t, &xi) - oracle).norm() < 1e-8);
        // ξ orthogonal to a facet: repeated phases
        let t = Tetrahedron::unit_right();
        let xi = Vector3::new(0.0, 0.0, 5.0);
        assert!((tetrahedron_ft(&t, &xi) - quadrature_ft(&t, &xi, 3)).norm() < 1e-8);
    }

    /// Degree-12 rule on the 8^levels red-refined tetrahedron.
    fn quadrature_ft(t: &Tetrahedron, xi: &Vector3<f64>, levels: usize) -> Complex64 {
        let p = crate::partition::Partition::from_tetrahedra(&[*t], None, None).unwrap();
        let h = t.max_edge() / 2f64.powi(levels as i32);
        let m = Mesh::build_omega(&p, h, ElementOrder::P1).unwrap();
        (0..m.n_elements())
            .map(|e| {
                let s = m.element(e);
                crate::quadrature::tet_rule(12)
                    .iter()
                    .map(|q| Complex64::new(0.0, s.point_at(&q.bary).dot(xi)).exp() * q.weight)
                    .sum::<Complex64>()
                    * s.volume()
            })
            .sum()
    }

    #[test]
    fn triangle_ft_matches_quadrature() {
        let tri = [Point3::new(0.1, 0.2, 0.0), Point3::new(1.2, -0.3, 0.4), Point3::new(0.3, 0.9, -0.2)];
        let rho = [1.0, -0.5, 2.0];
        let area = 0.5 * (tri[1] - tri[0]).cross(&(tri[2] - tri[0])).norm();
        for xi in [Vector3::zeros(), Vector3::new(4.0, -2.0, 1.0), Vector3::new(0.01, 0.0, 0.02)] {
            let mut q = Complex64::new(0.0, 0.0);
            // split into 4^4 subtriangles, degree-12 rule each
            let mut tris = vec![tri];
            for _ in 0..4 {
                tris = tris
                    .iter()
                    .flat_map(|t| {
                        let m = [(t[0] + t[1]) * 0.5, (t[1] + t[2]) * 0.5, (t[0] + t[2]) * 0.5];
                        [[t[0], m[0], m[2]], [m[0], t[1], m[1]], [m[2], m[1], t[2]], [m[0], m[1], m[2]]]
                    })
                    .collect();
            }
            for s in &tris {
                let a = 0.5 * (s[1] - s[0]).cross(&(s[2] - s[0])).norm();
                for p in crate::quadrature::tri_rule(12) {
                    let x = s[0] * p.bary[0] + s[1] * p.bary[1] + s[2] * p.bary[2];
                    // affine density through barycentrics of the big triangle
                    let l = bary2(&tri, &x);
                    let r = rho[0] * l[0] + rho[1] * l[1] + rho[2] * l[2];
                    q += Complex64::new(0.0, x.dot(&xi)).exp() * (p.weight * a * r);
                }
            }
            let exact = triangle_ft(&tri, &rho, &xi);
            assert!((exact - q).norm() < 1e-10 * area.max(q.norm()), "{exact} vs {q}");
        }
    }

    fn bary2(t: &[Point3; 3], x: &Point3) -> [f64; 3] {
        let (g, _) = crate::fem::triangle_gradients(t);
        let l1 = g[1].dot(&(x - t[0]));
        let l2 = g[2].dot(&(x - t[0]));
        [1.0 - l1 - l2, l1, l2]
    }

    #[test]
    fn qdiff_ft_zero_frequency_is_signed_volume_integral() {
        let f0 = fixtures::reference_field();
        let f1 = f0.deform(&fixtures::reference_direction(), 1.0).unwrap();
        let v = exact_qdiff_ft(&f0, &f1, &Vector3::zeros());
        let table = crate::partition::overlap_table(&f0, &f1).unwrap();
        let integral: f64 = table.entries.iter().map(|(j, k, vol)| (f0.q(*j) - f1.q(*k)) * vol).sum();
        assert!((v.re - integral).abs() < 1e-14);
        assert_eq!(v.im, 0.0);
        // conjugate symmetry
        let xi = Vector3::new(1.5, -0.4, 2.0);
        let a = exact_qdiff_ft(&f0, &f1, &xi);
        let b = exact_qdiff_ft(&f0, &f1, &-xi);
        assert!((a - b.conj()).norm() < 1e-15);
    }

    #[test]
    fn fourier_estimate_vanishes_for_identical_fields() {
        let f = fixtures::reference_field();
        let fs = FrequencySpec::new(1.2, 0.5, 1.25, 1.0).unwrap();
        let m = Mesh::build_omega(f.partition(), 0.5, ElementOrder::P1).unwrap();
        let s = fourier_estimate(&f, &f, &fs, &m, &build_zeta(Vector3::new(1.0, 0.5, 0.0), 4.0).unwrap()).unwrap();
        assert_eq!(s.estimate, Complex64::new(0.0, 0.0));
        assert_eq!(s.oracle, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn split_norm_examples() {
        let f0 = fixtures::four_tet_field(1.0, 2.0);
        let mut labels = f0.labels().to_vec();
        labels[0] = 1;
        let f1 = f0.with_labels(labels).unwrap();
        let g = oracle_grid(&f0, &f1, 0.5, 4.0);
        let s = frequency_split_norm(&g, 4.0, &f0, &f1).unwrap();
        assert!(s.low_oracle < s.total && s.high_bound > 0.0);
        let same = oracle_grid(&f0, &f0, 0.5, 4.0);
        let z = frequency_split_norm(&same, 4.0, &f0, &f0).unwrap();
        assert_eq!((z.low, z.high_bound), (0.0, 0.0));
        assert!(matches!(frequency_split_norm(&g, 3.0, &f0, &f1), Err(Error::GridTooCoarse { .. })));
    }

    #[test]
    fn fourier_estimate_csv_is_deterministic() {
        let f0 = fixtures::four_tet_field(1.0, 2.0);
        let f1 = fixtures::four_tet_field(2.0, 1.0);
        let g = oracle_grid(&f0, &f1, 1.0, 2.0);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_samples_csv(&g.samples, &mut a).unwrap();
        write_samples_csv(&g.samples, &mut b).unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(a).unwrap().starts_with("xi_x[1/L]"));
    }

    #[test]
    fn plancherel_grid_quadrature_converges() {
        // the low-frequency part grows towards ‖q⁰−q¹‖² and, for a jump across
        // flat facets (|q̂|² ~ |ξ|⁻⁴), the tail decays like 1/ρ
        let f0 = fixtures::four_tet_field(1.0, 2.0);
        let f1 = fixtures::four_tet_field(2.0, 1.0);
        let mut prev = 0.0;
        let mut scaled_tails = Vec::new();
        for rho in [4.0, 8.0, 16.0] {
            let g = oracle_grid(&f0, &f1, rho / 16.0, rho);
            let s = frequency_split_norm(&g, rho, &f0, &f1).unwrap();
            assert!(s.low_oracle > prev && s.low_oracle < s.total);
            prev = s.low_oracle;
            scaled_tails.push(s.high_bound * rho);
        }
        assert!((scaled_tails[2] / scaled_tails[1] - 1.0).abs() < 0.05, "{scaled_tails:?}");
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]
            #[test]
            fn zeta_invariants(x in -20.0f64..20.0, y in -20.0f64..20.0, z in -20.0f64..20.0, mu in 0.01f64..20.0) {
                let s = build_zeta(Vector3::new(x, y, z), mu).unwrap();
                let scale = mu.max(Vector3::new(x, y, z).norm()).max(1.0);
                for r in s.invariant_residuals() {
                    prop_assert!(r <= 1e-12 * scale * scale);
                }
            }

            #[test]
            fn tetrahedron_ft_is_conjugate_symmetric(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = Tetrahedron::new(std::array::from_fn(|_| {
                    random_point_in(&Tetrahedron::regular(2.0), &mut rng)
                }));
                let xi = Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
                let a = tetrahedron_ft(&t, &xi);
                let b = tetrahedron_ft(&t, &-xi);
                prop_assert!((a - b.conj()).norm() <= 1e-14 * (1.0 + t.volume()));
            }
        }
    }

    #[test]
    fn fft3_round_trip() {
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Complex64> = (0..n * n * n).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        let fft = Fft3::new(n);
        let mut work = data.clone();
        fft.forward(&mut work);
        // direct DFT of one coefficient
        let k = (1usize, 3usize, 6usize);
        let mut direct = Complex64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                for m in 0..n {
                    let ang = -2.0 * PI * ((k.0 * i + k.1 * j + k.2 * m) as f64) / n as f64;
                    direct += data[(i * n + j) * n + m] * Complex64::new(0.0, ang).exp();
                }
            }
        }
        assert!((work[(k.0 * n + k.1) * n + k.2] - direct).norm() < 1e-12);
        fft.inverse(&mut work);
        for (a, b) in work.iter().zip(&data) {
            assert!((a / (n * n * n) as f64 - b).norm() < 1e-14);
        }
    }

    #[test]
    fn remainder_vanishes_without_potential() {
        let f = fixtures::reference_field();
        let spec = build_zeta(Vector3::new(1.0, 0.5, 0.0), 4.0).unwrap();
        let pts = [Point3::new(0.3, -0.2, 0.1), Point3::new(-0.5, 0.4, 0.2)];
        let cfg = RemainderConfig { grid: 16, ..Default::default() };
        let (re, im) = cgo_solution_trace(&spec, 0, &f, None, 0.0, &pts, &cfg).unwrap();
        let (re0, im0) = cgo_trace(&spec, 0, &pts);
        for i in 0..2 {
            assert!((re[i] - re0[i]).abs() < 1e-14 * re0[i].abs().max(1.0));
            assert!((im[i] - im0[i]).abs() < 1e-14 * im0[i].abs().max(1.0));
        }
    }

    #[test]
    fn remainder_decays_with_mu() {
        let f = fixtures::reference_field();
        let r = f.partition().enclosing_radius();
        let q = extended_coefficient(&f, None);
        let cfg = RemainderConfig { grid: 32, ..Default::default() };
        let xi = Vector3::new(1.0, 0.5, 0.0);
        let probe: Vec<Point3> = (0..20).map(|i| {
            let t = i as f64 * 0.3;
            Point3::new(t.cos(), t.sin(), (2.0 * t).cos()) * (0.5 * r)
        }).collect();
        let sup = |mu: f64| {
            let spec = build_zeta(xi, mu).unwrap();
            let rem = CgoRemainder::solve(&spec, 0, &q, r, 1.2, &cfg).unwrap();
            probe.iter().map(|x| rem.phi(x).norm()).fold(0.0, f64::max)
        };
        let (a, b) = (sup(4.0), sup(16.0));
        assert!(a > 0.0 && b < 0.5 * a, "{a} {b}");
    }

    #[test]
    fn cgo_solution_is_harmonic_outside_support() {
        // outside the support Δu = 0, so u equals its spherical mean
        let f = fixtures::reference_field();
        let r = f.partition().enclosing_radius();
        let spec = build_zeta(Vector3::new(0.5, 0.0, 1.0), 4.0).unwrap();
        let centre = Point3::new(0.3, -0.4, 0.5).normalize() * (r + 0.08);
        let rho = 0.06;
        let mut pts = vec![centre];
        let (nt, np) = (24, 48);
        let mut weights = Vec::new();
        for a in 0..nt {
            let th = PI * (a as f64 + 0.5) / nt as f64;
            for b in 0..np {
                let ph = 2.0 * PI * b as f64 / np as f64;
                pts.push(centre + Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()) * rho);
                weights.push(th.sin());
            }
        }
        let cfg = RemainderConfig { grid: 64, ..Default::default() };
        let (re, im) = cgo_solution_trace(&spec, 0, &f, None, 1.2, &pts, &cfg).unwrap();
        let wsum: f64 = weights.iter().sum();
        let mean: Complex64 = weights
            .iter()
            .enumerate()
            .map(|(i, w)| Complex64::new(re[i + 1], im[i + 1]) * *w)
            .sum::<Complex64>()
            / wsum;
        let u = Complex64::new(re[0], im[0]);
        // the bare phase is harmonic too; compare against the remainder's size
        let phase = spec.phase(0, &centre);
        let rem = (u - phase).norm();
        assert!(rem > 1e-4 * u.norm());
        assert!((mean - u).norm() < 0.05 * rem, "{} vs {}", (mean - u).norm(), rem);
    }
}
