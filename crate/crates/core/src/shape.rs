//! Shape derivatives of the DtN pairing `ℱ(t) = ⟨Λ_t φ, ψ⟩` under vertex
//! deformations `P + t·v`.
//!
//! On the fixed background mesh the coefficient of the moving partition is
//! integrated exactly, so `ℱ` is differentiable and, with `u`, `w` the discrete
//! solutions for the traces `φ`, `ψ`,
//!
//! `ℱ′(t₀) = −ω² Σ_j (q_j − q_bg) ∫_{∂T_j(t₀)} u w (Φ_j·ν_j) dσ`
//!
//! where `Φ_j` is the affine velocity field of tetrahedron `j`. The volume form
//! `−ω² Σ_j (q_j − q_bg) ∫_{T_j} div(u w Φ_j)` equals it by the divergence theorem.
//! `𝒢(φ, ψ)` denotes the surface sum without the `−ω²` factor.

use faer::Mat;
use faer::MatRef;
use nalgebra::Vector3;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::cgo_fourier::triangle_ft;
use crate::dtn::BoundaryGram;
use crate::fem::{shape_gradients, shape_values, triangle_gradients, Coefficient, FrequencySpec, HelmholtzSystem, Mesh};
use crate::geometry::{Point3, FACETS};
use crate::partition::{Deformation, Partition, PiecewiseField};
use crate::quadrature::tri_rule;
use crate::{Error, Result};

/// Triangle carrying the affine density `ρ = Σ ρ_i λ_i`, with a chosen unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityTriangle {
    pub tri: [Point3; 3],
    pub normal: Vector3<f64>,
    pub rho: [f64; 3],
}

impl DensityTriangle {
    pub fn density(&self, x: &Point3) -> f64 {
        let (g, _) = triangle_gradients(&self.tri);
        let r = x - self.tri[0];
        let l1 = g[1].dot(&r);
        let l2 = g[2].dot(&r);
        self.rho[0] * (1.0 - l1 - l2) + self.rho[1] * l1 + self.rho[2] * l2
    }

    pub fn area(&self) -> f64 {
        0.5 * (self.tri[1] - self.tri[0]).cross(&(self.tri[2] - self.tri[0])).norm()
    }

    /// `∫ ρ dσ`.
    pub fn mass(&self) -> f64 {
        self.area() * (self.rho[0] + self.rho[1] + self.rho[2]) / 3.0
    }
}

/// Facets of every tetrahedron at `t₀` with density `(q_j − q_bg) Φ_j·ν_j`.
pub fn tetrahedron_facet_densities(
    f: &PiecewiseField,
    d: &Deformation,
    t0: f64,
    q_bg: f64,
) -> Result<Vec<DensityTriangle>> {
    let p = f.partition();
    if d.len() != p.vertices().len() {
        return Err(Error::InvalidInput(format!("{} displacements for {} vertices", d.len(), p.vertices().len())));
    }
    let moved = p.displaced(d, t0);
    let mut out = Vec::with_capacity(4 * p.len());
    for j in 0..p.len() {
        let c = f.q(j) - q_bg;
        let tet = moved.tetrahedron(j);
        let ids = p.tets()[j];
        for (i, fct) in FACETS.iter().enumerate() {
            let normal = tet.facet_normal(i);
            let rho = fct.map(|k| c * d.displacements[ids[k]].dot(&normal));
            out.push(DensityTriangle { tri: tet.facet(i), normal, rho });
        }
    }
    Ok(out)
}

/// One facet of the measure `H = Σ f_k dσ_k`. `ν` points out of the tetrahedron
/// carrying `q⁺`; `f = (q⁺ − q⁻) Φ·ν`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureFacet {
    pub facet: DensityTriangle,
    pub q_plus: f64,
    pub q_minus: f64,
    pub on_boundary: bool,
}

/// Facet measure of a boundary-preserving deformation. Boundary facets carry a
/// zero density.
#[derive(Debug, Clone, PartialEq)]
pub struct FacetMeasure {
    pub facets: Vec<MeasureFacet>,
}

impl FacetMeasure {
    /// Builds the measure of `d` at `t₀`; `q_bg` is the value outside the partition.
    pub fn new(f: &PiecewiseField, d: &Deformation, t0: f64, q_bg: f64) -> Result<Self> {
        let p = f.partition();
        p.check_boundary_preserving(d)?;
        let moved = p.displaced(d, t0);
        let mut facets = Vec::new();
        for fi in p.interior_facets() {
            let [a, b] = fi.tets;
            let tet = moved.tetrahedron(a);
            let normal = tet.facet_normal(fi.facets[0]);
            let ids = p.tets()[a];
            let jump = f.q(a) - f.q(b);
            let rho = FACETS[fi.facets[0]].map(|k| jump * d.displacements[ids[k]].dot(&normal));
            facets.push(MeasureFacet {
                facet: DensityTriangle { tri: tet.facet(fi.facets[0]), normal, rho },
                q_plus: f.q(a),
                q_minus: f.q(b),
                on_boundary: false,
            });
        }
        for bf in p.boundary_facets() {
            let tet = moved.tetrahedron(bf.tet);
            facets.push(MeasureFacet {
                facet: DensityTriangle { tri: tet.facet(bf.facet), normal: tet.facet_normal(bf.facet), rho: [0.0; 3] },
                q_plus: f.q(bf.tet),
                q_minus: q_bg,
                on_boundary: true,
            });
        }
        Ok(Self { facets })
    }

    /// Smallest `|q⁺ − q⁻|` over internal facets.
    pub fn min_jump(&self) -> f64 {
        self.facets
            .iter()
            .filter(|f| !f.on_boundary)
            .map(|f| (f.q_plus - f.q_minus).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// `Σ_k ∫ f_k dσ`.
    pub fn total_mass(&self) -> f64 {
        self.facets.iter().map(|f| f.facet.mass()).sum()
    }

    pub fn densities(&self) -> Vec<DensityTriangle> {
        self.facets.iter().map(|f| f.facet).collect()
    }
}

/// `Ĥ(ξ) = Σ_k ∫_{F_k} e^{i x·ξ} f_k dσ`, exact.
pub fn facet_measure_ft(fm: &FacetMeasure, xi: &Vector3<f64>) -> Complex64 {
    fm.facets.iter().map(|f| triangle_ft(&f.facet.tri, &f.facet.rho, xi)).sum()
}

/// Values on the mesh pattern of `∫ ρ ψ_a ψ_b dσ` summed over the triangles.
pub fn surface_form_values(mesh: &Mesh, tris: &[DensityTriangle]) -> Vec<f64> {
    let order = mesh.order();
    let nloc = order.local_dofs();
    let rule = tri_rule(2 * order.degree() + 1);
    let locals: Vec<(usize, Vec<f64>)> = tris
        .par_iter()
        .filter(|t| t.rho.iter().any(|&r| r != 0.0))
        .flat_map_iter(|t| {
            let mut out = Vec::new();
            let mut phi = [0.0; 10];
            for (e, fan) in mesh.triangle_pieces(&t.tri, &t.normal) {
                let mut local = vec![0.0; nloc * nloc];
                let g = mesh.geom(e);
                for piece in &fan {
                    let area = 0.5 * (piece[1] - piece[0]).cross(&(piece[2] - piece[0])).norm();
                    for q in rule {
                        let x = piece[0] * q.bary[0] + piece[1] * q.bary[1] + piece[2] * q.bary[2];
                        let w = q.weight * area * t.density(&x);
                        shape_values(order, &g.barycentric(&x), &mut phi);
                        for a in 0..nloc {
                            for b in 0..nloc {
                                local[a * nloc + b] += w * phi[a] * phi[b];
                            }
                        }
                    }
                }
                out.push((e, local));
            }
            out
        })
        .collect();
    mesh.scatter(locals)
}

/// Values on the mesh pattern of `Σ_j (q_j − q_bg) ∫_{T_j(t₀)} div(ψ_a ψ_b Φ_j) dx`.
pub fn volume_form_values(mesh: &Mesh, f: &PiecewiseField, d: &Deformation, t0: f64) -> Result<Vec<f64>> {
    let p = f.partition();
    let flows = (0..p.len()).map(|j| p.affine_flow(d, j, t0)).collect::<Result<Vec<_>>>()?;
    let moved = f.with_partition(p.displaced(d, t0))?;
    let coef = Coefficient::from_field(mesh, &moved);
    let order = mesh.order();
    let nloc = order.local_dofs();
    let deg = 2 * order.degree();
    let locals: Vec<(usize, Vec<f64>)> = (0..mesh.n_elements())
        .into_par_iter()
        .filter_map(|e| {
            let overlaps = mesh.element_overlaps(e, &coef);
            let mut local = vec![0.0; nloc * nloc];
            let mut any = false;
            let mut phi = [0.0; 10];
            let mut grad = [Vector3::zeros(); 10];
            let g = mesh.geom(e);
            for (j, region) in &overlaps {
                let c = coef.contrast(*j);
                if c == 0.0 {
                    continue;
                }
                any = true;
                let flow = &flows[*j];
                let div = flow.divergence();
                mesh.integrate_region(e, region, deg, |l, x, w| {
                    shape_values(order, l, &mut phi);
                    shape_gradients(order, l, &g.grads, &mut grad);
                    let v = flow.phi(x);
                    for a in 0..nloc {
                        let ga = grad[a].dot(&v);
                        for b in 0..nloc {
                            let gb = grad[b].dot(&v);
                            local[a * nloc + b] += c * w * (ga * phi[b] + phi[a] * gb + phi[a] * phi[b] * div);
                        }
                    }
                });
            }
            any.then_some((e, local))
        })
        .collect();
    Ok(mesh.scatter(locals))
}

/// Facet and volume forms of `ℱ′(t₀)`; equal up to round-off on exact quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateauxValue {
    pub facet: f64,
    pub volume: f64,
}

impl GateauxValue {
    pub fn relative_gap(&self) -> f64 {
        let scale = self.facet.abs().max(self.volume.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.facet - self.volume).abs() / scale
        }
    }
}

/// Solver at `t₀` together with the surface form of a deformation.
pub struct ShapeDerivative<'m> {
    sys: HelmholtzSystem<'m>,
    surface: Vec<f64>,
    omega: f64,
}

impl<'m> ShapeDerivative<'m> {
    pub fn new(mesh: &'m Mesh, f: &PiecewiseField, d: &Deformation, t0: f64, fs: &FrequencySpec) -> Result<Self> {
        let at = f.deform(d, t0)?;
        let sys = HelmholtzSystem::for_field(mesh, &at, fs)?;
        let tris = tetrahedron_facet_densities(f, d, t0, mesh.kind().background())?;
        let surface = surface_form_values(mesh, &tris);
        Ok(Self { sys, surface, omega: fs.omega })
    }

    pub fn system(&self) -> &HelmholtzSystem<'m> {
        &self.sys
    }

    /// `𝒢(φ, ψ)`.
    pub fn form(&self, phi: &[f64], psi: &[f64]) -> Result<f64> {
        let u = self.sys.solve(phi)?;
        let w = self.sys.solve(psi)?;
        Ok(self.sys.mesh().csr_bilinear(&self.surface, &w.values, &u.values))
    }

    /// `ℱ′(t₀) = −ω² 𝒢(φ, ψ)`.
    pub fn derivative(&self, phi: &[f64], psi: &[f64]) -> Result<f64> {
        Ok(-self.omega * self.omega * self.form(phi, psi)?)
    }

    /// `G[a][b] = 𝒢(basis_b, basis_a)` for boundary traces given as columns.
    pub fn form_matrix(&self, basis: MatRef<'_, f64>) -> Result<Mat<f64>> {
        let u = self.sys.solve_traces(basis)?;
        let mesh = self.sys.mesh();
        let k = basis.ncols();
        let cols: Vec<Vec<f64>> = (0..k).map(|c| (0..u.nrows()).map(|i| u[(i, c)]).collect()).collect();
        let du: Vec<Vec<f64>> = cols.par_iter().map(|c| mesh.csr_matvec(&self.surface, c)).collect();
        Ok(Mat::from_fn(k, k, |a, b| cols[a].iter().zip(&du[b]).map(|(x, y)| x * y).sum()))
    }
}

/// `ℱ′(t₀)` for the traces `φ`, `ψ` in both facet and volume form.
pub fn gateaux_derivative(
    f: &PiecewiseField,
    d: &Deformation,
    t0: f64,
    phi: &[f64],
    psi: &[f64],
    fs: &FrequencySpec,
    mesh: &Mesh,
) -> Result<GateauxValue> {
    let sd = ShapeDerivative::new(mesh, f, d, t0, fs)?;
    let u = sd.sys.solve(phi)?;
    let w = sd.sys.solve(psi)?;
    let w2 = fs.omega * fs.omega;
    let facet = -w2 * mesh.csr_bilinear(&sd.surface, &w.values, &u.values);
    let vol = volume_form_values(mesh, f, d, t0)?;
    let volume = -w2 * mesh.csr_bilinear(&vol, &w.values, &u.values);
    Ok(GateauxValue { facet, volume })
}

/// `ℱ(t) = ⟨Λ_t φ, ψ⟩` for the partition `P + t·v`.
pub fn dtn_pairing(
    f: &PiecewiseField,
    d: &Deformation,
    t: f64,
    phi: &[f64],
    psi: &[f64],
    fs: &FrequencySpec,
    mesh: &Mesh,
) -> Result<f64> {
    let at = f.deform(d, t)?;
    let sys = HelmholtzSystem::for_field(mesh, &at, fs)?;
    let u = sys.solve(phi)?;
    Ok(sys.neumann(&u.values).iter().zip(psi).map(|(a, b)| a * b).sum())
}

/// Difference quotient `R(h) = (ℱ(t₀+h) − ℱ(t₀))/h`.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_r(
    f: &PiecewiseField,
    d: &Deformation,
    t0: f64,
    h: f64,
    phi: &[f64],
    psi: &[f64],
    fs: &FrequencySpec,
    mesh: &Mesh,
) -> Result<f64> {
    if h == 0.0 {
        return Err(Error::InvalidInput("finite-difference step must be nonzero".into()));
    }
    let f1 = dtn_pairing(f, d, t0 + h, phi, psi, fs, mesh)?;
    let f0 = dtn_pairing(f, d, t0, phi, psi, fs, mesh)?;
    Ok((f1 - f0) / h)
}

/// Per-tetrahedron and per-facet regroupings of `ℱ′(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FormSums {
    pub tet_sum: f64,
    pub facet_sum: f64,
}

/// `ℱ′(0)` summed over tetrahedron boundaries and over internal facets with
/// jumps `q⁺ − q⁻`. Requires a boundary-preserving deformation.
pub fn facet_form_equivalence(
    f: &PiecewiseField,
    d: &Deformation,
    phi: &[f64],
    psi: &[f64],
    fs: &FrequencySpec,
    mesh: &Mesh,
) -> Result<FormSums> {
    let q_bg = mesh.kind().background();
    let fm = FacetMeasure::new(f, d, 0.0, q_bg)?;
    let sys = HelmholtzSystem::for_field(mesh, f, fs)?;
    let u = sys.solve(phi)?;
    let w = sys.solve(psi)?;
    let w2 = fs.omega * fs.omega;
    let tet = surface_form_values(mesh, &tetrahedron_facet_densities(f, d, 0.0, q_bg)?);
    let fac = surface_form_values(mesh, &fm.densities());
    Ok(FormSums {
        tet_sum: -w2 * mesh.csr_bilinear(&tet, &w.values, &u.values),
        facet_sum: -w2 * mesh.csr_bilinear(&fac, &w.values, &u.values),
    })
}

/// Norm of `𝒢` on a probe subspace and its maximizing pair.
#[derive(Debug, Clone)]
pub struct GateauxReport {
    /// `m₀ = sup |𝒢(φ, ψ)|` over unit `G_{1/2}` traces in the probe subspace.
    pub m0: f64,
    pub phi0: Vec<f64>,
    pub psi0: Vec<f64>,
    /// `𝒢(φ₀, ψ₀)`.
    pub value: f64,
    pub budget: usize,
}

/// Checks `Σ_j Σ_{i∈T_j} |v_i| = 1`.
fn check_normalized(p: &Partition, d: &Deformation) -> Result<()> {
    if d.is_zero() {
        return Err(Error::ZeroDeformation);
    }
    let total: f64 = p.deformation_size(d)?.per_tet.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("deformation is not normalized (sum of |v| = {total})")));
    }
    Ok(())
}

/// `m₀` of `𝒢` at `t = 0` over the `budget` lowest boundary pencil modes.
pub fn derivative_norm_probe(
    f: &PiecewiseField,
    d: &Deformation,
    fs: &FrequencySpec,
    mesh: &Mesh,
    gram: &BoundaryGram,
    budget: usize,
) -> Result<GateauxReport> {
    check_normalized(f.partition(), d)?;
    if gram.mesh_id() != mesh.id() {
        return Err(Error::MeshMismatch);
    }
    let basis = gram.probe_basis(budget);
    let sd = ShapeDerivative::new(mesh, f, d, 0.0, fs)?;
    let g = sd.form_matrix(basis.as_ref())?;
    let k = g.nrows();
    let svd = g.svd().map_err(|e| Error::EigFailure(format!("{e:?}")))?;
    let top = (0..k).max_by(|&i, &j| svd.S()[i].total_cmp(&svd.S()[j])).unwrap_or(0);
    let uvec = svd.U().col(top).to_owned();
    let vvec = svd.V().col(top).to_owned();
    let phi = &basis * &vvec;
    let psi = &basis * &uvec;
    let phi0: Vec<f64> = (0..phi.nrows()).map(|i| phi[i]).collect();
    let psi0: Vec<f64> = (0..psi.nrows()).map(|i| psi[i]).collect();
    let value: f64 = (0..k)
        .map(|a| uvec[a] * (0..k).map(|b| g[(a, b)] * vvec[b]).sum::<f64>())
        .sum();
    Ok(GateauxReport { m0: svd.S()[top], phi0, psi0, value, budget: k })
}

/// One scale of the second-step scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SecondStepRow {
    pub s: f64,
    /// `d_T` between `P` and `P + s·v`.
    pub d_t: f64,
    /// `sup |ℱ′(1; s·v) − ℱ′(0; s·v)|` over unit probe pairs.
    pub sup: f64,
    /// The same difference for the single pair of lowest modes.
    pub single: f64,
}

/// For each scale `s`, compares `ℱ′` at both ends of the path `P + t·s·v`.
pub fn second_step_scaling(
    f: &PiecewiseField,
    d: &Deformation,
    fs: &FrequencySpec,
    mesh: &Mesh,
    gram: &BoundaryGram,
    budget: usize,
    scales: &[f64],
) -> Result<Vec<SecondStepRow>> {
    let basis = gram.probe_basis(budget);
    let w2 = fs.omega * fs.omega;
    scales
        .iter()
        .map(|&s| {
            if s == 0.0 {
                return Ok(SecondStepRow { s, d_t: 0.0, sup: 0.0, single: 0.0 });
            }
            let ds = d.scaled(s);
            let d_t = f.partition().deformation_size(&ds)?.d_t;
            let g0 = ShapeDerivative::new(mesh, f, &ds, 0.0, fs)?.form_matrix(basis.as_ref())?;
            let g1 = ShapeDerivative::new(mesh, f, &ds, 1.0, fs)?.form_matrix(basis.as_ref())?;
            let diff = (&g1 - &g0) * w2;
            let sup = diff.svd().map_err(|e| Error::EigFailure(format!("{e:?}")))?.S().column_vector().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            Ok(SecondStepRow { s, d_t, sup, single: diff[(0, 0)].abs() })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x` over the positive pairs.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Largest `s ≤ cap` (to within `1e-3·cap`) with `P + s·v` above the insphere floor.
pub fn max_regular_scale(p: &Partition, d: &Deformation, cap: f64) -> f64 {
    if p.deform(d, cap).is_ok() {
        return cap;
    }
    let (mut lo, mut hi) = (0.0, cap);
    while hi - lo > 1e-3 * cap {
        let mid = 0.5 * (lo + hi);
        if p.deform(d, mid).is_ok() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}
