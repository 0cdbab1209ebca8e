//! Discrete Dirichlet-to-Neumann maps, the fractional boundary Gram and the
//! `H^{1/2} → H^{-1/2}` operator norm.
//!
//! Traces are coefficient vectors over the mesh boundary slots
//! ([`Mesh::boundary_dofs`]); Neumann data are the dual functionals
//! `⟨∂u/∂ν, ψ_b⟩ = ∫ ∇u·∇w_b − ω²q u w_b` for any extension `w_b` of the
//! boundary basis function `ψ_b`.

use std::io::Write;

use faer::{Mat, MatRef, Side};
use rayon::prelude::*;

use crate::fem::{
    triangle_gradients, triangle_shape_gradients, triangle_shape_values, Coefficient, FemSolution, FrequencySpec,
    HelmholtzSystem, Mesh, Slot,
};
use crate::partition::PiecewiseField;
use crate::quadrature::tri_rule;
use crate::{Error, Result};

/// `Λ_q` as a dense matrix over boundary slots: `K_BB − K_BI K_II⁻¹ K_IB`.
#[derive(Debug, Clone)]
pub struct DtnMatrix {
    matrix: Mat<f64>,
    omega: f64,
    mesh_id: String,
}

impl DtnMatrix {
    /// Schur complement of an assembled system, computed column by column as the
    /// boundary rows of `K` applied to the discrete extension of each unit trace.
    pub fn assemble(sys: &HelmholtzSystem<'_>) -> Result<Self> {
        let mesh = sys.mesh();
        let ext = sys.extension()?;
        let nb = mesh.n_boundary();
        let cols: Vec<Vec<f64>> = (0..nb)
            .into_par_iter()
            .map(|c| {
                let u: Vec<f64> = (0..ext.nrows()).map(|i| ext[(i, c)]).collect();
                sys.neumann(&u)
            })
            .collect();
        let matrix = Mat::from_fn(nb, nb, |i, j| cols[j][i]);
        Ok(Self { matrix, omega: sys.omega(), mesh_id: mesh.id().to_string() })
    }

    pub fn for_field(mesh: &Mesh, f: &PiecewiseField, fs: &FrequencySpec) -> Result<Self> {
        Self::assemble(&HelmholtzSystem::for_field(mesh, f, fs)?)
    }

    pub fn from_matrix(matrix: Mat<f64>, omega: f64, mesh_id: &str) -> Self {
        Self { matrix, omega, mesh_id: mesh_id.to_string() }
    }

    pub fn matrix(&self) -> MatRef<'_, f64> {
        self.matrix.as_ref()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn mesh_id(&self) -> &str {
        &self.mesh_id
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.matrix[(i, j)] * phi[j]).sum())
            .collect()
    }

    /// `⟨Λφ, ψ⟩ = ψᵀ Λ φ`.
    pub fn pairing(&self, phi: &[f64], psi: &[f64]) -> f64 {
        self.apply(phi).iter().zip(psi).map(|(a, b)| a * b).sum()
    }

    /// `self − other`, provided both live on the same mesh.
    pub fn difference(&self, other: &DtnMatrix) -> Result<Mat<f64>> {
        if self.mesh_id != other.mesh_id {
            return Err(Error::MeshMismatch);
        }
        Ok(&self.matrix - &other.matrix)
    }

    /// `‖Λ − Λᵀ‖_F / ‖Λ‖_F`.
    pub fn symmetry_defect(&self) -> f64 {
        let d = &self.matrix - self.matrix.transpose();
        d.norm_l2() / self.matrix.norm_l2().max(f64::MIN_POSITIVE)
    }

    /// Dense CSV dump: one row per boundary slot.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_dense_csv(self.matrix.as_ref(), w)
    }
}

pub fn write_dense_csv<W: Write>(m: MatRef<'_, f64>, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["row".to_string()];
    header.extend((0..m.ncols()).map(|j| format!("c{j}")));
    wr.write_record(&header)?;
    for i in 0..m.nrows() {
        let mut rec = vec![i.to_string()];
        rec.extend((0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Boundary mass and Laplace–Beltrami stiffness with the spectral factors of
/// the pencil `S_b y = λ M_b y`.
///
/// With `M_b = L Lᵀ` and `L⁻¹ S_b L⁻ᵀ = Q Λ Qᵀ`, the fractional Gram matrices are
/// `G_s = L Q (1+Λ)^s Qᵀ Lᵀ`.
#[derive(Debug, Clone)]
pub struct BoundaryGram {
    mass: Mat<f64>,
    stiffness: Mat<f64>,
    l: Mat<f64>,
    q: Mat<f64>,
    lambda: Vec<f64>,
    /// `(1+Λ)^{-1/4} Qᵀ L⁻¹`, the inverse of the `G_{1/2}` factor `W = L Q (1+Λ)^{1/4}`.
    w_inv: Mat<f64>,
    mesh_id: String,
}

impl BoundaryGram {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        let nb = mesh.n_boundary();
        let order = mesh.order();
        let nf = order.face_dofs();
        let deg = 2 * order.degree();
        let mut mass = Mat::<f64>::zeros(nb, nb);
        let mut stiffness = Mat::<f64>::zeros(nb, nb);
        let nodes = mesh.nodes();
        let mut phi = [0.0; 6];
        let mut grad = [nalgebra::Vector3::zeros(); 6];
        for (f, face) in mesh.boundary_faces().iter().enumerate() {
            let tri = face.map(|i| nodes[i]);
            let (g, area) = triangle_gradients(&tri);
            let slots: Vec<usize> = mesh
                .boundary_face_dofs(f)
                .iter()
                .map(|&d| match mesh.slot(d) {
                    Slot::Boundary(b) => b,
                    Slot::Interior(_) => unreachable!("boundary face carries an interior dof"),
                })
                .collect();
            for q in tri_rule(deg) {
                triangle_shape_values(order, &q.bary, &mut phi);
                triangle_shape_gradients(order, &q.bary, &g, &mut grad);
                let w = q.weight * area;
                for a in 0..nf {
                    for b in 0..nf {
                        mass[(slots[a], slots[b])] += w * phi[a] * phi[b];
                        stiffness[(slots[a], slots[b])] += w * grad[a].dot(&grad[b]);
                    }
                }
            }
        }
        let llt = mass.llt(Side::Lower).map_err(|e| Error::EigFailure(format!("boundary mass: {e:?}")))?;
        let l = llt.L().to_owned();
        let mut linv = Mat::<f64>::identity(nb, nb);
        l.solve_lower_triangular_in_place(linv.as_mut());
        let c = &linv * &stiffness * linv.transpose();
        let c = Mat::from_fn(nb, nb, |i, j| 0.5 * (c[(i, j)] + c[(j, i)]));
        let eig = c
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::EigFailure(format!("{e:?}")))?;
        let lambda: Vec<f64> = (0..nb).map(|i| eig.S()[i]).collect();
        let floor = -1e-9 * lambda.iter().fold(1.0f64, |a, b| a.max(b.abs()));
        if lambda.iter().any(|&x| x < floor) {
            return Err(Error::EigFailure("boundary stiffness is indefinite".into()));
        }
        let lambda: Vec<f64> = lambda.into_iter().map(|x| x.max(0.0)).collect();
        let q = eig.U().to_owned();
        let qt_linv = q.transpose() * &linv;
        let w_inv = Mat::from_fn(nb, nb, |i, j| (1.0 + lambda[i]).powf(-0.25) * qt_linv[(i, j)]);
        Ok(Self { mass, stiffness, l, q, lambda, w_inv, mesh_id: mesh.id().to_string() })
    }

    pub fn mass(&self) -> MatRef<'_, f64> {
        self.mass.as_ref()
    }

    pub fn stiffness(&self) -> MatRef<'_, f64> {
        self.stiffness.as_ref()
    }

    /// Pencil eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.lambda
    }

    pub fn mesh_id(&self) -> &str {
        &self.mesh_id
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// `G_s = L Q (1+Λ)^s Qᵀ Lᵀ`.
    pub fn gram(&self, s: f64) -> Mat<f64> {
        let lq = &self.l * &self.q;
        let n = self.dim();
        let scaled = Mat::from_fn(n, n, |i, j| lq[(i, j)] * (1.0 + self.lambda[j]).powf(s));
        &scaled * lq.transpose()
    }

    pub fn g_half(&self) -> Mat<f64> {
        self.gram(0.5)
    }

    pub fn g_minus_half(&self) -> Mat<f64> {
        self.gram(-0.5)
    }

    /// The `k` lowest pencil eigenvectors scaled to unit `G_{1/2}` norm, as columns.
    /// They are `G_{1/2}`-orthonormal.
    pub fn probe_basis(&self, k: usize) -> Mat<f64> {
        let k = k.min(self.dim());
        Mat::from_fn(self.dim(), k, |i, a| self.w_inv[(a, i)])
    }

    /// `‖x‖_{G_s}` through the spectral coordinates `a = Qᵀ Lᵀ x`.
    pub fn norm(&self, x: &[f64], s: f64) -> f64 {
        let n = self.dim();
        let xm = Mat::from_fn(n, 1, |i, _| x[i]);
        let a = self.q.transpose() * (self.l.transpose() * &xm);
        (0..n).map(|i| (1.0 + self.lambda[i]).powf(s) * a[(i, 0)] * a[(i, 0)]).sum::<f64>().sqrt()
    }
}

/// Operator norm of `T : H^{1/2} → H^{-1/2}` with its maximizing pair of unit traces.
#[derive(Debug, Clone)]
pub struct StarNorm {
    pub value: f64,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

/// `sup ψᵀ T φ` over `‖φ‖_{G_{1/2}} = ‖ψ‖_{G_{1/2}} = 1`, the largest singular
/// value of `W⁻¹ T W⁻ᵀ` where `G_{1/2} = W Wᵀ`.
pub fn star_norm(t: MatRef<'_, f64>, g: &BoundaryGram) -> Result<StarNorm> {
    let n = g.dim();
    if t.nrows() != n || t.ncols() != n {
        return Err(Error::MeshMismatch);
    }
    if t.norm_l2() == 0.0 {
        return Ok(StarNorm { value: 0.0, phi: vec![0.0; n], psi: vec![0.0; n] });
    }
    let b = &g.w_inv * t * g.w_inv.transpose();
    let svd = b.svd().map_err(|e| Error::EigFailure(format!("{e:?}")))?;
    let k = (0..n).max_by(|&i, &j| svd.S()[i].total_cmp(&svd.S()[j])).unwrap();
    let u = svd.U().col(k).to_owned();
    let v = svd.V().col(k).to_owned();
    // φ = W⁻ᵀ v, ψ = W⁻ᵀ u
    let phi = g.w_inv.transpose() * &v;
    let psi = g.w_inv.transpose() * &u;
    Ok(StarNorm {
        value: svd.S()[k],
        phi: (0..n).map(|i| phi[i]).collect(),
        psi: (0..n).map(|i| psi[i]).collect(),
    })
}

/// Both sides of `ω² ∫ (q⁰ − q¹) u₀ u₁ = ⟨(Λ₁ − Λ₀) φ₀, φ₁⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlessandriniCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Evaluates the discrete Alessandrini identity for solutions `u0` (field `f0`)
/// and `u1` (field `f1`). The volume side uses the exactly integrated
/// coefficient mass matrices, the boundary side the two DtN matrices.
pub fn alessandrini(
    mesh: &Mesh,
    lambda: (&DtnMatrix, &DtnMatrix),
    u0: &FemSolution,
    u1: &FemSolution,
    f0: &PiecewiseField,
    f1: &PiecewiseField,
    fs: &FrequencySpec,
) -> Result<AlessandriniCheck> {
    let (l0, l1) = lambda;
    let id = mesh.id();
    if [l0.mesh_id(), l1.mesh_id(), &u0.mesh_id, &u1.mesh_id].iter().any(|m| *m != id) {
        return Err(Error::MeshMismatch);
    }
    let m0 = mesh.q_mass_values(&Coefficient::from_field(mesh, f0));
    let m1 = mesh.q_mass_values(&Coefficient::from_field(mesh, f1));
    let dm: Vec<f64> = m0.iter().zip(&m1).map(|(a, b)| a - b).collect();
    let w2 = fs.omega * fs.omega;
    let lhs = w2 * mesh.csr_bilinear(&dm, &u1.values, &u0.values);
    let phi0 = u0.trace(mesh);
    let phi1 = u1.trace(mesh);
    let rhs = l1.pairing(&phi0, &phi1) - l0.pairing(&phi0, &phi1);
    let scale = lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
    Ok(AlessandriniCheck { lhs, rhs, residual: (lhs - rhs).abs() / scale })
}

/// Norms of the DtN difference on `∂Ω` and on the augmented sphere, and their ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedComparison {
    pub norm_omega: f64,
    pub norm_augmented: f64,
    /// `norm_augmented / norm_omega`; `None` when the boundary difference vanishes.
    pub ratio: Option<f64>,
}

pub struct MeshWithGram<'a> {
    pub mesh: &'a Mesh,
    pub gram: &'a BoundaryGram,
}

pub fn augmented_comparison(
    f0: &PiecewiseField,
    f1: &PiecewiseField,
    fs: &FrequencySpec,
    omega_mesh: MeshWithGram<'_>,
    augmented_mesh: MeshWithGram<'_>,
) -> Result<AugmentedComparison> {
    let norm = |m: &MeshWithGram<'_>| -> Result<f64> {
        let l0 = DtnMatrix::for_field(m.mesh, f0, fs)?;
        let l1 = DtnMatrix::for_field(m.mesh, f1, fs)?;
        Ok(star_norm(l1.difference(&l0)?.as_ref(), m.gram)?.value)
    };
    let norm_omega = norm(&omega_mesh)?;
    let norm_augmented = norm(&augmented_mesh)?;
    let ratio = (norm_omega > 0.0).then(|| norm_augmented / norm_omega);
    Ok(AugmentedComparison { norm_omega, norm_augmented, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{ElementOrder, Mesh};
    use crate::fixtures;
    use crate::partition::ValueSet;
    use faer::prelude::Solve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fs() -> FrequencySpec {
        FrequencySpec::new(1.2, 0.5, 1.25, 1.0).unwrap()
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn dtn_is_symmetric_and_pairs_with_any_extension() {
        let f = fixtures::four_tet_field(1.0, 3.0);
        let m = Mesh::build_omega(f.partition(), 0.5, ElementOrder::P1).unwrap();
        let sys = HelmholtzSystem::for_field(&m, &f, &fs()).unwrap();
        let l = DtnMatrix::assemble(&sys).unwrap();
        assert!(l.symmetry_defect() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let phi = random_vec(m.n_boundary(), &mut rng);
            let psi = random_vec(m.n_boundary(), &mut rng);
            let u = sys.solve(&phi).unwrap();
            // arbitrary extension of ψ: random interior values
            let mut w = random_vec(m.n_dofs(), &mut rng);
            for (b, &d) in m.boundary_dofs().iter().enumerate() {
                w[d] = psi[b];
            }
            let weak = dot(&w, &sys.matvec(&u.values));
            let p = l.pairing(&phi, &psi);
            assert!((weak - p).abs() < 1e-10 * p.abs().max(1.0));
            assert!((p - l.pairing(&psi, &phi)).abs() < 1e-10 * p.abs().max(1.0));
        }
    }

    #[test]
    fn laplace_dtn_on_unit_cube() {
        let p = fixtures::unit_cube_partition();
        let n = p.len();
        let f = PiecewiseField::new(p, ValueSet::new(vec![0.0]).unwrap(), vec![0; n]).unwrap();
        let m = Mesh::build_omega(f.partition(), 0.5, ElementOrder::P1).unwrap();
        let l = DtnMatrix::for_field(&m, &f, &fs()).unwrap();
        let phi = m.interpolate_trace(|x| x.x);
        assert!((l.pairing(&phi, &phi) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_identity() {
        let f = fixtures::reference_field();
        let m = Mesh::build_augmented(f.partition(), 0.5, ElementOrder::P1, 1.0, 3.0).unwrap();
        let sys = HelmholtzSystem::for_field(&m, &f, &fs()).unwrap();
        let l = DtnMatrix::assemble(&sys).unwrap();
        let phi = m.interpolate_trace(|x| (1.3 * x.x - 0.4 * x.z).cos());
        let u = sys.solve(&phi).unwrap();
        let energy = m.csr_bilinear(sys.values(), &u.values, &u.values);
        let p = l.pairing(&phi, &phi);
        assert!((energy - p).abs() <= 1e-9 * p.abs());
    }

    #[test]
    fn alessandrini_sign_matches_dense_oracle() {
        // q0 = 0 against a perturbed q1 on a one-tetrahedron mesh with a single
        // interior node: everything by hand in dense algebra.
        let p = crate::partition::Partition::from_tetrahedra(&[crate::Tetrahedron::regular(1.0)], None, None).unwrap();
        let f0 = PiecewiseField::new(p.clone(), ValueSet::new(vec![0.0]).unwrap(), vec![0]).unwrap();
        let f1 = PiecewiseField::new(p, ValueSet::new(vec![2.0]).unwrap(), vec![0]).unwrap();
        let m = Mesh::build_omega(f0.partition(), 1.0, ElementOrder::P2).unwrap();
        let omega = 1.1;
        let fs = FrequencySpec::new(omega, 0.5, omega, 1.0).unwrap();
        let n = m.n_dofs();
        let (rp, cols) = m.pattern();
        let dense = |vals: &[f64]| {
            let mut a = Mat::<f64>::zeros(n, n);
            for i in 0..n {
                for k in rp[i]..rp[i + 1] {
                    a[(i, cols[k])] = vals[k];
                }
            }
            a
        };
        let s = dense(m.stiffness_values());
        let mass = dense(m.mass_values());
        let k0 = s.clone();
        let k1 = &s - &mass * (omega * omega * 2.0);
        let bd = m.boundary_dofs().to_vec();
        let interior: Vec<usize> = (0..n).filter(|d| !bd.contains(d)).collect();
        let schur = |k: &Mat<f64>| {
            let kbb = Mat::from_fn(bd.len(), bd.len(), |i, j| k[(bd[i], bd[j])]);
            let kbi = Mat::from_fn(bd.len(), interior.len(), |i, j| k[(bd[i], interior[j])]);
            let kii = Mat::from_fn(interior.len(), interior.len(), |i, j| k[(interior[i], interior[j])]);
            let x = kii.partial_piv_lu().solve(kbi.transpose());
            kbb - &kbi * &x
        };
        let (d0, d1) = (schur(&k0), schur(&k1));
        let l0 = DtnMatrix::for_field(&m, &f0, &fs).unwrap();
        let l1 = DtnMatrix::for_field(&m, &f1, &fs).unwrap();
        assert!((&d0 - l0.matrix()).norm_l2() < 1e-10 * d0.norm_l2());
        assert!((&d1 - l1.matrix()).norm_l2() < 1e-10 * d1.norm_l2());
        // ω²∫(q0 − q1) u0 u1 with u0 = u1 = 1-ish positive traces is negative, and
        // so is ⟨(Λ1 − Λ0)φ, φ⟩ = −ω²·2·∫u0 u1: the frozen convention
        let phi = vec![1.0; bd.len()];
        let u0 = HelmholtzSystem::for_field(&m, &f0, &fs).unwrap().solve(&phi).unwrap();
        let u1 = HelmholtzSystem::for_field(&m, &f1, &fs).unwrap().solve(&phi).unwrap();
        let c = alessandrini(&m, (&l0, &l1), &u0, &u1, &f0, &f1, &fs).unwrap();
        assert!(c.lhs < 0.0 && c.rhs < 0.0);
        assert!(c.residual < 1e-12);
        let dense_rhs = dot(&phi, &{
            let dd = &d1 - &d0;
            (0..bd.len()).map(|i| (0..bd.len()).map(|j| dd[(i, j)] * phi[j]).sum()).collect::<Vec<f64>>()
        });
        assert!((dense_rhs - c.rhs).abs() < 1e-10 * c.rhs.abs());
    }

    #[test]
    fn alessandrini_examples() {
        let fs = fs();
        let f0 = fixtures::four_tet_field(1.0, 3.0);
        let f1 = fixtures::four_tet_field(3.0, 1.0);
        let m = Mesh::build_omega(f0.partition(), 0.5, ElementOrder::P1).unwrap();
        let s0 = HelmholtzSystem::for_field(&m, &f0, &fs).unwrap();
        let s1 = HelmholtzSystem::for_field(&m, &f1, &fs).unwrap();
        let (l0, l1) = (DtnMatrix::assemble(&s0).unwrap(), DtnMatrix::assemble(&s1).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let phi = random_vec(m.n_boundary(), &mut rng);
        let psi = random_vec(m.n_boundary(), &mut rng);
        let u0 = s0.solve(&phi).unwrap();
        let u1 = s1.solve(&psi).unwrap();
        let c = alessandrini(&m, (&l0, &l1), &u0, &u1, &f0, &f1, &fs).unwrap();
        assert!(c.residual <= 1e-9, "{c:?}");
        let same = alessandrini(&m, (&l0, &l0), &u0, &s0.solve(&psi).unwrap(), &f0, &f0, &fs).unwrap();
        assert_eq!(same.lhs, 0.0);
        assert_eq!(same.rhs, 0.0);
        let other = Mesh::build_omega(f0.partition(), 0.3, ElementOrder::P1).unwrap();
        let l_other = DtnMatrix::for_field(&other, &f0, &fs).unwrap();
        assert_eq!(
            alessandrini(&m, (&l_other, &l1), &u0, &u1, &f0, &f1, &fs),
            Err(Error::MeshMismatch)
        );
    }

    #[test]
    fn gram_examples() {
        let m = Mesh::build_omega(&fixtures::reference_partition(), 0.5, ElementOrder::P1).unwrap();
        let g = BoundaryGram::new(&m).unwrap();
        let area: f64 = m
            .boundary_faces()
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| m.nodes()[i]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum();
        let c = 1.7;
        let x = vec![c; g.dim()];
        assert!((g.norm(&x, 0.5).powi(2) - c * c * area).abs() < 1e-10 * area);
        let gh = g.g_half();
        let xm = Mat::from_fn(g.dim(), 1, |i, _| x[i]);
        assert!(((xm.transpose() * &gh * &xm)[(0, 0)] - c * c * area).abs() < 1e-10 * area);
        assert!(g.eigenvalues()[0].abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random_vec(g.dim(), &mut rng);
            let y = random_vec(g.dim(), &mut rng);
            let xm = Mat::from_fn(g.dim(), 1, |i, _| x[i]);
            let ym = Mat::from_fn(g.dim(), 1, |i, _| y[i]);
            let pair = (xm.transpose() * g.mass() * &ym)[(0, 0)];
            assert!(g.norm(&x, 0.5) * g.norm(&y, -0.5) >= pair.abs() * (1.0 - 1e-12));
            let m_norm = (xm.transpose() * g.mass() * &xm)[(0, 0)].sqrt();
            let h1 = (xm.transpose() * (g.mass() + g.stiffness()) * &xm)[(0, 0)].sqrt();
            assert!(g.norm(&x, 0.5).powi(2) <= m_norm * h1 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn star_norm_examples() {
        let m = Mesh::build_omega(&fixtures::four_tet_partition(), 0.5, ElementOrder::P1).unwrap();
        let g = BoundaryGram::new(&m).unwrap();
        let n = g.dim();
        assert_eq!(star_norm(Mat::<f64>::zeros(n, n).as_ref(), &g).unwrap().value, 0.0);
        let gh = g.g_half();
        let s = star_norm(gh.as_ref(), &g).unwrap();
        assert!((s.value - 1.0).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let st = star_norm(t.as_ref(), &g).unwrap();
        let s3 = star_norm((&t * -3.0).as_ref(), &g).unwrap();
        assert!((s3.value - 3.0 * st.value).abs() < 1e-10 * s3.value);
        // the maximizing pair attains the norm
        let tphi: Vec<f64> = (0..n).map(|i| (0..n).map(|j| t[(i, j)] * st.phi[j]).sum()).collect();
        let attained = dot(&st.psi, &tphi) / (g.norm(&st.phi, 0.5) * g.norm(&st.psi, 0.5));
        assert!((attained - st.value).abs() < 1e-10 * st.value);
    }

    #[test]
    fn augmented_comparison_examples() {
        let f0 = fixtures::reference_field();
        let mut labels = f0.labels().to_vec();
        labels[0] = 1 - labels[0];
        let f1 = f0.with_labels(labels).unwrap();
        let fs = fs();
        let mo = Mesh::build_omega(f0.partition(), 0.5, ElementOrder::P1).unwrap();
        let ma = Mesh::build_augmented(f0.partition(), 0.5, ElementOrder::P1, 1.0, 3.0).unwrap();
        let (go, ga) = (BoundaryGram::new(&mo).unwrap(), BoundaryGram::new(&ma).unwrap());
        let c = augmented_comparison(
            &f0,
            &f1,
            &fs,
            MeshWithGram { mesh: &mo, gram: &go },
            MeshWithGram { mesh: &ma, gram: &ga },
        )
        .unwrap();
        let r = c.ratio.unwrap();
        assert!(r.is_finite() && r > 0.0);
        let same = augmented_comparison(
            &f0,
            &f0,
            &fs,
            MeshWithGram { mesh: &mo, gram: &go },
            MeshWithGram { mesh: &ma, gram: &ga },
        )
        .unwrap();
        assert_eq!(same.ratio, None);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};
        use std::sync::OnceLock;

        fn gram() -> &'static BoundaryGram {
            static G: OnceLock<BoundaryGram> = OnceLock::new();
            G.get_or_init(|| {
                let m = Mesh::build_omega(&fixtures::four_tet_partition(), 1.0, ElementOrder::P1).unwrap();
                BoundaryGram::new(&m).unwrap()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn star_norm_is_a_norm(seed in 0u64..1_000_000, c in -5.0f64..5.0) {
                let g = gram();
                let n = g.dim();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                let b = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                let na = star_norm(a.as_ref(), g).unwrap().value;
                let nb = star_norm(b.as_ref(), g).unwrap().value;
                let nab = star_norm((&a + &b).as_ref(), g).unwrap().value;
                prop_assert!(nab <= (na + nb) * (1.0 + 1e-10));
                let nc = star_norm((&a * c).as_ref(), g).unwrap().value;
                prop_assert!((nc - c.abs() * na).abs() <= 1e-10 * na.max(1.0));
            }
        }
    }
}
