//! Recovery of vertex positions from DtN data by projected gradient descent
//! (Landweber iteration with Armijo backtracking) with the tetrahedron values held
//! fixed.

use std::io::Write;

use faer::Mat;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtn::{BoundaryGram, DtnMatrix};
use crate::fem::{shape_values, FrequencySpec, HelmholtzSystem, Mesh};
use crate::geometry::{hausdorff, FACETS};
use crate::partition::{Deformation, Partition, PiecewiseField};
use crate::quadrature::tri_rule;
use crate::{Error, Result};

/// Misfit `½‖Yᵀ(Λ(trial) − Λ*)Y‖²_F` where the columns of `Y` are the lowest
/// boundary pencil modes with unit `G_{1/2}` norm. With every mode kept this is
/// the Frobenius norm of the difference whitened by `G_{1/2}` on both sides.
pub struct MisfitModel<'m> {
    mesh: &'m Mesh,
    basis: Mat<f64>,
    target: Mat<f64>,
    fs: FrequencySpec,
}

/// Misfit value with the spectral norm of the projected difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MisfitValue {
    pub misfit: f64,
    /// `‖ΔΛ‖_⋆` restricted to the probe modes.
    pub star_norm: f64,
}

impl<'m> MisfitModel<'m> {
    /// `budget = None` keeps every boundary mode.
    pub fn new(
        target: &DtnMatrix,
        gram: &BoundaryGram,
        fs: &FrequencySpec,
        mesh: &'m Mesh,
        budget: Option<usize>,
    ) -> Result<Self> {
        if target.mesh_id() != mesh.id() || gram.mesh_id() != mesh.id() {
            return Err(Error::MeshMismatch);
        }
        let basis = gram.probe_basis(budget.unwrap_or(gram.dim()));
        let target = basis.transpose() * target.matrix() * &basis;
        Ok(Self { mesh, basis, target, fs: *fs })
    }

    pub fn budget(&self) -> usize {
        self.basis.ncols()
    }

    /// Projected difference `E = Yᵀ(Λ(trial) − Λ*)Y` and the solutions `U Y`.
    fn difference(&self, trial: &PiecewiseField) -> Result<(Mat<f64>, Mat<f64>, HelmholtzSystem<'m>)> {
        let sys = HelmholtzSystem::for_field(self.mesh, trial, &self.fs)?;
        let z = sys.solve_traces(self.basis.as_ref())?;
        let k = self.budget();
        let nb = self.mesh.n_boundary();
        let cols: Vec<Vec<f64>> = (0..k)
            .into_par_iter()
            .map(|c| sys.neumann(&(0..z.nrows()).map(|i| z[(i, c)]).collect::<Vec<_>>()))
            .collect();
        let n = Mat::from_fn(nb, k, |i, c| cols[c][i]);
        let p = self.basis.transpose() * &n;
        let e = Mat::from_fn(k, k, |a, b| 0.5 * (p[(a, b)] + p[(b, a)]) - self.target[(a, b)]);
        Ok((e, z, sys))
    }

    pub fn evaluate(&self, trial: &PiecewiseField) -> Result<MisfitValue> {
        let (e, _, _) = self.difference(trial)?;
        Ok(value_of(&e)?)
    }

    pub fn misfit(&self, trial: &PiecewiseField) -> Result<f64> {
        Ok(self.evaluate(trial)?.misfit)
    }

    /// Per-vertex gradient of the misfit, without any boundary constraint.
    ///
    /// With `S(x) = z(x)ᵀ E z(x)`, `z` the probe solutions, the derivative along
    /// vertex `g` is `−ω² Σ_{j∋g} (q_j − q_bg) ∫_{∂T_j} S λ_g ν dσ`.
    pub fn gradient(&self, trial: &PiecewiseField) -> Result<(MisfitValue, Deformation)> {
        let (e, z, _) = self.difference(trial)?;
        let value = value_of(&e)?;
        let p = trial.partition();
        let mesh = self.mesh;
        let order = mesh.order();
        let nloc = order.local_dofs();
        let q_bg = mesh.kind().background();
        let ze = &z * &e;
        let rule = tri_rule(2 * order.degree() + 1);
        let w2 = self.fs.omega * self.fs.omega;
        let parts: Vec<Vec<(usize, Vector3<f64>)>> = (0..p.len())
            .into_par_iter()
            .flat_map_iter(|j| (0..4).map(move |i| (j, i)))
            .map(|(j, i)| {
                let c = trial.q(j) - q_bg;
                let tet = p.tetrahedron(j);
                if c == 0.0 {
                    return Vec::new();
                }
                let normal = tet.facet_normal(i);
                let mut acc = [Vector3::zeros(); 4];
                let mut phi = [0.0; 10];
                for (el, fan) in mesh.triangle_pieces(&tet.facet(i), &normal) {
                    let dofs = mesh.element_dofs(el);
                    // C = Z_e E Z_eᵀ on the element's dofs
                    let cm: Vec<f64> = (0..nloc * nloc)
                        .map(|ab| {
                            let (a, b) = (dofs[ab / nloc], dofs[ab % nloc]);
                            (0..ze.ncols()).map(|k| ze[(a, k)] * z[(b, k)]).sum()
                        })
                        .collect();
                    let g = mesh.geom(el);
                    for piece in &fan {
                        let area = 0.5 * (piece[1] - piece[0]).cross(&(piece[2] - piece[0])).norm();
                        for q in rule {
                            let x = piece[0] * q.bary[0] + piece[1] * q.bary[1] + piece[2] * q.bary[2];
                            shape_values(order, &g.barycentric(&x), &mut phi);
                            let mut s = 0.0;
                            for a in 0..nloc {
                                for b in 0..nloc {
                                    s += phi[a] * phi[b] * cm[a * nloc + b];
                                }
                            }
                            let lam = tet.barycentric(&x);
                            let w = q.weight * area * s;
                            for l in 0..4 {
                                acc[l] += normal * (w * lam[l]);
                            }
                        }
                    }
                }
                let ids = p.tets()[j];
                // the vertex opposite facet i has λ = 0 there
                FACETS[i].iter().map(|&l| (ids[l], acc[l] * (-w2 * c))).collect()
            })
            .collect();
        let mut grad = Deformation::zero(p.vertices().len());
        for part in parts {
            for (v, g) in part {
                grad.displacements[v] += g;
            }
        }
        Ok((value, grad))
    }
}

fn value_of(e: &Mat<f64>) -> Result<MisfitValue> {
    let fro = e.norm_l2();
    let star_norm = if fro == 0.0 {
        0.0
    } else {
        let svd = e.svd().map_err(|err| Error::EigFailure(format!("{err:?}")))?;
        svd.S().column_vector().iter().fold(0.0f64, |m, s| m.max(s.abs()))
    };
    Ok(MisfitValue { misfit: 0.5 * fro * fro, star_norm })
}

/// Whitened Frobenius misfit over every boundary mode.
pub fn misfit(trial: &PiecewiseField, target: &DtnMatrix, g: &BoundaryGram, fs: &FrequencySpec, mesh: &Mesh) -> Result<f64> {
    MisfitModel::new(target, g, fs, mesh, None)?.misfit(trial)
}

/// Gradient of [`misfit`] with boundary vertices restricted to slide along the
/// boundary (corner vertices stay fixed).
pub fn misfit_gradient(
    trial: &PiecewiseField,
    target: &DtnMatrix,
    g: &BoundaryGram,
    fs: &FrequencySpec,
    mesh: &Mesh,
) -> Result<Deformation> {
    let (_, grad) = MisfitModel::new(target, g, fs, mesh, None)?.gradient(trial)?;
    trial.partition().tangential_projection(&grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    /// Initial step length; grows by `1/armijo_factor` after each accepted step.
    pub step: f64,
    pub max_iterations: usize,
    /// Insphere floor for every iterate; half the initial `r₁` when `None`.
    pub insphere_floor: Option<f64>,
    /// Boundary modes in the misfit; all when `None`.
    pub probe_budget: Option<usize>,
    /// Stop once `misfit ≤ tolerance · initial misfit`.
    pub tolerance: f64,
    /// Stop once `misfit ≤ abs_tolerance`; covers round-off at the truth.
    pub abs_tolerance: f64,
    pub armijo_factor: f64,
    pub sufficient_decrease: f64,
    pub max_rejections: usize,
    pub seed: u64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            step: 1.0,
            max_iterations: 60,
            insphere_floor: None,
            probe_budget: None,
            tolerance: 1e-6,
            abs_tolerance: 1e-20,
            armijo_factor: 0.5,
            sufficient_decrease: 1e-4,
            max_rejections: 30,
            seed: 0,
        }
    }
}

/// One attempted step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterateRow {
    pub iter: usize,
    pub misfit: f64,
    pub star_norm: f64,
    /// Distance to the true partition, when known.
    pub d_t: Option<f64>,
    pub min_insphere: f64,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIterations,
    ZeroStep,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterateLog {
    pub rows: Vec<IterateRow>,
    pub termination: Termination,
    pub floor: f64,
}

impl IterateLog {
    pub fn accepted(&self) -> impl Iterator<Item = &IterateRow> {
        self.rows.iter().filter(|r| r.accepted)
    }

    pub fn initial(&self) -> &IterateRow {
        &self.rows[0]
    }

    pub fn last_accepted(&self) -> &IterateRow {
        self.accepted().last().unwrap_or(&self.rows[0])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iter", "misfit[1]", "star_norm[1]", "d_T[L]", "min_insphere[L]", "step[1]", "accepted"])?;
        for r in &self.rows {
            out.write_record([
                r.iter.to_string(),
                format!("{:e}", r.misfit),
                format!("{:e}", r.star_norm),
                r.d_t.map_or(String::new(), |d| format!("{d:e}")),
                format!("{:e}", r.min_insphere),
                format!("{:e}", r.step),
                r.accepted.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn d_t(a: &Partition, b: &Partition) -> f64 {
    (0..a.len()).map(|j| hausdorff(&a.tetrahedron(j), &b.tetrahedron(j))).sum()
}

/// Projected gradient descent on vertex positions from `initial`.
///
/// Row 0 logs the initial iterate. Each iteration shrinks the step until the
/// trial stays above the insphere floor, then backtracks until the Armijo
/// condition holds; rejected trials are logged with `accepted = false`.
pub fn landweber_run(
    initial: &PiecewiseField,
    model: &MisfitModel<'_>,
    cfg: &ReconstructionConfig,
    truth: Option<&Partition>,
) -> Result<(PiecewiseField, IterateLog)> {
    if !(cfg.step > 0.0) || !(cfg.armijo_factor > 0.0 && cfg.armijo_factor < 1.0) {
        return Err(Error::InvalidInput("step must be positive and the Armijo factor in (0, 1)".into()));
    }
    let r1 = initial.partition().r1();
    let floor = cfg.insphere_floor.unwrap_or(0.5 * r1);
    if floor >= r1 {
        return Err(Error::InvalidInput(format!("insphere floor {floor} must be below r1 = {r1}")));
    }
    let dist = |p: &Partition| truth.map(|t| d_t(p, t));
    let mut field = initial.clone();
    let (mut value, mut grad) = model.gradient(&field)?;
    let initial_misfit = value.misfit;
    let mut rows = vec![IterateRow {
        iter: 0,
        misfit: value.misfit,
        star_norm: value.star_norm,
        d_t: dist(field.partition()),
        min_insphere: field.partition().min_insphere_radius(),
        step: 0.0,
        accepted: true,
    }];
    let done = |m: f64| m <= cfg.abs_tolerance || m <= cfg.tolerance * initial_misfit;
    let mut step = cfg.step;
    let mut termination = Termination::MaxIterations;
    for iter in 1..=cfg.max_iterations {
        if done(value.misfit) {
            termination = Termination::Tolerance;
            break;
        }
        let dir = field.partition().tangential_projection(&grad)?;
        let slope: f64 = dir.displacements.iter().map(|v| v.norm_squared()).sum();
        if slope == 0.0 {
            termination = Termination::ZeroStep;
            break;
        }
        let descent = dir.scaled(-1.0);
        let mut rejections = 0;
        let accepted = loop {
            let moved = match field.partition().deform_with_floor(&descent, step, floor) {
                Ok(m) => field.with_partition(m)?,
                Err(Error::RegularityLost { .. }) => {
                    step *= cfg.armijo_factor;
                    if step * slope.sqrt() < 1e-15 * r1 {
                        break None;
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (v, g) = model.gradient(&moved)?;
            let ok = v.misfit <= value.misfit - cfg.sufficient_decrease * step * slope;
            rows.push(IterateRow {
                iter,
                misfit: v.misfit,
                star_norm: v.star_norm,
                d_t: dist(moved.partition()),
                min_insphere: moved.partition().min_insphere_radius(),
                step,
                accepted: ok,
            });
            if ok {
                break Some((moved, v, g));
            }
            rejections += 1;
            if rejections >= cfg.max_rejections {
                return Err(Error::Stalled(rejections));
            }
            step *= cfg.armijo_factor;
        };
        match accepted {
            Some((m, v, g)) => {
                field = m;
                value = v;
                grad = g;
                step /= cfg.armijo_factor;
            }
            None => {
                termination = Termination::ZeroStep;
                break;
            }
        }
        if iter == cfg.max_iterations && done(value.misfit) {
            termination = Termination::Tolerance;
        }
    }
    Ok((field, IterateLog { rows, termination, floor }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::ElementOrder;
    use crate::fixtures;

    fn fs() -> FrequencySpec {
        FrequencySpec::new(1.2, 0.5, 1.25, 1.0).unwrap()
    }

    struct Setup {
        truth: PiecewiseField,
        mesh: Mesh,
    }

    impl Setup {
        fn two_tet() -> Self {
            let truth = fixtures::two_tet_field();
            let mesh = Mesh::build_omega(truth.partition(), 0.4, ElementOrder::P1).unwrap();
            Self { truth, mesh }
        }

        fn model(&self, budget: Option<usize>) -> MisfitModel<'_> {
            let target = DtnMatrix::for_field(&self.mesh, &self.truth, &fs()).unwrap();
            let gram = BoundaryGram::new(&self.mesh).unwrap();
            MisfitModel::new(&target, &gram, &fs(), &self.mesh, budget).unwrap()
        }

        fn slid(&self, s: f64) -> PiecewiseField {
            let d = Deformation::single(5, fixtures::TWO_TET_MOVABLE, fixtures::two_tet_direction());
            self.truth.deform(&d, s).unwrap()
        }
    }

    #[test]
    fn truth_has_zero_misfit_and_gradient() {
        let s = Setup::two_tet();
        let (v, g) = s.model(None).gradient(&s.truth).unwrap();
        assert!(v.misfit < 1e-20, "{v:?}");
        assert!(g.max_norm() < 1e-9, "{}", g.max_norm());
    }

    #[test]
    fn misfit_grows_quadratically() {
        let s = Setup::two_tet();
        let m = s.model(None);
        let a = m.misfit(&s.slid(0.02)).unwrap();
        let b = m.misfit(&s.slid(0.04)).unwrap();
        assert!(a > 0.0);
        let slope = (b / a).log2();
        assert!((slope - 2.0).abs() < 0.2, "{slope}");
    }

    #[test]
    fn gradient_matches_central_difference() {
        let s = Setup::two_tet();
        let m = s.model(None);
        let trial = s.slid(0.1);
        let (_, g) = m.gradient(&trial).unwrap();
        let dir = fixtures::two_tet_direction();
        let analytic = g.displacements[fixtures::TWO_TET_MOVABLE].dot(&dir);
        let h = 1e-3 * trial.partition().regularity_constants().unwrap().0;
        let d = Deformation::single(5, fixtures::TWO_TET_MOVABLE, dir);
        let fd = (m.misfit(&trial.deform(&d, h).unwrap()).unwrap()
            - m.misfit(&trial.deform(&d, -h).unwrap()).unwrap())
            / (2.0 * h);
        assert!((analytic - fd).abs() <= 0.05 * fd.abs(), "{analytic} vs {fd}");
        // sliding back toward the truth lowers the misfit
        assert!(fd > 0.0);
    }

    #[test]
    fn gradient_is_equivariant_under_reordering() {
        let s = Setup::two_tet();
        let m = s.model(Some(12));
        let trial = s.slid(0.1);
        let (v0, g0) = m.gradient(&trial).unwrap();
        let (v1, g1) = m.gradient(&trial.reordered(&[1, 0]).unwrap()).unwrap();
        assert!((v0.misfit - v1.misfit).abs() <= 1e-12 * v0.misfit);
        for (a, b) in g0.displacements.iter().zip(&g1.displacements) {
            assert!((a - b).norm() <= 1e-9 * g0.max_norm().max(1e-30));
        }
    }

    #[test]
    fn projected_gradient_is_tangential() {
        let s = Setup::two_tet();
        let target = DtnMatrix::for_field(&s.mesh, &s.truth, &fs()).unwrap();
        let gram = BoundaryGram::new(&s.mesh).unwrap();
        let g = misfit_gradient(&s.slid(0.1), &target, &gram, &fs(), &s.mesh).unwrap();
        // corners are fixed, the edge vertex moves along its edge
        for v in 0..4 {
            assert!(g.displacements[v].norm() <= 1e-12 * g.max_norm());
        }
        let w = g.displacements[fixtures::TWO_TET_MOVABLE];
        assert!(w.cross(&fixtures::two_tet_direction()).norm() <= 1e-12 * w.norm());
    }

    #[test]
    fn starting_at_truth_stops_immediately() {
        let s = Setup::two_tet();
        let (_, log) = landweber_run(&s.truth, &s.model(None), &ReconstructionConfig::default(), None).unwrap();
        assert_eq!(log.rows.len(), 1);
        assert_eq!(log.termination, Termination::Tolerance);
    }

    #[test]
    fn huge_step_backtracks_above_floor() {
        let s = Setup::two_tet();
        let cfg = ReconstructionConfig { step: 1e6, max_iterations: 3, ..Default::default() };
        let start = s.slid(0.1);
        let (_, log) = landweber_run(&start, &s.model(None), &cfg, Some(s.truth.partition())).unwrap();
        assert!(log.rows.iter().all(|r| r.min_insphere >= log.floor));
        assert!(log.rows.iter().skip(1).any(|r| r.accepted));
        let misfits: Vec<f64> = log.accepted().map(|r| r.misfit).collect();
        assert!(misfits.windows(2).all(|w| w[1] < w[0]), "{misfits:?}");
    }

    #[test]
    fn recovers_slid_vertex() {
        let s = Setup::two_tet();
        let start = s.slid(0.15);
        let cfg = ReconstructionConfig { max_iterations: 40, tolerance: 1e-8, ..Default::default() };
        let (end, log) = landweber_run(&start, &s.model(None), &cfg, Some(s.truth.partition())).unwrap();
        let d0 = log.initial().d_t.unwrap();
        let d1 = log.last_accepted().d_t.unwrap();
        assert!(d1 < 0.1 * d0, "{d0} -> {d1} ({:?})", log.termination);
        assert_eq!(end.labels(), s.truth.labels());
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), log.rows.len() + 1);
    }
}
