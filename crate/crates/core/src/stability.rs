//! Matching of nearby partitions, vertex correspondence, and Lipschitz sweeps of
//! the DtN difference against the partition distance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dtn::{star_norm, BoundaryGram, DtnMatrix};
use crate::fem::{FrequencySpec, Mesh, MeshConfig};
use crate::geometry::{hausdorff, measure_ball_constant, vertex_permutation_distance, Point3, Tetrahedron};
use crate::partition::{overlap_table, Deformation, Partition, PiecewiseField, ValueSet};
use crate::{Error, Result};

/// `δ_ε = (ε² / (c₀² C₁))^{1/3}`, the erosion depth.
pub fn delta_epsilon(eps: f64, c0: f64, c1: f64) -> f64 {
    (eps * eps / (c0 * c0 * c1)).cbrt()
}

/// `ε₁ = √(r₁³ c₀² C₁)`, the largest distance for which matching is guaranteed.
pub fn epsilon_one(r1: f64, c0: f64, c1: f64) -> f64 {
    (r1 * r1 * r1 * c0 * c0 * c1).sqrt()
}

/// Radical-inverse (Halton) point `i` in the unit cube.
fn halton(i: usize) -> [f64; 3] {
    [2usize, 3, 5].map(|b| {
        let (mut n, mut f, mut r) = (i, 1.0, 0.0);
        while n > 0 {
            f /= b as f64;
            r += f * (n % b) as f64;
            n /= b;
        }
        r
    })
}

/// Low-discrepancy points of the eroded tetrahedron `{x ∈ T : dist(x, ∂T) ≥ δ}`,
/// which is `T` shrunk about its incentre by `(r − δ)/r`. Empty if `δ ≥ r`.
pub fn eroded_samples(t: &Tetrahedron, delta: f64, n: usize) -> Vec<Point3> {
    let r = match t.insphere_radius() {
        Ok(r) if r > delta => r,
        _ => return Vec::new(),
    };
    let areas: [f64; 4] = std::array::from_fn(|i| t.facet_area(i));
    let total: f64 = areas.iter().sum();
    let centre: Point3 = (0..4).map(|i| t.vertex(i) * areas[i]).sum::<Point3>() / total;
    let s = (r - delta) / r;
    (1..=n)
        .map(|i| {
            let mut u = halton(i);
            u.sort_by(f64::total_cmp);
            let bary = [u[0], u[1] - u[0], u[2] - u[1], 1.0 - u[2]];
            centre + (t.point_at(&bary) - centre) * s
        })
        .collect()
}

/// Inputs of [`match_partitions`] besides the fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchConfig {
    /// Ball constant `C₁`; measured on both partitions when `None`.
    pub c1: Option<f64>,
    /// Interior sample count per tetrahedron for the eroded-inclusion check.
    pub interior_samples: usize,
    /// Seed and per-radius sample count for measuring `C₁`.
    pub c1_seed: u64,
    pub c1_samples: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { c1: None, interior_samples: 512, c1_seed: 0, c1_samples: 4000 }
    }
}

/// Conservative `C₁` over all tetrahedra of `p` with radii up to `r1`.
pub fn measured_c1(p: &Partition, r1: f64, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c1 = f64::INFINITY;
    for j in 0..p.len() {
        c1 = c1.min(measure_ball_constant(&p.tetrahedron(j), r1, 4, samples, &mut rng)?);
    }
    Ok(c1)
}

/// Why a pair of partitions was not matched.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Unmatched {
    TetCount { n0: usize, n1: usize },
    DistanceAboveThreshold { eps: f64, eps1: f64 },
    NoCandidate { tet: usize },
    ErodedEmpty { tet: usize, delta: f64 },
    ErodedInclusion { tet: usize, candidate: usize, outside: usize },
    MismatchedVolume { tet: usize, other: usize, volume: f64, bound: f64 },
    NotBijective { tet: usize, candidate: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MatchOutcome {
    /// `permutation[j]` is the tetrahedron of `f1` matched with tetrahedron `j` of `f0`.
    Matched { permutation: Vec<usize> },
    Unmatched(Unmatched),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub n0: usize,
    pub n1: usize,
    pub outcome: MatchOutcome,
    /// `d_H(T_j⁰, T_{k̄(j)}¹)` per matched pair; empty when unmatched.
    pub hausdorff: Vec<f64>,
    /// Tetrahedra carrying each value of the value set, for both fields.
    pub blocks0: Vec<Vec<usize>>,
    pub blocks1: Vec<Vec<usize>>,
    pub eps: f64,
    pub eps1: f64,
    pub delta_eps: f64,
    pub c0: f64,
    pub c1: f64,
    pub r1: f64,
    /// Total intersection volume of pairs with different values.
    pub mismatched_volume: f64,
}

impl MatchResult {
    pub fn permutation(&self) -> Option<&[usize]> {
        match &self.outcome {
            MatchOutcome::Matched { permutation } => Some(permutation),
            MatchOutcome::Unmatched(_) => None,
        }
    }

    pub fn is_matched(&self) -> bool {
        self.permutation().is_some()
    }
}

fn blocks(f: &PiecewiseField, vs: &ValueSet) -> Vec<Vec<usize>> {
    vs.values()
        .iter()
        .map(|&v| (0..f.partition().len()).filter(|&j| f.q(j) == v).collect())
        .collect()
}

/// Matches the tetrahedra of two fields on the same domain by value and overlap.
///
/// Tetrahedron `j` of `f0` is paired with the same-value tetrahedron of `f1` of
/// largest intersection volume, provided the partitions are within `ε₁`, every
/// sampled point of the eroded `T_j⁰` lies in the candidate, and every pair with
/// different values overlaps by at most `ε²/c₀²`.
pub fn match_partitions(f0: &PiecewiseField, f1: &PiecewiseField, vs: &ValueSet, cfg: &MatchConfig) -> Result<MatchResult> {
    let (p0, p1) = (f0.partition(), f1.partition());
    let (n0, n1) = (p0.len(), p1.len());
    let table = overlap_table(f0, f1)?;
    let eps = table.l2_squared().sqrt();
    let c0 = vs.c0();
    let r1 = p0.r1().min(p1.r1());
    let c1 = match cfg.c1 {
        Some(c) => c,
        None => measured_c1(p0, r1, cfg.c1_samples, cfg.c1_seed)?
            .min(measured_c1(p1, r1, cfg.c1_samples, cfg.c1_seed.wrapping_add(1))?),
    };
    let eps1 = epsilon_one(r1, c0, c1);
    let delta_eps = delta_epsilon(eps, c0, c1);
    let mut result = MatchResult {
        n0,
        n1,
        outcome: MatchOutcome::Matched { permutation: Vec::new() },
        hausdorff: Vec::new(),
        blocks0: blocks(f0, vs),
        blocks1: blocks(f1, vs),
        eps,
        eps1,
        delta_eps,
        c0,
        c1,
        r1,
        mismatched_volume: table.mismatched_volume(),
    };
    let unmatched = |mut r: MatchResult, why| {
        r.outcome = MatchOutcome::Unmatched(why);
        Ok(r)
    };
    if n0 != n1 {
        return unmatched(result, Unmatched::TetCount { n0, n1 });
    }
    if eps > eps1 {
        return unmatched(result, Unmatched::DistanceAboveThreshold { eps, eps1 });
    }
    let bound = eps * eps / (c0 * c0);
    let mut permutation = Vec::with_capacity(n0);
    let mut taken = vec![false; n1];
    for j in 0..n0 {
        let mut same: Vec<(usize, f64)> = Vec::new();
        for &(a, k, v) in &table.entries {
            if a != j {
                continue;
            }
            if f1.q(k) == f0.q(j) {
                same.push((k, v));
            } else if v > bound {
                return unmatched(result, Unmatched::MismatchedVolume { tet: j, other: k, volume: v, bound });
            }
        }
        same.sort_by(|a, b| b.1.total_cmp(&a.1));
        let Some(&(k, vk)) = same.first() else {
            return unmatched(result, Unmatched::NoCandidate { tet: j });
        };
        if same.len() > 1 && vk - same[1].1 <= 1e-12 {
            return Err(Error::AmbiguousMatch { tet: j, candidates: vec![k, same[1].0] });
        }
        let pts = eroded_samples(&p0.tetrahedron(j), delta_eps, cfg.interior_samples);
        if pts.is_empty() {
            return unmatched(result, Unmatched::ErodedEmpty { tet: j, delta: delta_eps });
        }
        let target = p1.tetrahedron(k);
        let outside = pts.iter().filter(|x| !target.contains(x, 0.0)).count();
        if outside > 0 {
            return unmatched(result, Unmatched::ErodedInclusion { tet: j, candidate: k, outside });
        }
        let rivals: Vec<usize> = same[1..]
            .iter()
            .map(|s| s.0)
            .filter(|&k2| {
                let t2 = p1.tetrahedron(k2);
                pts.iter().any(|x| t2.contains(x, -1e-12 * t2.diameter()))
            })
            .collect();
        if !rivals.is_empty() {
            let mut candidates = vec![k];
            candidates.extend(rivals);
            return Err(Error::AmbiguousMatch { tet: j, candidates });
        }
        if taken[k] {
            return unmatched(result, Unmatched::NotBijective { tet: j, candidate: k });
        }
        taken[k] = true;
        permutation.push(k);
    }
    result.hausdorff = permutation
        .iter()
        .enumerate()
        .map(|(j, &k)| hausdorff(&p0.tetrahedron(j), &p1.tetrahedron(k)))
        .collect();
    result.outcome = MatchOutcome::Matched { permutation };
    Ok(result)
}

/// Per-vertex displacements `v` with `P⁰ + v = P¹` read off a matched pair.
///
/// Each matched tetrahedron pairs its vertices by the permutation minimizing the
/// largest vertex distance; every paired distance must stay below `d₁/4` (the
/// smaller `d₁` of the two partitions) and shared vertices must agree.
pub fn vertex_correspondence(m: &MatchResult, f0: &PiecewiseField, f1: &PiecewiseField) -> Result<Deformation> {
    let perm = m
        .permutation()
        .ok_or_else(|| Error::InvalidInput("vertex correspondence needs a matched pair".into()))?;
    let (p0, p1) = (f0.partition(), f1.partition());
    let d1 = p0.regularity_constants()?.0.min(p1.regularity_constants()?.0);
    let mut image: Vec<Option<usize>> = vec![None; p0.vertices().len()];
    for (j, &k) in perm.iter().enumerate() {
        let (dist, local) = vertex_permutation_distance(&p0.tetrahedron(j), &p1.tetrahedron(k));
        if dist >= 0.25 * d1 {
            return Err(Error::InvalidInput(format!(
                "tetrahedra {j} and {k} have paired vertices {dist:e} apart, not below d1/4 = {:e}",
                0.25 * d1
            )));
        }
        for i in 0..4 {
            let g0 = p0.tets()[j][i];
            let g1 = p1.tets()[k][local[i]];
            match image[g0] {
                None => image[g0] = Some(g1),
                Some(prev) if prev == g1 => {}
                Some(_) => return Err(Error::InconsistentCorrespondence { vertex: g0 }),
            }
        }
    }
    let mut used = vec![false; p1.vertices().len()];
    let displacements = image
        .iter()
        .enumerate()
        .map(|(g0, g1)| {
            let g1 = g1.ok_or(Error::InconsistentCorrespondence { vertex: g0 })?;
            if std::mem::replace(&mut used[g1], true) {
                return Err(Error::InconsistentCorrespondence { vertex: g0 });
            }
            Ok(p1.vertices()[g1] - p0.vertices()[g0])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Deformation { displacements })
}

/// One row of a Lipschitz sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub t: f64,
    pub d_t: f64,
    pub dtn_norm: f64,
    /// `dtn_norm / d_t`; `None` at `t = 0`.
    pub ratio: Option<f64>,
    pub mesh_h: f64,
    pub n_dofs: usize,
    pub seed: u64,
}

/// For each `t`, `d_T(P, P + t·v)` and `‖Λ_t − Λ_0‖_⋆` on one fixed mesh.
pub fn lipschitz_sweep(
    f0: &PiecewiseField,
    d: &Deformation,
    fs: &FrequencySpec,
    t_grid: &[f64],
    mesh_cfg: &MeshConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mesh = Mesh::build(f0.partition(), mesh_cfg, fs.radius, f0.values().q0())?;
    let gram = BoundaryGram::new(&mesh)?;
    lipschitz_sweep_on(f0, d, fs, t_grid, &mesh, &gram, seed)
}

/// [`lipschitz_sweep`] on a prepared mesh and boundary Gram.
pub fn lipschitz_sweep_on(
    f0: &PiecewiseField,
    d: &Deformation,
    fs: &FrequencySpec,
    t_grid: &[f64],
    mesh: &Mesh,
    gram: &BoundaryGram,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let fields = t_grid.iter().map(|&t| f0.deform(d, t)).collect::<Result<Vec<_>>>()?;
    let l0 = DtnMatrix::for_field(mesh, f0, fs)?;
    t_grid
        .par_iter()
        .zip(&fields)
        .map(|(&t, ft)| {
            let d_t = f0.partition().deformation_size(&d.scaled(t))?.d_t;
            let dtn_norm = if t == 0.0 {
                0.0
            } else {
                let lt = DtnMatrix::for_field(mesh, ft, fs)?;
                star_norm(lt.difference(&l0)?.as_ref(), gram)?.value
            };
            let ratio = (d_t > 0.0).then(|| dtn_norm / d_t);
            Ok(SweepRow { t, d_t, dtn_norm, ratio, mesh_h: mesh.nominal_h(), n_dofs: mesh.n_dofs(), seed })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::ElementOrder;
    use crate::fixtures::{self, coned_field, jittered_shuffle, Polyhedron};
    use crate::geometry::Point3;
    use nalgebra::Vector3;

    fn cfg() -> MatchConfig {
        MatchConfig { c1_samples: 500, ..Default::default() }
    }

    #[test]
    fn threshold_plug_ins() {
        let (c0, c1): (f64, f64) = (2.0, 0.3);
        assert!((delta_epsilon((c0 * c0 * c1).sqrt(), c0, c1) - 1.0).abs() < 1e-15);
        let r1: f64 = 0.7;
        let e1 = epsilon_one(r1, c0, c1);
        assert!((e1 * e1 - r1.powi(3) * c0 * c0 * c1).abs() < 1e-15);
    }

    #[test]
    fn eroded_samples_keep_their_depth() {
        let t = Tetrahedron::regular(1.0);
        let r = t.insphere_radius().unwrap();
        let pts = eroded_samples(&t, 0.4 * r, 512);
        assert_eq!(pts.len(), 512);
        for x in &pts {
            let depth = t.planes().iter().map(|p| -p.signed_distance(x)).fold(f64::INFINITY, f64::min);
            assert!(depth >= 0.4 * r - 1e-12);
        }
        assert!(eroded_samples(&t, r, 10).is_empty());
    }

    #[test]
    fn identical_fields_match_identically() {
        let f = fixtures::reference_field();
        let m = match_partitions(&f, &f, f.values(), &cfg()).unwrap();
        assert_eq!(m.permutation().unwrap(), (0..8).collect::<Vec<_>>().as_slice());
        assert!(m.hausdorff.iter().all(|&h| h == 0.0));
        assert_eq!(m.eps, 0.0);
        let d = vertex_correspondence(&m, &f, &f).unwrap();
        assert!(d.is_zero());
    }

    #[test]
    fn reversed_listing_gives_reversing_permutation() {
        let f = fixtures::reference_field();
        let order: Vec<usize> = (0..8).rev().collect();
        let g = f.reordered(&order).unwrap();
        let m = match_partitions(&f, &g, f.values(), &cfg()).unwrap();
        assert_eq!(m.permutation().unwrap(), order.as_slice());
        let back = match_partitions(&g, &f, f.values(), &cfg()).unwrap();
        let p = m.permutation().unwrap();
        let q = back.permutation().unwrap();
        assert!((0..8).all(|j| q[p[j]] == j));
    }

    #[test]
    fn single_vertex_move_is_recovered() {
        let f = fixtures::reference_field();
        let w = Vector3::new(1e-3, -2e-3, 5e-4);
        let d = Deformation::single(7, fixtures::REFERENCE_CENTER, w);
        let g = f.deform(&d, 1.0).unwrap();
        let m = match_partitions(&f, &g, f.values(), &MatchConfig { c1: Some(0.5), ..cfg() }).unwrap();
        assert!(m.is_matched(), "{:?}", m.outcome);
        assert!(m.mismatched_volume <= m.eps * m.eps / (m.c0 * m.c0) + 1e-15);
        let rec = vertex_correspondence(&m, &f, &g).unwrap();
        for (i, v) in rec.displacements.iter().enumerate() {
            let expect = if i == fixtures::REFERENCE_CENTER { w } else { Vector3::zeros() };
            assert!((v - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn far_partitions_are_unmatched() {
        let f = coned_field(Polyhedron::Octahedron, Point3::zeros(), &[1.0, 2.0]).unwrap();
        let g = coned_field(Polyhedron::Octahedron, Point3::new(0.3, 0.2, 0.1), &[1.0, 2.0]).unwrap();
        let m = match_partitions(&f, &g, f.values(), &cfg()).unwrap();
        assert!(matches!(m.outcome, MatchOutcome::Unmatched(Unmatched::DistanceAboveThreshold { .. })));
        assert!(vertex_correspondence(&m, &f, &g).is_err());
        let h = fixtures::four_tet_field(1.0, 2.0);
        assert!(match_partitions(&f, &h, f.values(), &cfg()).is_ok_and(|m| !m.is_matched()));
    }

    #[test]
    fn jitter_round_trips_when_matched() {
        let f = coned_field(Polyhedron::PentagonalBipyramid, Point3::new(0.01, 0.02, -0.01), &[1.0, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g, order, _) = jittered_shuffle(&f, 1e-4 * f.partition().r1(), &mut rng).unwrap();
        let m = match_partitions(&f, &g, f.values(), &cfg()).unwrap();
        assert_eq!(m.permutation().unwrap().iter().map(|&k| order[k]).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
        let rec = vertex_correspondence(&m, &f, &g).unwrap();
        let moved = f.partition().displaced(&rec, 1.0);
        for (a, b) in moved.vertices().iter().zip(g.partition().vertices()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn sweep_rows() {
        let f = fixtures::reference_field();
        let fs = FrequencySpec::new(1.2, 0.5, 1.25, 1.0).unwrap();
        let d = fixtures::reference_direction();
        let mc = MeshConfig { target_h: 0.5, order: ElementOrder::P1, augmented: false };
        let rows = lipschitz_sweep(&f, &d, &fs, &[0.0, 0.05, 0.1], &mc, 7).unwrap();
        assert_eq!((rows[0].d_t, rows[0].dtn_norm, rows[0].ratio), (0.0, 0.0, None));
        let (a, b) = (rows[1].ratio.unwrap(), rows[2].ratio.unwrap());
        assert!(a > 0.0 && (a / b).max(b / a) < 2.0, "{a} {b}");
        assert!(rows.iter().all(|r| r.seed == 7 && r.n_dofs == rows[0].n_dofs));
        assert!(matches!(lipschitz_sweep(&f, &d, &fs, &[0.0, 50.0], &mc, 7), Err(Error::RegularityLost { .. })));
    }
}
