//! Tetrahedral partitions, piecewise-constant potentials and vertex deformations.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{self, bounding_box, Point3, Tetrahedron, FACETS};
use crate::{Error, Result};

/// Relative tolerance for identifying coincident vertices.
pub const VERTEX_MERGE_TOL: f64 = 1e-9;

/// Finite set of admissible potential values (units of wavespeed⁻²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueSet {
    values: Vec<f64>,
}

impl ValueSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("value set is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("value set contains a non-finite value".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, l: usize) -> f64 {
        self.values[l]
    }

    /// `max |q_l|`.
    pub fn q0(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `min_{l≠m} |q_l − q_m|`; infinite for a single value.
    pub fn c0(&self) -> f64 {
        let mut c = f64::INFINITY;
        for (i, a) in self.values.iter().enumerate() {
            for b in &self.values[i + 1..] {
                c = c.min((a - b).abs());
            }
        }
        c
    }
}

/// Boundary facet: tetrahedron index and the local facet (opposite-vertex) index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFacet {
    pub tet: usize,
    pub facet: usize,
}

/// Interior facet shared by two tetrahedra.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteriorFacet {
    pub tets: [usize; 2],
    pub facets: [usize; 2],
}

/// Conforming tetrahedral partition with a global vertex table.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    vertices: Vec<Point3>,
    tets: Vec<[usize; 4]>,
    r1: f64,
    n0: usize,
    interior: Vec<InteriorFacet>,
    boundary: Vec<BoundaryFacet>,
}

fn facet_key(t: &[usize; 4], f: usize) -> [usize; 3] {
    let mut k = FACETS[f].map(|i| t[i]);
    k.sort_unstable();
    k
}

impl Partition {
    /// Builds a partition from a vertex table and tetrahedra given by global ids.
    ///
    /// Coincident vertices (within `1e-9·diameter`) are merged and tetrahedra are
    /// reoriented to positive volume. `r1` defaults to the smallest insphere radius
    /// and `n0` to the number of tetrahedra.
    pub fn new(
        vertices: Vec<Point3>,
        tets: Vec<[usize; 4]>,
        r1: Option<f64>,
        n0: Option<usize>,
    ) -> Result<Self> {
        if tets.is_empty() {
            return Err(Error::InvalidInput("partition has no tetrahedra".into()));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("non-finite vertex coordinate".into()));
        }
        for t in &tets {
            if t.iter().any(|&i| i >= vertices.len()) {
                return Err(Error::InvalidInput(format!("tetrahedron {t:?} references a missing vertex")));
            }
        }
        let (vertices, remap) = merge_vertices(vertices);
        let mut tets: Vec<[usize; 4]> = tets.iter().map(|t| t.map(|i| remap[i])).collect();
        for t in tets.iter_mut() {
            let [a, b, c, d] = t.map(|i| vertices[i]);
            if geometry::signed_volume(&a, &b, &c, &d) < 0.0 {
                t.swap(2, 3);
            }
        }
        Self::assemble(vertices, tets, r1, n0)
    }

    /// Builds a partition from free-standing tetrahedra, identifying shared vertices.
    pub fn from_tetrahedra(tets: &[Tetrahedron], r1: Option<f64>, n0: Option<usize>) -> Result<Self> {
        let vertices: Vec<Point3> = tets.iter().flat_map(|t| t.vertices().iter().copied()).collect();
        let ids = (0..tets.len()).map(|j| [4 * j, 4 * j + 1, 4 * j + 2, 4 * j + 3]).collect();
        Self::new(vertices, ids, r1, n0)
    }

    fn assemble(vertices: Vec<Point3>, tets: Vec<[usize; 4]>, r1: Option<f64>, n0: Option<usize>) -> Result<Self> {
        let mut facet_map: BTreeMap<[usize; 3], Vec<(usize, usize)>> = BTreeMap::new();
        for (j, t) in tets.iter().enumerate() {
            for f in 0..4 {
                facet_map.entry(facet_key(t, f)).or_default().push((j, f));
            }
        }
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        for owners in facet_map.values() {
            match owners.as_slice() {
                [(j, f)] => boundary.push(BoundaryFacet { tet: *j, facet: *f }),
                [(j, f), (k, g)] => interior.push(InteriorFacet { tets: [*j, *k], facets: [*f, *g] }),
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "facet shared by {} tetrahedra",
                        owners.len()
                    )))
                }
            }
        }
        boundary.sort_by_key(|b| (b.tet, b.facet));
        interior.sort_by_key(|i| (i.tets, i.facets));
        let mut p = Self { vertices, tets, r1: 0.0, n0: 0, interior, boundary };
        p.r1 = match r1 {
            Some(r) => r,
            None => p.min_insphere_radius(),
        };
        p.n0 = n0.unwrap_or(p.tets.len());
        Ok(p)
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn len(&self) -> usize {
        self.tets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tets.is_empty()
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn with_bounds(mut self, r1: f64, n0: usize) -> Self {
        self.r1 = r1;
        self.n0 = n0;
        self
    }

    pub fn tetrahedron(&self, j: usize) -> Tetrahedron {
        Tetrahedron::new(self.tets[j].map(|i| self.vertices[i]))
    }

    pub fn tetrahedra(&self) -> Vec<Tetrahedron> {
        (0..self.len()).map(|j| self.tetrahedron(j)).collect()
    }

    pub fn interior_facets(&self) -> &[InteriorFacet] {
        &self.interior
    }

    pub fn boundary_facets(&self) -> &[BoundaryFacet] {
        &self.boundary
    }

    /// Facet-sharing pairs `(j, k)` with `j < k`.
    pub fn adjacency(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<_> = self
            .interior
            .iter()
            .map(|f| (f.tets[0].min(f.tets[1]), f.tets[0].max(f.tets[1])))
            .collect();
        pairs.sort_unstable();
        pairs
    }

    /// Global vertex ids of boundary facet `b`, outward oriented.
    pub fn boundary_triangle(&self, b: &BoundaryFacet) -> [usize; 3] {
        FACETS[b.facet].map(|i| self.tets[b.tet][i])
    }

    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut on = vec![false; self.vertices.len()];
        for b in &self.boundary {
            for v in self.boundary_triangle(b) {
                on[v] = true;
            }
        }
        on
    }

    pub fn volume(&self) -> f64 {
        (0..self.len()).map(|j| self.tetrahedron(j).volume()).sum()
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                d = d.max((a - b).norm());
            }
        }
        d
    }

    /// Radius of the smallest origin-centred ball containing every vertex.
    pub fn enclosing_radius(&self) -> f64 {
        self.vertices.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn min_insphere_radius(&self) -> f64 {
        (0..self.len())
            .map(|j| self.tetrahedron(j).insphere_radius().unwrap_or(0.0))
            .fold(f64::INFINITY, f64::min)
    }

    /// `(d1, alpha1)`: minimum vertex separation and facet angle over all tetrahedra.
    pub fn regularity_constants(&self) -> Result<(f64, f64)> {
        let mut d1 = f64::INFINITY;
        let mut a1 = f64::INFINITY;
        for j in 0..self.len() {
            let (d, a) = self.tetrahedron(j).regularity_constants()?;
            d1 = d1.min(d);
            a1 = a1.min(a);
        }
        Ok((d1, a1))
    }

    /// Copy with vertex positions replaced; connectivity and bounds unchanged.
    pub fn with_vertices(&self, vertices: Vec<Point3>) -> Self {
        assert_eq!(vertices.len(), self.vertices.len());
        Self { vertices, ..self.clone() }
    }

    /// Copy with tetrahedra reordered: new tet `i` is old tet `order[i]`.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let tets = order.iter().map(|&j| self.tets[j]).collect();
        Self::assemble(self.vertices.clone(), tets, Some(self.r1), Some(self.n0))
    }

    /// Partition at parameter `t` of the family `P + t·v`, with the insphere floor `0.5·r1`.
    pub fn deform(&self, d: &Deformation, t: f64) -> Result<Self> {
        self.deform_with_floor(d, t, 0.5 * self.r1)
    }

    pub fn deform_with_floor(&self, d: &Deformation, t: f64, floor: f64) -> Result<Self> {
        d.check_len(self)?;
        if t == 0.0 {
            return Ok(self.clone());
        }
        let moved = self.displaced(d, t);
        for j in 0..moved.len() {
            let tet = moved.tetrahedron(j);
            let vol = tet.signed_volume();
            let radius = if vol <= 0.0 {
                -tet.insphere_radius().unwrap_or(0.0)
            } else {
                tet.insphere_radius().unwrap_or(0.0)
            };
            if radius < floor {
                return Err(Error::RegularityLost { tet: j, t, radius, floor });
            }
        }
        Ok(moved)
    }

    /// Displaced copy without any regularity check.
    pub fn displaced(&self, d: &Deformation, t: f64) -> Self {
        let vertices = self
            .vertices
            .iter()
            .zip(&d.displacements)
            .map(|(p, v)| p + v * t)
            .collect();
        self.with_vertices(vertices)
    }

    /// Affine field `Φ_{j,t0}` with `Φ(P_i + t0·v_i) = v_i` on tetrahedron `j`.
    pub fn affine_flow(&self, d: &Deformation, j: usize, t0: f64) -> Result<AffineMap> {
        d.check_len(self)?;
        let ids = self.tets[j];
        let p: [Point3; 4] = ids.map(|i| self.vertices[i] + d.displacements[i] * t0);
        let v: [Vector3<f64>; 4] = ids.map(|i| d.displacements[i]);
        AffineMap::interpolating(&p, &v)
    }

    /// Per-tetrahedron `V_j = Σ_i |v_{j,i}|` and `d_T = Σ_j d_H(T_j(0), T_j(1))`.
    pub fn deformation_size(&self, d: &Deformation) -> Result<DeformationSize> {
        d.check_len(self)?;
        let end = self.displaced(d, 1.0);
        let per_tet: Vec<f64> = self
            .tets
            .iter()
            .map(|t| t.iter().map(|&i| d.displacements[i].norm()).sum())
            .collect();
        let d_t = (0..self.len())
            .map(|j| geometry::hausdorff(&self.tetrahedron(j), &end.tetrahedron(j)))
            .sum();
        Ok(DeformationSize { per_tet, d_t })
    }

    /// `ṽ = v / Σ_j V_j`, so that the per-tetrahedron sums of `|ṽ|` add to one.
    pub fn normalized_deformation(&self, d: &Deformation) -> Result<Deformation> {
        let total: f64 = self.deformation_size(d)?.per_tet.iter().sum();
        if total == 0.0 {
            return Err(Error::ZeroDeformation);
        }
        Ok(d.scaled(1.0 / total))
    }

    /// Projects boundary-vertex displacements onto the tangent space of every
    /// incident boundary facet plane; corner vertices become fixed.
    pub fn tangential_projection(&self, d: &Deformation) -> Result<Deformation> {
        d.check_len(self)?;
        let normals = self.boundary_vertex_normals();
        let displacements = d
            .displacements
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut w = *v;
                for n in &normals[i] {
                    w -= n * n.dot(&w);
                }
                w
            })
            .collect();
        Ok(Deformation { displacements })
    }

    /// Checks that every boundary facet keeps its plane (`Φ·ν = 0` on `∂Ω`).
    pub fn check_boundary_preserving(&self, d: &Deformation) -> Result<()> {
        d.check_len(self)?;
        let scale = d.max_norm().max(f64::MIN_POSITIVE);
        for b in &self.boundary {
            let tri = self.boundary_triangle(b);
            let t = self.tetrahedron(b.tet);
            let n = t.facet_normal(b.facet);
            for v in tri {
                let speed = n.dot(&d.displacements[v]);
                if speed.abs() > 1e-10 * scale {
                    return Err(Error::NonPreservingDeformation { tet: b.tet, normal_speed: speed });
                }
            }
        }
        Ok(())
    }

    /// Orthonormal bases of the span of incident boundary-facet normals, per vertex.
    fn boundary_vertex_normals(&self) -> Vec<Vec<Vector3<f64>>> {
        let mut out: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); self.vertices.len()];
        for b in &self.boundary {
            let n = self.tetrahedron(b.tet).facet_normal(b.facet);
            for v in self.boundary_triangle(b) {
                let basis = &mut out[v];
                let mut w = n;
                for e in basis.iter() {
                    w -= e * e.dot(&w);
                }
                if w.norm() > 1e-9 && basis.len() < 3 {
                    basis.push(w.normalize());
                }
            }
        }
        out
    }

    /// Checks every tetrahedron is star-shaped as seen from the origin, i.e. every
    /// ray from the origin leaves the domain exactly once.
    pub fn is_star_shaped_about_origin(&self) -> bool {
        self.boundary.iter().all(|b| {
            let t = self.tetrahedron(b.tet);
            let [a, ..] = t.facet(b.facet);
            t.facet_normal(b.facet).dot(&a) > 1e-12 * self.diameter()
        })
    }
}

fn merge_vertices(vertices: Vec<Point3>) -> (Vec<Point3>, Vec<usize>) {
    let (lo, hi) = bounding_box(vertices.iter());
    let tol = VERTEX_MERGE_TOL * (hi - lo).norm();
    let mut order: Vec<usize> = (0..vertices.len()).collect();
    order.sort_by(|&a, &b| vertices[a].x.total_cmp(&vertices[b].x));
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut rep = vec![usize::MAX; vertices.len()];
    for (pos, &i) in order.iter().enumerate() {
        for &k in order[..pos].iter().rev() {
            if vertices[i].x - vertices[k].x > tol {
                break;
            }
            if (vertices[i] - vertices[k]).norm() <= tol {
                rep[i] = rep[k];
                break;
            }
        }
        if rep[i] == usize::MAX {
            rep[i] = i;
        }
    }
    let mut out = Vec::new();
    let mut new_id = vec![usize::MAX; vertices.len()];
    for i in 0..vertices.len() {
        let r = rep[i];
        if new_id[r] == usize::MAX {
            new_id[r] = out.len();
            out.push(vertices[r]);
        }
        remap[i] = new_id[r];
    }
    (out, remap)
}

/// Piecewise-constant potential `q = Σ q_j χ_{T_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseField {
    partition: Partition,
    values: ValueSet,
    labels: Vec<usize>,
}

impl PiecewiseField {
    pub fn new(partition: Partition, values: ValueSet, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != partition.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} tetrahedra",
                labels.len(),
                partition.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= values.len()) {
            return Err(Error::InvalidInput(format!("label {l} outside the value set")));
        }
        Ok(Self { partition, values, labels })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn values(&self) -> &ValueSet {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Value on tetrahedron `j`.
    pub fn q(&self, j: usize) -> f64 {
        self.values.get(self.labels[j])
    }

    pub fn q_values(&self) -> Vec<f64> {
        (0..self.partition.len()).map(|j| self.q(j)).collect()
    }

    pub fn with_partition(&self, partition: Partition) -> Result<Self> {
        Self::new(partition, self.values.clone(), self.labels.clone())
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.partition.clone(), self.values.clone(), labels)
    }

    pub fn deform(&self, d: &Deformation, t: f64) -> Result<Self> {
        self.with_partition(self.partition.deform(d, t)?)
    }

    /// Tetrahedra reordered by `order` (new `i` is old `order[i]`), labels following.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let labels = order.iter().map(|&j| self.labels[j]).collect();
        Self::new(self.partition.reordered(order)?, self.values.clone(), labels)
    }
}

/// Per-vertex displacement field generating `P(t) = P + t·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deformation {
    pub displacements: Vec<Vector3<f64>>,
}

impl Deformation {
    pub fn zero(n_vertices: usize) -> Self {
        Self { displacements: vec![Vector3::zeros(); n_vertices] }
    }

    /// Moves a single vertex by `w`.
    pub fn single(n_vertices: usize, vertex: usize, w: Vector3<f64>) -> Self {
        let mut d = Self::zero(n_vertices);
        d.displacements[vertex] = w;
        d
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.displacements.iter().all(|v| *v == Vector3::zeros())
    }

    pub fn max_norm(&self) -> f64 {
        self.displacements.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { displacements: self.displacements.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            displacements: self
                .displacements
                .iter()
                .zip(&other.displacements)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    fn check_len(&self, p: &Partition) -> Result<()> {
        if self.len() != p.vertices.len() {
            return Err(Error::InvalidInput(format!(
                "{} displacements for {} vertices",
                self.len(),
                p.vertices.len()
            )));
        }
        Ok(())
    }
}

/// Affine vector field `Φ(x) = A x + b` and its flow `F_τ(x) = x + τΦ(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
}

impl AffineMap {
    /// Unique affine field with `Φ(p_i) = v_i` for the four points of a non-degenerate tetrahedron.
    pub fn interpolating(p: &[Point3; 4], v: &[Vector3<f64>; 4]) -> Result<Self> {
        let t = Tetrahedron::new(*p);
        if t.is_degenerate() {
            return Err(Error::DegenerateTetrahedron { volume: t.volume() });
        }
        let e = Matrix3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
        let w = Matrix3::from_columns(&[v[1] - v[0], v[2] - v[0], v[3] - v[0]]);
        let inv = e.try_inverse().ok_or(Error::DegenerateTetrahedron { volume: t.volume() })?;
        let a = w * inv;
        Ok(Self { a, b: v[0] - a * p[0] })
    }

    pub fn phi(&self, x: &Point3) -> Vector3<f64> {
        self.a * x + self.b
    }

    pub fn flow(&self, tau: f64, x: &Point3) -> Point3 {
        x + self.phi(x) * tau
    }

    /// `DΦ`.
    pub fn gradient(&self) -> Matrix3<f64> {
        self.a
    }

    pub fn divergence(&self) -> f64 {
        self.a.trace()
    }

    /// `det DF_τ = det(I + τ DΦ)`.
    pub fn jacobian_det(&self, tau: f64) -> f64 {
        (Matrix3::identity() + self.a * tau).determinant()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationSize {
    pub per_tet: Vec<f64>,
    pub d_t: f64,
}

/// Exact `‖q0 − q1‖_{L²}` from pairwise intersection volumes.
pub fn exact_l2_distance(f0: &PiecewiseField, f1: &PiecewiseField) -> Result<f64> {
    Ok(overlap_table(f0, f1)?.l2_squared().sqrt())
}

/// Nonzero intersection volumes `|T_j⁰ ∩ T_k¹|` of two partitions of the same domain.
#[derive(Debug, Clone)]
pub struct OverlapTable {
    pub entries: Vec<(usize, usize, f64)>,
    pub q0: Vec<f64>,
    pub q1: Vec<f64>,
}

impl OverlapTable {
    pub fn l2_squared(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(j, k, v)| (self.q0[j] - self.q1[k]).powi(2) * v)
            .sum()
    }

    /// Total intersection volume of pairs carrying different values.
    pub fn mismatched_volume(&self) -> f64 {
        self.entries
            .iter()
            .filter(|&&(j, k, _)| self.q0[j] != self.q1[k])
            .map(|e| e.2)
            .sum()
    }

    pub fn volume(&self, j: usize, k: usize) -> f64 {
        self.entries
            .iter()
            .find(|e| e.0 == j && e.1 == k)
            .map_or(0.0, |e| e.2)
    }
}

pub fn overlap_table(f0: &PiecewiseField, f1: &PiecewiseField) -> Result<OverlapTable> {
    let p0 = f0.partition();
    let p1 = f1.partition();
    let t0 = p0.tetrahedra();
    let t1 = p1.tetrahedra();
    let (v0, v1) = (p0.volume(), p1.volume());
    let mut entries = Vec::new();
    let mut covered = 0.0;
    for (j, a) in t0.iter().enumerate() {
        for (k, b) in t1.iter().enumerate() {
            let v = geometry::intersection_volume(a, b);
            if v > 0.0 {
                entries.push((j, k, v));
                covered += v;
            }
        }
    }
    let tol = 1e-9 * v0.max(v1);
    if (v0 - v1).abs() > tol || (covered - v0).abs() > tol || (covered - v1).abs() > tol {
        return Err(Error::DomainMismatch(format!(
            "volumes {v0} and {v1}, common part {covered}"
        )));
    }
    Ok(OverlapTable { entries, q0: f0.q_values(), q1: f1.q_values() })
}

/// One violated admissibility rule with the offending indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub rule: &'static str,
    pub indices: Vec<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_admissible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    fn push(&mut self, rule: &'static str, indices: Vec<usize>, detail: String) {
        self.violations.push(Violation { rule, indices, detail });
    }
}

/// Rule ids reported by [`validate`].
pub mod rules {
    pub const NONDEGENERATE: &str = "nondegenerate_tetrahedron";
    pub const INSPHERE_FLOOR: &str = "insphere_radius_floor";
    pub const TET_COUNT: &str = "tetrahedron_count_cap";
    pub const DISJOINT: &str = "interiors_disjoint";
    pub const CONFORMING: &str = "conforming_intersection";
    pub const CLOSED_BOUNDARY: &str = "closed_boundary";
    pub const VALUES_DISTINCT: &str = "value_set_distinct";
    pub const ADJACENT_DISTINCT: &str = "adjacent_values_distinct";
}

/// Checks every partition and field invariant; violations are returned as data.
pub fn validate(f: &PiecewiseField) -> ValidationReport {
    let p = f.partition();
    let mut report = ValidationReport::default();
    let tets = p.tetrahedra();
    let diam = p.diameter();
    for (j, t) in tets.iter().enumerate() {
        if t.is_degenerate() {
            report.push(rules::NONDEGENERATE, vec![j], format!("volume {:e}", t.volume()));
            continue;
        }
        let r = t.insphere_radius().unwrap_or(0.0);
        if r < p.r1() * (1.0 - 1e-12) {
            report.push(rules::INSPHERE_FLOOR, vec![j], format!("radius {r} below r1 = {}", p.r1()));
        }
    }
    if p.len() > p.n0() {
        report.push(rules::TET_COUNT, vec![], format!("{} tetrahedra exceed N0 = {}", p.len(), p.n0()));
    }
    for j in 0..tets.len() {
        for k in j + 1..tets.len() {
            let v = geometry::intersection_volume(&tets[j], &tets[k]);
            if v > 1e-9 * tets[j].volume().min(tets[k].volume()) {
                report.push(rules::DISJOINT, vec![j, k], format!("overlap volume {v:e}"));
            }
        }
    }
    let tol = 1e-9 * diam;
    for (i, x) in p.vertices().iter().enumerate() {
        for (j, t) in tets.iter().enumerate() {
            if p.tets()[j].contains(&i) {
                continue;
            }
            if geometry::point_distance(x, t) <= tol {
                report.push(rules::CONFORMING, vec![i, j], "vertex lies on a tetrahedron it does not belong to".into());
            }
        }
    }
    let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
    for b in p.boundary_facets() {
        let tri = p.boundary_triangle(b);
        for k in 0..3 {
            let (a, c) = (tri[k], tri[(k + 1) % 3]);
            *edge_count.entry((a.min(c), a.max(c))).or_default() += 1;
        }
    }
    let mut open: Vec<(usize, usize)> = edge_count.into_iter().filter(|&(_, n)| n != 2).map(|(e, _)| e).collect();
    open.sort_unstable();
    for (a, c) in open {
        report.push(rules::CLOSED_BOUNDARY, vec![a, c], "boundary edge not shared by exactly two boundary facets".into());
    }
    if f.values().c0() == 0.0 {
        report.push(rules::VALUES_DISTINCT, vec![], "value set contains repeated values".into());
    }
    for (j, k) in p.adjacency() {
        if f.q(j) == f.q(k) {
            report.push(rules::ADJACENT_DISTINCT, vec![j, k], format!("both carry q = {}", f.q(j)));
        }
    }
    report
}

/// JSON layout of a partition with optional field and deformation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldFile {
    pub vertices: Vec<[f64; 3]>,
    pub tets: Vec<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub displacements: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<usize>,
}

impl FieldFile {
    pub fn from_field(f: &PiecewiseField, d: Option<&Deformation>) -> Self {
        let p = f.partition();
        Self {
            vertices: p.vertices().iter().map(|v| [v.x, v.y, v.z]).collect(),
            tets: p.tets().to_vec(),
            labels: Some(f.labels().to_vec()),
            values: Some(f.values().values().to_vec()),
            displacements: d.map(|d| d.displacements.iter().map(|v| [v.x, v.y, v.z]).collect()),
            r1: Some(p.r1()),
            n0: Some(p.n0()),
        }
    }

    pub fn partition(&self) -> Result<Partition> {
        Partition::new(
            self.vertices.iter().map(|v| Point3::from(*v)).collect(),
            self.tets.clone(),
            self.r1,
            self.n0,
        )
    }

    pub fn field(&self) -> Result<PiecewiseField> {
        let values = self
            .values
            .clone()
            .ok_or_else(|| Error::InvalidInput("missing `values`".into()))?;
        let labels = self
            .labels
            .clone()
            .ok_or_else(|| Error::InvalidInput("missing `labels`".into()))?;
        PiecewiseField::new(self.partition()?, ValueSet::new(values)?, labels)
    }

    pub fn deformation(&self) -> Option<Deformation> {
        self.displacements.as_ref().map(|d| Deformation {
            displacements: d.iter().map(|v| Vector3::from(*v)).collect(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
