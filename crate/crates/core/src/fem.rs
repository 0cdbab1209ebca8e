//! Conforming P1/P2 finite elements for `Δu + ω²qu = 0` with Dirichlet data.
//!
//! A mesh is built once from a reference partition (red refinement, optionally
//! wrapped in a radially layered shell out to the augmented ball). The
//! piecewise-constant coefficient of any partition of the same domain is then
//! integrated exactly on that mesh by clipping elements against the partition
//! tetrahedra, so moving partition vertices changes the discrete operator
//! smoothly without remeshing.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::sync::OnceLock;

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, MatRef, Side};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{self, bounding_box, ConvexPolytope, Plane, Point3, Tetrahedron, EDGES, FACETS};
use crate::partition::{Partition, PiecewiseField, ValueSet};
use crate::quadrature::tet_rule;
use crate::{Error, Result};

/// First Dirichlet eigenvalue of the Laplacian on the unit ball, `j_{1/2,1}² = π²`.
pub const LAMBDA1_UNIT_BALL: f64 = PI * PI;

/// Relative algebraic residual demanded of every interior solve.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

/// Hard cap on the number of P1 elements a build may produce.
pub const MAX_ELEMENTS: usize = 1_500_000;

/// `λ₁(B_R) = π²/R²`.
pub fn lambda1_ball(radius: f64) -> f64 {
    LAMBDA1_UNIT_BALL / (radius * radius)
}

/// Working frequency, admissible band and enclosing radius (`Ω ⊂ B_R(0)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencySpec {
    pub omega: f64,
    pub omega0: f64,
    pub omega1: f64,
    pub radius: f64,
}

impl FrequencySpec {
    pub fn new(omega: f64, omega0: f64, omega1: f64, radius: f64) -> Result<Self> {
        let fs = Self { omega, omega0, omega1, radius };
        if !(omega0 > 0.0 && omega0 <= omega && omega <= omega1) {
            return Err(Error::InvalidInput(format!(
                "need 0 < omega0 <= omega <= omega1, got {omega0}, {omega}, {omega1}"
            )));
        }
        if !(radius > 0.0) {
            return Err(Error::InvalidInput("radius must be positive".into()));
        }
        Ok(fs)
    }

    /// Same band and radius at another working frequency (not re-validated).
    pub fn at(&self, omega: f64) -> Self {
        Self { omega, ..*self }
    }

    /// Radius of the augmented ball, `2R/√3`.
    pub fn r_tilde(&self) -> f64 {
        2.0 * self.radius / 3f64.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AugmentedAdmissibility {
    /// `ω²·max|q̃|`
    pub lhs: f64,
    /// `(2/3)·λ₁(B_R̃)`
    pub bound: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    /// `ω₁²·Q₀`
    pub lhs: f64,
    /// `λ₁(B_R)/2`
    pub bound: f64,
    pub margin: f64,
    pub in_band: bool,
    pub augmented: Option<AugmentedAdmissibility>,
}

impl AdmissibilityReport {
    pub fn is_admissible(&self) -> bool {
        self.in_band && self.margin >= 0.0 && self.augmented.is_none_or(|a| a.margin >= 0.0)
    }

    /// Largest positive shortfall, zero when admissible.
    pub fn deficit(&self) -> f64 {
        let a = self.augmented.map_or(0.0, |a| (-a.margin).max(0.0));
        (-self.margin).max(0.0).max(a)
    }
}

pub fn check_admissibility(fs: &FrequencySpec, vs: &ValueSet, augmented: bool) -> AdmissibilityReport {
    let q0 = vs.q0();
    let lhs = fs.omega1 * fs.omega1 * q0;
    let bound = 0.5 * lambda1_ball(fs.radius);
    let augmented = augmented.then(|| {
        let lhs = fs.omega * fs.omega * q0;
        let bound = 2.0 / 3.0 * lambda1_ball(fs.r_tilde());
        AugmentedAdmissibility { lhs, bound, margin: bound - lhs }
    });
    AdmissibilityReport {
        lhs,
        bound,
        margin: bound - lhs,
        in_band: fs.omega0 > 0.0 && fs.omega0 <= fs.omega && fs.omega <= fs.omega1,
        augmented,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ElementOrder {
    #[default]
    P1,
    P2,
}

impl ElementOrder {
    pub fn degree(self) -> usize {
        match self {
            ElementOrder::P1 => 1,
            ElementOrder::P2 => 2,
        }
    }

    pub fn local_dofs(self) -> usize {
        match self {
            ElementOrder::P1 => 4,
            ElementOrder::P2 => 10,
        }
    }

    pub fn face_dofs(self) -> usize {
        match self {
            ElementOrder::P1 => 3,
            ElementOrder::P2 => 6,
        }
    }
}

/// The meshed region: the partitioned domain itself, or the ball of radius
/// `r_tilde` with the coefficient extended by `q_extension` outside the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DomainKind {
    Omega,
    Augmented { r_tilde: f64, q_extension: f64 },
}

impl DomainKind {
    pub fn background(&self) -> f64 {
        match self {
            DomainKind::Omega => 0.0,
            DomainKind::Augmented { q_extension, .. } => *q_extension,
        }
    }

    pub fn is_augmented(&self) -> bool {
        matches!(self, DomainKind::Augmented { .. })
    }
}

/// P1 or P2 shape function values at barycentric coordinates `l`.
/// P2 order: vertices, then edge midpoints `01, 02, 03, 12, 13, 23`.
pub fn shape_values(order: ElementOrder, l: &[f64; 4], out: &mut [f64]) {
    match order {
        ElementOrder::P1 => out[..4].copy_from_slice(l),
        ElementOrder::P2 => {
            for i in 0..4 {
                out[i] = l[i] * (2.0 * l[i] - 1.0);
            }
            for (k, [a, b]) in EDGES.iter().enumerate() {
                out[4 + k] = 4.0 * l[*a] * l[*b];
            }
        }
    }
}

/// Gradients of the shape functions given the barycentric gradients `g`.
pub fn shape_gradients(order: ElementOrder, l: &[f64; 4], g: &[Vector3<f64>; 4], out: &mut [Vector3<f64>]) {
    match order {
        ElementOrder::P1 => out[..4].copy_from_slice(g),
        ElementOrder::P2 => {
            for i in 0..4 {
                out[i] = g[i] * (4.0 * l[i] - 1.0);
            }
            for (k, [a, b]) in EDGES.iter().enumerate() {
                out[4 + k] = (g[*b] * l[*a] + g[*a] * l[*b]) * 4.0;
            }
        }
    }
}

/// Triangle shape functions; P2 order: vertices, then midpoints `01, 02, 12`.
pub fn triangle_shape_values(order: ElementOrder, l: &[f64; 3], out: &mut [f64]) {
    match order {
        ElementOrder::P1 => out[..3].copy_from_slice(l),
        ElementOrder::P2 => {
            for i in 0..3 {
                out[i] = l[i] * (2.0 * l[i] - 1.0);
            }
            out[3] = 4.0 * l[0] * l[1];
            out[4] = 4.0 * l[0] * l[2];
            out[5] = 4.0 * l[1] * l[2];
        }
    }
}

pub fn triangle_shape_gradients(order: ElementOrder, l: &[f64; 3], g: &[Vector3<f64>; 3], out: &mut [Vector3<f64>]) {
    match order {
        ElementOrder::P1 => out[..3].copy_from_slice(g),
        ElementOrder::P2 => {
            for i in 0..3 {
                out[i] = g[i] * (4.0 * l[i] - 1.0);
            }
            out[3] = (g[1] * l[0] + g[0] * l[1]) * 4.0;
            out[4] = (g[2] * l[0] + g[0] * l[2]) * 4.0;
            out[5] = (g[2] * l[1] + g[1] * l[2]) * 4.0;
        }
    }
}

/// Surface gradients of the barycentric coordinates of a triangle, and its area.
pub fn triangle_gradients(t: &[Point3; 3]) -> ([Vector3<f64>; 3], f64) {
    let e1 = t[1] - t[0];
    let e2 = t[2] - t[0];
    let (g11, g12, g22) = (e1.dot(&e1), e1.dot(&e2), e2.dot(&e2));
    let det = g11 * g22 - g12 * g12;
    let g1 = (e1 * g22 - e2 * g12) / det;
    let g2 = (e2 * g11 - e1 * g12) / det;
    ([-g1 - g2, g1, g2], 0.5 * det.sqrt())
}

/// Per-element affine data.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeom {
    pub x0: Point3,
    /// Maps `x − x0` to `(λ1, λ2, λ3)`.
    pub jinv: Matrix3<f64>,
    pub grads: [Vector3<f64>; 4],
    pub volume: f64,
}

impl ElementGeom {
    fn new(t: &Tetrahedron) -> Self {
        let v = t.vertices();
        let j = Matrix3::from_columns(&[v[1] - v[0], v[2] - v[0], v[3] - v[0]]);
        let jinv = j.try_inverse().unwrap_or_else(Matrix3::zeros);
        let g1 = jinv.row(0).transpose();
        let g2 = jinv.row(1).transpose();
        let g3 = jinv.row(2).transpose();
        Self { x0: v[0], jinv, grads: [-g1 - g2 - g3, g1, g2, g3], volume: t.volume() }
    }

    pub fn barycentric(&self, x: &Point3) -> [f64; 4] {
        let l = self.jinv * (x - self.x0);
        [1.0 - l.x - l.y - l.z, l.x, l.y, l.z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Interior(usize),
    Boundary(usize),
}

/// CSR pattern with stiffness and unit mass values and per-element scatter slots.
#[derive(Debug, Clone)]
struct Operators {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    stiffness: Vec<f64>,
    mass: Vec<f64>,
    elem_pos: Vec<usize>,
}

/// Conforming tetrahedral mesh with P1 or P2 degrees of freedom.
#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<Point3>,
    n_vertices: usize,
    elements: Vec<[usize; 4]>,
    dofs: Vec<usize>,
    owner: Vec<Option<usize>>,
    boundary_faces: Vec<[usize; 3]>,
    boundary_face_dofs: Vec<usize>,
    boundary_dofs: Vec<usize>,
    slots: Vec<Slot>,
    n_interior: usize,
    geom: Vec<ElementGeom>,
    bbox: Vec<(Point3, Point3)>,
    order: ElementOrder,
    kind: DomainKind,
    level: usize,
    layers: usize,
    nominal_h: f64,
    tol: f64,
    ops: Operators,
    id: String,
}

/// Inputs for [`Mesh::build`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub target_h: f64,
    #[serde(default)]
    pub order: ElementOrder,
    #[serde(default)]
    pub augmented: bool,
}

impl Mesh {
    /// Mesh of the partitioned domain or of the augmented ball around it.
    ///
    /// For the augmented ball, `radius` is the enclosing radius `R` (so the ball
    /// has radius `2R/√3`) and `q_extension` the coefficient outside the domain.
    pub fn build(p: &Partition, cfg: &MeshConfig, radius: f64, q_extension: f64) -> Result<Self> {
        if cfg.augmented {
            Self::build_augmented(p, cfg.target_h, cfg.order, radius, q_extension)
        } else {
            Self::build_omega(p, cfg.target_h, cfg.order)
        }
    }

    /// Red refinement of the partition until the nominal size `max_edge/2^L ≤ target_h`.
    pub fn build_omega(p: &Partition, target_h: f64, order: ElementOrder) -> Result<Self> {
        let (vertices, elements, owner, level, h) = refine_partition(p, target_h)?;
        Self::from_topology(vertices, elements, owner, order, DomainKind::Omega, level, 0, h)
    }

    /// Mesh of the polyhedral ball of radius `2R/√3` whose outer vertices lie on
    /// the sphere. The shell between the domain and the sphere is built by
    /// projecting the refined domain boundary radially, which requires the
    /// domain to be star-shaped about the origin.
    pub fn build_augmented(
        p: &Partition,
        target_h: f64,
        order: ElementOrder,
        radius: f64,
        q_extension: f64,
    ) -> Result<Self> {
        if !p.is_star_shaped_about_origin() {
            return Err(Error::MeshFailure("domain is not star-shaped about the origin".into()));
        }
        if p.enclosing_radius() > radius * (1.0 + 1e-12) {
            return Err(Error::MeshFailure(format!(
                "domain reaches {} outside B_R with R = {radius}",
                p.enclosing_radius()
            )));
        }
        let r_tilde = 2.0 * radius / 3f64.sqrt();
        let (mut vertices, mut elements, mut owner, level, h) = refine_partition(p, target_h)?;
        let faces = boundary_faces(&elements);
        let mut on_boundary: Vec<usize> = faces.iter().flatten().copied().collect();
        on_boundary.sort_unstable();
        on_boundary.dedup();
        let max_gap = on_boundary
            .iter()
            .map(|&v| r_tilde - vertices[v].norm())
            .fold(0.0, f64::max);
        let layers = ((max_gap / h).ceil() as usize).max(1);
        if elements.len() + 3 * layers * faces.len() > MAX_ELEMENTS {
            return Err(Error::MeshFailure("element budget exceeded by the outer shell".into()));
        }
        let mut stack: HashMap<usize, Vec<usize>> = HashMap::new();
        for &v in &on_boundary {
            let p0 = vertices[v];
            let outer = p0 * (r_tilde / p0.norm());
            let mut ids = vec![v];
            for k in 1..=layers {
                ids.push(vertices.len());
                vertices.push(p0 + (outer - p0) * (k as f64 / layers as f64));
            }
            stack.insert(v, ids);
        }
        for f in &faces {
            let [a, b, c] = f.map(|v| &stack[&v]);
            for k in 0..layers {
                let prism = [a[k], b[k], c[k], a[k + 1], b[k + 1], c[k + 1]];
                for t in split_prism(prism) {
                    let oriented = orient(&vertices, t);
                    let tet = Tetrahedron::new(oriented.map(|i| vertices[i]));
                    if tet.is_degenerate() {
                        return Err(Error::MeshFailure("degenerate shell element".into()));
                    }
                    elements.push(oriented);
                    owner.push(None);
                }
            }
        }
        let kind = DomainKind::Augmented { r_tilde, q_extension };
        Self::from_topology(vertices, elements, owner, order, kind, level, layers, h)
    }

    #[allow(clippy::too_many_arguments)]
    fn from_topology(
        vertices: Vec<Point3>,
        elements: Vec<[usize; 4]>,
        owner: Vec<Option<usize>>,
        order: ElementOrder,
        kind: DomainKind,
        level: usize,
        layers: usize,
        nominal_h: f64,
    ) -> Result<Self> {
        let n_vertices = vertices.len();
        let mut nodes = vertices;
        let nloc = order.local_dofs();
        let mut dofs = Vec::with_capacity(elements.len() * nloc);
        let mut edge_node: HashMap<(usize, usize), usize> = HashMap::new();
        for el in &elements {
            dofs.extend_from_slice(el);
            if order == ElementOrder::P2 {
                for [a, b] in EDGES {
                    let (i, j) = (el[a].min(el[b]), el[a].max(el[b]));
                    let id = *edge_node.entry((i, j)).or_insert_with(|| {
                        nodes.push((nodes[i] + nodes[j]) * 0.5);
                        nodes.len() - 1
                    });
                    dofs.push(id);
                }
            }
        }
        let faces = boundary_faces(&elements);
        let mut boundary_face_dofs = Vec::with_capacity(faces.len() * order.face_dofs());
        for f in &faces {
            boundary_face_dofs.extend_from_slice(f);
            if order == ElementOrder::P2 {
                for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                    let key = (f[a].min(f[b]), f[a].max(f[b]));
                    boundary_face_dofs.push(edge_node[&key]);
                }
            }
        }
        let mut boundary_dofs = boundary_face_dofs.clone();
        boundary_dofs.sort_unstable();
        boundary_dofs.dedup();
        let mut slots = vec![Slot::Interior(usize::MAX); nodes.len()];
        for (k, &d) in boundary_dofs.iter().enumerate() {
            slots[d] = Slot::Boundary(k);
        }
        let mut n_interior = 0;
        for s in slots.iter_mut() {
            if let Slot::Interior(i) = s {
                *i = n_interior;
                n_interior += 1;
            }
        }
        let tets: Vec<Tetrahedron> = elements.iter().map(|e| Tetrahedron::new(e.map(|i| nodes[i]))).collect();
        let geom: Vec<ElementGeom> = tets.iter().map(ElementGeom::new).collect();
        let bbox: Vec<(Point3, Point3)> = tets.iter().map(|t| bounding_box(t.vertices().iter())).collect();
        let (lo, hi) = bounding_box(nodes[..n_vertices].iter());
        let tol = 1e-12 * (hi - lo).norm();
        let ops = assemble_operators(&nodes, &dofs, &geom, order);
        let id = mesh_hash(&nodes, &elements, order, &kind);
        Ok(Self {
            nodes,
            n_vertices,
            elements,
            dofs,
            owner,
            boundary_faces: faces,
            boundary_face_dofs,
            boundary_dofs,
            slots,
            n_interior,
            geom,
            bbox,
            order,
            kind,
            level,
            layers,
            nominal_h,
            tol,
            ops,
            id,
        })
    }

    pub fn nodes(&self) -> &[Point3] {
        &self.nodes
    }

    pub fn n_dofs(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn element(&self, e: usize) -> Tetrahedron {
        Tetrahedron::new(self.elements[e].map(|i| self.nodes[i]))
    }

    pub fn element_dofs(&self, e: usize) -> &[usize] {
        let n = self.order.local_dofs();
        &self.dofs[e * n..(e + 1) * n]
    }

    pub fn geom(&self, e: usize) -> &ElementGeom {
        &self.geom[e]
    }

    pub fn owner(&self, e: usize) -> Option<usize> {
        self.owner[e]
    }

    pub fn owners(&self) -> &[Option<usize>] {
        &self.owner
    }

    pub fn boundary_faces(&self) -> &[[usize; 3]] {
        &self.boundary_faces
    }

    pub fn boundary_face_dofs(&self, f: usize) -> &[usize] {
        let n = self.order.face_dofs();
        &self.boundary_face_dofs[f * n..(f + 1) * n]
    }

    /// Sorted global dof ids on the boundary; position `k` is boundary slot `k`.
    pub fn boundary_dofs(&self) -> &[usize] {
        &self.boundary_dofs
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary_dofs.len()
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn slot(&self, dof: usize) -> Slot {
        self.slots[dof]
    }

    pub fn order(&self) -> ElementOrder {
        self.order
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn nominal_h(&self) -> f64 {
        self.nominal_h
    }

    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    /// Content hash of the nodes, elements, order and domain kind.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn boundary_points(&self) -> Vec<Point3> {
        self.boundary_dofs.iter().map(|&d| self.nodes[d]).collect()
    }

    /// Restriction of a full dof vector to the boundary slots.
    pub fn trace_of(&self, u: &[f64]) -> Vec<f64> {
        self.boundary_dofs.iter().map(|&d| u[d]).collect()
    }

    /// Nodal interpolant of `f` on the boundary slots.
    pub fn interpolate_trace(&self, f: impl Fn(&Point3) -> f64) -> Vec<f64> {
        self.boundary_dofs.iter().map(|&d| f(&self.nodes[d])).collect()
    }

    /// Value of the discrete function `u` at barycentric point `l` of element `e`.
    pub fn eval(&self, e: usize, l: &[f64; 4], u: &[f64]) -> f64 {
        let mut phi = [0.0; 10];
        shape_values(self.order, l, &mut phi);
        self.element_dofs(e).iter().zip(&phi).map(|(&d, p)| u[d] * p).sum()
    }

    pub fn eval_grad(&self, e: usize, l: &[f64; 4], u: &[f64]) -> Vector3<f64> {
        let mut g = [Vector3::zeros(); 10];
        shape_gradients(self.order, l, &self.geom[e].grads, &mut g);
        self.element_dofs(e).iter().zip(&g).map(|(&d, g)| g * u[d]).sum()
    }

    /// Element containing `x` and its barycentric coordinates.
    pub fn locate(&self, x: &Point3) -> Option<(usize, [f64; 4])> {
        let eps = 1e-10;
        (0..self.elements.len()).find_map(|e| {
            let (lo, hi) = &self.bbox[e];
            if (0..3).any(|k| x[k] < lo[k] - self.tol || x[k] > hi[k] + self.tol) {
                return None;
            }
            let l = self.geom[e].barycentric(x);
            l.iter().all(|&c| c >= -eps).then_some((e, l))
        })
    }

    /// Element-wise L² norm of `f − u`, with `f` evaluated at quadrature points.
    pub fn l2_error(&self, u: &[f64], f: impl Fn(&Point3) -> f64 + Sync) -> f64 {
        let deg = 2 * self.order.degree() + 2;
        let s: f64 = (0..self.elements.len())
            .into_par_iter()
            .map(|e| {
                let t = self.element(e);
                tet_rule(deg)
                    .iter()
                    .map(|q| {
                        let x = t.point_at(&q.bary);
                        let d = f(&x) - self.eval(e, &q.bary, u);
                        q.weight * d * d
                    })
                    .sum::<f64>()
                    * self.geom[e].volume
            })
            .sum();
        s.sqrt()
    }

    /// Overlap of element `e` with each coefficient tetrahedron.
    pub fn element_overlaps(&self, e: usize, coef: &Coefficient) -> Vec<(usize, Overlap)> {
        let tol = self.tol;
        let verts = self.elements[e].map(|i| self.nodes[i]);
        let (lo, hi) = &self.bbox[e];
        let mut out = Vec::new();
        for j in 0..coef.tets.len() {
            let (clo, chi) = &coef.bbox[j];
            if (0..3).any(|k| hi[k] < clo[k] - tol || chi[k] < lo[k] - tol) {
                continue;
            }
            let mut inside = true;
            let mut separated = false;
            for pl in &coef.planes[j] {
                let d = verts.map(|v| pl.signed_distance(&v));
                if d.iter().all(|&x| x >= -tol) {
                    separated = true;
                    break;
                }
                if d.iter().any(|&x| x > tol) {
                    inside = false;
                }
            }
            if separated {
                continue;
            }
            if inside {
                out.clear();
                out.push((j, Overlap::Full));
                break;
            }
            let pieces = ConvexPolytope::from_tetrahedron(&self.element(e))
                .clip_by_tetrahedron(&coef.tets[j], tol)
                .tetrahedralize();
            if !pieces.is_empty() {
                out.push((j, Overlap::Cut(pieces)));
            }
        }
        out
    }

    /// Quadrature over `region` (a subset of element `e`): calls `f(l, x, w)` with
    /// element barycentrics, the physical point and the absolute weight.
    pub fn integrate_region(
        &self,
        e: usize,
        region: &Overlap,
        degree: usize,
        mut f: impl FnMut(&[f64; 4], &Point3, f64),
    ) {
        let g = &self.geom[e];
        match region {
            Overlap::Full => {
                let t = self.element(e);
                for q in tet_rule(degree) {
                    f(&q.bary, &t.point_at(&q.bary), q.weight * g.volume);
                }
            }
            Overlap::Cut(pieces) => {
                for t in pieces {
                    let v = t.volume();
                    for q in tet_rule(degree) {
                        let x = t.point_at(&q.bary);
                        f(&g.barycentric(&x), &x, q.weight * v);
                    }
                }
            }
        }
    }

    /// Pieces of the triangle `tri` lying in each element, for integrating
    /// continuous functions over a partition facet. Elements lying entirely on
    /// the side `outward` points to are skipped, so a triangle that coincides
    /// with mesh faces is covered once, from the inner side.
    pub fn triangle_pieces(&self, tri: &[Point3; 3], outward: &Vector3<f64>) -> Vec<(usize, Vec<[Point3; 3]>)> {
        let tol = self.tol;
        let (tlo, thi) = bounding_box(tri.iter());
        let plane = Plane::through(&tri[0], *outward);
        let mut out = Vec::new();
        for e in 0..self.elements.len() {
            let (lo, hi) = &self.bbox[e];
            if (0..3).any(|k| hi[k] < tlo[k] - tol || thi[k] < lo[k] - tol) {
                continue;
            }
            let verts = self.elements[e].map(|i| self.nodes[i]);
            let d = verts.map(|v| plane.signed_distance(&v));
            if d.iter().all(|&x| x >= -tol) || d.iter().all(|&x| x < -tol) {
                continue;
            }
            let mut poly = tri.to_vec();
            for pl in self.element(e).planes() {
                poly = geometry::clip_polygon(&poly, &pl, tol);
                if poly.len() < 3 {
                    break;
                }
            }
            if poly.len() < 3 || geometry::polygon_area(&poly) <= tol * tol {
                continue;
            }
            let fan = (1..poly.len() - 1).map(|k| [poly[0], poly[k], poly[k + 1]]).collect();
            out.push((e, fan));
        }
        out
    }

    /// Stiffness values on the CSR pattern.
    pub fn stiffness_values(&self) -> &[f64] {
        &self.ops.stiffness
    }

    /// Unit-coefficient mass values on the CSR pattern.
    pub fn mass_values(&self) -> &[f64] {
        &self.ops.mass
    }

    /// CSR row pointers and column indices shared by all assembled operators.
    pub fn pattern(&self) -> (&[usize], &[usize]) {
        (&self.ops.row_ptr, &self.ops.cols)
    }

    /// Matrix of `∫ q ψ_a ψ_b` for the coefficient, on the CSR pattern.
    pub fn q_mass_values(&self, coef: &Coefficient) -> Vec<f64> {
        let nloc = self.order.local_dofs();
        let deg = 2 * self.order.degree();
        let mref = reference_mass(self.order);
        let locals: Vec<(usize, Vec<f64>)> = (0..self.elements.len())
            .into_par_iter()
            .filter_map(|e| {
                let overlaps = self.element_overlaps(e, coef);
                let mut local = vec![0.0; nloc * nloc];
                let mut any = false;
                let mut phi = [0.0; 10];
                for (j, region) in &overlaps {
                    let c = coef.q[*j] - coef.q_bg;
                    if c == 0.0 {
                        continue;
                    }
                    any = true;
                    match region {
                        Overlap::Full => {
                            let v = self.geom[e].volume;
                            for (m, r) in local.iter_mut().zip(mref) {
                                *m += c * v * r;
                            }
                        }
                        Overlap::Cut(_) => self.integrate_region(e, region, deg, |l, _, w| {
                            shape_values(self.order, l, &mut phi);
                            for a in 0..nloc {
                                for b in 0..nloc {
                                    local[a * nloc + b] += c * w * phi[a] * phi[b];
                                }
                            }
                        }),
                    }
                }
                any.then_some((e, local))
            })
            .collect();
        let mut vals: Vec<f64> = self.ops.mass.iter().map(|m| m * coef.q_bg).collect();
        for (e, local) in locals {
            let pos = &self.ops.elem_pos[e * nloc * nloc..(e + 1) * nloc * nloc];
            for (p, v) in pos.iter().zip(&local) {
                vals[*p] += v;
            }
        }
        vals
    }

    /// Sums element-local `nloc × nloc` blocks into values on the CSR pattern.
    pub(crate) fn scatter(&self, locals: impl IntoIterator<Item = (usize, Vec<f64>)>) -> Vec<f64> {
        let nloc = self.order.local_dofs();
        let mut vals = vec![0.0; self.ops.cols.len()];
        for (e, local) in locals {
            let pos = &self.ops.elem_pos[e * nloc * nloc..(e + 1) * nloc * nloc];
            for (p, v) in pos.iter().zip(&local) {
                vals[*p] += v;
            }
        }
        vals
    }

    /// `y = A u` for values on the CSR pattern.
    pub fn csr_matvec(&self, values: &[f64], u: &[f64]) -> Vec<f64> {
        let (rp, cols) = self.pattern();
        (0..self.nodes.len())
            .map(|i| (rp[i]..rp[i + 1]).map(|k| values[k] * u[cols[k]]).sum())
            .collect()
    }

    /// Bilinear form `vᵀ A u` for values on the CSR pattern.
    pub fn csr_bilinear(&self, values: &[f64], v: &[f64], u: &[f64]) -> f64 {
        let (rp, cols) = self.pattern();
        (0..self.nodes.len())
            .map(|i| v[i] * (rp[i]..rp[i + 1]).map(|k| values[k] * u[cols[k]]).sum::<f64>())
            .sum()
    }

    pub fn to_file(&self) -> MeshFile {
        MeshFile {
            order: self.order,
            domain: self.kind,
            level: self.level,
            layers: self.layers,
            nominal_h: self.nominal_h,
            vertices: self.nodes[..self.n_vertices].iter().map(|v| [v.x, v.y, v.z]).collect(),
            elements: self.elements.clone(),
            owner: self.owner.clone(),
            boundary_faces: self.boundary_faces.clone(),
            id: self.id.clone(),
        }
    }

    pub fn from_file(f: &MeshFile) -> Result<Self> {
        if f.owner.len() != f.elements.len() {
            return Err(Error::InvalidInput("owner tags do not match elements".into()));
        }
        let vertices = f.vertices.iter().map(|v| Point3::from(*v)).collect();
        let m = Self::from_topology(
            vertices,
            f.elements.clone(),
            f.owner.clone(),
            f.order,
            f.domain,
            f.level,
            f.layers,
            f.nominal_h,
        )?;
        if m.id != f.id {
            return Err(Error::Parse(format!("mesh id {} does not match content {}", f.id, m.id)));
        }
        Ok(m)
    }
}

/// Region of an element covered by one coefficient tetrahedron.
#[derive(Debug, Clone)]
pub enum Overlap {
    Full,
    Cut(Vec<Tetrahedron>),
}

/// JSON layout of a mesh: vertex table, elements, owner tags (partition
/// tetrahedron index, `null` in the extension shell) and boundary faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshFile {
    pub order: ElementOrder,
    pub domain: DomainKind,
    pub level: usize,
    pub layers: usize,
    pub nominal_h: f64,
    pub vertices: Vec<[f64; 3]>,
    pub elements: Vec<[usize; 4]>,
    pub owner: Vec<Option<usize>>,
    pub boundary_faces: Vec<[usize; 3]>,
    pub id: String,
}

/// Piecewise-constant coefficient `q_bg + Σ_j (q_j − q_bg) χ_{T_j}` ready for assembly.
#[derive(Debug, Clone)]
pub struct Coefficient {
    tets: Vec<Tetrahedron>,
    planes: Vec<[Plane; 4]>,
    bbox: Vec<(Point3, Point3)>,
    q: Vec<f64>,
    q_bg: f64,
}

impl Coefficient {
    pub fn new(tets: Vec<Tetrahedron>, q: Vec<f64>, q_bg: f64) -> Self {
        let planes = tets.iter().map(|t| t.planes()).collect();
        let bbox = tets.iter().map(|t| bounding_box(t.vertices().iter())).collect();
        Self { tets, planes, bbox, q, q_bg }
    }

    /// Coefficient of `f` on `mesh`, with the mesh's background value outside the partition.
    pub fn from_field(mesh: &Mesh, f: &PiecewiseField) -> Self {
        Self::new(f.partition().tetrahedra(), f.q_values(), mesh.kind().background())
    }

    pub fn tets(&self) -> &[Tetrahedron] {
        &self.tets
    }

    pub fn q(&self, j: usize) -> f64 {
        self.q[j]
    }

    pub fn background(&self) -> f64 {
        self.q_bg
    }

    /// `q_j − q_bg`.
    pub fn contrast(&self, j: usize) -> f64 {
        self.q[j] - self.q_bg
    }
}

fn refine_partition(
    p: &Partition,
    target_h: f64,
) -> Result<(Vec<Point3>, Vec<[usize; 4]>, Vec<Option<usize>>, usize, f64)> {
    if !(target_h > 0.0) {
        return Err(Error::InvalidInput("target_h must be positive".into()));
    }
    let h0 = (0..p.len()).map(|j| p.tetrahedron(j).max_edge()).fold(0.0, f64::max);
    let mut level = 0;
    let mut h = h0;
    while h > target_h * (1.0 + 1e-12) {
        level += 1;
        h *= 0.5;
    }
    if p.len().saturating_mul(8usize.saturating_pow(level as u32)) > MAX_ELEMENTS {
        return Err(Error::MeshFailure(format!(
            "refinement level {level} for target_h = {target_h} exceeds the element budget"
        )));
    }
    let mut vertices = p.vertices().to_vec();
    let mut elements = p.tets().to_vec();
    let mut owner: Vec<Option<usize>> = (0..p.len()).map(Some).collect();
    for _ in 0..level {
        let (e, o) = red_refine(&mut vertices, &elements, &owner);
        elements = e;
        owner = o;
    }
    Ok((vertices, elements, owner, level, h))
}

fn orient(nodes: &[Point3], t: [usize; 4]) -> [usize; 4] {
    let [a, b, c, d] = t.map(|i| nodes[i]);
    if geometry::signed_volume(&a, &b, &c, &d) < 0.0 {
        [t[0], t[1], t[3], t[2]]
    } else {
        t
    }
}

/// One level of red refinement; the inner octahedron is split along its shortest diagonal.
fn red_refine(
    nodes: &mut Vec<Point3>,
    elements: &[[usize; 4]],
    owner: &[Option<usize>],
) -> (Vec<[usize; 4]>, Vec<Option<usize>>) {
    let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
    let mut out = Vec::with_capacity(8 * elements.len());
    let mut out_owner = Vec::with_capacity(8 * elements.len());
    for (el, own) in elements.iter().zip(owner) {
        let m: [usize; 6] = EDGES.map(|[a, b]| {
            let (i, j) = (el[a].min(el[b]), el[a].max(el[b]));
            *mid.entry((i, j)).or_insert_with(|| {
                nodes.push((nodes[i] + nodes[j]) * 0.5);
                nodes.len() - 1
            })
        });
        // m: 01, 02, 03, 12, 13, 23; edge k is opposite edge 5 - k
        let [v0, v1, v2, v3] = *el;
        let children = [
            [v0, m[0], m[1], m[2]],
            [m[0], v1, m[3], m[4]],
            [m[1], m[3], v2, m[5]],
            [m[2], m[4], m[5], v3],
        ];
        let diag = (0..3)
            .min_by(|&a, &b| {
                let la = (nodes[m[a]] - nodes[m[5 - a]]).norm();
                let lb = (nodes[m[b]] - nodes[m[5 - b]]).norm();
                la.total_cmp(&lb)
            })
            .unwrap();
        let others: Vec<usize> = (0..3).filter(|&k| k != diag).collect();
        let ring = [m[others[0]], m[others[1]], m[5 - others[0]], m[5 - others[1]]];
        for c in children {
            out.push(orient(nodes, c));
            out_owner.push(*own);
        }
        for k in 0..4 {
            out.push(orient(nodes, [m[diag], m[5 - diag], ring[k], ring[(k + 1) % 4]]));
            out_owner.push(*own);
        }
    }
    (out, out_owner)
}

/// Outward-oriented faces appearing in exactly one element.
fn boundary_faces(elements: &[[usize; 4]]) -> Vec<[usize; 3]> {
    let mut count: BTreeMap<[usize; 3], (usize, [usize; 3])> = BTreeMap::new();
    for el in elements {
        for f in FACETS {
            let tri = f.map(|i| el[i]);
            let mut key = tri;
            key.sort_unstable();
            count.entry(key).and_modify(|c| c.0 += 1).or_insert((1, tri));
        }
    }
    count.into_values().filter(|(n, _)| *n == 1).map(|(_, t)| t).collect()
}

/// Splits a prism (bottom `0,1,2`, top `3,4,5` with `i+3` above `i`) into three
/// tetrahedra, choosing every quad diagonal through the quad's smallest global id.
fn split_prism(v: [usize; 6]) -> [[usize; 4]; 3] {
    const IND: [[usize; 6]; 6] = [
        [0, 1, 2, 3, 4, 5],
        [1, 2, 0, 4, 5, 3],
        [2, 0, 1, 5, 3, 4],
        [3, 5, 4, 0, 2, 1],
        [4, 3, 5, 1, 0, 2],
        [5, 4, 3, 2, 1, 0],
    ];
    let imin = (0..6).min_by_key(|&i| v[i]).unwrap();
    let w = IND[imin].map(|k| v[k]);
    if w[1].min(w[5]) < w[2].min(w[4]) {
        [[w[0], w[1], w[2], w[5]], [w[0], w[1], w[5], w[4]], [w[0], w[4], w[5], w[3]]]
    } else {
        [[w[0], w[1], w[2], w[4]], [w[0], w[4], w[2], w[5]], [w[0], w[4], w[5], w[3]]]
    }
}

/// Reference element mass matrix per unit volume.
fn reference_mass(order: ElementOrder) -> &'static [f64] {
    static P1: OnceLock<Vec<f64>> = OnceLock::new();
    static P2: OnceLock<Vec<f64>> = OnceLock::new();
    let cell = match order {
        ElementOrder::P1 => &P1,
        ElementOrder::P2 => &P2,
    };
    cell.get_or_init(|| {
        let n = order.local_dofs();
        let mut m = vec![0.0; n * n];
        let mut phi = [0.0; 10];
        for q in tet_rule(2 * order.degree()) {
            shape_values(order, &q.bary, &mut phi);
            for a in 0..n {
                for b in 0..n {
                    m[a * n + b] += q.weight * phi[a] * phi[b];
                }
            }
        }
        m
    })
}

fn assemble_operators(nodes: &[Point3], dofs: &[usize], geom: &[ElementGeom], order: ElementOrder) -> Operators {
    let n = nodes.len();
    let nloc = order.local_dofs();
    let n_el = geom.len();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in 0..n_el {
        let d = &dofs[e * nloc..(e + 1) * nloc];
        for &a in d {
            rows[a].extend_from_slice(d);
        }
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    row_ptr.push(0);
    for r in rows.iter_mut() {
        r.sort_unstable();
        r.dedup();
        cols.extend_from_slice(r);
        row_ptr.push(cols.len());
    }
    let mut elem_pos = vec![0usize; n_el * nloc * nloc];
    elem_pos.par_chunks_mut(nloc * nloc).enumerate().for_each(|(e, pos)| {
        let d = &dofs[e * nloc..(e + 1) * nloc];
        for a in 0..nloc {
            let row = &cols[row_ptr[d[a]]..row_ptr[d[a] + 1]];
            for b in 0..nloc {
                pos[a * nloc + b] = row_ptr[d[a]] + row.binary_search(&d[b]).unwrap();
            }
        }
    });
    let mref = reference_mass(order);
    let deg = 2 * order.degree() - 2;
    let local_stiff: Vec<Vec<f64>> = geom
        .par_iter()
        .map(|g| {
            let mut k = vec![0.0; nloc * nloc];
            let mut grad = [Vector3::zeros(); 10];
            for q in tet_rule(deg) {
                shape_gradients(order, &q.bary, &g.grads, &mut grad);
                for a in 0..nloc {
                    for b in 0..nloc {
                        k[a * nloc + b] += q.weight * g.volume * grad[a].dot(&grad[b]);
                    }
                }
            }
            k
        })
        .collect();
    let mut stiffness = vec![0.0; cols.len()];
    let mut mass = vec![0.0; cols.len()];
    for e in 0..n_el {
        let pos = &elem_pos[e * nloc * nloc..(e + 1) * nloc * nloc];
        for (k, p) in pos.iter().enumerate() {
            stiffness[*p] += local_stiff[e][k];
            mass[*p] += geom[e].volume * mref[k];
        }
    }
    Operators { row_ptr, cols, stiffness, mass, elem_pos }
}

fn mesh_hash(nodes: &[Point3], elements: &[[usize; 4]], order: ElementOrder, kind: &DomainKind) -> String {
    let mut h = Sha256::new();
    h.update(format!("{order:?}{kind:?}").as_bytes());
    for p in nodes {
        for c in p.iter() {
            h.update(c.to_le_bytes());
        }
    }
    for e in elements {
        for i in e {
            h.update((*i as u64).to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

enum Factor {
    Llt(Llt<usize, f64>),
    Lu(Lu<usize, f64>),
}

impl Factor {
    fn solve_in_place(&self, rhs: faer::MatMut<'_, f64>) {
        match self {
            Factor::Llt(f) => f.solve_in_place(rhs),
            Factor::Lu(f) => f.solve_in_place(rhs),
        }
    }
}

/// Discrete solution: nodal coefficients over all dofs.
#[derive(Debug, Clone, PartialEq)]
pub struct FemSolution {
    pub values: Vec<f64>,
    pub omega: f64,
    pub mesh_id: String,
}

impl FemSolution {
    pub fn trace(&self, mesh: &Mesh) -> Vec<f64> {
        mesh.trace_of(&self.values)
    }
}

/// Assembled `K = S − ω²M_q` with a factorization of its interior block.
pub struct HelmholtzSystem<'m> {
    mesh: &'m Mesh,
    omega: f64,
    k: Vec<f64>,
    factor: Factor,
    interior: Vec<usize>,
}

impl<'m> HelmholtzSystem<'m> {
    pub fn new(mesh: &'m Mesh, coef: &Coefficient, omega: f64) -> Result<Self> {
        let mq = mesh.q_mass_values(coef);
        let w2 = omega * omega;
        let k: Vec<f64> = mesh.ops.stiffness.iter().zip(&mq).map(|(s, m)| s - w2 * m).collect();
        let interior: Vec<usize> = (0..mesh.n_dofs())
            .filter(|&d| matches!(mesh.slots[d], Slot::Interior(_)))
            .collect();
        let ni = interior.len();
        let (rp, cols) = mesh.pattern();
        let mut trip = Vec::new();
        for &d in &interior {
            let Slot::Interior(i) = mesh.slots[d] else { unreachable!() };
            for p in rp[d]..rp[d + 1] {
                if let Slot::Interior(j) = mesh.slots[cols[p]] {
                    if j <= i {
                        trip.push(Triplet::new(i, j, k[p]));
                    }
                }
            }
        }
        let kii = SparseColMat::<usize, f64>::try_new_from_triplets(ni, ni, &trip)
            .map_err(|e| Error::SingularSystem(format!("{e:?}")))?;
        let factor = match kii.sp_cholesky(Side::Lower) {
            Ok(f) => Factor::Llt(f),
            Err(_) => {
                let mut full = Vec::new();
                for &d in &interior {
                    let Slot::Interior(i) = mesh.slots[d] else { unreachable!() };
                    for p in rp[d]..rp[d + 1] {
                        if let Slot::Interior(j) = mesh.slots[cols[p]] {
                            full.push(Triplet::new(i, j, k[p]));
                        }
                    }
                }
                let a = SparseColMat::<usize, f64>::try_new_from_triplets(ni, ni, &full)
                    .map_err(|e| Error::SingularSystem(format!("{e:?}")))?;
                Factor::Lu(a.sp_lu().map_err(|e| Error::SingularSystem(format!("{e:?}")))?)
            }
        };
        Ok(Self { mesh, omega, k, factor, interior })
    }

    /// System for a field at the spec's working frequency.
    pub fn for_field(mesh: &'m Mesh, f: &PiecewiseField, fs: &FrequencySpec) -> Result<Self> {
        Self::new(mesh, &Coefficient::from_field(mesh, f), fs.omega)
    }

    pub fn mesh(&self) -> &'m Mesh {
        self.mesh
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Values of `K` on the mesh CSR pattern.
    pub fn values(&self) -> &[f64] {
        &self.k
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self.factor, Factor::Llt(_))
    }

    pub fn matvec(&self, u: &[f64]) -> Vec<f64> {
        self.mesh.csr_matvec(&self.k, u)
    }

    /// Interior right-hand side `−K_IB g` per column and `K_II x` products.
    fn interior_rhs(&self, traces: MatRef<'_, f64>) -> Mat<f64> {
        let mesh = self.mesh;
        let (rp, cols) = mesh.pattern();
        let ni = self.interior.len();
        let m = traces.ncols();
        let mut rhs = Mat::<f64>::zeros(ni, m);
        for (i, &d) in self.interior.iter().enumerate() {
            for p in rp[d]..rp[d + 1] {
                if let Slot::Boundary(b) = mesh.slots[cols[p]] {
                    for c in 0..m {
                        rhs[(i, c)] -= self.k[p] * traces[(b, c)];
                    }
                }
            }
        }
        rhs
    }

    fn interior_apply(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        let mesh = self.mesh;
        let (rp, cols) = mesh.pattern();
        let m = x.ncols();
        let mut y = Mat::<f64>::zeros(self.interior.len(), m);
        for (i, &d) in self.interior.iter().enumerate() {
            for p in rp[d]..rp[d + 1] {
                if let Slot::Interior(j) = mesh.slots[cols[p]] {
                    for c in 0..m {
                        y[(i, c)] += self.k[p] * x[(j, c)];
                    }
                }
            }
        }
        y
    }

    fn solve_block(&self, traces: MatRef<'_, f64>) -> Result<Mat<f64>> {
        let rhs = self.interior_rhs(traces);
        let mut x = rhs.clone();
        self.factor.solve_in_place(x.as_mut());
        let mut worst = 0.0f64;
        for refine in 0..2 {
            let ax = self.interior_apply(x.as_ref());
            let r = &ax - &rhs;
            worst = 0.0;
            for c in 0..rhs.ncols() {
                let rn = r.col(c).norm_l2();
                let bn = rhs.col(c).norm_l2();
                let rel = if bn == 0.0 { rn } else { rn / bn };
                worst = worst.max(rel);
            }
            if worst <= SOLVE_TOLERANCE * 1e-2 || refine == 1 {
                break;
            }
            let mut dx = r;
            self.factor.solve_in_place(dx.as_mut());
            x -= &dx;
        }
        if !(worst <= SOLVE_TOLERANCE) {
            return Err(Error::SolverResidual { residual: worst, tolerance: SOLVE_TOLERANCE });
        }
        Ok(x)
    }

    /// Full dof vectors for each trace column (`n_boundary × m` in, `n_dofs × m` out).
    pub fn solve_traces(&self, traces: MatRef<'_, f64>) -> Result<Mat<f64>> {
        let mesh = self.mesh;
        assert_eq!(traces.nrows(), mesh.n_boundary());
        let m = traces.ncols();
        const BLOCK: usize = 32;
        let blocks: Vec<(usize, usize)> = (0..m).step_by(BLOCK).map(|s| (s, (s + BLOCK).min(m))).collect();
        let solved: Vec<Result<Mat<f64>>> = blocks
            .par_iter()
            .map(|&(s, e)| self.solve_block(traces.subcols(s, e - s)))
            .collect();
        let mut out = Mat::<f64>::zeros(mesh.n_dofs(), m);
        for ((s, e), x) in blocks.iter().zip(solved) {
            let x = x?;
            for c in *s..*e {
                for (b, &d) in mesh.boundary_dofs.iter().enumerate() {
                    out[(d, c)] = traces[(b, c)];
                }
                for (i, &d) in self.interior.iter().enumerate() {
                    out[(d, c)] = x[(i, c - s)];
                }
            }
        }
        Ok(out)
    }

    /// Discrete Dirichlet solve with boundary values `trace` (in boundary-slot order).
    pub fn solve(&self, trace: &[f64]) -> Result<FemSolution> {
        let t = Mat::<f64>::from_fn(trace.len(), 1, |i, _| trace[i]);
        let u = self.solve_traces(t.as_ref())?;
        Ok(FemSolution {
            values: (0..u.nrows()).map(|i| u[(i, 0)]).collect(),
            omega: self.omega,
            mesh_id: self.mesh.id.clone(),
        })
    }

    /// Weak normal derivative of `u` as boundary functionals: the boundary rows of `K u`.
    pub fn neumann(&self, u: &[f64]) -> Vec<f64> {
        let (rp, cols) = self.mesh.pattern();
        self.mesh
            .boundary_dofs
            .iter()
            .map(|&d| (rp[d]..rp[d + 1]).map(|p| self.k[p] * u[cols[p]]).sum())
            .collect()
    }

    /// Discrete extension operator: column `b` solves with the `b`-th boundary unit trace.
    pub fn extension(&self) -> Result<Mat<f64>> {
        let nb = self.mesh.n_boundary();
        self.solve_traces(Mat::<f64>::identity(nb, nb).as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::partition::PiecewiseField;

    fn laplace_field(p: Partition) -> PiecewiseField {
        let n = p.len();
        PiecewiseField::new(p, ValueSet::new(vec![0.0]).unwrap(), vec![0; n]).unwrap()
    }

    #[test]
    fn admissibility_examples() {
        let vs = ValueSet::new(vec![1.0]).unwrap();
        let bound = PI / 2f64.sqrt();
        let ok = FrequencySpec::new(1.0, 0.5, bound * (1.0 - 1e-12), 1.0).unwrap();
        assert!(check_admissibility(&ok, &vs, false).is_admissible());
        let bad = FrequencySpec::new(1.0, 0.5, bound * 1.01, 1.0).unwrap();
        let r = check_admissibility(&bad, &vs, false);
        assert!(!r.is_admissible() && r.deficit() > 0.0);
        let fs = FrequencySpec::new(1.0, 0.5, 1.0, 1.0).unwrap();
        assert!((fs.r_tilde() - 2.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((lambda1_ball(fs.r_tilde()) - 0.75 * PI * PI).abs() < 1e-12);
        let aug = check_admissibility(&fs, &vs, true).augmented.unwrap();
        assert!((aug.bound - 0.5 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn single_tet_red_refinement() {
        let t = Tetrahedron::regular(1.0);
        let p = Partition::from_tetrahedra(&[t], None, None).unwrap();
        let m = Mesh::build_omega(&p, 0.5, ElementOrder::P1).unwrap();
        assert_eq!(m.n_elements(), 8);
        let vol: f64 = (0..8).map(|e| m.element(e).volume()).sum();
        assert!((vol - t.volume()).abs() < 1e-15);
        assert!(m.elements().iter().all(|e| {
            let [a, b, c, d] = e.map(|i| m.nodes()[i]);
            geometry::signed_volume(&a, &b, &c, &d) > 0.0
        }));
    }

    #[test]
    fn interface_facets_are_unions_of_element_faces() {
        let p = fixtures::two_tet_partition();
        let m = Mesh::build_omega(&p, 0.3, ElementOrder::P1).unwrap();
        // every element face that lies on the interface plane is shared by elements
        // of both owners, and the face areas add up to the interface area
        let f = p.interior_facets()[0];
        let tri = p.tetrahedron(f.tets[0]).facet(f.facets[0]);
        let plane = Plane::through(&tri[0], (tri[1] - tri[0]).cross(&(tri[2] - tri[0])));
        let mut faces: HashMap<[usize; 3], Vec<Option<usize>>> = HashMap::new();
        for (e, el) in m.elements().iter().enumerate() {
            for fl in FACETS {
                let mut key = fl.map(|i| el[i]);
                if key.iter().all(|&v| plane.signed_distance(&m.nodes()[v]).abs() < 1e-12) {
                    key.sort_unstable();
                    faces.entry(key).or_default().push(m.owner(e));
                }
            }
        }
        let mut area = 0.0;
        for (k, owners) in &faces {
            assert_eq!(owners.len(), 2);
            assert_ne!(owners[0], owners[1]);
            let [a, b, c] = k.map(|v| m.nodes()[v]);
            area += 0.5 * (b - a).cross(&(c - a)).norm();
        }
        let [a, b, c] = tri;
        assert!((area - 0.5 * (b - a).cross(&(c - a)).norm()).abs() < 1e-12);
    }

    #[test]
    fn augmented_shell_reaches_the_sphere() {
        let p = fixtures::reference_partition();
        let m = Mesh::build_augmented(&p, 0.35, ElementOrder::P1, 1.0, 3.0).unwrap();
        let rt = 2.0 / 3f64.sqrt();
        let vol: f64 = (0..m.n_elements()).map(|e| m.element(e).volume()).sum();
        let omega_vol: f64 = (0..m.n_elements()).filter(|&e| m.owner(e).is_some()).map(|e| m.element(e).volume()).sum();
        assert!((omega_vol - p.volume()).abs() < 1e-12);
        assert!(vol < 4.0 / 3.0 * PI * rt.powi(3));
        for f in m.boundary_faces() {
            let v = f.map(|i| m.nodes()[i]);
            for x in &v {
                assert!((x.norm() - rt).abs() < 1e-12);
            }
            // gap between the flat face and the sphere: R̃(1 − cos θ) with θ the
            // angular radius of the face's circumscribed circle on the sphere
            let n = (v[1] - v[0]).cross(&(v[2] - v[0])).normalize();
            let dist = n.dot(&v[0]).abs();
            let cos_theta = dist / rt;
            let centroid = (v[0] + v[1] + v[2]) / 3.0;
            assert!(rt - centroid.norm() <= rt * (1.0 - cos_theta) + 1e-12);
            assert!(rt - dist <= rt * (1.0 - cos_theta) + 1e-12);
        }
        // conforming: every interior face shared by exactly two elements
        let mut count: HashMap<[usize; 3], usize> = HashMap::new();
        for el in m.elements() {
            for fl in FACETS {
                let mut k = fl.map(|i| el[i]);
                k.sort_unstable();
                *count.entry(k).or_default() += 1;
            }
        }
        assert!(count.values().all(|&c| c == 1 || c == 2));
        assert_eq!(count.values().filter(|&&c| c == 1).count(), m.boundary_faces().len());
    }

    #[test]
    fn prism_split_is_conforming() {
        let s = split_prism([7, 3, 9, 1, 4, 2]);
        let mut vertices = std::collections::BTreeSet::new();
        for t in s {
            vertices.extend(t);
        }
        assert_eq!(vertices.len(), 6);
        // quad (7, 3, 4, 1): diagonal through 1
        let has_edge = |a: usize, b: usize| s.iter().any(|t| t.contains(&a) && t.contains(&b));
        assert!(has_edge(1, 3) && !has_edge(7, 4));
        assert!(has_edge(1, 9) && !has_edge(7, 2));
        assert!(has_edge(2, 3) && !has_edge(9, 4));
    }

    #[test]
    fn affine_traces_are_reproduced() {
        for order in [ElementOrder::P1, ElementOrder::P2] {
            let p = fixtures::two_tet_partition();
            let m = Mesh::build_omega(&p, 0.4, order).unwrap();
            let f = laplace_field(p);
            let sys = HelmholtzSystem::new(&m, &Coefficient::from_field(&m, &f), 1.0).unwrap();
            let g = |x: &Point3| 0.3 + x.x - 2.0 * x.y + 0.5 * x.z;
            let u = sys.solve(&m.interpolate_trace(g)).unwrap();
            for (i, x) in m.nodes().iter().enumerate() {
                assert!((u.values[i] - g(x)).abs() < 1e-11);
            }
            let zero = sys.solve(&vec![0.0; m.n_boundary()]).unwrap();
            assert!(zero.values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn manufactured_solution_converges_at_second_order() {
        // u = sin(κ x) solves Δu + ω²qu = 0 with ω²q = κ²
        let kappa = 1.3;
        let omega = 1.0;
        let p = fixtures::unit_cube_partition();
        let n = p.len();
        let f = PiecewiseField::new(p.clone(), ValueSet::new(vec![kappa * kappa]).unwrap(), vec![0; n]).unwrap();
        let exact = |x: &Point3| (kappa * x.x).sin();
        let mut errors = Vec::new();
        for h in [0.5, 0.25, 0.125, 0.0625] {
            let m = Mesh::build_omega(&p, h, ElementOrder::P1).unwrap();
            let sys = HelmholtzSystem::new(&m, &Coefficient::from_field(&m, &f), omega).unwrap();
            let u = sys.solve(&m.interpolate_trace(exact)).unwrap();
            errors.push((m.nominal_h(), m.l2_error(&u.values, exact)));
        }
        let slopes: Vec<f64> = errors
            .windows(2)
            .map(|w| (w[0].1 / w[1].1).ln() / (w[0].0 / w[1].0).ln())
            .collect();
        for s in &slopes[slopes.len() - 3..] {
            assert!(*s >= 1.9, "slopes {slopes:?}");
        }
    }

    #[test]
    fn interior_block_is_positive_definite_when_admissible() {
        let f = fixtures::reference_field();
        let fs = FrequencySpec::new(1.2, 0.5, 1.25, 1.0).unwrap();
        assert!(check_admissibility(&fs, f.values(), true).is_admissible());
        let m = Mesh::build_augmented(f.partition(), 0.5, ElementOrder::P1, 1.0, f.values().q0()).unwrap();
        let sys = HelmholtzSystem::for_field(&m, &f, &fs).unwrap();
        assert!(sys.is_cholesky());
        // dense smallest eigenvalue of K_II
        let ni = m.n_interior();
        let (rp, cols) = m.pattern();
        let mut dense = Mat::<f64>::zeros(ni, ni);
        for d in 0..m.n_dofs() {
            if let Slot::Interior(i) = m.slot(d) {
                for p in rp[d]..rp[d + 1] {
                    if let Slot::Interior(j) = m.slot(cols[p]) {
                        dense[(i, j)] = sys.values()[p];
                    }
                }
            }
        }
        let eig = dense.self_adjoint_eigen(Side::Lower).unwrap();
        let min = (0..ni).map(|i| eig.S()[i]).fold(f64::INFINITY, f64::min);
        assert!(min > 0.0);
    }

    #[test]
    fn cut_cell_mass_matches_owner_assembly() {
        // on the reference configuration every element lies in one partition
        // tetrahedron, so the clipped assembly equals the owner-tag assembly
        let f = fixtures::reference_field();
        let m = Mesh::build_augmented(f.partition(), 0.5, ElementOrder::P2, 1.0, 3.0).unwrap();
        let coef = Coefficient::from_field(&m, &f);
        let cut = m.q_mass_values(&coef);
        let nloc = 10;
        let mref = reference_mass(ElementOrder::P2);
        let mut owner_based = vec![0.0; cut.len()];
        for e in 0..m.n_elements() {
            let q = m.owner(e).map_or(3.0, |j| f.q(j));
            let pos = &m.ops.elem_pos[e * nloc * nloc..(e + 1) * nloc * nloc];
            for (k, p) in pos.iter().enumerate() {
                owner_based[*p] += q * m.geom(e).volume * mref[k];
            }
        }
        for (a, b) in cut.iter().zip(&owner_based) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn cut_cell_mass_is_exact_for_moved_partitions() {
        // ∫ q·1·1 over the mesh equals Σ q_j |T_j| for any partition of the domain
        let f = fixtures::reference_field();
        let m = Mesh::build_omega(f.partition(), 0.5, ElementOrder::P1).unwrap();
        let g = f.deform(&fixtures::reference_direction(), 1.0).unwrap();
        let vals = m.q_mass_values(&Coefficient::from_field(&m, &g));
        let ones = vec![1.0; m.n_dofs()];
        let total = m.csr_bilinear(&vals, &ones, &ones);
        let exact: f64 = (0..g.partition().len()).map(|j| g.q(j) * g.partition().tetrahedron(j).volume()).sum();
        assert!((total - exact).abs() < 1e-13 * exact);
    }

    #[test]
    fn mesh_json_round_trip() {
        let p = fixtures::two_tet_partition();
        let m = Mesh::build_augmented(&p, 0.6, ElementOrder::P2, 1.0, 2.0).unwrap();
        let file = m.to_file();
        let text = serde_json::to_string(&file).unwrap();
        let back: MeshFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, file);
        let m2 = Mesh::from_file(&back).unwrap();
        assert_eq!(m2.id(), m.id());
        assert_eq!(m2.n_dofs(), m.n_dofs());
    }

    #[test]
    fn triangle_pieces_cover_partition_facets() {
        let f = fixtures::reference_field();
        let m = Mesh::build_augmented(f.partition(), 0.35, ElementOrder::P1, 1.0, 3.0).unwrap();
        let moved = f.deform(&fixtures::reference_direction(), 1.0).unwrap();
        for p in [f.partition(), moved.partition()] {
            for j in 0..p.len() {
                let t = p.tetrahedron(j);
                for k in 0..4 {
                    let tri = t.facet(k);
                    let pieces = m.triangle_pieces(&tri, &t.facet_normal(k));
                    let area: f64 = pieces.iter().flat_map(|(_, ts)| ts.iter()).map(|s| geometry::polygon_area(s)).sum();
                    assert!((area - t.facet_area(k)).abs() < 1e-12, "{area} vs {}", t.facet_area(k));
                }
            }
        }
    }
}
