//! Exact computational geometry for tetrahedra.
//!
//! Everything here is a pure function of immutable values. Distances to a
//! tetrahedron are exact (closest-point queries on the four facets); the
//! Hausdorff distance between two tetrahedra is evaluated at vertices, which is
//! exact because the distance to a convex set is a convex function.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Local vertex indices of the facet opposite each vertex, oriented so that the
/// right-hand normal points outward for a positively oriented tetrahedron.
pub const FACETS: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];

/// Local vertex pairs of the six edges.
pub const EDGES: [[usize; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];

/// Oriented plane `normal · x = offset`; the retained half-space is `normal · x ≤ offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    pub fn through(point: &Point3, normal: Vector3<f64>) -> Self {
        let n = normal.normalize();
        Self { normal: n, offset: n.dot(point) }
    }

    #[inline]
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Signed volume `det([v1-v0, v2-v0, v3-v0]) / 6`.
#[inline]
pub fn signed_volume(a: &Point3, b: &Point3, c: &Point3, d: &Point3) -> f64 {
    (b - a).dot(&(c - a).cross(&(d - a))) / 6.0
}

/// Closed tetrahedron given by four vertices (in the order supplied).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tetrahedron {
    vertices: [Point3; 4],
}

impl Tetrahedron {
    pub fn new(vertices: [Point3; 4]) -> Self {
        Self { vertices }
    }

    pub fn from_arrays(v: [[f64; 3]; 4]) -> Self {
        Self::new(v.map(Point3::from))
    }

    /// Unit right tetrahedron `(0,0,0), (1,0,0), (0,1,0), (0,0,1)`.
    pub fn unit_right() -> Self {
        Self::new([Point3::zeros(), Point3::x(), Point3::y(), Point3::z()])
    }

    /// Regular tetrahedron with the given edge length.
    pub fn regular(edge: f64) -> Self {
        let s = edge / (2.0 * std::f64::consts::SQRT_2);
        Self::new([
            Point3::new(1.0, 1.0, 1.0) * s,
            Point3::new(1.0, -1.0, -1.0) * s,
            Point3::new(-1.0, 1.0, -1.0) * s,
            Point3::new(-1.0, -1.0, 1.0) * s,
        ])
    }

    #[inline]
    pub fn vertices(&self) -> &[Point3; 4] {
        &self.vertices
    }

    #[inline]
    pub fn vertex(&self, i: usize) -> &Point3 {
        &self.vertices[i]
    }

    pub fn signed_volume(&self) -> f64 {
        let [a, b, c, d] = &self.vertices;
        signed_volume(a, b, c, d)
    }

    pub fn volume(&self) -> f64 {
        self.signed_volume().abs()
    }

    /// Copy with positive orientation (vertices 2 and 3 swapped if needed).
    pub fn oriented(&self) -> Self {
        if self.signed_volume() < 0.0 {
            let [a, b, c, d] = self.vertices;
            Self::new([a, b, d, c])
        } else {
            *self
        }
    }

    pub fn centroid(&self) -> Point3 {
        self.vertices.iter().sum::<Point3>() / 4.0
    }

    pub fn translated(&self, w: &Vector3<f64>) -> Self {
        Self::new(self.vertices.map(|v| v + w))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.vertices.map(|v| v * s))
    }

    pub fn max_edge(&self) -> f64 {
        EDGES
            .iter()
            .map(|[i, j]| (self.vertices[*i] - self.vertices[*j]).norm())
            .fold(0.0, f64::max)
    }

    pub fn diameter(&self) -> f64 {
        self.max_edge()
    }

    fn degeneracy_floor(&self) -> f64 {
        let h = self.max_edge();
        1e-14 * h * h * h
    }

    pub fn is_degenerate(&self) -> bool {
        self.volume() <= self.degeneracy_floor()
    }

    fn check_nondegenerate(&self) -> Result<()> {
        if self.is_degenerate() {
            Err(Error::DegenerateTetrahedron { volume: self.volume() })
        } else {
            Ok(())
        }
    }

    /// Facet `i` (opposite vertex `i`) with outward orientation.
    pub fn facet(&self, i: usize) -> [Point3; 3] {
        let [a, b, c] = FACETS[i];
        let tri = [self.vertices[a], self.vertices[b], self.vertices[c]];
        if self.signed_volume() < 0.0 {
            [tri[0], tri[2], tri[1]]
        } else {
            tri
        }
    }

    pub fn facet_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.facet(i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Outward unit normal of facet `i`.
    pub fn facet_normal(&self, i: usize) -> Vector3<f64> {
        let [a, b, c] = self.facet(i);
        (b - a).cross(&(c - a)).normalize()
    }

    /// Bounding planes with outward normals; the tetrahedron is their intersection.
    pub fn planes(&self) -> [Plane; 4] {
        std::array::from_fn(|i| {
            let [a, b, c] = self.facet(i);
            Plane::through(&a, (b - a).cross(&(c - a)))
        })
    }

    /// Barycentric coordinates of `p` with respect to the vertices.
    pub fn barycentric(&self, p: &Point3) -> [f64; 4] {
        let [a, b, c, d] = &self.vertices;
        let m = Matrix3::from_columns(&[b - a, c - a, d - a]);
        match m.try_inverse() {
            Some(inv) => {
                let l = inv * (p - a);
                [1.0 - l.x - l.y - l.z, l.x, l.y, l.z]
            }
            None => [f64::NAN; 4],
        }
    }

    pub fn point_at(&self, bary: &[f64; 4]) -> Point3 {
        self.vertices
            .iter()
            .zip(bary)
            .map(|(v, l)| v * *l)
            .sum()
    }

    /// `true` if `p` lies in the closed tetrahedron inflated by `tol`.
    pub fn contains(&self, p: &Point3, tol: f64) -> bool {
        self.planes().iter().all(|pl| pl.signed_distance(p) <= tol)
    }

    pub fn insphere_radius(&self) -> Result<f64> {
        self.check_nondegenerate()?;
        let area: f64 = (0..4).map(|i| self.facet_area(i)).sum();
        Ok(3.0 * self.volume() / area)
    }

    pub fn circumradius(&self) -> Result<f64> {
        self.check_nondegenerate()?;
        let [a, b, c, d] = &self.vertices;
        let m = Matrix3::from_rows(&[
            (b - a).transpose(),
            (c - a).transpose(),
            (d - a).transpose(),
        ]);
        let rhs = 0.5
            * Vector3::new((b - a).norm_squared(), (c - a).norm_squared(), (d - a).norm_squared());
        let center = m
            .lu()
            .solve(&rhs)
            .ok_or(Error::DegenerateTetrahedron { volume: self.volume() })?;
        Ok(center.norm())
    }

    /// Minimum vertex separation and minimum internal facet angle (radians).
    pub fn regularity_constants(&self) -> Result<(f64, f64)> {
        self.check_nondegenerate()?;
        let d1 = EDGES
            .iter()
            .map(|[i, j]| (self.vertices[*i] - self.vertices[*j]).norm())
            .fold(f64::INFINITY, f64::min);
        let mut alpha1 = f64::INFINITY;
        for f in FACETS {
            for k in 0..3 {
                let p = self.vertices[f[k]];
                let q = self.vertices[f[(k + 1) % 3]];
                let r = self.vertices[f[(k + 2) % 3]];
                alpha1 = alpha1.min((q - p).angle(&(r - p)));
            }
        }
        Ok((d1, alpha1))
    }

    /// Solid angle subtended at vertex `i` (steradians).
    pub fn vertex_solid_angle(&self, i: usize) -> f64 {
        let others: Vec<Point3> = (0..4).filter(|&k| k != i).map(|k| self.vertices[k]).collect();
        let p = self.vertices[i];
        let (a, b, c) = (others[0] - p, others[1] - p, others[2] - p);
        let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
        let num = a.dot(&b.cross(&c)).abs();
        let den = la * lb * lc + a.dot(&b) * lc + a.dot(&c) * lb + b.dot(&c) * la;
        2.0 * num.atan2(den)
    }

    fn bbox(&self) -> (Point3, Point3) {
        bounding_box(self.vertices.iter())
    }
}

pub(crate) fn bounding_box<'a>(pts: impl Iterator<Item = &'a Point3>) -> (Point3, Point3) {
    let mut lo = Point3::repeat(f64::INFINITY);
    let mut hi = Point3::repeat(f64::NEG_INFINITY);
    for p in pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Closest point to `p` on the triangle `(a, b, c)`.
pub fn closest_point_on_triangle(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> Point3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Euclidean distance from `p` to the closed tetrahedron (0 inside).
pub fn point_distance(p: &Point3, t: &Tetrahedron) -> f64 {
    let sd = signed_distance(p, t);
    sd.max(0.0)
}

/// Signed distance: `-d(p, ∂t)` inside, `d(p, t)` outside.
pub fn signed_distance(p: &Point3, t: &Tetrahedron) -> f64 {
    let planes = t.planes();
    let max_plane = planes
        .iter()
        .map(|pl| pl.signed_distance(p))
        .fold(f64::NEG_INFINITY, f64::max);
    if max_plane <= 0.0 {
        return max_plane;
    }
    (0..4)
        .map(|i| {
            let [a, b, c] = t.facet(i);
            (p - closest_point_on_triangle(p, &a, &b, &c)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// One-sided Hausdorff distance `sup_{x ∈ from} d(x, to)`.
pub fn directed_hausdorff(from: &Tetrahedron, to: &Tetrahedron) -> f64 {
    from.vertices()
        .iter()
        .map(|v| point_distance(v, to))
        .fold(0.0, f64::max)
}

/// Exact Hausdorff distance between two closed tetrahedra.
pub fn hausdorff(t0: &Tetrahedron, t1: &Tetrahedron) -> f64 {
    directed_hausdorff(t0, t1).max(directed_hausdorff(t1, t0))
}

/// All 24 permutations of `{0,1,2,3}` in lexicographic order (identity first).
pub fn permutations4() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut seen = [false; 4];
                    if p.iter().all(|&i| !std::mem::replace(&mut seen[i], true)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// `min_perm max_i |P_i - Q_perm(i)|` with its minimising permutation
/// (`perm[i]` is the vertex of `t1` paired with vertex `i` of `t0`).
pub fn vertex_permutation_distance(t0: &Tetrahedron, t1: &Tetrahedron) -> (f64, [usize; 4]) {
    let mut best = (f64::INFINITY, [0, 1, 2, 3]);
    for perm in permutations4() {
        let d = (0..4)
            .map(|i| (t0.vertex(i) - t1.vertex(perm[i])).norm())
            .fold(0.0, f64::max);
        if d < best.0 {
            best = (d, perm);
        }
    }
    best
}

/// Convex polytope as a vertex list plus outward-oriented facet loops.
#[derive(Debug, Clone, Default)]
pub struct ConvexPolytope {
    pub vertices: Vec<Point3>,
    pub faces: Vec<Vec<usize>>,
}

impl ConvexPolytope {
    pub fn from_tetrahedron(t: &Tetrahedron) -> Self {
        let t = t.oriented();
        Self {
            vertices: t.vertices().to_vec(),
            faces: FACETS.iter().map(|f| f.to_vec()).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.len() < 4
    }

    /// Keeps the part with `plane.signed_distance(x) ≤ 0`. Vertices within `tol`
    /// of the plane count as lying on it.
    pub fn clip(&self, plane: &Plane, tol: f64) -> Self {
        if self.is_empty() {
            return Self::default();
        }
        let dist: Vec<f64> = self.vertices.iter().map(|v| plane.signed_distance(v)).collect();
        if dist.iter().all(|&d| d <= tol) {
            return self.clone();
        }
        if dist.iter().all(|&d| d >= -tol) {
            return Self::default();
        }
        let mut new_vertices = Vec::new();
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut on_plane = Vec::new();
        for (i, v) in self.vertices.iter().enumerate() {
            if dist[i] <= tol {
                remap[i] = new_vertices.len();
                if dist[i] >= -tol {
                    on_plane.push(new_vertices.len());
                }
                new_vertices.push(*v);
            }
        }
        let mut cut: std::collections::HashMap<(usize, usize), usize> = Default::default();
        let mut faces = Vec::with_capacity(self.faces.len() + 1);
        for face in &self.faces {
            let mut loop_ = Vec::with_capacity(face.len() + 2);
            for k in 0..face.len() {
                let a = face[k];
                let b = face[(k + 1) % face.len()];
                if dist[a] <= tol {
                    loop_.push(remap[a]);
                }
                let crosses = (dist[a] < -tol && dist[b] > tol) || (dist[a] > tol && dist[b] < -tol);
                if crosses {
                    let key = (a.min(b), a.max(b));
                    let idx = *cut.entry(key).or_insert_with(|| {
                        let s = dist[a] / (dist[a] - dist[b]);
                        let p = self.vertices[a] + (self.vertices[b] - self.vertices[a]) * s;
                        new_vertices.push(p);
                        on_plane.push(new_vertices.len() - 1);
                        new_vertices.len() - 1
                    });
                    loop_.push(idx);
                }
            }
            loop_.dedup();
            if loop_.len() > 1 && loop_.first() == loop_.last() {
                loop_.pop();
            }
            if loop_.len() >= 3 {
                faces.push(loop_);
            }
        }
        on_plane.sort_unstable();
        on_plane.dedup();
        if on_plane.len() >= 3 {
            let center: Point3 =
                on_plane.iter().map(|&i| new_vertices[i]).sum::<Point3>() / on_plane.len() as f64;
            let n = plane.normal;
            let u = (new_vertices[on_plane[0]] - center).normalize();
            let w = n.cross(&u);
            let mut ordered: Vec<(f64, usize)> = on_plane
                .iter()
                .map(|&i| {
                    let d = new_vertices[i] - center;
                    (d.dot(&w).atan2(d.dot(&u)), i)
                })
                .collect();
            ordered.sort_by(|a, b| a.0.total_cmp(&b.0));
            faces.push(ordered.into_iter().map(|(_, i)| i).collect());
        }
        let out = Self { vertices: new_vertices, faces };
        if out.faces.len() < 4 {
            Self::default()
        } else {
            out
        }
    }

    pub fn clip_by_tetrahedron(&self, t: &Tetrahedron, tol: f64) -> Self {
        t.planes().iter().fold(self.clone(), |acc, pl| acc.clip(pl, tol))
    }

    /// Fan decomposition into positively oriented tetrahedra around the vertex mean.
    pub fn tetrahedralize(&self) -> Vec<Tetrahedron> {
        if self.is_empty() {
            return Vec::new();
        }
        let c = self.vertices.iter().sum::<Point3>() / self.vertices.len() as f64;
        let mut out = Vec::new();
        for face in &self.faces {
            let p0 = self.vertices[face[0]];
            for k in 1..face.len() - 1 {
                let t = Tetrahedron::new([c, p0, self.vertices[face[k]], self.vertices[face[k + 1]]]);
                if t.signed_volume() > 0.0 {
                    out.push(t);
                }
            }
        }
        out
    }

    pub fn volume(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let c = self.vertices.iter().sum::<Point3>() / self.vertices.len() as f64;
        let mut v = 0.0;
        for face in &self.faces {
            let p0 = self.vertices[face[0]];
            for k in 1..face.len() - 1 {
                v += signed_volume(&c, &p0, &self.vertices[face[k]], &self.vertices[face[k + 1]]);
            }
        }
        v.max(0.0)
    }
}

/// Sutherland–Hodgman clip of a planar polygon to `plane.signed_distance ≤ tol`.
pub fn clip_polygon(poly: &[Point3], plane: &Plane, tol: f64) -> Vec<Point3> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    if poly.is_empty() {
        return out;
    }
    let dist: Vec<f64> = poly.iter().map(|p| plane.signed_distance(p)).collect();
    for k in 0..poly.len() {
        let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
        let (da, db) = (dist[k], dist[(k + 1) % poly.len()]);
        if da <= tol {
            out.push(a);
        }
        if (da < -tol && db > tol) || (da > tol && db < -tol) {
            out.push(a + (b - a) * (da / (da - db)));
        }
    }
    out
}

/// Area of a planar convex polygon.
pub fn polygon_area(poly: &[Point3]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = Vector3::zeros();
    for k in 1..poly.len() - 1 {
        s += (poly[k] - poly[0]).cross(&(poly[k + 1] - poly[0]));
    }
    0.5 * s.norm()
}

/// Clipping tolerance for a pair of tetrahedra: 1e-12 of their joint bounding-box diameter.
pub fn pair_tolerance(t0: &Tetrahedron, t1: &Tetrahedron) -> f64 {
    let (lo, hi) = bounding_box(t0.vertices().iter().chain(t1.vertices().iter()));
    1e-12 * (hi - lo).norm()
}

/// Convex intersection `t0 ∩ t1`.
pub fn intersection_polytope(t0: &Tetrahedron, t1: &Tetrahedron) -> ConvexPolytope {
    let (a_lo, a_hi) = t0.bbox();
    let (b_lo, b_hi) = t1.bbox();
    let tol = pair_tolerance(t0, t1);
    for k in 0..3 {
        if a_hi[k] < b_lo[k] - tol || b_hi[k] < a_lo[k] - tol {
            return ConvexPolytope::default();
        }
    }
    ConvexPolytope::from_tetrahedron(t0).clip_by_tetrahedron(t1, tol)
}

/// Exact volume of `t0 ∩ t1`.
pub fn intersection_volume(t0: &Tetrahedron, t1: &Tetrahedron) -> f64 {
    intersection_polytope(t0, t1)
        .volume()
        .min(t0.volume())
        .min(t1.volume())
}

/// Monte Carlo measurement of the ball-intersection constant
/// `min |B_r(P) ∩ T| / r³` over centres `P ∈ T` and radii `r ≤ r1`.
///
/// Centres are the vertices, edge midpoints, facet centroids and `extra_centers`
/// random interior points; radii are `r1·{1/4, 1/2, 3/4, 1}`. Each volume is
/// estimated from `samples` uniform points in the ball.
pub fn measure_ball_constant<R: Rng>(
    t: &Tetrahedron,
    r1: f64,
    extra_centers: usize,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    t.check_nondegenerate()?;
    if r1 <= 0.0 {
        return Err(Error::InvalidInput("r1 must be positive".into()));
    }
    let v = t.vertices();
    let mut centers: Vec<Point3> = v.to_vec();
    centers.extend(EDGES.iter().map(|[i, j]| (v[*i] + v[*j]) * 0.5));
    centers.extend((0..4).map(|i| t.facet(i).iter().sum::<Point3>() / 3.0));
    for _ in 0..extra_centers {
        centers.push(t.point_at(&random_barycentric(rng)));
    }
    let planes = t.planes();
    let mut c1 = f64::INFINITY;
    for p in &centers {
        for k in 1..=4 {
            let r = r1 * k as f64 / 4.0;
            let mut hits = 0usize;
            let mut drawn = 0usize;
            while drawn < samples {
                let d = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if d.norm_squared() > 1.0 {
                    continue;
                }
                drawn += 1;
                let x = p + d * r;
                if planes.iter().all(|pl| pl.signed_distance(&x) <= 0.0) {
                    hits += 1;
                }
            }
            let ball = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
            c1 = c1.min(ball * hits as f64 / samples as f64 / (r * r * r));
        }
    }
    Ok(c1)
}

/// Uniform random barycentric coordinates on the 3-simplex.
pub fn random_barycentric<R: Rng>(rng: &mut R) -> [f64; 4] {
    let mut u = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    u.sort_by(|a, b| a.total_cmp(b));
    [u[0], u[1] - u[0], u[2] - u[1], 1.0 - u[2]]
}

/// Uniform point in a tetrahedron.
pub fn random_point_in<R: Rng>(t: &Tetrahedron, rng: &mut R) -> Point3 {
    t.point_at(&random_barycentric(rng))
}
