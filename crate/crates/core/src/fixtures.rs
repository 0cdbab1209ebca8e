//! Small reference partitions used by tests, examples and the CLI.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::geometry::Point3;
use crate::partition::{Deformation, Partition, PiecewiseField, ValueSet};
use crate::Result;

/// Half-width of the reference octahedron.
pub const REFERENCE_HALF_WIDTH: f64 = 1.0;
/// Global index of the reference octahedron's centre vertex (the only interior vertex).
pub const REFERENCE_CENTER: usize = 6;
/// Potential values of the reference field.
pub const REFERENCE_VALUES: [f64; 2] = [1.0, 3.0];

/// Octahedron `|x|_1 ≤ s` coned at the origin into its eight octant tetrahedra.
pub fn reference_partition() -> Partition {
    let s = REFERENCE_HALF_WIDTH;
    let mut vertices = vec![
        Point3::new(s, 0.0, 0.0),
        Point3::new(-s, 0.0, 0.0),
        Point3::new(0.0, s, 0.0),
        Point3::new(0.0, -s, 0.0),
        Point3::new(0.0, 0.0, s),
        Point3::new(0.0, 0.0, -s),
    ];
    vertices.push(Point3::zeros());
    let mut tets = Vec::with_capacity(8);
    for sx in [0, 1] {
        for sy in [2, 3] {
            for sz in [4, 5] {
                tets.push([REFERENCE_CENTER, sx, sy, sz]);
            }
        }
    }
    Partition::new(vertices, tets, None, None).expect("reference octahedron")
}

/// Reference octahedron with checkerboard values: octants with an even number of
/// negative coordinates carry `q = 1`, the others `q = 3`.
pub fn reference_field() -> PiecewiseField {
    let p = reference_partition();
    let labels = p
        .tets()
        .iter()
        .map(|t| t[1..].iter().filter(|&&i| i % 2 == 1).count() % 2)
        .collect();
    PiecewiseField::new(p, ValueSet::new(REFERENCE_VALUES.to_vec()).unwrap(), labels).unwrap()
}

/// Fixed deformation of the reference field: the centre moves by `(0.05, 0.03, -0.02)`.
pub fn reference_direction() -> Deformation {
    Deformation::single(7, REFERENCE_CENTER, Vector3::new(0.05, 0.03, -0.02))
}

/// Global index of the two-tetrahedron fixture's edge vertex.
pub const TWO_TET_MOVABLE: usize = 4;

/// Regular tetrahedron of circumradius 1 centred at the origin, split into two
/// by the plane through edge `v0 v1` and the midpoint `m` of edge `v2 v3`.
///
/// The split vertex `m` lies on an edge of the domain and can slide along it
/// without changing the domain.
pub fn two_tet_partition() -> Partition {
    let s = 1.0 / 3f64.sqrt();
    let v = [
        Point3::new(s, s, s),
        Point3::new(s, -s, -s),
        Point3::new(-s, s, -s),
        Point3::new(-s, -s, s),
    ];
    let m = (v[2] + v[3]) * 0.5;
    Partition::new(vec![v[0], v[1], v[2], v[3], m], vec![[0, 1, 2, 4], [0, 1, 4, 3]], None, None)
        .expect("two-tetrahedron fixture")
}

/// Unit direction of the edge carrying the split vertex.
pub fn two_tet_direction() -> Vector3<f64> {
    let p = two_tet_partition();
    (p.vertices()[3] - p.vertices()[2]).normalize()
}

pub fn two_tet_field() -> PiecewiseField {
    PiecewiseField::new(two_tet_partition(), ValueSet::new(vec![1.0, 2.0]).unwrap(), vec![0, 1]).unwrap()
}

/// Octahedron `|x|_1 ≤ 1` split into four tetrahedra around the `z` axis.
pub fn four_tet_partition() -> Partition {
    let vertices = vec![
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
        Point3::new(-1.0, 0.0, 0.0),
        Point3::new(0.0, -1.0, 0.0),
        Point3::new(0.0, 0.0, 1.0),
        Point3::new(0.0, 0.0, -1.0),
    ];
    let tets = (0..4).map(|k| [4, 5, k, (k + 1) % 4]).collect();
    Partition::new(vertices, tets, None, None).expect("four-tetrahedron fixture")
}

/// Four-tetrahedron octahedron with alternating values `a, b, a, b`.
pub fn four_tet_field(a: f64, b: f64) -> PiecewiseField {
    PiecewiseField::new(four_tet_partition(), ValueSet::new(vec![a, b]).unwrap(), vec![0, 1, 0, 1]).unwrap()
}

/// Unit cube `[0,1]³` split into six tetrahedra along the main diagonal.
pub fn unit_cube_partition() -> Partition {
    let corner = |b: usize| Point3::new((b & 1) as f64, ((b >> 1) & 1) as f64, ((b >> 2) & 1) as f64);
    let vertices: Vec<Point3> = (0..8).map(corner).collect();
    let mut tets = Vec::new();
    for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let a = 1 << perm[0];
        let b = a | (1 << perm[1]);
        tets.push([0, a, b, 7]);
    }
    Partition::new(vertices, tets, None, None).expect("unit cube")
}

/// Convex polyhedron with triangular faces, centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polyhedron {
    Tetrahedron,
    TriangularBipyramid,
    Octahedron,
    PentagonalBipyramid,
    HexagonalBipyramid,
}

impl Polyhedron {
    pub const ALL: [Polyhedron; 5] = [
        Polyhedron::Tetrahedron,
        Polyhedron::TriangularBipyramid,
        Polyhedron::Octahedron,
        Polyhedron::PentagonalBipyramid,
        Polyhedron::HexagonalBipyramid,
    ];

    fn surface(self) -> (Vec<Point3>, Vec<[usize; 3]>) {
        match self {
            Polyhedron::Tetrahedron => {
                let s = 1.0 / 3f64.sqrt();
                let v = vec![
                    Point3::new(s, s, s),
                    Point3::new(s, -s, -s),
                    Point3::new(-s, s, -s),
                    Point3::new(-s, -s, s),
                ];
                (v, vec![[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
            }
            Polyhedron::Octahedron => bipyramid(4, 1.0),
            Polyhedron::TriangularBipyramid => bipyramid(3, 0.8),
            Polyhedron::PentagonalBipyramid => bipyramid(5, 1.0),
            Polyhedron::HexagonalBipyramid => bipyramid(6, 1.2),
        }
    }
}

fn bipyramid(n: usize, height: f64) -> (Vec<Point3>, Vec<[usize; 3]>) {
    let mut v: Vec<Point3> = (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            Point3::new(a.cos(), a.sin(), 0.0)
        })
        .collect();
    v.push(Point3::new(0.0, 0.0, height));
    v.push(Point3::new(0.0, 0.0, -height));
    let mut faces = Vec::new();
    for k in 0..n {
        faces.push([k, (k + 1) % n, n]);
        faces.push([(k + 1) % n, k, n + 1]);
    }
    (v, faces)
}

/// Polyhedron coned at `apex` into one tetrahedron per face, with a greedy
/// colouring of the face graph from `values` so adjacent tetrahedra differ.
pub fn coned_field(shape: Polyhedron, apex: Point3, values: &[f64]) -> Result<PiecewiseField> {
    let (mut vertices, faces) = shape.surface();
    let c = vertices.len();
    vertices.push(apex);
    let tets: Vec<[usize; 4]> = faces.iter().map(|f| [c, f[0], f[1], f[2]]).collect();
    let p = Partition::new(vertices, tets, None, None)?;
    let adjacency = p.adjacency();
    let mut labels = vec![usize::MAX; p.len()];
    for j in 0..p.len() {
        let used: Vec<usize> = adjacency
            .iter()
            .filter_map(|&(a, b)| if a == j { Some(b) } else if b == j { Some(a) } else { None })
            .map(|k| labels[k])
            .collect();
        labels[j] = (0..values.len()).find(|l| !used.contains(l)).unwrap_or(0);
    }
    PiecewiseField::new(p, ValueSet::new(values.to_vec())?, labels)
}

/// Jittered copy of `f`: the apex (last vertex) moves by a random vector of length
/// `magnitude`, and the tetrahedra are shuffled. Returns the copy and the order
/// used (new tetrahedron `i` is old `order[i]`).
pub fn jittered_shuffle<R: Rng>(
    f: &PiecewiseField,
    magnitude: f64,
    rng: &mut R,
) -> Result<(PiecewiseField, Vec<usize>, Deformation)> {
    let p = f.partition();
    let apex = p.vertices().len() - 1;
    let w = loop {
        let w = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = w.norm();
        if n > 1e-3 && n <= 1.0 {
            break w / n * magnitude;
        }
    };
    let d = Deformation::single(p.vertices().len(), apex, w);
    let moved = f.deform(&d, 1.0)?;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.shuffle(rng);
    Ok((moved.reordered(&order)?, order, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::validate;

    #[test]
    fn fixtures_are_admissible() {
        assert!(validate(&reference_field()).is_admissible());
        assert!(validate(&two_tet_field()).is_admissible());
        assert!(validate(&four_tet_field(1.0, 2.0)).is_admissible());
        for shape in Polyhedron::ALL {
            let f = coned_field(shape, Point3::new(0.02, -0.01, 0.03), &[1.0, 2.0, 3.0, 4.0]).unwrap();
            let r = validate(&f);
            assert!(r.is_admissible(), "{shape:?}: {r:?}");
        }
        let cube = unit_cube_partition();
        assert_eq!(cube.len(), 6);
        assert!((cube.volume() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fixtures_are_star_shaped() {
        assert!(reference_partition().is_star_shaped_about_origin());
        assert!(two_tet_partition().is_star_shaped_about_origin());
        assert!(four_tet_partition().is_star_shaped_about_origin());
    }

    #[test]
    fn coned_sizes_span_four_to_twelve() {
        let sizes: Vec<usize> = Polyhedron::ALL
            .iter()
            .map(|s| coned_field(*s, Point3::zeros(), &[1.0, 2.0, 3.0, 4.0]).unwrap().partition().len())
            .collect();
        assert_eq!(sizes, vec![4, 6, 8, 10, 12]);
    }
}
