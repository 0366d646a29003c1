//! Reference meshes used by tests and by the synthetic cohort.

use std::collections::HashMap;

use nalgebra::Rotation3;

use super::{TriMesh, Vec3};

/// Regular tetrahedron-like mesh with outward winding.
pub fn tetrahedron() -> TriMesh {
    TriMesh::new(
        vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
        vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
    )
    .expect("valid tetrahedron")
}

/// Subdivided icosahedron projected onto a sphere of `radius`.
///
/// `level` subdivisions give `10·4^level + 2` vertices. The base icosahedron is
/// tilted by a fixed rotation so that no face centroid lies on the `x = 0` plane
/// at any level, which keeps hemisphere splits unambiguous.
pub fn icosphere(level: u32, radius: f64) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let base = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ];
    let tilt = Rotation3::from_euler_angles(0.13, 0.29, 0.07);
    let mut vertices: Vec<Vec3> = base
        .iter()
        .map(|&(x, y, z)| tilt * Vec3::new(x, y, z).normalize())
        .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    for v in &mut vertices {
        *v *= radius;
    }
    TriMesh::new(vertices, faces).expect("icosphere is valid")
}

/// `nx × ny` cells on `[0, width] × [0, height]` in the `z = 0` plane, each
/// split along its lower-left to upper-right diagonal, counter-clockwise seen from +z.
pub fn planar_grid(nx: usize, ny: usize, width: f64, height: f64) -> TriMesh {
    assert!(nx >= 1 && ny >= 1);
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push(Vec3::new(
                width * i as f64 / nx as f64,
                height * j as f64 / ny as f64,
                0.0,
            ));
        }
    }
    let mut faces = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriMesh::new(vertices, faces).expect("grid is valid")
}

/// Open cylinder around the z axis with outward-facing winding.
pub fn cylinder(radius: f64, height: f64, n_around: usize, n_along: usize) -> TriMesh {
    assert!(n_around >= 3 && n_along >= 1);
    let idx = |i: usize, j: usize| j * n_around + i % n_around;
    let mut vertices = Vec::with_capacity(n_around * (n_along + 1));
    for j in 0..=n_along {
        let z = height * j as f64 / n_along as f64 - height / 2.0;
        for i in 0..n_around {
            let th = std::f64::consts::TAU * i as f64 / n_around as f64;
            vertices.push(Vec3::new(radius * th.cos(), radius * th.sin(), z));
        }
    }
    let mut faces = Vec::with_capacity(2 * n_around * n_along);
    for j in 0..n_along {
        for i in 0..n_around {
            faces.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            faces.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriMesh::new(vertices, faces).expect("cylinder is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{face_normal, mesh_topology};

    #[test]
    fn icosphere_counts() {
        for level in 0..4 {
            let m = icosphere(level, 1.0);
            assert_eq!(m.n_vertices(), 10 * 4usize.pow(level) + 2);
            assert_eq!(m.n_faces(), 20 * 4usize.pow(level));
            assert!(mesh_topology(&m).unwrap().is_closed_genus0());
        }
    }

    #[test]
    fn icosphere_faces_point_outward() {
        let m = icosphere(2, 1.0);
        for f in 0..m.n_faces() {
            assert!(face_normal(&m, f).dot(&m.face_centroid(f)) > 0.0);
        }
    }

    #[test]
    fn no_centroid_on_cut_plane() {
        for level in 0..=5 {
            let m = icosphere(level, 1.0);
            let closest = (0..m.n_faces())
                .map(|f| m.face_centroid(f).x.abs())
                .fold(f64::MAX, f64::min);
            assert!(closest > 1e-6, "level {level}: {closest}");
        }
    }

    #[test]
    fn cylinder_is_an_annulus() {
        let t = mesh_topology(&cylinder(1.0, 2.0, 12, 3)).unwrap();
        assert_eq!((t.euler_characteristic, t.n_boundary_loops), (0, 2));
    }
}
