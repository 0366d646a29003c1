//! Discrete differential geometry on triangle meshes.

use super::topology::boundary_half_edges;
use super::{TriMesh, Vec3};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

pub const DEFAULT_INFLATION_ITERS: usize = 200;
pub const DEFAULT_INFLATION_STEP: f64 = 0.5;

const MIN_ANGLE: f64 = std::f64::consts::PI / 180.0;
const MAX_ANGLE: f64 = std::f64::consts::PI - MIN_ANGLE;

/// Unnormalized face normal (twice the area, right-hand rule).
fn face_cross(mesh: &TriMesh, f: usize) -> Vec3 {
    let [a, b, c] = mesh.faces()[f];
    let p = mesh.vertices();
    (p[b] - p[a]).cross(&(p[c] - p[a]))
}

pub fn face_normal(mesh: &TriMesh, f: usize) -> Vec3 {
    face_cross(mesh, f).normalize()
}

pub fn face_area(mesh: &TriMesh, f: usize) -> f64 {
    0.5 * face_cross(mesh, f).norm()
}

pub fn face_areas(mesh: &TriMesh) -> Vec<f64> {
    (0..mesh.n_faces()).map(|f| face_area(mesh, f)).collect()
}

/// One third of the incident face areas.
pub fn barycentric_vertex_areas(mesh: &TriMesh) -> Vec<f64> {
    let mut areas = vec![0.0; mesh.n_vertices()];
    for (f, tri) in mesh.faces().iter().enumerate() {
        let a = face_area(mesh, f) / 3.0;
        for &v in tri {
            areas[v] += a;
        }
    }
    areas
}

/// Mixed Voronoi vertex areas: circumcentric Voronoi cells on non-obtuse
/// triangles, and half/quarter splits of obtuse ones.
pub fn mixed_voronoi_areas(mesh: &TriMesh) -> Vec<f64> {
    let p = mesh.vertices();
    let mut areas = vec![0.0; mesh.n_vertices()];
    for (f, &tri) in mesh.faces().iter().enumerate() {
        let area = face_area(mesh, f);
        let obtuse = (0..3).find(|&k| {
            let (i, j, l) = (tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]);
            (p[j] - p[i]).dot(&(p[l] - p[i])) < 0.0
        });
        match obtuse {
            Some(k) => {
                for (m, &v) in tri.iter().enumerate() {
                    areas[v] += if m == k { area / 2.0 } else { area / 4.0 };
                }
            }
            None => {
                for k in 0..3 {
                    let (i, j, l) = (tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]);
                    let (u, v) = (p[i] - p[l], p[j] - p[l]);
                    let w = u.dot(&v) / u.cross(&v).norm() * (p[i] - p[j]).norm_squared() / 8.0;
                    areas[i] += w;
                    areas[j] += w;
                }
            }
        }
    }
    areas
}

/// Area-weighted unit vertex normals.
pub fn vertex_normals(mesh: &TriMesh) -> Vec<Vec3> {
    let mut n = vec![Vec3::zeros(); mesh.n_vertices()];
    for (f, tri) in mesh.faces().iter().enumerate() {
        let c = face_cross(mesh, f);
        for &v in tri {
            n[v] += c;
        }
    }
    for v in &mut n {
        let len = v.norm();
        if len > 0.0 {
            *v /= len;
        }
    }
    n
}

fn cot_clamped(u: &Vec3, v: &Vec3) -> f64 {
    let angle = u
        .cross(v)
        .norm()
        .atan2(u.dot(v))
        .clamp(MIN_ANGLE, MAX_ANGLE);
    1.0 / angle.tan()
}

/// Positive semi-definite cotangent Laplacian: `L_ij = −(cot α + cot β)/2`,
/// `L_ii = −Σ_j L_ij`. Angles are clamped to [1°, 179°].
pub fn cotangent_laplacian(mesh: &TriMesh) -> CsrMatrix {
    let p = mesh.vertices();
    let mut trip = Vec::with_capacity(mesh.n_faces() * 12);
    for &[a, b, c] in mesh.faces() {
        for (i, j, k) in [(a, b, c), (b, c, a), (c, a, b)] {
            // angle at k is opposite edge ij
            let w = 0.5 * cot_clamped(&(p[i] - p[k]), &(p[j] - p[k]));
            trip.push((i, j, -w));
            trip.push((j, i, -w));
            trip.push((i, i, w));
            trip.push((j, j, w));
        }
    }
    let n = mesh.n_vertices();
    CsrMatrix::from_triplets(n, n, &trip)
}

fn boundary_vertex_flags(mesh: &TriMesh) -> Vec<bool> {
    let mut flags = vec![false; mesh.n_vertices()];
    for (a, b) in boundary_half_edges(mesh) {
        flags[a] = true;
        flags[b] = true;
    }
    flags
}

/// Signed mean curvature `H_i = ±‖(L x)_i‖ / (2 A_i)` with `A_i` the mixed
/// Voronoi area, positive where the surface is convex with respect to its
/// outward normal. Boundary vertices get 0.
pub fn mean_curvature(mesh: &TriMesh) -> Result<Vec<f64>> {
    let l = cotangent_laplacian(mesh);
    let areas = mixed_voronoi_areas(mesh);
    let normals = vertex_normals(mesh);
    let boundary = boundary_vertex_flags(mesh);
    let p = mesh.vertices();
    let mut h = vec![0.0; mesh.n_vertices()];
    for i in 0..mesh.n_vertices() {
        if boundary[i] {
            continue;
        }
        if !(areas[i] > 0.0) {
            return Err(Error::ZeroVertexArea(i));
        }
        let lx = l.row(i).fold(Vec3::zeros(), |acc, (j, w)| acc + w * p[j]);
        let sign = if lx.dot(&normals[i]) < 0.0 { -1.0 } else { 1.0 };
        h[i] = sign * lx.norm() / (2.0 * areas[i]);
    }
    Ok(h)
}

/// Sorted one-ring neighbor lists.
pub fn uniform_neighbors(mesh: &TriMesh) -> Vec<Vec<usize>> {
    let mut nbrs = vec![Vec::new(); mesh.n_vertices()];
    for &[a, b, c] in mesh.faces() {
        for (i, j) in [(a, b), (b, c), (c, a)] {
            nbrs[i].push(j);
            nbrs[j].push(i);
        }
    }
    for n in &mut nbrs {
        n.sort_unstable();
        n.dedup();
    }
    nbrs
}

/// Graph Dirichlet energy `Σ_edges ‖x_i − x_j‖²` of the vertex coordinates.
pub fn dirichlet_energy(mesh: &TriMesh) -> f64 {
    let p = mesh.vertices();
    uniform_neighbors(mesh)
        .iter()
        .enumerate()
        .flat_map(|(i, ns)| {
            ns.iter()
                .filter(move |&&j| j > i)
                .map(move |&j| (p[i] - p[j]).norm_squared())
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct Inflation {
    pub mesh: TriMesh,
    /// Accumulated signed normal displacement; positive where the surface moved outward.
    pub depth: Vec<f64>,
}

/// Uniform-Laplacian smoothing `x ← x + step·(mean(neighbors) − x)`.
///
/// Every iteration adds the normal component of each vertex's displacement to
/// its depth. Two shrinkage corrections keep shape-independent motion out of
/// the depth: the per-iteration mean over vertices is subtracted, and so is the
/// depth the same connectivity accumulates when its vertices are first pushed
/// radially onto a sphere (the uniform Laplacian shrinks an irregular
/// tessellation unevenly even when the surface is a perfect sphere).
pub fn inflate_surface(mesh: &TriMesh, n_iters: usize, step: f64) -> Result<Inflation> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "inflation step must lie in (0, 1), got {step}"
        )));
    }
    let nbrs = uniform_neighbors(mesh);
    let (inflated, mut depth) = smooth_with_depth(mesh, &nbrs, n_iters, step);
    if n_iters > 0 {
        let (_, baseline) = smooth_with_depth(&radial_sphere(mesh), &nbrs, n_iters, step);
        for (d, b) in depth.iter_mut().zip(baseline) {
            *d -= b;
        }
    }
    Ok(Inflation {
        mesh: inflated,
        depth,
    })
}

/// Vertices pushed along their centroid rays to the mean centroid distance.
fn radial_sphere(mesh: &TriMesh) -> TriMesh {
    let c = mesh.centroid();
    let n = mesh.n_vertices().max(1) as f64;
    let r = mesh.vertices().iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let verts = mesh
        .vertices()
        .iter()
        .map(|p| {
            let d = p - c;
            let len = d.norm();
            if len > 0.0 {
                c + d * (r / len)
            } else {
                *p
            }
        })
        .collect();
    mesh.with_vertices(verts)
}

fn smooth_with_depth(
    mesh: &TriMesh,
    nbrs: &[Vec<usize>],
    n_iters: usize,
    step: f64,
) -> (TriMesh, Vec<f64>) {
    let n = mesh.n_vertices();
    let mut current = mesh.clone();
    let mut depth = vec![0.0; n];
    let mut moved = vec![0.0; n];
    for _ in 0..n_iters {
        let normals = vertex_normals(&current);
        let p = current.vertices();
        let next: Vec<Vec3> = (0..n)
            .map(|i| {
                if nbrs[i].is_empty() {
                    return p[i];
                }
                let avg =
                    nbrs[i].iter().fold(Vec3::zeros(), |acc, &j| acc + p[j]) / nbrs[i].len() as f64;
                p[i] + step * (avg - p[i])
            })
            .collect();
        for i in 0..n {
            moved[i] = (next[i] - p[i]).dot(&normals[i]);
        }
        let mean = moved.iter().sum::<f64>() / n.max(1) as f64;
        for i in 0..n {
            depth[i] += moved[i] - mean;
        }
        current.vertices_mut().copy_from_slice(&next);
    }
    (current, depth)
}

/// Centers the mesh on its vertex centroid and normalizes every vertex to unit length.
pub fn project_to_sphere(mesh: &TriMesh) -> Result<TriMesh> {
    let c = mesh.centroid();
    let mut out = mesh.clone();
    for (i, v) in out.vertices_mut().iter_mut().enumerate() {
        let d = *v - c;
        let len = d.norm();
        if !(len > 0.0) {
            return Err(Error::InvalidMesh(format!(
                "vertex {i} coincides with the centroid"
            )));
        }
        *v = d / len;
    }
    let flipped = (0..out.n_faces())
        .filter(|&f| face_cross(&out, f).dot(&out.face_centroid(f)) <= 0.0)
        .count();
    if flipped > 0 {
        return Err(Error::FlippedOnSphere { count: flipped });
    }
    Ok(out)
}
