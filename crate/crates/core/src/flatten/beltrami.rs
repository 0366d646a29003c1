use nalgebra::Complex;

use super::{BoundaryCondition, PlanarMap, Vec2};
use crate::error::{Error, Result};
use crate::mesh::{cotangent_laplacian, TriMesh, Vec3};
use crate::sparse::{solve_dirichlet, CsrMatrix};

/// Below this norm the projected x axis is too short to orient a face frame.
const FRAME_AXIS_MIN: f64 = 0.3;
/// Faces with smaller source area (relative to the mean) are degenerate.
const DEGENERATE_AREA: f64 = 1e-12;

pub type C64 = Complex<f64>;

/// Per-face complex dilatation of a piecewise-linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct BeltramiField {
    pub mu: Vec<C64>,
    /// Mean |μ| over faces.
    pub k: f64,
}

impl BeltramiField {
    pub fn new(mu: Vec<C64>) -> Self {
        let k = if mu.is_empty() {
            0.0
        } else {
            mu.iter().map(|m| m.norm()).sum::<f64>() / mu.len() as f64
        };
        Self { mu, k }
    }

    pub fn abs_std(&self) -> f64 {
        if self.mu.is_empty() {
            return 0.0;
        }
        let var = self
            .mu
            .iter()
            .map(|m| (m.norm() - self.k).powi(2))
            .sum::<f64>()
            / self.mu.len() as f64;
        var.sqrt()
    }

    pub fn abs_max(&self) -> f64 {
        self.mu.iter().map(|m| m.norm()).fold(0.0, f64::max)
    }
}

/// Isometric 2D layout of every source triangle in a face-local frame.
///
/// The frame's first axis is the global x axis projected onto the face plane
/// (the y axis when x is nearly normal to the face) and the second completes a
/// right-handed frame with the face normal. Planar meshes in the xy plane thus
/// get the global frame on every face.
#[derive(Debug, Clone)]
pub struct FaceFrames {
    pub(crate) e1: Vec<Vec3>,
    pub(crate) e2: Vec<Vec3>,
    /// Hat-function gradients of the three corners, in the local frame.
    pub(crate) grads: Vec<[Vec2; 3]>,
    pub(crate) areas: Vec<f64>,
}

impl FaceFrames {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        let p = mesh.vertices();
        let nf = mesh.n_faces();
        let mut e1s = Vec::with_capacity(nf);
        let mut e2s = Vec::with_capacity(nf);
        let mut grads = Vec::with_capacity(nf);
        let mut areas = Vec::with_capacity(nf);
        for &[a, b, c] in mesh.faces() {
            let cross = (p[b] - p[a]).cross(&(p[c] - p[a]));
            let area = 0.5 * cross.norm();
            let n = if area > 0.0 {
                cross / (2.0 * area)
            } else {
                Vec3::z()
            };
            let mut e1 = Vec3::x() - n * n.x;
            if e1.norm() < FRAME_AXIS_MIN {
                e1 = Vec3::y() - n * n.y;
            }
            let e1 = e1.normalize();
            let e2 = n.cross(&e1);
            let local = |v: usize| {
                let d = p[v] - p[a];
                Vec2::new(d.dot(&e1), d.dot(&e2))
            };
            let q = [local(a), local(b), local(c)];
            let mut g = [Vec2::zeros(); 3];
            for i in 0..3 {
                let e = q[(i + 2) % 3] - q[(i + 1) % 3];
                g[i] = Vec2::new(-e.y, e.x) / (2.0 * area);
            }
            e1s.push(e1);
            e2s.push(e2);
            grads.push(g);
            areas.push(area);
        }
        let mean = areas.iter().sum::<f64>() / nf.max(1) as f64;
        if let Some(f) = areas.iter().position(|&a| !(a > DEGENERATE_AREA * mean)) {
            return Err(Error::DegenerateTriangle(f));
        }
        Ok(Self {
            e1: e1s,
            e2: e2s,
            grads,
            areas,
        })
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    /// Express a 3D vector lying in face `f` as a complex number in its frame.
    pub fn to_local(&self, f: usize, v: &Vec3) -> C64 {
        C64::new(v.dot(&self.e1[f]), v.dot(&self.e2[f]))
    }
}

fn check_map(mesh: &TriMesh, map: &PlanarMap) -> Result<()> {
    if map.uv.len() != mesh.n_vertices() {
        return Err(Error::InvalidArgument(format!(
            "map has {} vertices, mesh has {}",
            map.uv.len(),
            mesh.n_vertices()
        )));
    }
    Ok(())
}

/// `(f_z, f_z̄)` of the piecewise-linear map on face `f`.
pub(crate) fn wirtinger(
    mesh: &TriMesh,
    frames: &FaceFrames,
    map: &PlanarMap,
    f: usize,
) -> (C64, C64) {
    let tri = mesh.faces()[f];
    let g = &frames.grads[f];
    let mut fx = C64::new(0.0, 0.0);
    let mut fy = C64::new(0.0, 0.0);
    for i in 0..3 {
        let w = C64::new(map.uv[tri[i]].x, map.uv[tri[i]].y);
        fx += w * g[i].x;
        fy += w * g[i].y;
    }
    let i = C64::new(0.0, 1.0);
    ((fx - i * fy) * 0.5, (fx + i * fy) * 0.5)
}

pub(crate) fn beltrami_with_frames(
    mesh: &TriMesh,
    frames: &FaceFrames,
    map: &PlanarMap,
) -> BeltramiField {
    let mu = (0..mesh.n_faces())
        .map(|f| {
            let (fz, fzb) = wirtinger(mesh, frames, map, f);
            if fz.norm() > 0.0 {
                fzb / fz
            } else if fzb.norm() > 0.0 {
                C64::new(f64::INFINITY, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    BeltramiField::new(mu)
}

/// `μ = f_z̄ / f_z` of the map on every face, in the face-local frames.
pub fn beltrami_coefficient(open_mesh: &TriMesh, map: &PlanarMap) -> Result<BeltramiField> {
    check_map(open_mesh, map)?;
    let frames = FaceFrames::new(open_mesh)?;
    Ok(beltrami_with_frames(open_mesh, &frames, map))
}

fn fixed_columns(bc: &BoundaryCondition) -> Vec<Vec<f64>> {
    vec![
        bc.positions.iter().map(|p| p.x).collect(),
        bc.positions.iter().map(|p| p.y).collect(),
    ]
}

fn to_map(cols: Vec<Vec<f64>>) -> PlanarMap {
    PlanarMap {
        uv: cols[0]
            .iter()
            .zip(&cols[1])
            .map(|(&u, &v)| Vec2::new(u, v))
            .collect(),
    }
}

fn check_bc(mesh: &TriMesh, bc: &BoundaryCondition) -> Result<()> {
    if let Some(&v) = bc.vertices.iter().find(|&&v| v >= mesh.n_vertices()) {
        return Err(Error::InvalidArgument(format!(
            "boundary vertex {v} out of range"
        )));
    }
    Ok(())
}

/// Cotangent-Laplacian Dirichlet solve for `u` and `v`.
pub fn harmonic_map(open_mesh: &TriMesh, bc: &BoundaryCondition) -> Result<PlanarMap> {
    check_bc(open_mesh, bc)?;
    let l = cotangent_laplacian(open_mesh);
    Ok(to_map(solve_dirichlet(
        &l,
        &bc.vertices,
        &fixed_columns(bc),
    )?))
}

pub(crate) fn lbs_with_frames(
    mesh: &TriMesh,
    frames: &FaceFrames,
    mu: &[C64],
    bc: &BoundaryCondition,
) -> Result<PlanarMap> {
    check_bc(mesh, bc)?;
    if mu.len() != mesh.n_faces() {
        return Err(Error::InvalidArgument(format!(
            "{} Beltrami coefficients for {} faces",
            mu.len(),
            mesh.n_faces()
        )));
    }
    let mut trip = Vec::with_capacity(mesh.n_faces() * 9);
    for (f, tri) in mesh.faces().iter().enumerate() {
        let m = mu[f];
        let m2 = m.norm_sqr();
        if !(m2 < 1.0) {
            return Err(Error::BeltramiOutOfRange {
                face: f,
                modulus: m.norm(),
            });
        }
        let (rho, tau) = (m.re, m.im);
        let d = 1.0 - m2;
        let a1 = ((rho - 1.0).powi(2) + tau * tau) / d;
        let a2 = -2.0 * tau / d;
        let a3 = ((1.0 + rho).powi(2) + tau * tau) / d;
        let g = &frames.grads[f];
        let area = frames.areas[f];
        for j in 0..3 {
            let ag = Vec2::new(a1 * g[j].x + a2 * g[j].y, a2 * g[j].x + a3 * g[j].y);
            for k in 0..3 {
                trip.push((tri[k], tri[j], area * g[k].dot(&ag)));
            }
        }
    }
    let n = mesh.n_vertices();
    let kmat = CsrMatrix::from_triplets(n, n, &trip);
    Ok(to_map(solve_dirichlet(
        &kmat,
        &bc.vertices,
        &fixed_columns(bc),
    )?))
}

/// Reconstructs the map with Beltrami coefficient `mu` and boundary values `bc`
/// by solving `div(A∇u) = div(A∇v) = 0`, where `A` is the symmetric
/// positive definite coefficient matrix induced by μ on each face.
pub fn linear_beltrami_solver(
    open_mesh: &TriMesh,
    mu: &BeltramiField,
    bc: &BoundaryCondition,
) -> Result<PlanarMap> {
    let frames = FaceFrames::new(open_mesh)?;
    lbs_with_frames(open_mesh, &frames, &mu.mu, bc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flatten::{extract_boundary, rectangle_boundary_from_corners};
    use crate::mesh::shapes;

    fn grid_map(g: &TriMesh, f: impl Fn(C64) -> C64) -> PlanarMap {
        PlanarMap {
            uv: g
                .vertices()
                .iter()
                .map(|p| {
                    let w = f(C64::new(p.x, p.y));
                    Vec2::new(w.re, w.im)
                })
                .collect(),
        }
    }

    fn identity_map(g: &TriMesh) -> PlanarMap {
        grid_map(g, |z| z)
    }

    fn boundary_of(g: &TriMesh, map: &PlanarMap) -> BoundaryCondition {
        let lp = extract_boundary(g).unwrap();
        let mut bc =
            rectangle_boundary_from_corners(&lp, g.vertices(), [0, 1, 2, 3], 1.0, 1.0).unwrap();
        bc.positions = lp.iter().map(|&v| map.uv[v]).collect();
        bc
    }

    #[test]
    fn identity_is_conformal() {
        let g = shapes::planar_grid(5, 4, 1.0, 1.0);
        let mu = beltrami_coefficient(&g, &identity_map(&g)).unwrap();
        assert!(mu.mu.iter().all(|m| m.norm() < 1e-12));
    }

    #[test]
    fn affine_map_has_constant_mu() {
        let g = shapes::planar_grid(5, 4, 1.0, 1.0);
        let map = grid_map(&g, |z| z + z.conj() * 0.5);
        let mu = beltrami_coefficient(&g, &map).unwrap();
        assert!(mu
            .mu
            .iter()
            .all(|m| (m - C64::new(0.5, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn scaling_is_conformal() {
        let g = shapes::planar_grid(3, 3, 1.0, 1.0);
        let mu = beltrami_coefficient(&g, &grid_map(&g, |z| z * 2.0)).unwrap();
        assert!(mu.mu.iter().all(|m| m.norm() < 1e-12));
    }

    #[test]
    fn zero_mu_reproduces_harmonic_map() {
        let s = shapes::icosphere(2, 1.0);
        let sp = crate::flatten::split_sphere(&s).unwrap();
        let lp = extract_boundary(&sp.neg).unwrap();
        let bc = crate::flatten::rectangle_boundary_conditions(&lp, sp.neg.vertices()).unwrap();
        let h = harmonic_map(&sp.neg, &bc).unwrap();
        let zero = BeltramiField::new(vec![C64::new(0.0, 0.0); sp.neg.n_faces()]);
        let l = linear_beltrami_solver(&sp.neg, &zero, &bc).unwrap();
        let d =
            h.uv.iter()
                .zip(&l.uv)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
        assert!(d < 1e-9, "{d}");
    }

    #[test]
    fn out_of_range_mu_is_rejected() {
        let g = shapes::planar_grid(2, 2, 1.0, 1.0);
        let bc = boundary_of(&g, &identity_map(&g));
        let mut mu = vec![C64::new(0.0, 0.0); g.n_faces()];
        mu[3] = C64::new(0.0, 1.2);
        let err = linear_beltrami_solver(&g, &BeltramiField::new(mu), &bc).unwrap_err();
        assert!(matches!(err, Error::BeltramiOutOfRange { face: 3, .. }));
    }

    #[test]
    fn lbs_roundtrip_on_curved_map() {
        let g = shapes::planar_grid(12, 12, 1.0, 1.0);
        // smooth orientation-preserving non-affine map
        let target = grid_map(&g, |z| z + z * z * C64::new(0.1, 0.05) + z.conj() * 0.2);
        let mu = beltrami_coefficient(&g, &target).unwrap();
        let bc = boundary_of(&g, &target);
        let back = linear_beltrami_solver(&g, &mu, &bc).unwrap();
        let err = back
            .uv
            .iter()
            .zip(&target.uv)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }
}
