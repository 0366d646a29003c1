use crate::error::{Error, Result};
use crate::mesh::topology::boundary_loops;
use crate::mesh::{TriMesh, Vec3};

use super::Vec2;

/// Dirichlet data pinning a boundary loop to the perimeter of a rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCondition {
    /// Boundary vertices in loop order.
    pub vertices: Vec<usize>,
    /// Target position of each entry of `vertices`.
    pub positions: Vec<Vec2>,
    /// Vertices pinned to (0,0), (w,0), (w,h), (0,h), in that order.
    pub corners: [usize; 4],
    pub width: f64,
    pub height: f64,
}

impl BoundaryCondition {
    pub fn position_of(&self, vertex: usize) -> Option<Vec2> {
        self.vertices
            .iter()
            .position(|&v| v == vertex)
            .map(|i| self.positions[i])
    }
}

/// The single boundary loop in face-orientation order, starting at its lowest vertex index.
pub fn extract_boundary(open_mesh: &TriMesh) -> Result<Vec<usize>> {
    let mut loops = boundary_loops(open_mesh);
    match loops.len() {
        0 => Err(Error::NoBoundary),
        1 => {
            let mut lp = loops.pop().expect("one loop");
            let start = lp
                .iter()
                .enumerate()
                .min_by_key(|&(_, &v)| v)
                .map(|(i, _)| i)
                .expect("nonempty loop");
            lp.rotate_left(start);
            Ok(lp)
        }
        n => Err(Error::MultipleBoundaries(n)),
    }
}

/// Corners picked by direction in the `y`–`z` cut plane.
///
/// The corners are the loop vertices whose offset from the loop centroid points
/// most nearly along +y, +z, −y and −z. The side between the −z and +y corners
/// becomes the bottom edge `v = 0`, so a mirror image of the input (reflected
/// in x) produces the same map up to the flip `u → 1 − u`.
pub fn rectangle_boundary_conditions(
    loop_vertices: &[usize],
    positions: &[Vec3],
) -> Result<BoundaryCondition> {
    rectangle_boundary_conditions_with_axes(loop_vertices, positions, Vec3::y(), Vec3::z())
}

/// Same rule with the in-plane directions +a, +b, −a, −b supplied by the caller;
/// the bottom edge joins the −b and +a corners.
pub fn rectangle_boundary_conditions_with_axes(
    loop_vertices: &[usize],
    positions: &[Vec3],
    a: Vec3,
    b: Vec3,
) -> Result<BoundaryCondition> {
    let n = loop_vertices.len();
    if n < 4 {
        return Err(Error::CornerCollapse(format!("loop has only {n} vertices")));
    }
    let centroid = loop_vertices
        .iter()
        .fold(Vec3::zeros(), |acc, &v| acc + positions[v])
        / n as f64;
    let (a, b) = (a.normalize(), b.normalize());
    let pick = |dir: Vec3| -> usize {
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, &v) in loop_vertices.iter().enumerate() {
            let d = positions[v] - centroid;
            let planar = Vec3::new(0.0, d.dot(&a), d.dot(&b));
            let len = planar.norm();
            let dir_planar = Vec3::new(0.0, dir.dot(&a), dir.dot(&b));
            let score = if len > 0.0 {
                planar.dot(&dir_planar) / len
            } else {
                f64::NEG_INFINITY
            };
            if score > best.0 {
                best = (score, k);
            }
        }
        best.1
    };
    // loop positions of +a, +b, −a, −b
    let picks = [pick(a), pick(b), pick(-a), pick(-b)];
    for i in 0..4 {
        for j in i + 1..4 {
            if picks[i] == picks[j] {
                return Err(Error::CornerCollapse(format!(
                    "directions {i} and {j} both select vertex {}",
                    loop_vertices[picks[i]]
                )));
            }
        }
    }
    // order of the four picks along the loop
    let mut by_loop: Vec<usize> = (0..4).collect();
    by_loop.sort_by_key(|&i| picks[i]);
    let pos_in_cycle = |dir: usize| by_loop.iter().position(|&i| i == dir).expect("present");
    let next_dir = |dir: usize| by_loop[(pos_in_cycle(dir) + 1) % 4];
    // the picks must appear as a rotation of (+a,+b,−a,−b) or of its reverse
    let forward = (0..4).all(|d| next_dir(d) == (d + 1) % 4);
    let backward = (0..4).all(|d| next_dir(d) == (d + 3) % 4);
    if !forward && !backward {
        return Err(Error::CornerCollapse(
            "corner directions are interleaved along the loop".into(),
        ));
    }
    let (plus_a, minus_b) = (0, 3);
    let start = if next_dir(minus_b) == plus_a {
        minus_b
    } else {
        plus_a
    };
    let mut corners = [0; 4];
    let mut d = start;
    for c in &mut corners {
        *c = picks[d];
        d = next_dir(d);
    }
    rectangle_boundary_from_corners(loop_vertices, positions, corners, 1.0, 1.0)
}

/// Pins the loop entries at `corner_slots` (indices into `loop_vertices`, in
/// loop order) to the rectangle corners and spaces the remaining boundary
/// vertices by normalized 3D arc length along each side.
pub fn rectangle_boundary_from_corners(
    loop_vertices: &[usize],
    positions: &[Vec3],
    corner_slots: [usize; 4],
    width: f64,
    height: f64,
) -> Result<BoundaryCondition> {
    let n = loop_vertices.len();
    if corner_slots.iter().any(|&s| s >= n) {
        return Err(Error::InvalidArgument(format!(
            "corner slot out of range for loop of {n}"
        )));
    }
    // rotate so that the first corner sits at slot 0, preserving orientation
    let shift = corner_slots[0];
    let rel: Vec<usize> = corner_slots.iter().map(|&s| (s + n - shift) % n).collect();
    if !(rel[0] < rel[1] && rel[1] < rel[2] && rel[2] < rel[3]) {
        return Err(Error::CornerCollapse(format!(
            "corners {corner_slots:?} are not distinct and in loop order"
        )));
    }
    let targets = [
        Vec2::new(0.0, 0.0),
        Vec2::new(width, 0.0),
        Vec2::new(width, height),
        Vec2::new(0.0, height),
    ];
    let mut uv = vec![Vec2::zeros(); n];
    for side in 0..4 {
        let from = rel[side];
        let to = if side == 3 { n } else { rel[side + 1] };
        let at = |k: usize| positions[loop_vertices[(k + shift) % n]];
        let mut cum = vec![0.0];
        for k in from..to {
            let last = *cum.last().expect("nonempty");
            cum.push(last + (at(k + 1) - at(k)).norm());
        }
        let total = *cum.last().expect("nonempty");
        if !(total > 0.0) {
            return Err(Error::CornerCollapse(format!(
                "side {side} has zero length"
            )));
        }
        let (p0, p1) = (targets[side], targets[(side + 1) % 4]);
        for (j, k) in (from..to).enumerate() {
            let t = cum[j] / total;
            uv[(k + shift) % n] = p0 + (p1 - p0) * t;
        }
        // corners are placed exactly
        uv[(from + shift) % n] = p0;
    }
    Ok(BoundaryCondition {
        vertices: loop_vertices.to_vec(),
        positions: uv,
        corners: corner_slots.map(|s| loop_vertices[s]),
        width,
        height,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flatten::split_sphere;
    use crate::mesh::shapes;

    #[test]
    fn triangle_loop() {
        let m = TriMesh::new(vec![Vec3::x(), Vec3::y(), Vec3::z()], vec![[2, 0, 1]]).unwrap();
        assert_eq!(extract_boundary(&m).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn closed_mesh_has_no_boundary() {
        let err = extract_boundary(&shapes::icosphere(1, 1.0)).unwrap_err();
        assert!(err.to_string().contains("no boundary"));
    }

    #[test]
    fn hemisphere_loop_is_the_cut() {
        let sp = split_sphere(&shapes::icosphere(3, 1.0)).unwrap();
        let lp = extract_boundary(&sp.pos).unwrap();
        assert_eq!(lp.len(), sp.cut_vertices().len());
        let mut parents: Vec<usize> = lp.iter().map(|&v| sp.pos_parent[v]).collect();
        parents.sort_unstable();
        assert_eq!(parents, sp.cut_vertices());
    }

    #[test]
    fn square_corners_map_to_unit_square() {
        let g = shapes::planar_grid(4, 4, 1.0, 1.0);
        let lp = extract_boundary(&g).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let bc = rectangle_boundary_conditions_with_axes(
            &lp,
            g.vertices(),
            Vec3::new(s, -s, 0.0),
            Vec3::new(s, s, 0.0),
        )
        .unwrap();
        for (k, target) in [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
            .iter()
            .enumerate()
        {
            let v = bc.corners[k];
            let p = g.vertices()[v];
            assert_eq!((p.x, p.y), *target);
            assert_eq!(bc.position_of(v).unwrap(), Vec2::new(target.0, target.1));
        }
        for (v, uv) in bc.vertices.iter().zip(&bc.positions) {
            let p = g.vertices()[*v];
            assert!((uv.x - p.x).abs() < 1e-12 && (uv.y - p.y).abs() < 1e-12);
        }
    }

    #[test]
    fn circle_spacing_is_uniform() {
        let n = 24;
        let positions: Vec<Vec3> = (0..n)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / n as f64;
                Vec3::new(0.0, t.cos(), t.sin())
            })
            .collect();
        let lp: Vec<usize> = (0..n).collect();
        let bc = rectangle_boundary_conditions(&lp, &positions).unwrap();
        let mut gaps = Vec::new();
        for k in 0..n {
            let a = bc.positions[k];
            let b = bc.positions[(k + 1) % n];
            gaps.push((b - a).norm());
        }
        for g in &gaps {
            assert!((g - gaps[0]).abs() < 1e-9, "{gaps:?}");
        }
    }

    #[test]
    fn long_edge_gets_proportional_share() {
        // five vertices, corners at slots 0..4, last side has one interior vertex
        let positions = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.25, 0.0),
        ];
        let bc =
            rectangle_boundary_from_corners(&[0, 1, 2, 3, 4], &positions, [0, 1, 2, 3], 1.0, 1.0)
                .unwrap();
        // side 3 runs (0,1) → (0,0) through a vertex 0.75 of the way along
        assert!((bc.positions[4] - Vec2::new(0.0, 0.25)).norm() < 1e-12);
        assert_eq!(bc.positions[3], Vec2::new(0.0, 1.0));
    }

    #[test]
    fn mirrored_loop_flips_horizontally() {
        let n = 20;
        let positions: Vec<Vec3> = (0..n)
            .map(|i| {
                let t = std::f64::consts::TAU * (i as f64 + 0.3) / n as f64;
                Vec3::new(0.0, t.cos(), 1.3 * t.sin())
            })
            .collect();
        let lp: Vec<usize> = (0..n).collect();
        let rev: Vec<usize> = (0..n).rev().collect();
        let bc = rectangle_boundary_conditions(&lp, &positions).unwrap();
        let bm = rectangle_boundary_conditions(&rev, &positions).unwrap();
        for v in 0..n {
            let p = bc.position_of(v).unwrap();
            let q = bm.position_of(v).unwrap();
            assert!((p.x - (1.0 - q.x)).abs() < 1e-12 && (p.y - q.y).abs() < 1e-12);
        }
    }
}
