use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::mesh::{mesh_topology, TriMesh};

#[derive(Debug, Clone)]
pub struct SphereSplit {
    /// Half on the x > 0 side.
    pub pos: TriMesh,
    /// Half on the x ≤ 0 side.
    pub neg: TriMesh,
    /// For each vertex of `pos`, its index in the sphere.
    pub pos_parent: Vec<usize>,
    pub neg_parent: Vec<usize>,
    /// Faces moved across the cut by the cleanup pass.
    pub n_reassigned: usize,
}

impl SphereSplit {
    /// Sphere vertices present in both halves.
    pub fn cut_vertices(&self) -> Vec<usize> {
        let pos: HashSet<usize> = self.pos_parent.iter().copied().collect();
        let mut cut: Vec<usize> = self
            .neg_parent
            .iter()
            .copied()
            .filter(|v| pos.contains(v))
            .collect();
        cut.sort_unstable();
        cut
    }
}

fn cut_flags(mesh: &TriMesh, side: &[bool]) -> Vec<bool> {
    let mut seen = vec![(false, false); mesh.n_vertices()];
    for (f, tri) in mesh.faces().iter().enumerate() {
        for &v in tri {
            if side[f] {
                seen[v].0 = true;
            } else {
                seen[v].1 = true;
            }
        }
    }
    seen.into_iter().map(|(a, b)| a && b).collect()
}

/// Splits a closed sphere into the `x > 0` and `x ≤ 0` halves by face centroid.
///
/// Vertices on the cut are duplicated into both halves. Faces whose three
/// vertices all lie on the cut (ears and chords of the cut curve) would become
/// collinear on a rectangle side, so they are moved to the other half until
/// none remain.
pub fn split_sphere(sphere: &TriMesh) -> Result<SphereSplit> {
    let mut side: Vec<bool> = (0..sphere.n_faces())
        .map(|f| sphere.face_centroid(f).x > 0.0)
        .collect();
    let mut moved = vec![false; sphere.n_faces()];
    let mut n_reassigned = 0;
    loop {
        if !side.iter().any(|&s| s) {
            break;
        }
        let cut = cut_flags(sphere, &side);
        let moves: Vec<usize> = sphere
            .faces()
            .iter()
            .enumerate()
            .filter(|&(f, tri)| !moved[f] && tri.iter().all(|&v| cut[v]))
            .map(|(f, _)| f)
            .collect();
        let Some(&f) = moves.first() else {
            break;
        };
        // one face per sweep: moving both faces of a chord at once would just swap them
        side[f] = !side[f];
        moved[f] = true;
        n_reassigned += 1;
    }
    let pos_faces: Vec<usize> = (0..side.len()).filter(|&f| side[f]).collect();
    let neg_faces: Vec<usize> = (0..side.len()).filter(|&f| !side[f]).collect();
    if pos_faces.is_empty() {
        return Err(Error::EmptyHemisphere { side: ">" });
    }
    if neg_faces.is_empty() {
        return Err(Error::EmptyHemisphere { side: "<=" });
    }
    let (pos, pos_parent) = sphere.submesh(&pos_faces);
    let (neg, neg_parent) = sphere.submesh(&neg_faces);
    for (name, half) in [("x > 0", &pos), ("x <= 0", &neg)] {
        let t = mesh_topology(half)?;
        if !t.is_disk() {
            return Err(Error::NotADisk(format!(
                "{name} half has χ = {}, {} boundary loops, {} components",
                t.euler_characteristic, t.n_boundary_loops, t.n_components
            )));
        }
    }
    Ok(SphereSplit {
        pos,
        neg,
        pos_parent,
        neg_parent,
        n_reassigned,
    })
}
