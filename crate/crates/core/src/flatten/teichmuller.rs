use std::collections::HashMap;

use super::beltrami::{beltrami_with_frames, lbs_with_frames, FaceFrames, C64};
use super::report::{count_flipped, report_with_frames};
use super::{harmonic_map, BeltramiField, BoundaryCondition, DistortionReport, PlanarMap};
use crate::error::{Error, Result};
use crate::mesh::TriMesh;

pub const DEFAULT_TOLERANCE: f64 = 0.05;
pub const DEFAULT_MAX_ITER: usize = 50;
/// Halvings of a rejected update before the iteration gives up.
const MAX_DAMPING: usize = 5;
const ZERO_MU: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TeichmullerMap {
    pub map: PlanarMap,
    pub mu: BeltramiField,
    pub report: DistortionReport,
    pub converged: bool,
    /// Accepted updates after the harmonic initialization.
    pub iterations: usize,
    /// std(|μ|) of the initialization followed by every accepted iterate.
    pub std_history: Vec<f64>,
}

/// Neighbor faces with the factor that carries a coefficient from the
/// neighbor's frame into this face's frame.
fn transport_table(mesh: &TriMesh, frames: &FaceFrames) -> Vec<Vec<(usize, C64)>> {
    let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (f, tri) in mesh.faces().iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(f);
        }
    }
    let p = mesh.vertices();
    let mut table = vec![Vec::new(); mesh.n_faces()];
    let mut edges: Vec<_> = edge_faces
        .into_iter()
        .filter(|(_, fs)| fs.len() == 2)
        .collect();
    edges.sort_unstable();
    for ((a, b), fs) in edges {
        let e = p[b] - p[a];
        let (f, g) = (fs[0], fs[1]);
        let (ef, eg) = (frames.to_local(f, &e), frames.to_local(g, &e));
        let r = ef / eg;
        let r = r / r.norm();
        table[f].push((g, r * r));
        table[g].push((f, (r * r).conj()));
    }
    for row in &mut table {
        row.sort_by_key(|&(g, _)| g);
    }
    table
}

/// Uniform modulus `k = mean|μ|`, arguments averaged once over face neighbors.
fn project(mu: &[C64], transport: &[Vec<(usize, C64)>]) -> Vec<C64> {
    let k = mu.iter().map(|m| m.norm()).sum::<f64>() / mu.len().max(1) as f64;
    let unit: Vec<C64> = mu
        .iter()
        .map(|m| {
            if m.norm() < ZERO_MU {
                C64::new(0.0, 0.0)
            } else {
                m / m.norm()
            }
        })
        .collect();
    (0..mu.len())
        .map(|f| {
            if mu[f].norm() < ZERO_MU {
                return C64::new(0.0, 0.0);
            }
            let s = transport[f]
                .iter()
                .fold(unit[f], |acc, &(g, t)| acc + unit[g] * t);
            let dir = if s.norm() > ZERO_MU {
                s / s.norm()
            } else {
                unit[f]
            };
            dir * k
        })
        .collect()
}

/// Quasi-conformal map of uniform distortion onto the boundary rectangle.
///
/// Starts from the harmonic map and repeats: take μ of the current map,
/// replace it by the uniform-modulus field `k·μ/|μ|` with smoothed arguments,
/// and reconstruct with the linear Beltrami solver. A candidate is accepted
/// only if it has no flipped face and does not raise std(|μ|); otherwise the
/// target is pulled halfway back towards the current μ and retried. Stops at
/// std(|μ|) ≤ `tol`, after `max_iter` attempts, or when damping is exhausted,
/// returning the best accepted map with `converged` set accordingly.
pub fn teichmuller_map(
    open_mesh: &TriMesh,
    bc: &BoundaryCondition,
    tol: f64,
    max_iter: usize,
) -> Result<TeichmullerMap> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let frames = FaceFrames::new(open_mesh)?;
    let transport = transport_table(open_mesh, &frames);
    let mut map = harmonic_map(open_mesh, bc)?;
    let flipped = count_flipped(open_mesh, &map);
    if flipped > 0 {
        return Err(Error::FlippedFaces { count: flipped });
    }
    let mut mu = beltrami_with_frames(open_mesh, &frames, &map);
    let mut std = mu.abs_std();
    let mut history = vec![std];
    let mut iterations = 0;
    let mut attempts = 0;
    'outer: while std > tol && attempts < max_iter {
        attempts += 1;
        let mut target = project(&mu.mu, &transport);
        for _ in 0..=MAX_DAMPING {
            let accepted = match lbs_with_frames(open_mesh, &frames, &target, bc) {
                Ok(candidate) if count_flipped(open_mesh, &candidate) == 0 => {
                    let cmu = beltrami_with_frames(open_mesh, &frames, &candidate);
                    let cstd = cmu.abs_std();
                    (cstd <= std).then_some((candidate, cmu, cstd))
                }
                Ok(_) => None,
                Err(Error::SingularSystem(_)) => None,
                Err(e) => return Err(e),
            };
            if let Some((candidate, cmu, cstd)) = accepted {
                map = candidate;
                mu = cmu;
                std = cstd;
                history.push(std);
                iterations += 1;
                continue 'outer;
            }
            for (t, m) in target.iter_mut().zip(&mu.mu) {
                *t = (*t + m) * 0.5;
            }
        }
        break;
    }
    let report = report_with_frames(open_mesh, &frames, &map);
    Ok(TeichmullerMap {
        map,
        mu,
        report,
        converged: std <= tol,
        iterations,
        std_history: history,
    })
}
