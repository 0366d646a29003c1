use std::collections::HashMap;

use super::TriMesh;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopologyReport {
    pub euler_characteristic: i64,
    pub n_boundary_loops: usize,
    pub is_closed: bool,
    pub n_components: usize,
    /// Only defined for closed surfaces.
    pub genus: Option<i64>,
}

impl TopologyReport {
    pub fn is_closed_genus0(&self) -> bool {
        self.is_closed && self.n_components == 1 && self.euler_characteristic == 2
    }

    pub fn is_disk(&self) -> bool {
        self.n_components == 1 && self.n_boundary_loops == 1 && self.euler_characteristic == 1
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Directed half-edges without a twin, keyed by start vertex.
pub(crate) fn boundary_half_edges(mesh: &TriMesh) -> Vec<(usize, usize)> {
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for f in mesh.faces() {
        for k in 0..3 {
            *directed.entry((f[k], f[(k + 1) % 3])).or_insert(0) += 1;
        }
    }
    let mut out: Vec<(usize, usize)> = directed
        .keys()
        .filter(|&&(a, b)| !directed.contains_key(&(b, a)))
        .copied()
        .collect();
    out.sort_unstable();
    out
}

/// Boundary loops as vertex sequences in face-orientation order.
pub(crate) fn boundary_loops(mesh: &TriMesh) -> Vec<Vec<usize>> {
    let edges = boundary_half_edges(mesh);
    let mut outgoing: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(a, b) in &edges {
        outgoing.entry(a).or_default().push(b);
    }
    let mut used: HashMap<(usize, usize), bool> = edges.iter().map(|&e| (e, false)).collect();
    let mut loops = Vec::new();
    for &(a, b) in &edges {
        if used[&(a, b)] {
            continue;
        }
        let mut lp = vec![a];
        used.insert((a, b), true);
        let mut cur = b;
        while cur != a {
            lp.push(cur);
            let next = outgoing[&cur]
                .iter()
                .copied()
                .find(|&n| !used[&(cur, n)])
                .expect("boundary half-edges form closed chains");
            used.insert((cur, next), true);
            cur = next;
        }
        loops.push(lp);
    }
    loops
}

pub fn mesh_topology(mesh: &TriMesh) -> Result<TopologyReport> {
    let mut edge_faces: HashMap<(usize, usize), usize> = HashMap::new();
    for f in mesh.faces() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *edge_faces.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    if let Some((&(a, b), _)) = edge_faces
        .iter()
        .filter(|(_, &c)| c > 2)
        .min_by_key(|(e, _)| **e)
    {
        return Err(Error::NonManifoldEdge(a, b));
    }
    let n_boundary_loops = boundary_loops(mesh).len();
    let mut uf = UnionFind((0..mesh.n_vertices()).collect());
    for f in mesh.faces() {
        uf.union(f[0], f[1]);
        uf.union(f[1], f[2]);
    }
    let n_components = (0..mesh.n_vertices()).filter(|&v| uf.find(v) == v).count();
    let chi = mesh.n_vertices() as i64 - edge_faces.len() as i64 + mesh.n_faces() as i64;
    let is_closed = n_boundary_loops == 0;
    Ok(TopologyReport {
        euler_characteristic: chi,
        n_boundary_loops,
        is_closed,
        n_components,
        genus: is_closed.then(|| (2 * n_components as i64 - chi) / 2),
    })
}
