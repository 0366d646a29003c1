//! Triangle meshes with per-vertex feature channels.

mod geometry;
mod io;
pub mod shapes;
pub(crate) mod topology;

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub use geometry::{
    barycentric_vertex_areas, cotangent_laplacian, dirichlet_energy, face_area, face_areas,
    face_normal, inflate_surface, mean_curvature, mixed_voronoi_areas, project_to_sphere,
    uniform_neighbors, vertex_normals, Inflation, DEFAULT_INFLATION_ITERS, DEFAULT_INFLATION_STEP,
};
pub use io::{load_mesh, read_features, read_obj, save_mesh, write_features, write_obj};
pub use topology::{mesh_topology, TopologyReport};

pub type Vec3 = Vector3<f64>;

pub const THICKNESS: &str = "thickness";
pub const CURVATURE: &str = "curvature";
pub const SULC: &str = "sulc";
/// Raster channel order.
pub const FEATURE_CHANNELS: [&str; 3] = [THICKNESS, CURVATURE, SULC];

/// Faces whose area is below this fraction of the mean face area are rejected.
const MIN_RELATIVE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    features: BTreeMap<String, Vec<f64>>,
}

impl TriMesh {
    /// Builds a mesh and validates indices, face areas and winding consistency.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            features: BTreeMap::new(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    #[cfg(test)]
    pub(crate) fn new_unchecked(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        Self {
            vertices,
            faces,
            features: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&v| v >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex {bad} but the mesh has {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} repeats a vertex: {f:?}"
                )));
            }
        }
        if let Some(i) = self
            .vertices
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidMesh(format!(
                "vertex {i} has a non-finite coordinate"
            )));
        }
        if !self.faces.is_empty() {
            let areas = face_areas(self);
            let mean = areas.iter().sum::<f64>() / areas.len() as f64;
            if let Some(fi) = areas.iter().position(|&a| !(a > MIN_RELATIVE_AREA * mean)) {
                return Err(Error::InvalidMesh(format!("face {fi} has zero area")));
            }
        }
        // An edge used by exactly two faces must be traversed once in each direction.
        let mut uses: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                let e = uses.entry((a.min(b), a.max(b))).or_insert((0, 0));
                if a < b {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
        for (&(a, b), &(fwd, back)) in &uses {
            if fwd + back == 2 && fwd != 1 {
                return Err(Error::InvalidMesh(format!(
                    "inconsistent winding across edge ({a}, {b})"
                )));
            }
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    /// Mutable vertex access. Callers are responsible for keeping faces non-degenerate.
    pub fn vertices_mut(&mut self) -> &mut [Vec3] {
        &mut self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn features(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.features
    }

    pub fn feature(&self, name: &str) -> Option<&[f64]> {
        self.features.get(name).map(Vec::as_slice)
    }

    pub fn has_feature(&self, name: &str) -> bool {
        self.features.contains_key(name)
    }

    pub fn set_feature(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.vertices.len() {
            return Err(Error::FeatureCountMismatch {
                rows: values.len(),
                vertices: self.vertices.len(),
            });
        }
        self.features.insert(name.to_string(), values);
        Ok(())
    }

    pub fn with_feature(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        self.set_feature(name, values)?;
        Ok(self)
    }

    pub fn remove_feature(&mut self, name: &str) -> Option<Vec<f64>> {
        self.features.remove(name)
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.vertices.len().max(1) as f64;
        self.vertices.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n
    }

    pub fn face_centroid(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        (self.vertices[a] + self.vertices[b] + self.vertices[c]) / 3.0
    }

    /// Same mesh with vertex positions replaced.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Self {
        assert_eq!(vertices.len(), self.vertices.len());
        Self {
            vertices,
            faces: self.faces.clone(),
            features: self.features.clone(),
        }
    }

    /// Reflection `x → −x` with face winding reversed so normals stay outward.
    pub fn mirrored_x(&self) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|p| Vec3::new(-p.x, p.y, p.z))
                .collect(),
            faces: self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect(),
            features: self.features.clone(),
        }
    }

    /// Sub-mesh made of `faces` (indices into this mesh), with unused vertices
    /// dropped. Returns the mesh and, for every new vertex, its parent index.
    pub fn submesh(&self, faces: &[usize]) -> (TriMesh, Vec<usize>) {
        let mut map = vec![usize::MAX; self.vertices.len()];
        let mut parent = Vec::new();
        let mut new_faces = Vec::with_capacity(faces.len());
        for &fi in faces {
            let mut nf = [0; 3];
            for (k, &v) in self.faces[fi].iter().enumerate() {
                if map[v] == usize::MAX {
                    map[v] = parent.len();
                    parent.push(v);
                }
                nf[k] = map[v];
            }
            new_faces.push(nf);
        }
        let vertices = parent.iter().map(|&p| self.vertices[p]).collect();
        let features = self
            .features
            .iter()
            .map(|(k, vals)| (k.clone(), parent.iter().map(|&p| vals[p]).collect()))
            .collect();
        (
            TriMesh {
                vertices,
                faces: new_faces,
                features,
            },
            parent,
        )
    }

    /// Order-sensitive SHA-256 of vertex bits and faces (features excluded).
    pub fn geometry_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        for p in &self.vertices {
            for c in p.iter() {
                h.update(c.to_bits().to_le_bytes());
            }
        }
        h.update((self.faces.len() as u64).to_le_bytes());
        for f in &self.faces {
            for &v in f {
                h.update((v as u64).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn out_of_range_index_rejected() {
        let r = TriMesh::new(vec![Vec3::zeros(); 3], vec![[0, 1, 3]]);
        assert!(matches!(r, Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn repeated_vertex_rejected() {
        let r = TriMesh::new(vec![Vec3::zeros(); 3], vec![[0, 1, 1]]);
        assert!(matches!(r, Err(Error::InvalidMesh(_))));
    }

    #[test]
    fn zero_area_face_rejected() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ];
        let r = TriMesh::new(v, vec![[0, 1, 2], [0, 1, 3]]);
        assert!(matches!(r, Err(Error::InvalidMesh(m)) if m.contains("zero area")));
    }

    #[test]
    fn inconsistent_winding_rejected() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
        ];
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 2], [1, 3, 2]]).is_ok());
        let r = TriMesh::new(v, vec![[0, 1, 2], [2, 3, 1]]);
        assert!(matches!(r, Err(Error::InvalidMesh(m)) if m.contains("winding")));
    }

    #[test]
    fn feature_length_checked() {
        let mut m = triangle();
        assert!(matches!(
            m.set_feature(THICKNESS, vec![1.0; 2]),
            Err(Error::FeatureCountMismatch {
                rows: 2,
                vertices: 3
            })
        ));
        m.set_feature(THICKNESS, vec![1.0; 3]).unwrap();
        assert!(m.has_feature(THICKNESS));
    }

    #[test]
    fn mirror_keeps_valid_winding() {
        let m = shapes::icosphere(1, 1.0);
        let mm = m.mirrored_x();
        mm.validate().unwrap();
        let n0 = face_normal(&m, 0);
        let n1 = face_normal(&mm, 0);
        assert!((n0.x + n1.x).abs() < 1e-12 && (n0.y - n1.y).abs() < 1e-12);
    }

    #[test]
    fn submesh_tracks_parents() {
        let m = shapes::icosphere(1, 1.0)
            .with_feature("id", (0..42).map(f64::from).collect())
            .unwrap();
        let (sub, parent) = m.submesh(&[3, 7]);
        assert_eq!(sub.n_faces(), 2);
        for (i, &p) in parent.iter().enumerate() {
            assert_eq!(sub.vertices()[i], m.vertices()[p]);
            assert_eq!(sub.feature("id").unwrap()[i], p as f64);
        }
    }
}
