use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{FeatureImage, PartitionSet};
use crate::error::{Error, Result};
use crate::flatten::{flatten_half, split_sphere, PlanarMap, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use crate::mesh::{TriMesh, FEATURE_CHANNELS};

/// Points this far outside a triangle (in barycentric units) still count as inside.
const INSIDE_EPS: f64 = 1e-12;

/// Per-pixel source triangle and barycentric weights for one planar map.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterPlan {
    h: usize,
    w: usize,
    pixels: Vec<Option<([usize; 3], [f64; 3])>>,
}

impl RasterPlan {
    /// Pixel `(i, j)` samples the map at `((j + 0.5)/W, (i + 0.5)/H)`; on shared
    /// edges the face with the lowest index wins.
    pub fn new(map: &PlanarMap, mesh: &TriMesh, h: usize, w: usize) -> Result<Self> {
        if mesh.n_faces() == 0 {
            return Err(Error::InvalidArgument(
                "cannot rasterize a mesh with zero faces".into(),
            ));
        }
        if map.uv.len() != mesh.n_vertices() {
            return Err(Error::InvalidArgument(format!(
                "map has {} vertices, mesh has {}",
                map.uv.len(),
                mesh.n_vertices()
            )));
        }
        let mut pixels = vec![None; h * w];
        for &tri in mesh.faces() {
            let [a, b, c] = tri.map(|v| map.uv[v]);
            let det = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
            if det == 0.0 {
                continue;
            }
            let (minx, maxx) = (a.x.min(b.x).min(c.x), a.x.max(b.x).max(c.x));
            let (miny, maxy) = (a.y.min(b.y).min(c.y), a.y.max(b.y).max(c.y));
            let j0 = ((minx * w as f64 - 0.5).ceil().max(0.0)) as usize;
            let j1 = (maxx * w as f64 - 0.5).floor().min(w as f64 - 1.0);
            let i0 = ((miny * h as f64 - 0.5).ceil().max(0.0)) as usize;
            let i1 = (maxy * h as f64 - 0.5).floor().min(h as f64 - 1.0);
            if j1 < 0.0 || i1 < 0.0 {
                continue;
            }
            for i in i0..=i1 as usize {
                let y = (i as f64 + 0.5) / h as f64;
                for j in j0..=j1 as usize {
                    let px = &mut pixels[i * w + j];
                    if px.is_some() {
                        continue;
                    }
                    let x = (j as f64 + 0.5) / w as f64;
                    let lb = ((x - a.x) * (c.y - a.y) - (y - a.y) * (c.x - a.x)) / det;
                    let lc = ((b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x)) / det;
                    let la = 1.0 - lb - lc;
                    if la >= -INSIDE_EPS && lb >= -INSIDE_EPS && lc >= -INSIDE_EPS {
                        *px = Some((tri, [la, lb, lc]));
                    }
                }
            }
        }
        Ok(Self { h, w, pixels })
    }

    /// Re-index the source vertices (e.g. from a half mesh to its sphere).
    pub fn reindexed(&self, parent: &[usize]) -> Self {
        Self {
            h: self.h,
            w: self.w,
            pixels: self
                .pixels
                .iter()
                .map(|p| p.map(|(tri, wts)| (tri.map(|v| parent[v]), wts)))
                .collect(),
        }
    }

    pub fn coverage(&self) -> f64 {
        self.pixels.iter().filter(|p| p.is_some()).count() as f64 / self.pixels.len().max(1) as f64
    }

    /// Barycentric interpolation of per-vertex channels.
    pub fn apply(&self, channels: &[&[f64]]) -> FeatureImage {
        let mut img = FeatureImage::zeros(channels.len(), self.h, self.w);
        let hw = self.h * self.w;
        for (p, px) in self.pixels.iter().enumerate() {
            if let Some((tri, wts)) = px {
                img.mask[p] = true;
                for (c, vals) in channels.iter().enumerate() {
                    img.data[c * hw + p] =
                        wts[0] * vals[tri[0]] + wts[1] * vals[tri[1]] + wts[2] * vals[tri[2]];
                }
            }
        }
        img
    }
}

fn channel_slices<'a>(mesh: &'a TriMesh, names: &[&str], side: &str) -> Result<Vec<&'a [f64]>> {
    names
        .iter()
        .map(|&name| {
            mesh.feature(name).ok_or_else(|| Error::MissingChannel {
                side: side.to_string(),
                channel: name.to_string(),
            })
        })
        .collect()
}

/// Rasterizes the named per-vertex channels of `mesh` through `map`.
pub fn rasterize_channels(
    map: &PlanarMap,
    mesh: &TriMesh,
    channels: &[&str],
    h: usize,
    w: usize,
) -> Result<FeatureImage> {
    let vals = channel_slices(mesh, channels, "mesh")?;
    Ok(RasterPlan::new(map, mesh, h, w)?.apply(&vals))
}

/// Thickness, curvature and sulcal depth in that channel order.
pub fn rasterize(map: &PlanarMap, mesh: &TriMesh, h: usize, w: usize) -> Result<FeatureImage> {
    rasterize_channels(map, mesh, &FEATURE_CHANNELS, h, w)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlattenSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for FlattenSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
            height: 224,
            width: 224,
        }
    }
}

/// Raster plans of both halves of one sphere, indexed by sphere vertex.
#[derive(Debug, Clone)]
struct SpherePlan {
    pos: RasterPlan,
    neg: RasterPlan,
}

fn plan_sphere(sphere: &TriMesh, s: &FlattenSettings) -> Result<SpherePlan> {
    let split = split_sphere(sphere)?;
    let half = |mesh: &TriMesh, parent: &[usize]| -> Result<RasterPlan> {
        let t = flatten_half(mesh, s.tol, s.max_iter)?;
        Ok(RasterPlan::new(&t.map, mesh, s.height, s.width)?.reindexed(parent))
    };
    Ok(SpherePlan {
        pos: half(&split.pos, &split.pos_parent)?,
        neg: half(&split.neg, &split.neg_parent)?,
    })
}

type CacheKey = ([u8; 32], u64, usize, usize, usize);

/// Memoizes flattening by sphere geometry so that meshes sharing a template
/// sphere (with different features) are split and flattened once.
#[derive(Debug, Default)]
pub struct PartitionCache {
    plans: Mutex<HashMap<CacheKey, Arc<SpherePlan>>>,
}

impl PartitionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.plans.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn plan(&self, sphere: &TriMesh, s: &FlattenSettings) -> Result<Arc<SpherePlan>> {
        let key = (
            sphere.geometry_hash(),
            s.tol.to_bits(),
            s.max_iter,
            s.height,
            s.width,
        );
        if let Some(p) = self.plans.lock().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let plan = Arc::new(plan_sphere(sphere, s)?);
        self.plans
            .lock()
            .expect("cache lock")
            .insert(key, plan.clone());
        Ok(plan)
    }

    /// See [`build_partitions`].
    pub fn build(
        &self,
        left_sphere: &TriMesh,
        right_sphere: &TriMesh,
        s: &FlattenSettings,
    ) -> Result<PartitionSet> {
        let left_vals = channel_slices(left_sphere, &FEATURE_CHANNELS, "left")?;
        let right_vals = channel_slices(right_sphere, &FEATURE_CHANNELS, "right")?;
        let lp = self.plan(left_sphere, s)?;
        let rp = self.plan(right_sphere, s)?;
        // lateral faces away from the midline: x < 0 on the left, x > 0 on the right
        PartitionSet::new([
            lp.neg.apply(&left_vals),
            lp.pos.apply(&left_vals),
            rp.pos.apply(&right_vals),
            rp.neg.apply(&right_vals),
        ])
    }
}

/// Splits both spheres at `x = 0`, flattens the four halves and rasterizes
/// their features into left-lateral, left-medial, right-lateral, right-medial.
pub fn build_partitions(
    left_sphere: &TriMesh,
    right_sphere: &TriMesh,
    s: &FlattenSettings,
) -> Result<PartitionSet> {
    PartitionCache::new().build(left_sphere, right_sphere, s)
}
