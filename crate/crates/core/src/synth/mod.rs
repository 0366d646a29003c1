//! Deterministic synthetic cohort: folded spheres whose bump layout is the
//! subject's identity, with repeated noisy "scans" per subject.

mod dataset;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{
    load_cohort, load_subject_meshes, read_manifest, write_cohort, CohortFiles, ManifestRow,
    SubjectMeshes, MANIFEST_HEADER,
};

use crate::error::{Error, Result};
use crate::mesh::{
    inflate_surface, mean_curvature, shapes, TriMesh, Vec3, CURVATURE, DEFAULT_INFLATION_ITERS,
    DEFAULT_INFLATION_STEP, SULC, THICKNESS,
};
use crate::raster::{FlattenSettings, PartitionCache, PartitionSet};
use crate::seed::{derive_seed, rng_for};
use crate::train::RasterCohort;

/// Ranges from which each subject's folding bumps are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentityPolicy {
    pub n_bumps: usize,
    /// Radial bump height range, as a fraction of the sphere radius; signs are random.
    pub amplitude: (f64, f64),
    /// Gaussian bump width range (chord length on the unit sphere).
    pub width: (f64, f64),
}

impl Default for IdentityPolicy {
    fn default() -> Self {
        Self {
            n_bumps: 24,
            amplitude: (0.04, 0.1),
            width: (0.15, 0.3),
        }
    }
}

/// Everything that fixes one subject's base surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub seed: u64,
    pub n_bumps: usize,
    pub amplitude: (f64, f64),
    pub width: (f64, f64),
    pub thickness_seed: u64,
    /// Restricts bump centers to the cap of this angular radius (radians)
    /// around the given direction, on both hemispheres.
    pub cap: Option<([f64; 3], f64)>,
}

impl IdentitySpec {
    pub fn new(policy: &IdentityPolicy, seed: u64, thickness_seed: u64) -> Self {
        Self {
            seed,
            n_bumps: policy.n_bumps,
            amplitude: policy.amplitude,
            width: policy.width,
            thickness_seed,
            cap: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let (a0, a1) = self.amplitude;
        let (w0, w1) = self.width;
        if !(a0 >= 0.0 && a1 >= a0 && a1 < 0.5 && w0 > 0.0 && w1 >= w0 && w1.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "identity ranges need 0 ≤ amplitude < 0.5 and width > 0: {:?} {:?}",
                self.amplitude, self.width
            )));
        }
        Ok(())
    }
}

/// Acquisition differences between scans of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSpec {
    /// Radial vertex jitter std as a fraction of the subject's mean bump amplitude.
    pub noise_amplitude: f64,
    /// Uniform radial growth factor.
    pub development_scale: f64,
    /// Additive feature noise std as a fraction of each channel's std.
    pub feature_noise: f64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self {
            noise_amplitude: 0.1,
            development_scale: 1.0,
            feature_noise: 0.05,
        }
    }
}

impl ScanSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_amplitude >= 0.0
            && self.feature_noise >= 0.0
            && self.development_scale > 0.0)
            || !self.development_scale.is_finite()
        {
            return Err(Error::InvalidArgument(format!(
                "invalid scan spec {self:?}"
            )));
        }
        Ok(())
    }
}

/// Unit icosphere of the left hemisphere and its mirror image for the right.
/// Every scan is rasterized on these spheres, so flattening happens once.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub left: TriMesh,
    pub right: TriMesh,
}

impl Template {
    pub fn new(level: u32) -> Self {
        let left = shapes::icosphere(level, 1.0);
        let right = left.mirrored_x();
        Self { left, right }
    }

    /// Template spheres carrying the features of `scan`.
    pub fn spheres(&self, scan: &Scan) -> Result<(TriMesh, TriMesh)> {
        let attach = |sphere: &TriMesh, folded: &TriMesh| -> Result<TriMesh> {
            if folded.n_vertices() != sphere.n_vertices() {
                return Err(Error::InvalidArgument(
                    "scan was generated on a different template".into(),
                ));
            }
            let mut out = sphere.clone();
            for (name, vals) in folded.features() {
                out.set_feature(name, vals.clone())?;
            }
            Ok(out)
        };
        Ok((
            attach(&self.left, &scan.left)?,
            attach(&self.right, &scan.right)?,
        ))
    }

    pub fn partitions(
        &self,
        scan: &Scan,
        flatten: &FlattenSettings,
        cache: &PartitionCache,
    ) -> Result<PartitionSet> {
        let (l, r) = self.spheres(scan)?;
        cache.build(&l, &r, flatten)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bump {
    center: Vec3,
    amplitude: f64,
    width: f64,
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_bumps(spec: &IdentitySpec, side: &str) -> Vec<Bump> {
    let mut rng = rng_for(spec.seed, &format!("bumps/{side}"));
    (0..spec.n_bumps)
        .map(|_| {
            let center = match spec.cap {
                None => unit_vector(&mut rng),
                Some((dir, angle)) => {
                    let axis = Vec3::from(dir).normalize();
                    let min_dot = angle.cos();
                    loop {
                        let c = unit_vector(&mut rng);
                        if c.dot(&axis) >= min_dot {
                            break c;
                        }
                    }
                }
            };
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            Bump {
                center,
                amplitude: sign * range(&mut rng, spec.amplitude),
                width: range(&mut rng, spec.width),
            }
        })
        .collect()
}

fn radial_profile(dir: &Vec3, bumps: &[Bump]) -> f64 {
    1.0 + bumps
        .iter()
        .map(|b| b.amplitude * (-(dir - b.center).norm_squared() / (2.0 * b.width * b.width)).exp())
        .sum::<f64>()
}

/// Smooth positive field from a handful of broad random blobs.
fn thickness_field(sphere: &TriMesh, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, "thickness");
    let blobs: Vec<(Vec3, f64)> = (0..6)
        .map(|_| (unit_vector(&mut rng), rng.random_range(-0.6..0.6)))
        .collect();
    sphere
        .vertices()
        .iter()
        .map(|v| {
            2.5 + blobs
                .iter()
                .map(|(c, b)| b * (-(v - c).norm_squared() / 0.32).exp())
                .sum::<f64>()
        })
        .collect()
}

/// Curvature and sulcal depth of a folded surface.
fn attach_geometry_features(mesh: TriMesh) -> Result<TriMesh> {
    let h = mean_curvature(&mesh)?;
    let depth = inflate_surface(&mesh, DEFAULT_INFLATION_ITERS, DEFAULT_INFLATION_STEP)?.depth;
    mesh.with_feature(CURVATURE, h)?.with_feature(SULC, depth)
}

/// A subject's noise-free folded hemispheres with features.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub spec: IdentitySpec,
    pub left: TriMesh,
    pub right: TriMesh,
    /// Mean absolute bump amplitude over both hemispheres.
    pub mean_amplitude: f64,
}

/// Template hemispheres displaced radially by the subject's Gaussian bumps.
/// Thickness does not depend on the bumps.
pub fn generate_individual(spec: &IdentitySpec, template: &Template) -> Result<Individual> {
    spec.validate()?;
    let fold = |sphere: &TriMesh, side: &str| -> Result<(TriMesh, f64)> {
        let bumps = draw_bumps(spec, side);
        let verts = sphere
            .vertices()
            .iter()
            .map(|v| v * radial_profile(v, &bumps))
            .collect();
        let mesh = attach_geometry_features(sphere.with_vertices(verts))?.with_feature(
            THICKNESS,
            thickness_field(sphere, derive_seed(spec.thickness_seed, side)),
        )?;
        Ok((mesh, bumps.iter().map(|b| b.amplitude.abs()).sum::<f64>()))
    };
    let (left, la) = fold(&template.left, "left")?;
    let (right, ra) = fold(&template.right, "right")?;
    let mean_amplitude = if spec.n_bumps > 0 {
        (la + ra) / (2 * spec.n_bumps) as f64
    } else {
        0.0
    };
    Ok(Individual {
        spec: spec.clone(),
        left,
        right,
        mean_amplitude,
    })
}

/// One acquisition: folded hemispheres with features.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub left: TriMesh,
    pub right: TriMesh,
}

fn channel_std(v: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Scales the subject by the development factor, jitters vertices radially,
/// recomputes curvature and depth, draws a fresh thickness field and adds
/// feature noise.
pub fn generate_scan(individual: &Individual, spec: &ScanSpec, scan_seed: u64) -> Result<Scan> {
    spec.validate()?;
    let jitter = spec.noise_amplitude * individual.mean_amplitude;
    let one = |mesh: &TriMesh, side: &str| -> Result<TriMesh> {
        let mut rng = rng_for(scan_seed, &format!("jitter/{side}"));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let verts = mesh
            .vertices()
            .iter()
            .map(|v| {
                let r = v.norm();
                let dr = if jitter > 0.0 {
                    jitter * normal.sample(&mut rng)
                } else {
                    0.0
                };
                v * (spec.development_scale * (r + dr) / r)
            })
            .collect();
        let mut out = attach_geometry_features(mesh.with_vertices(verts))?;
        let dirs: Vec<Vec3> = mesh.vertices().iter().map(|v| v.normalize()).collect();
        let unit = mesh.with_vertices(dirs);
        let thickness_seed = derive_seed(
            individual.spec.thickness_seed,
            &format!("scan{scan_seed}/{side}"),
        );
        out.set_feature(THICKNESS, thickness_field(&unit, thickness_seed))?;
        if spec.feature_noise > 0.0 {
            let mut rng = rng_for(scan_seed, &format!("feature-noise/{side}"));
            for name in [THICKNESS, CURVATURE, SULC] {
                let vals = out.feature(name).expect("attached above").to_vec();
                let s = spec.feature_noise * channel_std(&vals);
                let noisy = vals
                    .iter()
                    .map(|v| v + s * normal.sample(&mut rng))
                    .collect();
                out.set_feature(name, noisy)?;
            }
        }
        Ok(out)
    };
    Ok(Scan {
        left: one(&individual.left, "left")?,
        right: one(&individual.right, "right")?,
    })
}

/// Cohort shape and generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    /// Two-scan subjects.
    pub n_pairs: usize,
    /// Single-scan subjects.
    pub n_singles: usize,
    /// Icosphere subdivision level of the template.
    pub level: u32,
    pub identity: IdentityPolicy,
    /// Scan settings of the first and second acquisition.
    pub scans: [ScanSpec; 2],
    /// Derived from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_pairs: 30,
            n_singles: 60,
            level: 4,
            identity: IdentityPolicy::default(),
            scans: [
                ScanSpec::default(),
                ScanSpec {
                    development_scale: 1.1,
                    ..ScanSpec::default()
                },
            ],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectScans {
    pub id: String,
    pub scans: Vec<Scan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub template: Template,
    /// Two-scan subjects first, then single-scan subjects.
    pub subjects: Vec<SubjectScans>,
}

pub fn pair_id(i: usize) -> String {
    format!("pair{i:03}")
}

pub fn single_id(i: usize) -> String {
    format!("single{i:03}")
}

/// Generates every subject in parallel from per-subject seeds. Single-scan
/// subjects alternate between the two scan settings.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    if spec.n_pairs + spec.n_singles < 3 {
        return Err(Error::InvalidArgument(format!(
            "a cohort needs at least 3 subjects, got {}",
            spec.n_pairs + spec.n_singles
        )));
    }
    for s in &spec.scans {
        s.validate()?;
    }
    let template = Template::new(spec.level);
    let plan: Vec<(String, Vec<usize>)> = (0..spec.n_pairs)
        .map(|i| (pair_id(i), vec![0, 1]))
        .chain((0..spec.n_singles).map(|i| (single_id(i), vec![i % 2])))
        .collect();
    let subjects = plan
        .par_iter()
        .map(|(id, which)| {
            let ident = IdentitySpec::new(
                &spec.identity,
                derive_seed(spec.seed, &format!("identity/{id}")),
                derive_seed(spec.seed, &format!("thickness/{id}")),
            );
            let ind = generate_individual(&ident, &template)?;
            let scans = which
                .iter()
                .map(|&k| {
                    generate_scan(
                        &ind,
                        &spec.scans[k],
                        derive_seed(spec.seed, &format!("scan/{id}/{k}")),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SubjectScans {
                id: id.clone(),
                scans,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort { template, subjects })
}

impl Cohort {
    /// Partition rasters: two-scan subjects become pairs, the rest singles.
    pub fn rasterize(
        &self,
        flatten: &FlattenSettings,
        cache: &PartitionCache,
    ) -> Result<RasterCohort> {
        let sets = self
            .subjects
            .par_iter()
            .map(|s| {
                s.scans
                    .iter()
                    .map(|scan| self.template.partitions(scan, flatten, cache))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(raster_cohort(sets))
    }
}

pub(crate) fn raster_cohort(sets: Vec<Vec<PartitionSet>>) -> RasterCohort {
    let mut out = RasterCohort {
        singles: Vec::new(),
        pairs: Vec::new(),
    };
    for mut scans in sets {
        if scans.len() >= 2 {
            let b = scans.swap_remove(1);
            let a = scans.swap_remove(0);
            out.pairs.push([a, b]);
        } else if let Some(a) = scans.pop() {
            out.singles.push(a);
        }
    }
    out
}

/// Within- versus between-subject raw raster distances of the two-scan subjects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separability {
    pub mean_within: f64,
    pub mean_between: f64,
    /// Fraction of subjects whose own-scan distance is below the median distance
    /// from their first scan to the other subjects' second scans.
    pub below_median: f64,
}

fn raster_distance(a: &PartitionSet, b: &PartitionSet) -> f64 {
    a.images
        .iter()
        .zip(&b.images)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

pub fn separability(cohort: &RasterCohort) -> Result<Separability> {
    let n = cohort.pairs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "separability needs at least 2 two-scan subjects".into(),
        ));
    }
    let d: Vec<Vec<f64>> = cohort
        .pairs
        .iter()
        .map(|[a, _]| {
            cohort
                .pairs
                .iter()
                .map(|[_, b]| raster_distance(a, b))
                .collect()
        })
        .collect();
    let mean_within = (0..n).map(|i| d[i][i]).sum::<f64>() / n as f64;
    let mean_between = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d[i][j])
        .sum::<f64>()
        / (n * (n - 1)) as f64;
    let below = (0..n)
        .filter(|&i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i][j]).collect();
            others.sort_by(f64::total_cmp);
            let m = others.len();
            let median = if m % 2 == 1 {
                others[m / 2]
            } else {
                0.5 * (others[m / 2 - 1] + others[m / 2])
            };
            d[i][i] < median
        })
        .count();
    Ok(Separability {
        mean_within,
        mean_between,
        below_median: below as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::mesh_topology;

    fn spec(seed: u64) -> IdentitySpec {
        IdentitySpec::new(&IdentityPolicy::default(), seed, seed + 100)
    }

    #[test]
    fn same_spec_same_surface() {
        let t = Template::new(2);
        let a = generate_individual(&spec(1), &t).unwrap();
        assert_eq!(a, generate_individual(&spec(1), &t).unwrap());
        let b = generate_individual(&spec(2), &t).unwrap();
        let diff = a
            .left
            .vertices()
            .iter()
            .zip(b.left.vertices())
            .map(|(p, q)| (p - q).norm())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
        for m in [&a.left, &a.right] {
            assert!(mesh_topology(m).unwrap().is_closed_genus0());
        }
    }

    #[test]
    fn no_bumps_is_a_sphere() {
        let t = Template::new(3);
        let s = IdentitySpec {
            n_bumps: 0,
            ..spec(3)
        };
        let ind = generate_individual(&s, &t).unwrap();
        assert_eq!(ind.left.vertices(), t.left.vertices());
        let h = ind.left.feature(CURVATURE).unwrap();
        assert!(
            h.iter().all(|v| (v - 1.0).abs() < 0.01),
            "{:?}",
            h.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()))
        );
    }

    #[test]
    fn zero_noise_scan_is_scaled_individual() {
        let t = Template::new(2);
        let ind = generate_individual(&spec(4), &t).unwrap();
        let quiet = ScanSpec {
            noise_amplitude: 0.0,
            development_scale: 1.25,
            feature_noise: 0.0,
        };
        let scan = generate_scan(&ind, &quiet, 8).unwrap();
        for (p, q) in scan.left.vertices().iter().zip(ind.left.vertices()) {
            assert!((p - q * 1.25).norm() < 1e-12);
        }
        let (h, h0) = (
            scan.left.feature(CURVATURE).unwrap(),
            ind.left.feature(CURVATURE).unwrap(),
        );
        assert!(h.iter().zip(h0).all(|(a, b)| (a * 1.25 - b).abs() < 1e-9));
        assert_eq!(scan, generate_scan(&ind, &quiet, 8).unwrap());
        let noisy = generate_scan(&ind, &ScanSpec::default(), 8).unwrap();
        assert_eq!(noisy, generate_scan(&ind, &ScanSpec::default(), 8).unwrap());
        assert_ne!(noisy, generate_scan(&ind, &ScanSpec::default(), 9).unwrap());
    }

    #[test]
    fn thickness_is_redrawn_per_scan() {
        let t = Template::new(2);
        let ind = generate_individual(&spec(5), &t).unwrap();
        let a = generate_scan(&ind, &ScanSpec::default(), 1).unwrap();
        let b = generate_scan(&ind, &ScanSpec::default(), 2).unwrap();
        assert_ne!(a.left.feature(THICKNESS), b.left.feature(THICKNESS));
    }

    #[test]
    fn capped_bumps_stay_in_cap() {
        let s = IdentitySpec {
            cap: Some(([0.0, 0.0, 1.0], 0.5)),
            ..spec(6)
        };
        for b in draw_bumps(&s, "left") {
            assert!(b.center.z >= 0.5f64.cos() - 1e-12);
        }
    }

    #[test]
    fn cohort_needs_three_subjects() {
        let s = CohortSpec {
            n_pairs: 1,
            n_singles: 1,
            ..CohortSpec::default()
        };
        assert!(generate_cohort(&s).is_err());
    }
}
