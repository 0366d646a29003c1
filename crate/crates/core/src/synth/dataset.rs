use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{raster_cohort, Cohort};
use crate::error::{Error, Result};
use crate::mesh::{load_mesh, read_features, save_mesh, write_features, TriMesh};
use crate::raster::{FlattenSettings, PartitionCache};
use crate::seed::sha256_hex;
use crate::train::RasterCohort;

pub const MANIFEST_HEADER: [&str; 5] = [
    "subject_id",
    "scan_index",
    "side",
    "mesh_path",
    "feature_path",
];

/// One hemisphere of one scan. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub subject_id: String,
    pub scan_index: usize,
    pub side: String,
    pub mesh_path: String,
    pub feature_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortFiles {
    pub manifest: PathBuf,
    /// SHA-256 of the manifest bytes.
    pub manifest_hash: String,
    pub rows: Vec<ManifestRow>,
}

/// Writes the two template spheres, one feature sidecar per scan hemisphere
/// and `manifest.csv` into `dir`.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<CohortFiles> {
    std::fs::create_dir_all(dir.join("features"))?;
    save_mesh(&cohort.template.left, &dir.join("template_left.obj"), None)?;
    save_mesh(
        &cohort.template.right,
        &dir.join("template_right.obj"),
        None,
    )?;
    let mut rows = Vec::new();
    for s in &cohort.subjects {
        for (k, scan) in s.scans.iter().enumerate() {
            for (side, mesh) in [("left", &scan.left), ("right", &scan.right)] {
                let feature_path = format!("features/{}_scan{k}_{side}.csv", s.id);
                write_features(
                    mesh,
                    std::io::BufWriter::new(std::fs::File::create(dir.join(&feature_path))?),
                )?;
                rows.push(ManifestRow {
                    subject_id: s.id.clone(),
                    scan_index: k,
                    side: side.into(),
                    mesh_path: format!("template_{side}.obj"),
                    feature_path,
                });
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in &rows {
        w.write_record([
            r.subject_id.as_str(),
            &r.scan_index.to_string(),
            &r.side,
            &r.mesh_path,
            &r.feature_path,
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let manifest = dir.join("manifest.csv");
    std::fs::write(&manifest, &bytes)?;
    Ok(CohortFiles {
        manifest,
        manifest_hash: sha256_hex(&bytes),
        rows,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Format(format!(
            "{}: manifest header must be {}",
            path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let field = |k: usize| rec.get(k).unwrap_or_default().to_string();
            let scan_index = field(1).parse().map_err(|_| {
                Error::Format(format!("{}: row {}: bad scan_index", path.display(), i + 2))
            })?;
            let side = field(2);
            if side != "left" && side != "right" {
                return Err(Error::Format(format!(
                    "{}: row {}: side must be left or right",
                    path.display(),
                    i + 2
                )));
            }
            Ok(ManifestRow {
                subject_id: field(0),
                scan_index,
                side,
                mesh_path: field(3),
                feature_path: field(4),
            })
        })
        .collect()
}

/// `(subject id, [(left, right)] by scan index)`.
pub type SubjectMeshes = (String, Vec<(TriMesh, TriMesh)>);

type ScanSlot = (usize, Option<TriMesh>, Option<TriMesh>);

/// Spherical meshes with features of every scan, grouped by subject in
/// manifest order.
pub fn load_subject_meshes(manifest: &Path) -> Result<Vec<SubjectMeshes>> {
    let rows = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut meshes: HashMap<String, TriMesh> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut scans: HashMap<String, Vec<ScanSlot>> = HashMap::new();
    for r in &rows {
        if !meshes.contains_key(&r.mesh_path) {
            meshes.insert(
                r.mesh_path.clone(),
                load_mesh(&base.join(&r.mesh_path), None)?,
            );
        }
        let mut m = meshes[&r.mesh_path].clone();
        let fp = base.join(&r.feature_path);
        read_features(&mut m, std::io::BufReader::new(std::fs::File::open(&fp)?))?;
        if !scans.contains_key(&r.subject_id) {
            order.push(r.subject_id.clone());
        }
        let list = scans.entry(r.subject_id.clone()).or_default();
        let pos = match list.iter().position(|s| s.0 == r.scan_index) {
            Some(p) => p,
            None => {
                list.push((r.scan_index, None, None));
                list.len() - 1
            }
        };
        let slot = if r.side == "left" {
            &mut list[pos].1
        } else {
            &mut list[pos].2
        };
        if slot.replace(m).is_some() {
            return Err(Error::Format(format!(
                "{}: duplicate {} hemisphere for {} scan {}",
                manifest.display(),
                r.side,
                r.subject_id,
                r.scan_index
            )));
        }
    }
    order
        .into_iter()
        .map(|id| {
            let mut list = scans.remove(&id).expect("grouped above");
            list.sort_by_key(|s| s.0);
            let pairs = list
                .into_iter()
                .map(|(k, l, r)| match (l, r) {
                    (Some(l), Some(r)) => Ok((l, r)),
                    _ => Err(Error::Format(format!(
                        "{}: {id} scan {k} lacks a hemisphere",
                        manifest.display()
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((id, pairs))
        })
        .collect()
}

/// Loads a manifest and rasterizes every scan. Subjects with two or more
/// scans become pairs (first two scans), the rest singles.
pub fn load_cohort(
    manifest: &Path,
    flatten: &FlattenSettings,
    cache: &PartitionCache,
) -> Result<(RasterCohort, Vec<String>)> {
    let subjects = load_subject_meshes(manifest)?;
    let sets = subjects
        .par_iter()
        .map(|(_, scans)| {
            scans
                .iter()
                .map(|(l, r)| cache.build(l, r, flatten))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (paired, single): (Vec<_>, Vec<_>) = subjects
        .iter()
        .map(|s| s.0.clone())
        .zip(&sets)
        .partition(|(_, s)| s.len() >= 2);
    let ids = paired.into_iter().chain(single).map(|(id, _)| id).collect();
    Ok((raster_cohort(sets), ids))
}
