use std::fmt::Write as _;
use std::io::Write;

use super::beltrami::{beltrami_with_frames, FaceFrames};
use super::{BeltramiField, PlanarMap};
use crate::error::Result;
use crate::mesh::TriMesh;

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionReport {
    /// Per-face conformal factor: signed mapped area over source area.
    pub area_ratio: Vec<f64>,
    /// Per-corner absolute angle change in radians, three entries per face.
    pub angle_distortion: Vec<f64>,
    pub angle_mean: f64,
    pub angle_max: f64,
    pub mu_mean: f64,
    pub mu_std: f64,
    pub mu_max: f64,
    pub flipped_faces: usize,
}

impl DistortionReport {
    pub fn area_ratio_range(&self) -> (f64, f64) {
        self.area_ratio
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    }

    /// Plain `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let (lo, hi) = self.area_ratio_range();
        let mut s = String::new();
        let _ = writeln!(s, "faces={}", self.area_ratio.len());
        let _ = writeln!(s, "flipped_faces={}", self.flipped_faces);
        let _ = writeln!(s, "area_ratio_min={lo:e}");
        let _ = writeln!(s, "area_ratio_max={hi:e}");
        let _ = writeln!(s, "angle_distortion_mean={:e}", self.angle_mean);
        let _ = writeln!(s, "angle_distortion_max={:e}", self.angle_max);
        let _ = writeln!(s, "mu_abs_mean={:e}", self.mu_mean);
        let _ = writeln!(s, "mu_abs_std={:e}", self.mu_std);
        let _ = writeln!(s, "mu_abs_max={:e}", self.mu_max);
        s
    }
}

fn corner_angles(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> [f64; 3] {
    let ang = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        let u = [q[0] - p[0], q[1] - p[1]];
        let v = [r[0] - p[0], r[1] - p[1]];
        (u[0] * v[1] - u[1] * v[0])
            .abs()
            .atan2(u[0] * v[0] + u[1] * v[1])
    };
    [ang(a, b, c), ang(b, c, a), ang(c, a, b)]
}

pub(crate) fn signed_uv_area(map: &PlanarMap, tri: [usize; 3]) -> f64 {
    let (a, b, c) = (map.uv[tri[0]], map.uv[tri[1]], map.uv[tri[2]]);
    0.5 * ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x))
}

pub(crate) fn count_flipped(mesh: &TriMesh, map: &PlanarMap) -> usize {
    mesh.faces()
        .iter()
        .filter(|&&t| !(signed_uv_area(map, t) > 0.0))
        .count()
}

pub(crate) fn report_with_frames(
    mesh: &TriMesh,
    frames: &FaceFrames,
    map: &PlanarMap,
) -> DistortionReport {
    let mu = beltrami_with_frames(mesh, frames, map);
    let mut area_ratio = Vec::with_capacity(mesh.n_faces());
    let mut angle_distortion = Vec::with_capacity(3 * mesh.n_faces());
    let p = mesh.vertices();
    for (f, &tri) in mesh.faces().iter().enumerate() {
        area_ratio.push(signed_uv_area(map, tri) / frames.areas[f]);
        let local = |v: usize| {
            let d = p[v] - p[tri[0]];
            [d.dot(&frames.e1[f]), d.dot(&frames.e2[f])]
        };
        let src = corner_angles(local(tri[0]), local(tri[1]), local(tri[2]));
        let uv = |v: usize| [map.uv[v].x, map.uv[v].y];
        let dst = corner_angles(uv(tri[0]), uv(tri[1]), uv(tri[2]));
        for k in 0..3 {
            angle_distortion.push((dst[k] - src[k]).abs());
        }
    }
    let n = angle_distortion.len().max(1) as f64;
    DistortionReport {
        angle_mean: angle_distortion.iter().sum::<f64>() / n,
        angle_max: angle_distortion.iter().copied().fold(0.0, f64::max),
        mu_mean: mu.k,
        mu_std: mu.abs_std(),
        mu_max: mu.abs_max(),
        flipped_faces: count_flipped(mesh, map),
        area_ratio,
        angle_distortion,
    }
}

pub fn distortion_report(open_mesh: &TriMesh, map: &PlanarMap) -> Result<DistortionReport> {
    if map.uv.len() != open_mesh.n_vertices() {
        return Err(crate::Error::InvalidArgument(format!(
            "map has {} vertices, mesh has {}",
            map.uv.len(),
            open_mesh.n_vertices()
        )));
    }
    let frames = FaceFrames::new(open_mesh)?;
    Ok(report_with_frames(open_mesh, &frames, map))
}

/// `vertex,u,v` rows.
pub fn write_planar_map<W: Write>(map: &PlanarMap, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["vertex", "u", "v"])?;
    for (i, p) in map.uv.iter().enumerate() {
        w.write_record([i.to_string(), format!("{:?}", p.x), format!("{:?}", p.y)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `vertex,u,v` rows back.
pub fn read_planar_map<R: std::io::Read>(reader: R) -> Result<PlanarMap> {
    let mut r = csv::Reader::from_reader(reader);
    let mut uv = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| {
                    crate::Error::Format(format!("planar map row {}: bad field {k}", i + 2))
                })
        };
        if parse(0)? as usize != i {
            return Err(crate::Error::Format(format!(
                "planar map row {}: vertex out of order",
                i + 2
            )));
        }
        uv.push(super::Vec2::new(parse(1)?, parse(2)?));
    }
    Ok(PlanarMap { uv })
}

/// `face,mu_re,mu_im` rows.
pub fn write_beltrami<W: Write>(mu: &BeltramiField, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["face", "mu_re", "mu_im"])?;
    for (i, m) in mu.mu.iter().enumerate() {
        w.write_record([i.to_string(), format!("{:?}", m.re), format!("{:?}", m.im)])?;
    }
    w.flush()?;
    Ok(())
}
