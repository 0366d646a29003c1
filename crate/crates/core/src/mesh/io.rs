//! OBJ subset (`v x y z`, `f i j k`, 1-based) and the comma-separated feature sidecar.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{TriMesh, Vec3};
use crate::error::{Error, Result};

pub fn read_obj<R: Read>(reader: R, path: &Path) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|e| parse_err(lineno, format!("bad coordinate `{t}`: {e}")))
                    })
                    .collect::<Result<_>>()?;
                if coords.len() < 3 {
                    return Err(parse_err(
                        lineno,
                        format!("vertex needs 3 coordinates, got {}", coords.len()),
                    ));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = tokens
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or(t);
                        match head.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(parse_err(lineno, format!("bad face index `{t}`"))),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(Error::NonTriangularFace {
                        path: path.to_path_buf(),
                        line: lineno,
                        count: idx.len(),
                    });
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces)
}

pub fn write_obj<W: Write>(mesh: &TriMesh, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for p in mesh.vertices() {
        writeln!(w, "v {:?} {:?} {:?}", p.x, p.y, p.z)?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the feature sidecar: a `vertex` column followed by one column per channel.
pub fn read_features<R: Read>(mesh: &mut TriMesh, reader: R) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("vertex") {
        return Err(Error::Format(format!(
            "feature file must start with a `vertex` column, found {:?}",
            headers.get(0).unwrap_or("")
        )));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let vertex: usize = record[0].parse().map_err(|_| {
            Error::Format(format!(
                "row {}: bad vertex index `{}`",
                row + 2,
                &record[0]
            ))
        })?;
        if vertex != row {
            return Err(Error::Format(format!(
                "row {}: vertex index {vertex} out of order (expected {row})",
                row + 2
            )));
        }
        for (c, col) in columns.iter_mut().enumerate() {
            let field = record.get(c + 1).unwrap_or("");
            let v: f64 = field.parse().map_err(|_| {
                Error::Format(format!(
                    "row {}: bad value `{field}` in `{}`",
                    row + 2,
                    names[c]
                ))
            })?;
            col.push(v);
        }
    }
    let rows = columns.first().map_or(0, Vec::len);
    if rows != mesh.n_vertices() {
        return Err(Error::FeatureCountMismatch {
            rows,
            vertices: mesh.n_vertices(),
        });
    }
    for (name, col) in names.iter().zip(columns) {
        mesh.set_feature(name, col)?;
    }
    Ok(())
}

pub fn write_features<W: Write>(mesh: &TriMesh, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names: Vec<&String> = mesh.features().keys().collect();
    let mut header = vec!["vertex".to_string()];
    header.extend(names.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for i in 0..mesh.n_vertices() {
        let mut rec = vec![i.to_string()];
        rec.extend(
            names
                .iter()
                .map(|n| format!("{:?}", mesh.features()[*n][i])),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_mesh(path: &Path, feature_path: Option<&Path>) -> Result<TriMesh> {
    let mut mesh = read_obj(File::open(path)?, path)?;
    if let Some(fp) = feature_path {
        read_features(&mut mesh, File::open(fp)?)?;
    }
    Ok(mesh)
}

/// Writes the OBJ and, when the mesh carries features, the sidecar.
pub fn save_mesh(mesh: &TriMesh, path: &Path, feature_path: Option<&Path>) -> Result<()> {
    write_obj(mesh, File::create(path)?)?;
    if let Some(fp) = feature_path {
        write_features(mesh, File::create(fp)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TETRA: &str = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 3 2\nf 1 2 4\nf 2 3 4\nf 1 4 3\n";

    fn tetra() -> TriMesh {
        read_obj(TETRA.as_bytes(), Path::new("tetra.obj")).unwrap()
    }

    #[test]
    fn tetrahedron_loads() {
        let m = tetra();
        assert_eq!((m.n_vertices(), m.n_faces()), (4, 4));
    }

    #[test]
    fn features_attach_by_name() {
        let mut m = tetra();
        read_features(
            &mut m,
            "vertex,thickness\n0,1.5\n1,2\n2,2.5\n3,3\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(m.feature("thickness").unwrap(), &[1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn short_feature_file_rejected() {
        let mut m = tetra();
        let err =
            read_features(&mut m, "vertex,thickness\n0,1\n1,2\n2,3\n".as_bytes()).unwrap_err();
        assert!(
            err.to_string().contains("feature/vertex count mismatch"),
            "{err}"
        );
    }

    #[test]
    fn quad_face_rejected() {
        let src = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        let err = read_obj(src.as_bytes(), Path::new("quad.obj")).unwrap_err();
        assert!(matches!(
            err,
            Error::NonTriangularFace {
                line: 5,
                count: 4,
                ..
            }
        ));
    }

    #[test]
    fn bad_coordinate_reports_line() {
        let err = read_obj("v 0 0 0\nv 1 x 0\n".as_bytes(), Path::new("a.obj")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn obj_and_features_roundtrip() {
        let m = super::super::shapes::icosphere(1, 1.0)
            .with_feature("sulc", (0..42).map(|i| (i as f64).sin() / 3.0).collect())
            .unwrap();
        let mut obj = Vec::new();
        write_obj(&m, &mut obj).unwrap();
        let mut back = read_obj(obj.as_slice(), Path::new("x.obj")).unwrap();
        let mut feat = Vec::new();
        write_features(&m, &mut feat).unwrap();
        read_features(&mut back, feat.as_slice()).unwrap();
        assert_eq!(back, m);
    }
}
