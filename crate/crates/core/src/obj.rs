//! Wavefront OBJ import/export — the subset needed here: `v` and `f`
//! records, with `f` entries in any of the `i`, `i/j`, `i/j/k`, `i//k`
//! forms. Everything else (normals, texcoords, groups, materials) is
//! skipped. Indices may be negative (relative to the vertices seen so far).

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::RawMesh;

/// Parse an OBJ document from any reader. Errors carry the 1-based line
/// number of the offending record.
pub fn read_obj<R: Read>(reader: R) -> Result<RawMesh> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<Vec<u32>> = Vec::new();
    let mut quads = 0usize;

    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let mut tokens = line.split_whitespace();
        let Some(keyword) = tokens.next() else {
            continue;
        };
        match keyword {
            "v" => {
                let mut coords = [0.0f64; 3];
                for dst in &mut coords {
                    let tok = tokens.next().ok_or_else(|| Error::ObjParse {
                        line: line_no,
                        msg: "vertex record has fewer than 3 coordinates".into(),
                    })?;
                    *dst = tok.parse().map_err(|_| Error::ObjParse {
                        line: line_no,
                        msg: format!("invalid coordinate {tok:?}"),
                    })?;
                }
                // A 4th (w) component is legal and ignored.
                vertices.push(coords);
            }
            "f" => {
                let mut face = Vec::new();
                for tok in tokens {
                    let first = tok.split('/').next().unwrap_or("");
                    let raw: i64 = first.parse().map_err(|_| Error::ObjParse {
                        line: line_no,
                        msg: format!("invalid face index {tok:?}"),
                    })?;
                    let resolved = if raw > 0 {
                        raw - 1
                    } else if raw < 0 {
                        vertices.len() as i64 + raw
                    } else {
                        return Err(Error::ObjParse {
                            line: line_no,
                            msg: "face index 0 is not allowed".into(),
                        });
                    };
                    if resolved < 0 || resolved >= vertices.len() as i64 {
                        return Err(Error::ObjParse {
                            line: line_no,
                            msg: format!(
                                "face index {raw} out of range ({} vertices so far)",
                                vertices.len()
                            ),
                        });
                    }
                    face.push(resolved as u32);
                }
                if face.len() < 3 {
                    return Err(Error::ObjParse {
                        line: line_no,
                        msg: format!("face has {} vertices, need at least 3", face.len()),
                    });
                }
                if face.len() == 4 {
                    quads += 1;
                }
                faces.push(face);
            }
            _ => {} // vn, vt, g, o, s, usemtl, mtllib, ...
        }
    }

    if vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let quad_ratio = if faces.is_empty() {
        0.0
    } else {
        quads as f64 / faces.len() as f64
    };
    let mesh = RawMesh {
        vertices,
        faces,
        quad_ratio,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Load a mesh from an OBJ file on disk.
pub fn load_mesh(path: &Path) -> Result<RawMesh> {
    let file = std::fs::File::open(path)?;
    read_obj(file)
}

/// Render a mesh as OBJ text with fixed 8-decimal coordinates.
pub fn obj_string(mesh: &RawMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:.8} {:.8} {:.8}", v[0], v[1], v[2]);
    }
    for face in &mesh.faces {
        out.push('f');
        for &idx in face {
            let _ = write!(out, " {}", idx + 1);
        }
        out.push('\n');
    }
    out
}

/// Write a mesh to an OBJ file.
pub fn write_obj(path: &Path, mesh: &RawMesh) -> Result<()> {
    std::fs::write(path, obj_string(mesh))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_plain_and_slash_face_forms() {
        let src = "\
# comment
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
vn 0 0 1
f 1 2 3
f 1/1 3/2/1 4//1
";
        let mesh = read_obj(src.as_bytes()).unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        assert_eq!(mesh.faces, vec![vec![0, 1, 2], vec![0, 2, 3]]);
        assert_eq!(mesh.quad_ratio, 0.0);
    }

    #[test]
    fn resolves_negative_indices() {
        let src = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n";
        let mesh = read_obj(src.as_bytes()).unwrap();
        assert_eq!(mesh.faces, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn counts_quads() {
        let src = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\nf 1 2 3\n";
        let mesh = read_obj(src.as_bytes()).unwrap();
        assert_eq!(mesh.quad_ratio, 0.5);
    }

    #[test]
    fn reports_line_numbers_on_errors() {
        let src = "v 0 0 0\nv 1 0 0\nf 1 2 9\n";
        match read_obj(src.as_bytes()) {
            Err(Error::ObjParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let src = "v 0 0\n";
        match read_obj(src.as_bytes()) {
            Err(Error::ObjParse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_zero_index_and_short_faces() {
        assert!(read_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n".as_bytes()).is_err());
        assert!(read_obj("v 0 0 0\nv 1 0 0\nf 1 2\n".as_bytes()).is_err());
    }

    #[test]
    fn round_trips_through_text()  {
        let mesh = RawMesh {
            vertices: vec![
                [0.12345678, -0.5, 0.33333333],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            faces: vec![vec![0, 1, 2]],
            quad_ratio: 0.0,
        };
        let text = obj_string(&mesh);
        let back = read_obj(text.as_bytes()).unwrap();
        assert_eq!(back.faces, mesh.faces);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-8);
            }
        }
    }
}
