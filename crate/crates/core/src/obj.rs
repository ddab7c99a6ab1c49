//! Wavefront OBJ export of posed meshes: `v x y z` lines in meters with six
//! decimals, then 1-based `f a b c` triangles.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use thiserror::Error;

use crate::body_model::{skin_vertices, KinematicModel, ModelError, PoseState};

#[derive(Debug, Error)]
pub enum ObjError {
    #[error("face {face} references vertex {index}, mesh has {count}")]
    BadFace {
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Triangle mesh as read back from an OBJ file.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

pub fn write_obj<W: Write>(
    w: &mut W,
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
) -> Result<(), ObjError> {
    for (face, tri) in faces.iter().enumerate() {
        if let Some(&index) = tri.iter().find(|&&i| i >= vertices.len()) {
            return Err(ObjError::BadFace {
                face,
                index,
                count: vertices.len(),
            });
        }
    }
    for v in vertices {
        // adding 0.0 turns -0.0 into 0.0
        writeln!(w, "v {:.6} {:.6} {:.6}", v.x + 0.0, v.y + 0.0, v.z + 0.0)?;
    }
    for [a, b, c] in faces {
        writeln!(w, "f {} {} {}", a + 1, b + 1, c + 1)?;
    }
    Ok(())
}

/// The model's rest mesh.
pub fn write_rest_obj<W: Write>(w: &mut W, model: &KinematicModel) -> Result<(), ObjError> {
    write_obj(w, &model.rest_vertices, &model.faces)
}

/// The mesh skinned at `state`.
pub fn write_posed_obj<W: Write>(
    w: &mut W,
    model: &KinematicModel,
    state: &PoseState,
) -> Result<(), ObjError> {
    let mesh = skin_vertices(model, state)?;
    write_obj(w, &mesh.vertices, &model.faces)
}

/// Read `v` and triangular `f` lines; other statements are skipped.
pub fn read_obj<R: BufRead>(r: R) -> Result<ObjMesh, ObjError> {
    let mut mesh = ObjMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
    };
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let err = |message: String| ObjError::Parse {
            line: n + 1,
            message,
        };
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .map(|s| s.parse::<f64>().map_err(|e| err(e.to_string())))
                    .collect::<Result<_, _>>()?;
                if xyz.len() != 3 {
                    return Err(err(format!("vertex has {} coordinates", xyz.len())));
                }
                mesh.vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                // accept `i`, `i/t` and `i/t/n` references
                let idx: Vec<usize> = parts
                    .map(|s| {
                        let head = s.split('/').next().unwrap_or(s);
                        match head.parse::<usize>() {
                            Ok(i) if i >= 1 => Ok(i - 1),
                            _ => Err(err(format!("bad vertex reference {s:?}"))),
                        }
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(err(format!("face has {} vertices", idx.len())));
                }
                mesh.faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    for (face, tri) in mesh.faces.iter().enumerate() {
        if let Some(&index) = tri.iter().find(|&&i| i >= mesh.vertices.len()) {
            return Err(ObjError::BadFace {
                face,
                index,
                count: mesh.vertices.len(),
            });
        }
    }
    Ok(mesh)
}
