mod common;

use bodylift::body_model::{skin_vertices, toy_model, PoseState, ToyModelConfig};
use bodylift::obj::{read_obj, write_obj, write_posed_obj, write_rest_obj};
use common::*;
use nalgebra::Vector3;
use rand::Rng;

#[test]
fn full_scale_mesh_fits_the_format() {
    const VERTICES: usize = 10168;
    const FACES: usize = 20332;
    let mut rng = rng(91);
    let verts: Vec<Vector3<f64>> = (0..VERTICES)
        .map(|_| Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng)))
        .collect();
    let faces: Vec<[usize; 3]> = (0..FACES)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..VERTICES)))
        .collect();
    let mut out = Vec::new();
    write_obj(&mut out, &verts, &faces).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(
        text.lines().filter(|l| l.starts_with("v ")).count(),
        VERTICES
    );
    assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), FACES);
    let mesh = read_obj(text.as_bytes()).unwrap();
    assert_eq!(mesh.faces, faces);
    for (a, b) in mesh.vertices.iter().zip(&verts) {
        assert!((a - b).amax() <= 5e-7);
    }
}

#[test]
fn identity_state_matches_rest_mesh() {
    let model = toy_model(&ToyModelConfig::default()).unwrap();
    let (mut rest, mut posed) = (Vec::new(), Vec::new());
    write_rest_obj(&mut rest, &model).unwrap();
    write_posed_obj(&mut posed, &model, &PoseState::identity(&model)).unwrap();
    assert_eq!(rest, posed);
}

#[test]
fn posed_mesh_round_trips() {
    let model = toy_model(&ToyModelConfig::default()).unwrap();
    let mut rng = rng(92);
    let state = random_state(&model, &mut rng);
    let mut out = Vec::new();
    write_posed_obj(&mut out, &model, &state).unwrap();
    let mesh = read_obj(out.as_slice()).unwrap();
    let skinned = skin_vertices(&model, &state).unwrap();
    assert_eq!(mesh.faces, model.faces);
    assert_eq!(mesh.vertices.len(), model.vertex_count());
    for (a, b) in mesh.vertices.iter().zip(&skinned.vertices) {
        assert!((a - b).amax() <= 5e-7);
    }
    let mut again = Vec::new();
    write_obj(&mut again, &mesh.vertices, &mesh.faces).unwrap();
    assert_eq!(again, out);
}

#[test]
fn malformed_lines_are_rejected() {
    assert!(read_obj("v 1 2\n".as_bytes()).is_err());
    assert!(read_obj("v 0 0 0\nf 1 1 2\n".as_bytes()).is_err());
    assert!(read_obj("v 0 0 0\nf 0 1 1\n".as_bytes()).is_err());
    assert!(read_obj("v 0 0 0\nf 1 1 1 1\n".as_bytes()).is_err());
}
