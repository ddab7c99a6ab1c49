//! Parametric articulated body model.
//!
//! Posing follows the usual pipeline: a pose latent is decoded into local
//! joint rotations, forward kinematics composes them down the tree together
//! with the global root rotation and translation, linear blend skinning
//! poses the shaped rest mesh and a fixed convex regressor `W` reduces the
//! posed vertices to `S = 75` landmarks.
//!
//! Joint transforms are kept in displacement form, `x ↦ A (x - J) + J + d`,
//! so that the identity state reproduces the rest geometry bit-exactly.

mod io;
mod landmarks;
mod toy;

pub use io::{load_model, save_model, MODEL_FORMAT_VERSION};
pub use landmarks::{landmark_jacobian, LandmarkCache, LandmarkEvaluator};
pub use toy::{toy_model, ToyModelConfig};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rotation::{rot6d_to_matrix, Rot6, RotationError, IDENTITY_6D};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("state does not match model: {0}")]
    StateMismatch(String),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Landmark ordering: body, then left hand, then right hand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkLayout {
    pub body: usize,
    pub left_hand: usize,
    pub right_hand: usize,
    /// Body landmark indices whose midpoint defines the hips center.
    pub left_hip: usize,
    pub right_hip: usize,
    /// Hand-local indices used for crop axes and hand-size normalization.
    pub hand_wrist: usize,
    pub hand_middle_base: usize,
    pub hand_middle_tip: usize,
}

impl Default for LandmarkLayout {
    fn default() -> Self {
        Self {
            body: 33,
            left_hand: 21,
            right_hand: 21,
            left_hip: 23,
            right_hip: 24,
            hand_wrist: 0,
            hand_middle_base: 9,
            hand_middle_tip: 12,
        }
    }
}

impl LandmarkLayout {
    pub fn count(&self) -> usize {
        self.body + self.left_hand + self.right_hand
    }

    pub fn left_hand_range(&self) -> std::ops::Range<usize> {
        self.body..self.body + self.left_hand
    }

    pub fn right_hand_range(&self) -> std::ops::Range<usize> {
        let start = self.body + self.left_hand;
        start..start + self.right_hand
    }
}

/// Sparse `(index, weight)` entry used for skin weights and regressor columns.
pub type Weighted = (usize, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicModel {
    pub format_version: u32,
    pub joint_names: Vec<String>,
    /// `None` marks the root.
    pub parent: Vec<Option<usize>>,
    pub rest_joints: Vec<Vector3<f64>>,
    pub rest_vertices: Vec<Vector3<f64>>,
    pub skin_weights: Vec<Vec<Weighted>>,
    pub shape_dim: usize,
    /// Row-major `(3 N_v) × shape_dim`.
    pub shape_basis: Vec<f64>,
    pub pose_dim: usize,
    /// Row-major `(6 J) × pose_dim`; decoded 6D code is `IDENTITY_6D + M θ`.
    pub pose_decoder: Vec<f64>,
    /// One sparse column of `W` per landmark.
    pub landmark_regressor: Vec<Vec<Weighted>>,
    pub layout: LandmarkLayout,
    /// Triangles, used for mesh export only.
    pub faces: Vec<[usize; 3]>,
}

impl KinematicModel {
    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmark_regressor.len()
    }

    /// Shape displacement row block for vertex `v`, coordinate `axis`.
    fn shape_row(&self, v: usize, axis: usize) -> &[f64] {
        let start = (3 * v + axis) * self.shape_dim;
        &self.shape_basis[start..start + self.shape_dim]
    }

    fn decoder_row(&self, joint: usize, k: usize) -> &[f64] {
        let start = (6 * joint + k) * self.pose_dim;
        &self.pose_decoder[start..start + self.pose_dim]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let j = self.joint_count();
        let nv = self.vertex_count();
        let bad = |m: String| Err(ModelError::Invalid(m));
        if j == 0 {
            return bad("model has no joints".into());
        }
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(self.format_version));
        }
        if self.joint_names.len() != j || self.rest_joints.len() != j {
            return bad("joint arrays disagree in length".into());
        }
        if self.parent[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (idx, p) in self.parent.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < idx => {}
                Some(p) => {
                    return bad(format!(
                        "joint {idx} has parent {p} out of topological order"
                    ))
                }
                None => return bad(format!("joint {idx} is a second root")),
            }
        }
        if self.skin_weights.len() != nv {
            return bad("skin weight list count differs from vertex count".into());
        }
        for (v, ws) in self.skin_weights.iter().enumerate() {
            if ws.is_empty() || ws.len() > 4 {
                return bad(format!("vertex {v} has {} skin weights", ws.len()));
            }
            if ws.iter().any(|&(jj, w)| jj >= j || !(w >= 0.0)) {
                return bad(format!("vertex {v} has an invalid skin weight"));
            }
            let sum: f64 = ws.iter().map(|w| w.1).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("vertex {v} skin weights sum to {sum}"));
            }
        }
        if self.shape_basis.len() != 3 * nv * self.shape_dim {
            return bad("shape basis has the wrong size".into());
        }
        if self.pose_decoder.len() != 6 * j * self.pose_dim {
            return bad("pose decoder has the wrong size".into());
        }
        if self.landmark_regressor.len() != self.layout.count() {
            return bad(format!(
                "regressor has {} columns, layout expects {}",
                self.landmark_regressor.len(),
                self.layout.count()
            ));
        }
        for (s, col) in self.landmark_regressor.iter().enumerate() {
            if col.is_empty() || col.iter().any(|&(v, w)| v >= nv || !(w >= 0.0)) {
                return bad(format!("regressor column {s} is invalid"));
            }
            let sum: f64 = col.iter().map(|w| w.1).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return bad(format!("regressor column {s} sums to {sum}"));
            }
        }
        let l = &self.layout;
        if l.left_hip >= l.body || l.right_hip >= l.body {
            return bad("hip landmark indices invalid".into());
        }
        if self.faces.iter().flatten().any(|&v| v >= nv) {
            return bad("face references a missing vertex".into());
        }
        if self
            .rest_vertices
            .iter()
            .chain(&self.rest_joints)
            .any(|p| !p.iter().all(|c| c.is_finite()))
            || !self.shape_basis.iter().all(|c| c.is_finite())
            || !self.pose_decoder.iter().all(|c| c.is_finite())
        {
            return bad("non-finite model entries".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("model serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn short_hash(&self) -> String {
        hex::encode(&self.digest()[..8])
    }
}

/// Generative state: root rotation (6D), root translation (m), shape and pose latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseState {
    pub r: Rot6,
    pub t: [f64; 3],
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
}

impl PoseState {
    pub fn identity(model: &KinematicModel) -> Self {
        Self::identity_with_dims(model.shape_dim, model.pose_dim)
    }

    pub fn identity_with_dims(shape_dim: usize, pose_dim: usize) -> Self {
        Self {
            r: IDENTITY_6D,
            t: [0.0; 3],
            beta: vec![0.0; shape_dim],
            theta: vec![0.0; pose_dim],
        }
    }

    /// Zero-valued container with the same shape, used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            r: [0.0; 6],
            t: [0.0; 3],
            beta: vec![0.0; self.beta.len()],
            theta: vec![0.0; self.theta.len()],
        }
    }

    pub fn len(&self) -> usize {
        9 + self.beta.len() + self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat view in `(r, t, β, θ)` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.r);
        out.extend_from_slice(&self.t);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.theta);
        out
    }

    pub fn from_flat(flat: &[f64], shape_dim: usize, pose_dim: usize) -> Self {
        assert_eq!(flat.len(), 9 + shape_dim + pose_dim);
        let mut r = [0.0; 6];
        r.copy_from_slice(&flat[..6]);
        let mut t = [0.0; 3];
        t.copy_from_slice(&flat[6..9]);
        Self {
            r,
            t,
            beta: flat[9..9 + shape_dim].to_vec(),
            theta: flat[9 + shape_dim..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.t)
    }

    pub fn check(&self, model: &KinematicModel) -> Result<(), ModelError> {
        if self.beta.len() != model.shape_dim || self.theta.len() != model.pose_dim {
            return Err(ModelError::StateMismatch(format!(
                "state has |β|={} |θ|={}, model expects {} and {}",
                self.beta.len(),
                self.theta.len(),
                model.shape_dim,
                model.pose_dim
            )));
        }
        if !self.is_finite() {
            return Err(ModelError::StateMismatch("non-finite state entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    RootCentered,
    World,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<Vector3<f64>>,
    pub frame: Frame,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn hips_center(&self, layout: &LandmarkLayout) -> Vector3<f64> {
        (self.points[layout.left_hip] + self.points[layout.right_hip]) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshVertices {
    pub vertices: Vec<Vector3<f64>>,
}

/// World transform of one joint: rotation plus posed joint position.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTransform {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
    /// `position - rest_joint`, exactly zero at rest.
    pub displacement: Vector3<f64>,
}

impl JointTransform {
    /// Apply to a point given in the rest frame, about rest joint `rest`.
    pub fn apply(&self, rest: &Vector3<f64>, point: &Vector3<f64>) -> Vector3<f64> {
        point + (self.rotation - Matrix3::identity()) * (point - rest) + self.displacement
    }
}

/// Decoded 6D code of joint `j` for pose latent `theta`.
pub(crate) fn decoded_6d(model: &KinematicModel, joint: usize, theta: &[f64]) -> Rot6 {
    let mut code = IDENTITY_6D;
    for (k, c) in code.iter_mut().enumerate() {
        *c += model
            .decoder_row(joint, k)
            .iter()
            .zip(theta)
            .map(|(m, x)| m * x)
            .sum::<f64>();
    }
    code
}

/// Local joint rotations for pose latent `theta`.
pub fn decode_pose(model: &KinematicModel, theta: &[f64]) -> Result<Vec<Matrix3<f64>>, ModelError> {
    if theta.len() != model.pose_dim {
        return Err(ModelError::StateMismatch(format!(
            "pose latent has {} entries, model expects {}",
            theta.len(),
            model.pose_dim
        )));
    }
    (0..model.joint_count())
        .map(|j| Ok(rot6d_to_matrix(&decoded_6d(model, j, theta))?))
        .collect()
}

pub fn forward_kinematics(
    model: &KinematicModel,
    joint_rotations: &[Matrix3<f64>],
    r: &Rot6,
    t: &Vector3<f64>,
) -> Result<Vec<JointTransform>, ModelError> {
    let global = rot6d_to_matrix(r)?;
    Ok(compose_chain(model, joint_rotations, &global, t))
}

pub(crate) fn compose_chain(
    model: &KinematicModel,
    local: &[Matrix3<f64>],
    global: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> Vec<JointTransform> {
    let eye = Matrix3::identity();
    let mut out: Vec<JointTransform> = Vec::with_capacity(model.joint_count());
    for (j, parent) in model.parent.iter().enumerate() {
        let rest = model.rest_joints[j];
        let (rotation, displacement) = match parent {
            None => (global * local[j], (global - eye) * rest + t),
            Some(p) => {
                let pt = &out[*p];
                let offset = rest - model.rest_joints[*p];
                (
                    pt.rotation * local[j],
                    pt.displacement + (pt.rotation - eye) * offset,
                )
            }
        };
        out.push(JointTransform {
            rotation,
            position: rest + displacement,
            displacement,
        });
    }
    out
}

/// Rest vertex `v` displaced by the shape basis.
pub(crate) fn shaped_vertex(model: &KinematicModel, v: usize, beta: &[f64]) -> Vector3<f64> {
    let mut p = model.rest_vertices[v];
    for axis in 0..3 {
        p[axis] += model
            .shape_row(v, axis)
            .iter()
            .zip(beta)
            .map(|(b, x)| b * x)
            .sum::<f64>();
    }
    p
}

pub(crate) fn blend_vertex(
    model: &KinematicModel,
    transforms: &[JointTransform],
    v: usize,
    shaped: &Vector3<f64>,
) -> Vector3<f64> {
    let eye = Matrix3::identity();
    let mut out = *shaped;
    for &(j, w) in &model.skin_weights[v] {
        let tr = &transforms[j];
        out += ((tr.rotation - eye) * (shaped - model.rest_joints[j]) + tr.displacement) * w;
    }
    out
}

pub fn skin_vertices(
    model: &KinematicModel,
    state: &PoseState,
) -> Result<MeshVertices, ModelError> {
    state.check(model)?;
    let local = decode_pose(model, &state.theta)?;
    let transforms = forward_kinematics(model, &local, &state.r, &state.translation())?;
    let vertices = (0..model.vertex_count())
        .map(|v| blend_vertex(model, &transforms, v, &shaped_vertex(model, v, &state.beta)))
        .collect();
    Ok(MeshVertices { vertices })
}

pub fn regress_landmarks(
    model: &KinematicModel,
    mesh: &MeshVertices,
) -> Result<LandmarkSet, ModelError> {
    if mesh.vertices.len() != model.vertex_count() {
        return Err(ModelError::StateMismatch(format!(
            "mesh has {} vertices, model has {}",
            mesh.vertices.len(),
            model.vertex_count()
        )));
    }
    let points = model
        .landmark_regressor
        .iter()
        .map(|col| {
            col.iter()
                .fold(Vector3::zeros(), |acc, &(v, w)| acc + mesh.vertices[v] * w)
        })
        .collect();
    Ok(LandmarkSet {
        points,
        frame: Frame::World,
    })
}

/// Subtract the midpoint of the two hip landmarks.
pub fn center_at_hips(landmarks: &LandmarkSet, layout: &LandmarkLayout) -> LandmarkSet {
    let c = landmarks.hips_center(layout);
    LandmarkSet {
        points: landmarks.points.iter().map(|p| p - c).collect(),
        frame: Frame::RootCentered,
    }
}

/// World-frame landmarks of a state (full skinning path).
pub fn posed_landmarks(
    model: &KinematicModel,
    state: &PoseState,
) -> Result<LandmarkSet, ModelError> {
    regress_landmarks(model, &skin_vertices(model, state)?)
}
