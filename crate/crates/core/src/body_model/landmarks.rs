//! Landmark evaluation restricted to the regressor's vertex support, with
//! the reverse-mode adjoint through regression, skinning, forward
//! kinematics, pose decoding and the 6D rotation decode.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{
    blend_vertex, compose_chain, decoded_6d, shaped_vertex, Frame, JointTransform, KinematicModel,
    LandmarkSet, ModelError, PoseState,
};
use crate::rotation::{rot6d_to_matrix_cached, rot6d_vjp, Rot6Cache};

/// Precomputed regressor support of a model.
#[derive(Debug, Clone)]
pub struct LandmarkEvaluator<'a> {
    model: &'a KinematicModel,
    /// Vertices with nonzero weight in some regressor column.
    support: Vec<usize>,
    /// Regressor columns re-indexed into `support`.
    columns: Vec<Vec<(usize, f64)>>,
}

/// Forward intermediates needed by [`LandmarkEvaluator::vjp`].
#[derive(Debug, Clone)]
pub struct LandmarkCache {
    global: Matrix3<f64>,
    global_cache: Rot6Cache,
    local: Vec<Matrix3<f64>>,
    local_cache: Vec<Rot6Cache>,
    transforms: Vec<JointTransform>,
    shaped: Vec<Vector3<f64>>,
    pub landmarks: LandmarkSet,
}

impl<'a> LandmarkEvaluator<'a> {
    pub fn new(model: &'a KinematicModel) -> Self {
        let mut support: Vec<usize> = model
            .landmark_regressor
            .iter()
            .flatten()
            .filter(|(_, w)| *w != 0.0)
            .map(|(v, _)| *v)
            .collect();
        support.sort_unstable();
        support.dedup();
        let columns = model
            .landmark_regressor
            .iter()
            .map(|col| {
                col.iter()
                    .filter(|(_, w)| *w != 0.0)
                    .map(|&(v, w)| (support.binary_search(&v).expect("in support"), w))
                    .collect()
            })
            .collect();
        Self {
            model,
            support,
            columns,
        }
    }

    pub fn model(&self) -> &KinematicModel {
        self.model
    }

    /// World-frame landmarks plus the cache for the adjoint.
    pub fn forward(&self, state: &PoseState) -> Result<LandmarkCache, ModelError> {
        let model = self.model;
        state.check(model)?;
        let (global, global_cache) = rot6d_to_matrix_cached(&state.r)?;
        let mut local = Vec::with_capacity(model.joint_count());
        let mut local_cache = Vec::with_capacity(model.joint_count());
        for j in 0..model.joint_count() {
            let (m, c) = rot6d_to_matrix_cached(&decoded_6d(model, j, &state.theta))?;
            local.push(m);
            local_cache.push(c);
        }
        let transforms = compose_chain(model, &local, &global, &state.translation());
        let shaped: Vec<Vector3<f64>> = self
            .support
            .iter()
            .map(|&v| shaped_vertex(model, v, &state.beta))
            .collect();
        let posed: Vec<Vector3<f64>> = self
            .support
            .iter()
            .zip(&shaped)
            .map(|(&v, s)| blend_vertex(model, &transforms, v, s))
            .collect();
        let points = self
            .columns
            .iter()
            .map(|col| {
                col.iter()
                    .fold(Vector3::zeros(), |acc, &(i, w)| acc + posed[i] * w)
            })
            .collect();
        Ok(LandmarkCache {
            global,
            global_cache,
            local,
            local_cache,
            transforms,
            shaped,
            landmarks: LandmarkSet {
                points,
                frame: Frame::World,
            },
        })
    }

    pub fn landmarks(&self, state: &PoseState) -> Result<LandmarkSet, ModelError> {
        Ok(self.forward(state)?.landmarks)
    }

    /// Hip-centered landmarks.
    pub fn centered(&self, state: &PoseState) -> Result<LandmarkSet, ModelError> {
        Ok(super::center_at_hips(
            &self.landmarks(state)?,
            &self.model.layout,
        ))
    }

    /// Gradient of a scalar loss with respect to the state, given its
    /// gradient with respect to the world-frame landmarks.
    pub fn vjp(&self, cache: &LandmarkCache, grad: &[Vector3<f64>]) -> PoseState {
        let model = self.model;
        let eye = Matrix3::identity();
        let jn = model.joint_count();
        let mut out = PoseState::identity_with_dims(model.shape_dim, model.pose_dim).zeros_like();

        let mut g_vert = vec![Vector3::zeros(); self.support.len()];
        for (col, g) in self.columns.iter().zip(grad) {
            for &(i, w) in col {
                g_vert[i] += g * w;
            }
        }

        let mut g_rot = vec![Matrix3::zeros(); jn];
        let mut g_disp = vec![Vector3::zeros(); jn];
        for ((&v, g), shaped) in self.support.iter().zip(&g_vert).zip(&cache.shaped) {
            if *g == Vector3::zeros() {
                continue;
            }
            // v_posed = shaped + Σ w ((A - I)(shaped - J) + d)
            let mut g_shaped = *g;
            for &(j, w) in &model.skin_weights[v] {
                let tr = &cache.transforms[j];
                g_shaped += (tr.rotation - eye).transpose() * g * w;
                g_rot[j] += g * (shaped - model.rest_joints[j]).transpose() * w;
                g_disp[j] += g * w;
            }
            for (axis, gs) in g_shaped.iter().enumerate() {
                for (b, row) in out.beta.iter_mut().zip(model.shape_row(v, axis)) {
                    *b += row * gs;
                }
            }
        }

        let mut g_local = vec![Matrix3::zeros(); jn];
        let mut g_global = Matrix3::zeros();
        for j in (0..jn).rev() {
            match model.parent[j] {
                Some(p) => {
                    let parent_rot = cache.transforms[p].rotation;
                    let offset = model.rest_joints[j] - model.rest_joints[p];
                    let gd = g_disp[j];
                    g_disp[p] += gd;
                    let ga = g_rot[j];
                    g_rot[p] += ga * cache.local[j].transpose() + gd * offset.transpose();
                    g_local[j] = parent_rot.transpose() * ga;
                }
                None => {
                    let gd = g_disp[j];
                    let ga = g_rot[j];
                    g_global +=
                        ga * cache.local[j].transpose() + gd * model.rest_joints[j].transpose();
                    g_local[j] = cache.global.transpose() * ga;
                    for k in 0..3 {
                        out.t[k] += gd[k];
                    }
                }
            }
        }

        out.r = rot6d_vjp(&cache.global_cache, &g_global);
        for j in 0..jn {
            let g6 = rot6d_vjp(&cache.local_cache[j], &g_local[j]);
            for (k, g) in g6.iter().enumerate() {
                if *g == 0.0 {
                    continue;
                }
                for (th, m) in out.theta.iter_mut().zip(model.decoder_row(j, k)) {
                    *th += m * g;
                }
            }
        }
        out
    }

    /// Adjoint for hip-centered landmarks.
    pub fn vjp_centered(&self, cache: &LandmarkCache, grad: &[Vector3<f64>]) -> PoseState {
        let layout = &self.model.layout;
        let total: Vector3<f64> = grad.iter().sum();
        let mut g = grad.to_vec();
        g[layout.left_hip] -= total * 0.5;
        g[layout.right_hip] -= total * 0.5;
        self.vjp(cache, &g)
    }
}

/// Dense Jacobian of the flattened world landmarks (`3S` rows, x/y/z per
/// landmark) with respect to the flattened state `(r, t, β, θ)`.
pub fn landmark_jacobian(
    model: &KinematicModel,
    state: &PoseState,
) -> Result<DMatrix<f64>, ModelError> {
    let eval = LandmarkEvaluator::new(model);
    let cache = eval.forward(state)?;
    let s = model.landmark_count();
    let mut jac = DMatrix::zeros(3 * s, state.len());
    let mut seed = vec![Vector3::zeros(); s];
    for lm in 0..s {
        for axis in 0..3 {
            seed[lm][axis] = 1.0;
            let row = eval.vjp(&cache, &seed).to_flat();
            for (c, v) in row.iter().enumerate() {
                jac[(3 * lm + axis, c)] = *v;
            }
            seed[lm][axis] = 0.0;
        }
    }
    Ok(jac)
}
