//! Synthetic fit problems generated from a known state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    depths, project, Camera, DepthRef, FitError, FitProblem, Observation2D, OrdinalConstraint,
    Relation,
};
use crate::body_model::{KinematicModel, LandmarkEvaluator, PoseState};
use crate::rotation::{axis_angle, matrix_to_rot6d};
use nalgebra::Vector3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Camera-to-body distance (m).
    pub distance: f64,
    /// Largest rotation about the vertical axis, in degrees.
    pub max_yaw_deg: f64,
    /// Largest rotation about the horizontal axis, in degrees.
    pub max_tilt_deg: f64,
    pub latent_std: f64,
    /// Std of the Gaussian noise added to each observation (px).
    pub pixel_noise: f64,
    /// Number of ordinal constraints drawn between landmarks.
    pub constraints: usize,
    /// Smallest true depth gap of a constrained pair (m).
    pub margin: f64,
    pub focal: f64,
    /// Image width and height (px); the principal point is the center.
    pub image_size: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            distance: 3.0,
            max_yaw_deg: 30.0,
            max_tilt_deg: 10.0,
            latent_std: 0.3,
            pixel_noise: 0.0,
            constraints: 20,
            margin: 0.05,
            focal: 1000.0,
            image_size: 1000.0,
        }
    }
}

/// A problem observing every landmark of a random state, and that state.
pub fn synthesize_problem(
    model: &KinematicModel,
    config: &SynthConfig,
    seed: u64,
) -> Result<(FitProblem, PoseState), FitError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let yaw = rng.random_range(-1.0..=1.0) * config.max_yaw_deg.to_radians();
    let tilt = rng.random_range(-1.0..=1.0) * config.max_tilt_deg.to_radians();
    let rot = axis_angle(&Vector3::x(), tilt) * axis_angle(&Vector3::y(), yaw);
    let truth = PoseState {
        r: matrix_to_rot6d(&rot).map_err(crate::body_model::ModelError::from)?,
        t: [0.0, 0.0, config.distance],
        beta: (0..model.shape_dim)
            .map(|_| config.latent_std * normal(&mut rng))
            .collect(),
        theta: (0..model.pose_dim)
            .map(|_| config.latent_std * normal(&mut rng))
            .collect(),
    };
    let half = 0.5 * config.image_size;
    let camera = Camera {
        fx: config.focal,
        fy: config.focal,
        cx: half,
        cy: half,
    };
    let points = LandmarkEvaluator::new(model).landmarks(&truth)?.points;
    let observations = points
        .iter()
        .map(|p| {
            let uv = project(&camera, p)?;
            Ok(Observation2D {
                u: uv.x + config.pixel_noise * normal(&mut rng),
                v: uv.y + config.pixel_noise * normal(&mut rng),
                confidence: 1.0,
            })
        })
        .collect::<Result<Vec<_>, FitError>>()?;

    let z = depths(&points);
    let mut constraints = Vec::with_capacity(config.constraints);
    // bounded search so an impossible margin cannot loop forever
    for _ in 0..config.constraints * 100 {
        if constraints.len() == config.constraints {
            break;
        }
        let (a, b) = (rng.random_range(0..z.len()), rng.random_range(0..z.len()));
        if (z[a] - z[b]).abs() > config.margin {
            constraints.push(OrdinalConstraint {
                a: DepthRef::Joint(a),
                b: DepthRef::Joint(b),
                relation: if z[a] < z[b] {
                    Relation::ACloser
                } else {
                    Relation::BCloser
                },
            });
        }
    }
    let mut problem = FitProblem::new(camera, observations);
    problem.constraints = constraints;
    problem.seed = seed;
    Ok((problem, truth))
}
