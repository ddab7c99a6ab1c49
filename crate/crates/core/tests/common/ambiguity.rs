//! Constructed depth-ambiguous fitting problems.
//!
//! A nearly planar body tilted toward or away from a distant camera projects
//! almost identically either way, so keypoints alone leave the tilt sign
//! open. Landmarks that stick out of the body plane (face, feet, fingertips)
//! would break the symmetry and are marked unobserved. Ordinal constraints
//! between skeleton edges resolve the sign.

use bodylift::body_model::{KinematicModel, LandmarkEvaluator, PoseState};
use bodylift::fitting::{
    project, Camera, DepthRef, FitProblem, Observation2D, OrdinalConstraint, Relation,
};
use bodylift::rotation::{axis_angle, matrix_to_rot6d};
use nalgebra::Vector3;
use rand::Rng;

use super::normal;

/// Body skeleton edges in landmark indices.
pub const EDGES: [(usize, usize); 12] = [
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
    (11, 23),
    (12, 24),
    (23, 24),
    (23, 25),
    (25, 27),
    (24, 26),
    (26, 28),
];

/// Subject distance in meters; far enough that perspective barely
/// separates the two tilt signs.
pub const DISTANCE: f64 = 40.0;

/// Camera whose focal length keeps the subject about 250 px tall.
pub fn camera() -> Camera {
    let f = 1000.0 * DISTANCE / 6.0;
    Camera {
        fx: f,
        fy: f,
        cx: 500.0,
        cy: 500.0,
    }
}

/// Landmarks farther than this from the rest body plane are left unobserved.
pub const PLANE_TOLERANCE: f64 = 0.03;

pub struct AmbiguousCase {
    pub problem: FitProblem,
    pub truth: PoseState,
}

/// Edge pairs whose true mean depths differ by more than `margin` meters.
pub fn certain_constraints(depths: &[f64], margin: f64) -> Vec<OrdinalConstraint> {
    let mut out = Vec::new();
    for (k, &(a0, a1)) in EDGES.iter().enumerate() {
        for &(b0, b1) in &EDGES[k + 1..] {
            let a = DepthRef::Edge(a0, a1);
            let b = DepthRef::Edge(b0, b1);
            let gap = a.depth(depths) - b.depth(depths);
            if gap.abs() > margin {
                let relation = if gap < 0.0 {
                    Relation::ACloser
                } else {
                    Relation::BCloser
                };
                out.push(OrdinalConstraint { a, b, relation });
            }
        }
    }
    out
}

pub fn ambiguous_case(
    model: &KinematicModel,
    rng: &mut impl Rng,
    pixel_noise: f64,
) -> AmbiguousCase {
    let eval = LandmarkEvaluator::new(model);
    let tilt_deg: f64 =
        rng.random_range(25.0..40.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let yaw_deg: f64 = rng.random_range(-20.0..20.0);
    let rot = axis_angle(&Vector3::y(), yaw_deg.to_radians())
        * axis_angle(&Vector3::x(), tilt_deg.to_radians());
    let mut truth = PoseState::identity(model);
    truth.r = matrix_to_rot6d(&rot).unwrap();
    truth.t = [
        0.2 * normal(rng),
        0.2 * normal(rng),
        DISTANCE + 0.5 * normal(rng),
    ];
    for b in truth.beta.iter_mut() {
        *b = 0.5 * normal(rng);
    }
    for t in truth.theta.iter_mut() {
        *t = 0.2 * normal(rng);
    }
    let points = eval.landmarks(&truth).unwrap().points;
    let rest = eval.landmarks(&PoseState::identity(model)).unwrap().points;
    let cam = camera();
    let observations = points
        .iter()
        .zip(&rest)
        .map(|(p, q)| {
            let uv = project(&cam, p).unwrap();
            Observation2D {
                u: uv.x + pixel_noise * normal(rng),
                v: uv.y + pixel_noise * normal(rng),
                confidence: if q.z.abs() < PLANE_TOLERANCE {
                    1.0
                } else {
                    0.0
                },
            }
        })
        .collect();
    let depths: Vec<f64> = points.iter().map(|p| p.z).collect();
    let mut problem = FitProblem::new(cam, observations);
    problem.constraints = certain_constraints(&depths, 0.1);
    problem.seed = rng.random();
    AmbiguousCase { problem, truth }
}
