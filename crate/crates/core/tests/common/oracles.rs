//! Measurements shared by the module tests and the acceptance runner. Each
//! returns the worst error (or a test statistic) over its trials.

use bodylift::body_model::{
    landmark_jacobian, posed_landmarks, skin_vertices, toy_model, Frame, KinematicModel,
    LandmarkEvaluator, LandmarkSet, PoseState, ToyModelConfig,
};
use bodylift::fitting::{
    fit, ordinal_loss, project, reprojection_loss, Camera, DepthRef, FitProblem, Observation2D,
    OrdinalConstraint, Relation,
};
use bodylift::metrics::{mpjpe_pa, procrustes_align, Similarity};
use bodylift::mixer::{backward, forward, init_params, predict, MixerConfig, MixerParams, Readout};
use bodylift::rotation::{matrix_to_rot6d, IDENTITY_6D};
use bodylift::sampling::sample_haar_so3;
use bodylift::trainer::{lifter_loss, LossWeights};
use nalgebra::Vector3;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::ambiguity::ambiguous_case;
use super::*;

pub fn toy() -> KinematicModel {
    toy_model(&ToyModelConfig::default()).unwrap()
}

// ---- mixer ----

pub fn tiny_mixer(residual: bool, layer_norm: bool, readout: Readout) -> MixerConfig {
    MixerConfig {
        tokens: 4,
        channels: 8,
        layers: 2,
        token_hidden: 5,
        channel_hidden: 6,
        shape_dim: 2,
        pose_dim: 3,
        residual,
        layer_norm,
        readout,
    }
}

pub fn random_points(n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| Vector3::new(normal(rng), normal(rng), normal(rng)) * 0.5)
        .collect()
}

/// Randomize every parameter so gains and biases are exercised away from
/// their initial values.
pub fn perturbed(config: &MixerConfig, rng: &mut impl Rng) -> MixerParams {
    let mut p = init_params(config, rng.random()).unwrap();
    for x in p.data.iter_mut() {
        *x += 0.3 * normal(rng);
    }
    p
}

pub fn dot(out: &PoseState, g: &[f64]) -> f64 {
    out.to_flat().iter().zip(g).map(|(a, b)| a * b).sum()
}

/// Parameter and input gradients of `⟨upstream, mixer(x)⟩`, cycling
/// through residual, normalization and readout variants.
pub fn mixer_gradient_error(trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let variants = [
        (true, true, Readout::MeanPool),
        (false, true, Readout::MeanPool),
        (true, false, Readout::MeanPool),
        (true, true, Readout::Flatten),
    ];
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let (res, ln, ro) = variants[trial % variants.len()];
        let cfg = tiny_mixer(res, ln, ro);
        let params = perturbed(&cfg, &mut rng);
        let x = random_points(cfg.tokens, &mut rng);
        // unit-norm upstream keeps the probed scalar O(1)
        let mut upstream: Vec<f64> = (0..cfg.output_dim()).map(|_| normal(&mut rng)).collect();
        let norm = upstream.iter().map(|u| u * u).sum::<f64>().sqrt();
        upstream.iter_mut().for_each(|u| *u /= norm);
        let up_state = PoseState::from_flat(&upstream, cfg.shape_dim, cfg.pose_dim);

        let (_, cache) = forward(&params, &x).unwrap();
        let (grads, dx) = backward(&params, &cache, &up_state).unwrap();
        let numeric = numeric_gradient(&params.data, |theta| {
            let mut p = params.clone();
            p.data.copy_from_slice(theta);
            dot(&predict(&p, &x).unwrap(), &upstream)
        });
        worst = worst.max(max_rel_err(&grads.data, &numeric));

        let flat_x: Vec<f64> = x.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let numeric_x = numeric_gradient(&flat_x, |xs| {
            let pts: Vec<Vector3<f64>> = xs
                .chunks(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect();
            dot(&predict(&params, &pts).unwrap(), &upstream)
        });
        let analytic_x: Vec<f64> = (0..cfg.tokens)
            .flat_map(|s| (0..3).map(move |a| (s, a)))
            .map(|(s, a)| dx[(s, a)])
            .collect();
        worst = worst.max(max_rel_err(&analytic_x, &numeric_x));
    }
    worst
}

// ---- lifter loss ----

pub fn lifter_loss_gradient_error(trials: usize, seed: u64) -> f64 {
    let m = toy();
    let eval = LandmarkEvaluator::new(&m);
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let pred = random_state(&m, &mut rng);
        let target = random_state(&m, &mut rng);
        let weights = if trial % 2 == 0 {
            LossWeights::default()
        } else {
            LossWeights {
                rotation: 0.7,
                translation: 2.0,
                shape: 0.3,
                pose: 0.05,
                landmarks: 1.0,
            }
        };
        let (_, grad) = lifter_loss(&eval, &weights, &pred, &target).unwrap();
        let numeric = numeric_gradient(&pred.to_flat(), |x| {
            let p = PoseState::from_flat(x, m.shape_dim, m.pose_dim);
            lifter_loss(&eval, &weights, &p, &target).unwrap().0.total
        });
        worst = worst.max(max_rel_err(&grad.to_flat(), &numeric));
    }
    worst
}

// ---- body model ----

/// Landmark Jacobian (FK, skinning and regression) against differences of
/// the full skinning path.
pub fn landmark_jacobian_error(trials: usize, seed: u64) -> f64 {
    let m = toy();
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let state = random_state(&m, &mut rng);
        let jac = landmark_jacobian(&m, &state).unwrap();
        let columns = numeric_jacobian(&state.to_flat(), |x| {
            let s = PoseState::from_flat(x, m.shape_dim, m.pose_dim);
            posed_landmarks(&m, &s)
                .unwrap()
                .points
                .iter()
                .flat_map(|p| [p.x, p.y, p.z])
                .collect()
        });
        for (c, col) in columns.iter().enumerate() {
            let analytic: Vec<f64> = jac.column(c).iter().copied().collect();
            worst = worst.max(max_rel_err(&analytic, col));
        }
    }
    worst
}

/// Largest deviation between posed vertices/landmarks under a root
/// transform and the transformed identity-root result.
pub fn rigid_equivariance_error(trials: usize, seed: u64) -> f64 {
    let m = toy();
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut base = random_state(&m, &mut rng);
        base.r = IDENTITY_6D;
        base.t = [0.0; 3];
        let rot = sample_haar_so3(&mut rng);
        let shift = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng));
        let mut moved = base.clone();
        moved.r = matrix_to_rot6d(&rot).unwrap();
        moved.t = shift.into();

        let v0 = skin_vertices(&m, &base).unwrap();
        let v1 = skin_vertices(&m, &moved).unwrap();
        for (a, b) in v0.vertices.iter().zip(&v1.vertices) {
            worst = worst.max((rot * a + shift - b).amax());
        }
        let l0 = posed_landmarks(&m, &base).unwrap();
        let l1 = posed_landmarks(&m, &moved).unwrap();
        for (a, b) in l0.points.iter().zip(&l1.points) {
            worst = worst.max((rot * a + shift - b).amax());
        }
    }
    worst
}

// ---- metrics ----

pub fn random_similarity(rng: &mut impl Rng) -> Similarity {
    Similarity {
        scale: rng.random_range(0.3..3.0),
        rotation: sample_haar_so3(rng),
        translation: Vector3::new(normal(rng), normal(rng), normal(rng)),
    }
}

pub fn set(points: Vec<Vector3<f64>>) -> LandmarkSet {
    LandmarkSet {
        points,
        frame: Frame::RootCentered,
    }
}

/// Worst `(scale, rotation, translation)` recovery error and worst
/// aligned MPJPE (mm) over exact similarity images of point clouds; every
/// tenth cloud is a posed body.
pub fn procrustes_recovery(trials: usize, seed: u64) -> (f64, f64) {
    let m = toy();
    let mut rng = rng(seed);
    let (mut param, mut pa): (f64, f64) = (0.0, 0.0);
    for trial in 0..trials {
        let src = if trial % 10 == 0 {
            posed_landmarks(&m, &random_state(&m, &mut rng))
                .unwrap()
                .points
        } else {
            (0..75)
                .map(|_| Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng)) * 0.3)
                .collect()
        };
        let sim = random_similarity(&mut rng);
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| sim.apply(p)).collect();
        let got = procrustes_align(&set(src.clone()), &set(dst.clone())).unwrap();
        param = param
            .max((got.scale - sim.scale).abs())
            .max((got.rotation - sim.rotation).amax())
            .max((got.translation - sim.translation).amax());
        pa = pa.max(mpjpe_pa(&set(src), &set(dst)).unwrap());
    }
    (param, pa)
}

// ---- Haar sampler ----

/// Asymptotic Kolmogorov survival function `P(K > λ)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let s: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            let sign = if k as i64 % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    kolmogorov_sf((ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d)
}

/// Rotation angle of a trace.
pub fn trace_angle(trace: f64) -> f64 {
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// χ² p-value of rotation angles against the Haar density `(1 − cos θ)/π`
/// over `bins` equal-width bins on `[0, π]`.
pub fn angle_chi_square(angles: &[f64], bins: usize) -> f64 {
    use std::f64::consts::PI;
    let cdf = |t: f64| (t - t.sin()) / PI;
    let mut counts = vec![0usize; bins];
    for a in angles {
        counts[((a / PI * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let n = angles.len() as f64;
    let stat: f64 = counts
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let lo = PI * k as f64 / bins as f64;
            let hi = PI * (k + 1) as f64 / bins as f64;
            let expected = n * (cdf(hi) - cdf(lo));
            (*c as f64 - expected).powi(2) / expected
        })
        .sum();
    1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat)
}

/// KS p-value of `tr(Q·R)` against an independent sample of `tr(R)` for a
/// fixed random `Q`, and the χ² p-value of the angle histogram.
pub fn haar_p_values(samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng(seed);
    let q = sample_haar_so3(&mut rng);
    let rotated: Vec<f64> = (0..samples)
        .map(|_| (q * sample_haar_so3(&mut rng)).trace())
        .collect();
    let plain: Vec<f64> = (0..samples)
        .map(|_| sample_haar_so3(&mut rng).trace())
        .collect();
    let angles: Vec<f64> = plain.iter().map(|t| trace_angle(*t)).collect();
    (
        ks_two_sample(&rotated, &plain),
        angle_chi_square(&angles, 20),
    )
}

// ---- fitting ----

pub fn fit_camera() -> Camera {
    Camera {
        fx: 900.0,
        fy: 950.0,
        cx: 320.0,
        cy: 240.0,
    }
}

/// State a few meters in front of the camera.
pub fn placed_state(m: &KinematicModel, rng: &mut impl Rng) -> PoseState {
    let mut s = random_state(m, rng);
    s.t[2] += 3.0;
    s
}

/// Observations of `truth` with pixel noise and mixed confidences.
pub fn observe(
    m: &KinematicModel,
    truth: &PoseState,
    noise: f64,
    rng: &mut impl Rng,
) -> Vec<Observation2D> {
    let eval = LandmarkEvaluator::new(m);
    eval.landmarks(truth)
        .unwrap()
        .points
        .iter()
        .map(|p| {
            let uv = project(&fit_camera(), p).unwrap();
            Observation2D {
                u: uv.x + noise * normal(rng),
                v: uv.y + noise * normal(rng),
                confidence: [0.0, 0.3, 1.0][rng.random_range(0..3)],
            }
        })
        .collect()
}

pub fn random_constraints(
    n_landmarks: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<OrdinalConstraint> {
    (0..count)
        .map(|k| {
            let pick = |rng: &mut dyn rand::RngCore| rng.random_range(0..n_landmarks);
            let a0 = pick(rng);
            let b0 = (a0 + 1 + rng.random_range(0..n_landmarks - 1)) % n_landmarks;
            let (a, b) = if k % 2 == 0 {
                (DepthRef::Joint(a0), DepthRef::Edge(b0, pick(rng)))
            } else {
                (DepthRef::Edge(a0, pick(rng)), DepthRef::Joint(b0))
            };
            let relation = if rng.random::<bool>() {
                Relation::ACloser
            } else {
                Relation::BCloser
            };
            OrdinalConstraint { a, b, relation }
        })
        .collect()
}

/// FD check of `f` at `state`. The objective is rescaled to magnitude 0.1
/// there so central-difference roundoff (~1e-9·|f|) stays well below the
/// absolute floor; exact zeros such as the depth-order loss along the
/// optical axis would otherwise read as errors.
pub fn objective_gradient_error(
    m: &KinematicModel,
    state: &PoseState,
    f: impl Fn(&PoseState) -> (f64, PoseState),
) -> f64 {
    let (f0, grad) = f(state);
    let scale = 0.1 / f0.abs().max(0.1);
    let numeric = numeric_gradient(&state.to_flat(), |x| {
        scale * f(&PoseState::from_flat(x, m.shape_dim, m.pose_dim)).0
    });
    let analytic: Vec<f64> = grad.to_flat().iter().map(|g| g * scale).collect();
    max_rel_err(&analytic, &numeric)
}

/// Reprojection gradient with 6 px noise, so part of the residuals sit in
/// the Huber linear zone.
pub fn reprojection_gradient_error(trials: usize, seed: u64) -> f64 {
    let m = toy();
    let eval = LandmarkEvaluator::new(&m);
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let truth = placed_state(&m, &mut rng);
        let problem = FitProblem::new(fit_camera(), observe(&m, &truth, 6.0, &mut rng));
        let state = placed_state(&m, &mut rng);
        worst = worst.max(objective_gradient_error(&m, &state, |s| {
            reprojection_loss(&eval, &problem, s).unwrap()
        }));
    }
    worst
}

pub fn ordinal_gradient_error(trials: usize, seed: u64) -> f64 {
    let m = toy();
    let eval = LandmarkEvaluator::new(&m);
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let truth = placed_state(&m, &mut rng);
        let mut problem = FitProblem::new(fit_camera(), observe(&m, &truth, 1.0, &mut rng));
        problem.constraints = random_constraints(m.landmark_count(), 12, &mut rng);
        let state = placed_state(&m, &mut rng);
        worst = worst.max(objective_gradient_error(&m, &state, |s| {
            ordinal_loss(&eval, &problem, s).unwrap()
        }));
    }
    worst
}

/// Mean depth order error over mirror-ambiguous problems fitted without
/// and with the ordinal term.
pub fn ambiguity_order_errors(trials: usize, seed: u64) -> (f64, f64) {
    let m = toy();
    let mut rng = rng(seed);
    let (mut without, mut with) = (0.0, 0.0);
    for _ in 0..trials {
        let case = ambiguous_case(&m, &mut rng, 1.5);
        let mut problem = case.problem;
        problem.weights.w_ord = 0.0;
        without += fit(&m, &problem, None).unwrap().depth_order_error.unwrap();
        problem.weights.w_ord = 1.0;
        with += fit(&m, &problem, None).unwrap().depth_order_error.unwrap();
    }
    (without / trials as f64, with / trials as f64)
}
