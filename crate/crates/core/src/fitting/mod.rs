//! Fitting a body state to 2D keypoints under ordinal depth constraints.
//!
//! The camera sits at the world origin looking down +z, so a landmark's
//! depth is its world z coordinate.

mod io;
mod refine;
mod synth;

pub use io::{
    load_problem, parse_problem, problem_json, save_report, write_report_json, FitReportFile,
    TruthComparison,
};
pub use synth::{synthesize_problem, SynthConfig};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::{KinematicModel, LandmarkEvaluator, ModelError, PoseState};
use crate::rotation::{axis_angle, matrix_to_rot6d, rot6d_to_matrix};
use crate::trainer::{AdamConfig, AdamState};

/// Smallest depth accepted by [`project`], in meters.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("point at depth {0} m is behind the camera")]
    BehindCamera(f64),
    #[error("only {0} landmarks are observed, at least 4 are needed")]
    InsufficientObservations(usize),
    #[error("fit diverged in restart {restart} at iteration {iteration}")]
    Diverged { restart: usize, iteration: usize },
    #[error("depth order error needs at least one constraint")]
    EmptyConstraints,
    #[error("invalid fit problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(FitError::InvalidProblem(
                "focal lengths must be positive".into(),
            ));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(FitError::InvalidProblem(
                "principal point must be finite".into(),
            ));
        }
        Ok(())
    }
}

pub fn project(camera: &Camera, p: &Vector3<f64>) -> Result<Vector2<f64>, FitError> {
    if !(p.z > MIN_DEPTH) {
        return Err(FitError::BehindCamera(p.z));
    }
    Ok(Vector2::new(
        camera.fx * p.x / p.z + camera.cx,
        camera.fy * p.y / p.z + camera.cy,
    ))
}

/// Projection and its Jacobian rows `(du/dp, dv/dp)`.
fn project_with_jacobian(
    camera: &Camera,
    p: &Vector3<f64>,
) -> Result<(Vector2<f64>, Vector3<f64>, Vector3<f64>), FitError> {
    let uv = project(camera, p)?;
    let iz = 1.0 / p.z;
    let du = Vector3::new(camera.fx * iz, 0.0, -camera.fx * p.x * iz * iz);
    let dv = Vector3::new(0.0, camera.fy * iz, -camera.fy * p.y * iz * iz);
    Ok((uv, du, dv))
}

/// One observed keypoint; confidence 0 marks it unobserved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation2D {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

/// A landmark, or a skeleton edge represented by its endpoint landmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthRef {
    Joint(usize),
    Edge(usize, usize),
}

impl DepthRef {
    pub fn depth(&self, depths: &[f64]) -> f64 {
        match *self {
            DepthRef::Joint(i) => depths[i],
            DepthRef::Edge(i, j) => 0.5 * (depths[i] + depths[j]),
        }
    }

    fn scatter(&self, g: f64, out: &mut [f64]) {
        match *self {
            DepthRef::Joint(i) => out[i] += g,
            DepthRef::Edge(i, j) => {
                out[i] += 0.5 * g;
                out[j] += 0.5 * g;
            }
        }
    }

    fn indices(&self) -> [usize; 2] {
        match *self {
            DepthRef::Joint(i) => [i, i],
            DepthRef::Edge(i, j) => [i, j],
        }
    }

    fn same_element(&self, other: &DepthRef) -> bool {
        let (mut a, mut b) = (self.indices(), other.indices());
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    ACloser,
    BCloser,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrdinalConstraint {
    pub a: DepthRef,
    pub b: DepthRef,
    pub relation: Relation,
}

impl OrdinalConstraint {
    /// Signed depth gap that the relation wants negative.
    pub fn gap(&self, depths: &[f64]) -> f64 {
        let (za, zb) = (self.a.depth(depths), self.b.depth(depths));
        match self.relation {
            Relation::ACloser => za - zb,
            Relation::BCloser => zb - za,
        }
    }

    fn scatter_gap(&self, g: f64, out: &mut [f64]) {
        let s = match self.relation {
            Relation::ACloser => 1.0,
            Relation::BCloser => -1.0,
        };
        self.a.scatter(s * g, out);
        self.b.scatter(-s * g, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitWeights {
    pub w_2d: f64,
    pub w_ord: f64,
    pub w_reg_beta: f64,
    pub w_reg_theta: f64,
}

impl Default for FitWeights {
    fn default() -> Self {
        Self {
            w_2d: 1.0,
            w_ord: 1.0,
            w_reg_beta: 0.01,
            w_reg_theta: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProblem {
    pub camera: Camera,
    /// One entry per model landmark.
    pub observations: Vec<Observation2D>,
    #[serde(default)]
    pub constraints: Vec<OrdinalConstraint>,
    #[serde(default)]
    pub weights: FitWeights,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Softplus temperature of the ordinal term, in meters.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Huber threshold of the reprojection term, in pixels.
    #[serde(default = "default_huber")]
    pub huber_delta: f64,
    /// Damped Gauss-Newton steps after the Adam phase; 0 disables them.
    #[serde(default = "default_refine")]
    pub refine_iterations: usize,
}

fn default_iterations() -> usize {
    400
}
fn default_step_size() -> f64 {
    0.02
}
fn default_restarts() -> usize {
    3
}
fn default_temperature() -> f64 {
    0.01
}
fn default_huber() -> f64 {
    5.0
}
fn default_refine() -> usize {
    50
}

impl FitProblem {
    /// Problem with default settings and no constraints.
    pub fn new(camera: Camera, observations: Vec<Observation2D>) -> Self {
        Self {
            camera,
            observations,
            constraints: Vec::new(),
            weights: FitWeights::default(),
            iterations: default_iterations(),
            step_size: default_step_size(),
            seed: 0,
            restarts: default_restarts(),
            temperature: default_temperature(),
            huber_delta: default_huber(),
            refine_iterations: default_refine(),
        }
    }

    pub fn observed_count(&self) -> usize {
        self.observations
            .iter()
            .filter(|o| o.confidence > 0.0)
            .count()
    }

    pub fn validate(&self, model: &KinematicModel) -> Result<(), FitError> {
        let bad = |m: String| Err(FitError::InvalidProblem(m));
        self.camera.validate()?;
        let n = model.landmark_count();
        if self.observations.len() != n {
            return bad(format!(
                "{} observations for {n} landmarks",
                self.observations.len()
            ));
        }
        for (i, o) in self.observations.iter().enumerate() {
            if !(0.0..=1.0).contains(&o.confidence) {
                return bad(format!(
                    "observation {i}: confidence {} outside [0, 1]",
                    o.confidence
                ));
            }
            if o.confidence > 0.0 && !(o.u.is_finite() && o.v.is_finite()) {
                return bad(format!("observation {i}: non-finite pixel"));
            }
        }
        for (k, c) in self.constraints.iter().enumerate() {
            if c.a
                .indices()
                .into_iter()
                .chain(c.b.indices())
                .any(|i| i >= n)
            {
                return bad(format!("constraint {k}: landmark index out of range"));
            }
            if c.a.same_element(&c.b) {
                return bad(format!(
                    "constraint {k}: both sides refer to the same element"
                ));
            }
        }
        let w = &self.weights;
        if ![w.w_2d, w.w_ord, w.w_reg_beta, w.w_reg_theta]
            .iter()
            .all(|x| *x >= 0.0 && x.is_finite())
        {
            return bad("weights must be finite and non-negative".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step size must be positive".into());
        }
        if !(self.temperature > 0.0 && self.huber_delta > 0.0) {
            return bad("temperature and Huber threshold must be positive".into());
        }
        if self.restarts == 0 {
            return bad("at least one restart is required".into());
        }
        Ok(())
    }
}

/// Huber value and derivative factor `dH/dr = factor·r` for residual norm `a`.
fn huber(a: f64, delta: f64) -> (f64, f64) {
    if a <= delta {
        (0.5 * a * a, 1.0)
    } else {
        (delta * (a - 0.5 * delta), delta / a)
    }
}

/// Confidence-weighted mean Huber reprojection error of world landmarks and
/// its gradient with respect to them.
pub fn reprojection_terms(
    problem: &FitProblem,
    landmarks: &[Vector3<f64>],
) -> Result<(f64, Vec<Vector3<f64>>), FitError> {
    let total_conf: f64 = problem.observations.iter().map(|o| o.confidence).sum();
    let mut grad = vec![Vector3::zeros(); landmarks.len()];
    if total_conf <= 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for ((p, o), g) in landmarks
        .iter()
        .zip(&problem.observations)
        .zip(grad.iter_mut())
    {
        if o.confidence <= 0.0 {
            continue;
        }
        let (uv, du, dv) = project_with_jacobian(&problem.camera, p)?;
        let r = uv - Vector2::new(o.u, o.v);
        let (h, factor) = huber(r.norm(), problem.huber_delta);
        let w = o.confidence / total_conf;
        loss += w * h;
        *g = (du * r.x + dv * r.y) * (w * factor);
    }
    Ok((loss, grad))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean softplus ranking loss over `constraints` and its gradient with
/// respect to the per-landmark depths.
pub fn ordinal_terms(
    constraints: &[OrdinalConstraint],
    depths: &[f64],
    temperature: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; depths.len()];
    if constraints.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / constraints.len() as f64;
    let mut loss = 0.0;
    for c in constraints {
        let x = c.gap(depths) / temperature;
        loss += scale * softplus(x);
        c.scatter_gap(scale * sigmoid(x) / temperature, &mut grad);
    }
    (loss, grad)
}

/// Fraction of constraints whose depths violate the relation; ties violate.
pub fn depth_order_error(
    constraints: &[OrdinalConstraint],
    depths: &[f64],
) -> Result<f64, FitError> {
    if constraints.is_empty() {
        return Err(FitError::EmptyConstraints);
    }
    let bad = constraints
        .iter()
        .filter(|c| !(c.gap(depths) < 0.0))
        .count();
    Ok(bad as f64 / constraints.len() as f64)
}

pub fn depths(landmarks: &[Vector3<f64>]) -> Vec<f64> {
    landmarks.iter().map(|p| p.z).collect()
}

/// Reprojection loss of `state` and its gradient with respect to the state.
pub fn reprojection_loss(
    evaluator: &LandmarkEvaluator<'_>,
    problem: &FitProblem,
    state: &PoseState,
) -> Result<(f64, PoseState), FitError> {
    let cache = evaluator.forward(state)?;
    let (loss, g) = reprojection_terms(problem, &cache.landmarks.points)?;
    Ok((loss, evaluator.vjp(&cache, &g)))
}

/// Ordinal loss of `state` over the problem's constraints and its gradient.
pub fn ordinal_loss(
    evaluator: &LandmarkEvaluator<'_>,
    problem: &FitProblem,
    state: &PoseState,
) -> Result<(f64, PoseState), FitError> {
    let cache = evaluator.forward(state)?;
    let pts = &cache.landmarks.points;
    let (loss, gz) = ordinal_terms(&problem.constraints, &depths(pts), problem.temperature);
    let g: Vec<Vector3<f64>> = gz.iter().map(|z| Vector3::new(0.0, 0.0, *z)).collect();
    Ok((loss, evaluator.vjp(&cache, &g)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLoss {
    pub total: f64,
    pub reprojection: f64,
    /// `None` when the problem has no constraints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<f64>,
    pub reg_beta: f64,
    pub reg_theta: f64,
}

/// Weighted fitting objective and its gradient with respect to the state.
pub fn fit_loss(
    evaluator: &LandmarkEvaluator<'_>,
    problem: &FitProblem,
    state: &PoseState,
) -> Result<(FitLoss, PoseState), FitError> {
    let cache = evaluator.forward(state)?;
    let points = &cache.landmarks.points;
    let w = &problem.weights;
    let (reproj, mut g_points) = reprojection_terms(problem, points)?;
    g_points.iter_mut().for_each(|g| *g *= w.w_2d);
    let ordinal = if problem.constraints.is_empty() {
        None
    } else {
        let (l, gz) = ordinal_terms(&problem.constraints, &depths(points), problem.temperature);
        for (g, dz) in g_points.iter_mut().zip(gz) {
            g.z += w.w_ord * dz;
        }
        Some(l)
    };
    let mut grad = evaluator.vjp(&cache, &g_points);
    let reg_beta: f64 = state.beta.iter().map(|b| b * b).sum();
    let reg_theta: f64 = state.theta.iter().map(|t| t * t).sum();
    for (g, b) in grad.beta.iter_mut().zip(&state.beta) {
        *g += 2.0 * w.w_reg_beta * b;
    }
    for (g, t) in grad.theta.iter_mut().zip(&state.theta) {
        *g += 2.0 * w.w_reg_theta * t;
    }
    let total = w.w_2d * reproj
        + w.w_ord * ordinal.unwrap_or(0.0)
        + w.w_reg_beta * reg_beta
        + w.w_reg_theta * reg_theta;
    Ok((
        FitLoss {
            total,
            reprojection: reproj,
            ordinal,
            reg_beta,
            reg_theta,
        },
        grad,
    ))
}

/// Neutral state placed so its rest landmarks roughly cover the observed
/// keypoints: depth from the ratio of 3D to 2D spread, x/y from the
/// back-projected keypoint centroid.
pub fn initial_state(
    evaluator: &LandmarkEvaluator<'_>,
    problem: &FitProblem,
) -> Result<PoseState, FitError> {
    let model = evaluator.model();
    let mut state = PoseState::identity(model);
    let rest = evaluator.landmarks(&state)?.points;
    let cam = &problem.camera;
    let observed: Vec<(usize, f64, f64)> = problem
        .observations
        .iter()
        .enumerate()
        .filter(|(_, o)| o.confidence > 0.0)
        .map(|(i, o)| (i, (o.u - cam.cx) / cam.fx, (o.v - cam.cy) / cam.fy))
        .collect();
    if observed.len() < 4 {
        return Err(FitError::InsufficientObservations(observed.len()));
    }
    let n = observed.len() as f64;
    let (mx, my) = observed
        .iter()
        .fold((0.0, 0.0), |(a, b), (_, x, y)| (a + x / n, b + y / n));
    let rest_mean: Vector3<f64> = observed
        .iter()
        .map(|(i, _, _)| rest[*i])
        .sum::<Vector3<f64>>()
        / n;
    let spread_2d = observed
        .iter()
        .map(|(_, x, y)| (x - mx).powi(2) + (y - my).powi(2))
        .sum::<f64>()
        .sqrt();
    let spread_3d = observed
        .iter()
        .map(|(i, _, _)| (rest[*i] - rest_mean).xy().norm_squared())
        .sum::<f64>()
        .sqrt();
    let depth = if spread_2d > 1e-9 {
        spread_3d / spread_2d
    } else {
        3.0
    };
    state.t = [
        mx * depth - rest_mean.x,
        my * depth - rest_mean.y,
        depth - rest_mean.z,
    ];
    Ok(state)
}

/// Restart `k` of a fit: the initial state itself for `k = 0`, otherwise a
/// seeded perturbation of its root rotation and pose latent.
pub fn restart_state(init: &PoseState, seed: u64, k: usize) -> Result<PoseState, FitError> {
    if k == 0 {
        return Ok(init.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut s = init.clone();
    let w = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * RESTART_ROTATION_STD;
    let base = rot6d_to_matrix(&s.r).map_err(ModelError::from)?;
    let turn = match w.try_normalize(1e-12) {
        Some(axis) => axis_angle(&axis, w.norm()),
        None => nalgebra::Matrix3::identity(),
    };
    s.r = matrix_to_rot6d(&(turn * base)).map_err(ModelError::from)?;
    for x in s.theta.iter_mut() {
        *x += RESTART_POSE_STD * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(s)
}

/// Std of the root rotation perturbation per axis, radians.
pub const RESTART_ROTATION_STD: f64 = 0.5;
/// Std of the pose latent perturbation.
pub const RESTART_POSE_STD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub final_loss: f64,
    pub iterations: usize,
    #[serde(default)]
    pub refine_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub state: PoseState,
    pub loss: FitLoss,
    pub initial_loss: FitLoss,
    /// Index of the restart that produced `state`.
    pub chosen_restart: usize,
    pub restarts: Vec<RestartSummary>,
    /// Violated fraction of the problem's constraints at the start and end
    /// of the chosen restart; `None` without constraints.
    pub depth_order_error_initial: Option<f64>,
    pub depth_order_error: Option<f64>,
}

/// Fit `problem` starting from `init` (or a neutral state placed in front
/// of the camera), keeping the restart with the lowest final loss.
pub fn fit(
    model: &KinematicModel,
    problem: &FitProblem,
    init: Option<&PoseState>,
) -> Result<FitReport, FitError> {
    problem.validate(model)?;
    let observed = problem.observed_count();
    if observed < 4 {
        return Err(FitError::InsufficientObservations(observed));
    }
    let evaluator = LandmarkEvaluator::new(model);
    let start = match init {
        Some(s) => {
            s.check(model)?;
            s.clone()
        }
        None => initial_state(&evaluator, problem)?,
    };
    let adam = AdamConfig {
        learning_rate: problem.step_size,
        ..AdamConfig::default()
    };
    let order_error = |state: &PoseState| -> Result<Option<f64>, FitError> {
        if problem.constraints.is_empty() {
            return Ok(None);
        }
        let pts = evaluator.landmarks(state)?.points;
        Ok(Some(depth_order_error(
            &problem.constraints,
            &depths(&pts),
        )?))
    };

    let mut best: Option<(FitLoss, PoseState, usize, FitLoss, Option<f64>)> = None;
    let mut summaries = Vec::with_capacity(problem.restarts);
    for k in 0..problem.restarts {
        let s0 = restart_state(&start, problem.seed, k)?;
        let (loss0, _) = fit_loss(&evaluator, problem, &s0)?;
        let err0 = order_error(&s0)?;
        let (state, loss, iters) = descend(&evaluator, problem, &adam, s0, k)?;
        let (state, loss, refine_steps) = refine::refine(&evaluator, problem, state, loss)?;
        summaries.push(RestartSummary {
            final_loss: loss.total,
            iterations: iters,
            refine_steps,
        });
        if best.as_ref().is_none_or(|b| loss.total < b.0.total) {
            best = Some((loss, state, k, loss0, err0));
        }
    }
    let (loss, state, chosen, initial_loss, err0) = best.expect("at least one restart");
    let depth_order_error = order_error(&state)?;
    Ok(FitReport {
        state,
        loss,
        initial_loss,
        chosen_restart: chosen,
        restarts: summaries,
        depth_order_error_initial: err0,
        depth_order_error,
    })
}

/// Adam descent from `state`; returns the lowest-loss iterate. A step that
/// puts a landmark behind the camera is undone and the step size halved.
fn descend(
    evaluator: &LandmarkEvaluator<'_>,
    problem: &FitProblem,
    adam: &AdamConfig,
    state: PoseState,
    restart: usize,
) -> Result<(PoseState, FitLoss, usize), FitError> {
    let model = evaluator.model();
    let (sd, pd) = (model.shape_dim, model.pose_dim);
    let mut x = state.to_flat();
    let mut opt = AdamState::new(x.len());
    let mut cfg = adam.clone();
    let (loss, mut grad) = fit_loss(evaluator, problem, &state)?;
    let mut best = (state, loss);
    let mut done = 0;
    // cosine decay from the (possibly halved) base rate
    let mut base_rate = adam.learning_rate;
    for it in 0..problem.iterations {
        let prev_x = x.clone();
        let prev_opt = opt.clone();
        let progress = it as f64 / problem.iterations as f64;
        cfg.learning_rate = base_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.update(&mut x, &grad.to_flat(), &cfg);
        let candidate = PoseState::from_flat(&x, sd, pd);
        match fit_loss(evaluator, problem, &candidate) {
            Ok((l, g)) => {
                if !l.total.is_finite() || !g.is_finite() {
                    return Err(FitError::Diverged {
                        restart,
                        iteration: it,
                    });
                }
                grad = g;
                if l.total < best.1.total {
                    best = (candidate, l);
                }
            }
            Err(FitError::BehindCamera(_)) | Err(FitError::Model(ModelError::Rotation(_))) => {
                x = prev_x;
                opt = prev_opt;
                base_rate *= 0.5;
                if base_rate < adam.learning_rate * 1e-6 {
                    return Err(FitError::Diverged {
                        restart,
                        iteration: it,
                    });
                }
            }
            Err(e) => return Err(e),
        }
        done = it + 1;
    }
    Ok((best.0, best.1, done))
}
