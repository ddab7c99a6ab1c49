//! Levenberg-Marquardt polish of an Adam solution.
//!
//! The step solves `(H + λ·D) δ = −g` with the exact gradient `g` of
//! [`fit_loss`] and a positive semidefinite Gauss-Newton model `H`:
//! IRLS-weighted projection Jacobians for the Huber term, the softplus
//! curvature along each constrained depth gap, and the regularizer diagonal.

use nalgebra::{DMatrix, DVector, RowDVector};

use super::{fit_loss, huber, project_with_jacobian, sigmoid, FitError, FitLoss, FitProblem};
use crate::body_model::{landmark_jacobian, LandmarkEvaluator, ModelError, PoseState};

const LAMBDA_INIT: f64 = 1e-4;
const LAMBDA_MAX: f64 = 1e10;
/// Relative loss decrease below which an accepted step ends the polish.
const RELATIVE_TOL: f64 = 1e-12;

fn gauss_newton_hessian(
    evaluator: &LandmarkEvaluator<'_>,
    problem: &FitProblem,
    state: &PoseState,
) -> Result<DMatrix<f64>, FitError> {
    let model = evaluator.model();
    let jac = landmark_jacobian(model, state)?;
    let points = evaluator.landmarks(state)?.points;
    let n = state.len();
    let w = &problem.weights;
    let mut h = DMatrix::zeros(n, n);

    let total_conf: f64 = problem.observations.iter().map(|o| o.confidence).sum();
    if total_conf > 0.0 {
        for (i, (p, o)) in points.iter().zip(&problem.observations).enumerate() {
            if o.confidence <= 0.0 {
                continue;
            }
            let (uv, du, dv) = project_with_jacobian(&problem.camera, p)?;
            let r = (uv - nalgebra::Vector2::new(o.u, o.v)).norm();
            let (_, irls) = huber(r, problem.huber_delta);
            let rows = jac.rows(3 * i, 3);
            let ju: RowDVector<f64> = du.transpose() * rows;
            let jv: RowDVector<f64> = dv.transpose() * rows;
            let scale = w.w_2d * irls * o.confidence / total_conf;
            h += (ju.transpose() * &ju + jv.transpose() * &jv) * scale;
        }
    }

    if !problem.constraints.is_empty() {
        let depths: Vec<f64> = points.iter().map(|p| p.z).collect();
        let m = problem.constraints.len() as f64;
        let tau = problem.temperature;
        let mut coeff = vec![0.0; points.len()];
        for c in &problem.constraints {
            let x = c.gap(&depths) / tau;
            let s = sigmoid(x);
            coeff.iter_mut().for_each(|v| *v = 0.0);
            c.scatter_gap(1.0, &mut coeff);
            let mut grad_gap = RowDVector::zeros(n);
            for (l, k) in coeff.iter().enumerate() {
                if *k != 0.0 {
                    grad_gap += jac.row(3 * l + 2) * *k;
                }
            }
            h += grad_gap.transpose() * &grad_gap * (w.w_ord * s * (1.0 - s) / (tau * tau * m));
        }
    }

    let (sd, pd) = (state.beta.len(), state.theta.len());
    for k in 0..sd {
        h[(9 + k, 9 + k)] += 2.0 * w.w_reg_beta;
    }
    for k in 0..pd {
        h[(9 + sd + k, 9 + sd + k)] += 2.0 * w.w_reg_theta;
    }
    Ok(h)
}

/// Polish `state` for up to `problem.refine_iterations` accepted or
/// rejected steps. Returns the final state, its loss and the step count.
pub(super) fn refine(
    evaluator: &LandmarkEvaluator<'_>,
    problem: &FitProblem,
    state: PoseState,
    loss: FitLoss,
) -> Result<(PoseState, FitLoss, usize), FitError> {
    let (sd, pd) = (state.beta.len(), state.theta.len());
    let (mut state, mut loss) = (state, loss);
    let mut lambda = LAMBDA_INIT;
    let mut h = gauss_newton_hessian(evaluator, problem, &state)?;
    let mut grad = DVector::from_vec(fit_loss(evaluator, problem, &state)?.1.to_flat());
    let mut steps = 0;
    while steps < problem.refine_iterations && lambda < LAMBDA_MAX {
        steps += 1;
        let mut damped = h.clone();
        for k in 0..damped.nrows() {
            damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 4.0;
            continue;
        };
        let delta = chol.solve(&(-&grad));
        let x: Vec<f64> = state
            .to_flat()
            .iter()
            .zip(delta.iter())
            .map(|(a, d)| a + d)
            .collect();
        let candidate = PoseState::from_flat(&x, sd, pd);
        let trial = match fit_loss(evaluator, problem, &candidate) {
            Ok(t) => Some(t),
            Err(FitError::BehindCamera(_)) | Err(FitError::Model(ModelError::Rotation(_))) => None,
            Err(e) => return Err(e),
        };
        match trial {
            Some((l, g)) if l.total.is_finite() && l.total < loss.total => {
                let decrease = (loss.total - l.total) / loss.total.abs().max(f64::MIN_POSITIVE);
                state = candidate;
                loss = l;
                grad = DVector::from_vec(g.to_flat());
                lambda = (lambda / 3.0).max(1e-12);
                if decrease < RELATIVE_TOL {
                    break;
                }
                h = gauss_newton_hessian(evaluator, problem, &state)?;
            }
            _ => lambda *= 4.0,
        }
    }
    Ok((state, loss, steps))
}
