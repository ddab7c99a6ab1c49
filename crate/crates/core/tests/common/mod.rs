#![allow(dead_code)]

#[allow(dead_code)]
pub mod ambiguity;
#[allow(dead_code)]
pub mod hands;
#[allow(dead_code)]
pub mod oracles;

use bodylift::body_model::{KinematicModel, PoseState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Finite-difference step used by every gradient oracle.
pub const FD_STEP: f64 = 1e-6;
/// Entries below this magnitude are compared absolutely: central
/// differences at `FD_STEP` carry ~1e-10 of roundoff, so exact zeros
/// would otherwise read as large relative errors.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Relative error with an absolute floor for near-zero entries.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Random state with a well-conditioned root code.
pub fn random_state(model: &KinematicModel, rng: &mut impl Rng) -> PoseState {
    let mut s = PoseState::identity(model);
    for x in s.r.iter_mut() {
        *x += 0.4 * normal(rng);
    }
    for x in s.t.iter_mut() {
        *x = 0.1 * normal(rng);
    }
    for x in s.beta.iter_mut().chain(s.theta.iter_mut()) {
        *x = normal(rng);
    }
    s
}

/// Central-difference Jacobian, one column per input coordinate.
pub fn numeric_jacobian(x: &[f64], mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            up.iter()
                .zip(&down)
                .map(|(u, d)| (u - d) / (2.0 * FD_STEP))
                .collect()
        })
        .collect()
}
