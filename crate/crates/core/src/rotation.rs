//! Rotation representations.
//!
//! The continuous 6D representation stores the first two columns of a
//! rotation matrix. Decoding runs Gram-Schmidt on the two 3-vectors and
//! completes the frame with a cross product.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// 6D rotation code: `[c0.x, c0.y, c0.z, c1.x, c1.y, c1.z]`.
pub type Rot6 = [f64; 6];

/// The 6D code of the identity rotation.
pub const IDENTITY_6D: Rot6 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Vectors at or below this norm cannot be normalized.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotationError {
    #[error("degenerate 6D rotation: cannot normalize a vector of norm {0:e}")]
    DegenerateRotation(f64),
    #[error("matrix is not a rotation (orthogonality error {orth:e}, det {det})")]
    NotARotation { orth: f64, det: f64 },
}

/// Intermediate values of [`rot6d_to_matrix`] needed by its adjoint.
#[derive(Debug, Clone)]
pub struct Rot6Cache {
    a1: Vector3<f64>,
    a2: Vector3<f64>,
    y: Vector3<f64>,
    norm_x: f64,
    norm_u: f64,
}

fn split(r: &Rot6) -> (Vector3<f64>, Vector3<f64>) {
    (
        Vector3::new(r[0], r[1], r[2]),
        Vector3::new(r[3], r[4], r[5]),
    )
}

pub fn rot6d_to_matrix(r: &Rot6) -> Result<Matrix3<f64>, RotationError> {
    rot6d_to_matrix_cached(r).map(|(m, _)| m)
}

/// Gram-Schmidt decode that also returns the cache for [`rot6d_vjp`].
pub fn rot6d_to_matrix_cached(r: &Rot6) -> Result<(Matrix3<f64>, Rot6Cache), RotationError> {
    let (x, y) = split(r);
    let norm_x = x.norm();
    if !(norm_x > DEGENERATE_NORM) {
        return Err(RotationError::DegenerateRotation(norm_x));
    }
    let a1 = x / norm_x;
    let u = y - a1 * a1.dot(&y);
    let norm_u = u.norm();
    if !(norm_u > DEGENERATE_NORM) {
        return Err(RotationError::DegenerateRotation(norm_u));
    }
    let a2 = u / norm_u;
    let a3 = a1.cross(&a2);
    let m = Matrix3::from_columns(&[a1, a2, a3]);
    Ok((
        m,
        Rot6Cache {
            a1,
            a2,
            y,
            norm_x,
            norm_u,
        },
    ))
}

/// Pull a gradient with respect to the decoded matrix back onto the 6D code.
pub fn rot6d_vjp(cache: &Rot6Cache, grad_matrix: &Matrix3<f64>) -> Rot6 {
    let Rot6Cache {
        a1,
        a2,
        y,
        norm_x,
        norm_u,
    } = cache;
    let g3: Vector3<f64> = grad_matrix.column(2).into();
    // a3 = a1 x a2
    let mut g1: Vector3<f64> = grad_matrix.column(0).into_owned() + a2.cross(&g3);
    let g2: Vector3<f64> = grad_matrix.column(1).into_owned() + g3.cross(a1);

    let gu = (g2 - a2 * a2.dot(&g2)) / *norm_u;
    let a1_dot_y = a1.dot(y);
    let gy = gu - a1 * a1.dot(&gu);
    g1 -= gu * a1_dot_y + y * a1.dot(&gu);

    let gx = (g1 - a1 * a1.dot(&g1)) / *norm_x;
    [gx.x, gx.y, gx.z, gy.x, gy.y, gy.z]
}

/// Orthogonality defect `max |RᵀR - I|`.
pub fn orthogonality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).amax()
}

pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    orthogonality_error(m) <= tol && (m.determinant() - 1.0).abs() <= tol
}

pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rot6, RotationError> {
    if !is_rotation(m, 1e-6) {
        return Err(RotationError::NotARotation {
            orth: orthogonality_error(m),
            det: m.determinant(),
        });
    }
    Ok([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ])
}

/// Rotation angle of `a` relative to `b`, in radians, via the trace formula.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Squared geodesic angle and its gradient with respect to `a`.
pub fn geodesic_sq_with_grad(a: &Matrix3<f64>, b: &Matrix3<f64>) -> (f64, Matrix3<f64>) {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    let cc = c.clamp(-1.0, 1.0);
    let angle = cc.acos();
    // d(angle^2)/dc = -2 angle / sin(angle); the ratio tends to 1 at angle 0.
    let sin = angle.sin();
    let ratio = if angle < 1e-4 {
        1.0 + angle * angle / 6.0
    } else if sin < 1e-12 {
        // antipodal: gradient undefined, use the largest finite slope
        angle / 1e-12
    } else {
        angle / sin
    };
    let dl_dc = if c > 1.0 || c < -1.0 {
        0.0
    } else {
        -2.0 * ratio
    };
    (angle * angle, b * (dl_dc / 2.0))
}

pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}
