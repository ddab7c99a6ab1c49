//! Landmark error metrics. All distances are returned in millimeters.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::body_model::{LandmarkLayout, LandmarkSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("landmark layouts differ: {0}")]
    LayoutMismatch(String),
    #[error("degenerate point configuration (collinear or coincident points)")]
    DegenerateConfiguration,
    #[error("ground-truth hand has zero size")]
    ZeroHandSize,
}

fn check_pair(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LayoutMismatch(format!(
            "{} vs {} landmarks",
            pred.len(),
            gt.len()
        )));
    }
    if pred.frame != gt.frame {
        return Err(MetricsError::LayoutMismatch(format!(
            "frames {:?} vs {:?}",
            pred.frame, gt.frame
        )));
    }
    if pred.is_empty() {
        return Err(MetricsError::LayoutMismatch("empty landmark sets".into()));
    }
    Ok(())
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64
}

/// Mean per-joint position error in millimeters (inputs in meters).
pub fn mpjpe(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<f64, MetricsError> {
    check_pair(pred, gt)?;
    Ok(1000.0 * mean_distance(&pred.points, &gt.points))
}

/// `x ↦ s R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares alignment of `src` onto `dst` (Umeyama).
///
/// With `with_scale = false` the scale is pinned to 1 (rigid alignment).
/// The rotation is always proper; a reflection between the sets is not
/// absorbed.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Similarity, MetricsError> {
    if src.len() != dst.len() {
        return Err(MetricsError::LayoutMismatch(format!(
            "{} vs {} points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(MetricsError::DegenerateConfiguration);
    }
    let n = src.len() as f64;
    let mu_s = centroid(src);
    let mu_d = centroid(dst);
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_s;
        cov += (d - mu_d) * sc.transpose();
        scatter += sc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= n;
    var_s /= n;

    let spread = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(MetricsError::DegenerateConfiguration);
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        // singular values are sorted in decreasing order: flip the smallest
        let min_idx = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("three singular values");
        signs[min_idx] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = if with_scale {
        svd.singular_values.dot(&signs) / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Similarity transform that best maps `pred` onto `gt`.
pub fn procrustes_align(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<Similarity, MetricsError> {
    check_pair(pred, gt)?;
    umeyama(&pred.points, &gt.points, true)
}

/// MPJPE after optimal similarity alignment of `pred` onto `gt`.
pub fn mpjpe_pa(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<f64, MetricsError> {
    mpjpe_aligned(pred, gt, true)
}

/// MPJPE after alignment; `with_scale = false` restricts to rigid motions.
pub fn mpjpe_aligned(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    with_scale: bool,
) -> Result<f64, MetricsError> {
    check_pair(pred, gt)?;
    let sim = umeyama(&pred.points, &gt.points, with_scale)?;
    let aligned: Vec<Vector3<f64>> = pred.points.iter().map(|p| sim.apply(p)).collect();
    Ok(1000.0 * mean_distance(&aligned, &gt.points))
}

/// Mean per-landmark hand error divided by the ground-truth hand size
/// (wrist to middle fingertip). Dimensionless.
pub fn normalized_hand_error(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    layout: &LandmarkLayout,
) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() || pred.len() != layout.left_hand {
        return Err(MetricsError::LayoutMismatch(format!(
            "hands need {} landmarks, got {} and {}",
            layout.left_hand,
            pred.len(),
            gt.len()
        )));
    }
    let size = (gt[layout.hand_middle_tip] - gt[layout.hand_wrist]).norm();
    if !(size > 0.0) {
        return Err(MetricsError::ZeroHandSize);
    }
    Ok(mean_distance(pred, gt) / size)
}
