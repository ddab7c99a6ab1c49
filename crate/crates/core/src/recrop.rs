//! Oriented square crops around hands.
//!
//! Pixel coordinates throughout. A crop's `angle` is the rotation taking
//! the crop's up axis `(0, 1)` to the hand axis in the image, so an axis
//! pointing along `+y` gives angle 0.

use nalgebra::{Rotation2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEED_SCALE: f64 = 2.0;
pub const REFINED_SCALE: f64 = 1.3;
/// Hand landmarks spanning the canonical axis: wrist, middle-finger base.
pub const HAND_AXIS: (usize, usize) = (0, 9);

#[derive(Debug, Error, PartialEq)]
pub enum RecropError {
    #[error("axis endpoints coincide")]
    DegenerateAxis,
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("axis index {0} out of range")]
    BadIndex(usize),
    #[error("crop side must be positive")]
    EmptyCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedCrop {
    pub center: Vector2<f64>,
    pub side: f64,
    pub angle: f64,
}

impl OrientedCrop {
    /// Corners in counter-clockwise order (for a y-up frame).
    pub fn corners(&self) -> [Vector2<f64>; 4] {
        let r = Rotation2::new(self.angle);
        let h = 0.5 * self.side;
        [(-h, -h), (h, -h), (h, h), (-h, h)].map(|(x, y)| self.center + r * Vector2::new(x, y))
    }

    pub fn area(&self) -> f64 {
        self.side * self.side
    }
}

/// `x ↦ scale · R(angle) · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform2D {
    pub scale: f64,
    pub angle: f64,
    pub translation: Vector2<f64>,
}

impl SimilarityTransform2D {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            angle: 0.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        Rotation2::new(self.angle) * p * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = Rotation2::new(-self.angle);
        Self {
            scale: 1.0 / self.scale,
            angle: -self.angle,
            translation: -(r_inv * self.translation) / self.scale,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            angle: self.angle + other.angle,
            translation: self.apply(&other.translation),
        }
    }

    /// Image of a crop under this transform.
    pub fn apply_crop(&self, crop: &OrientedCrop) -> OrientedCrop {
        OrientedCrop {
            center: self.apply(&crop.center),
            side: crop.side * self.scale,
            angle: crop.angle + self.angle,
        }
    }
}

fn centroid(points: &[Vector2<f64>]) -> Vector2<f64> {
    points.iter().sum::<Vector2<f64>>() / points.len() as f64
}

/// Square crop centered on the centroid of `points`, turned so that
/// `points[i] → points[j]` points up, with half-side `scale` times the
/// largest offset from the centroid along either crop axis.
pub fn crop_from_landmarks(
    points: &[Vector2<f64>],
    axis: (usize, usize),
    scale: f64,
) -> Result<OrientedCrop, RecropError> {
    if points.len() < 2 {
        return Err(RecropError::TooFewPoints(points.len()));
    }
    for idx in [axis.0, axis.1] {
        if idx >= points.len() {
            return Err(RecropError::BadIndex(idx));
        }
    }
    let v = points[axis.1] - points[axis.0];
    if axis.0 == axis.1 || v.norm() == 0.0 {
        return Err(RecropError::DegenerateAxis);
    }
    let angle = (-v.x).atan2(v.y);
    let center = centroid(points);
    let to_crop = Rotation2::new(-angle);
    let half = points
        .iter()
        .map(|p| {
            let q = to_crop * (p - center);
            q.x.abs().max(q.y.abs())
        })
        .fold(0.0, f64::max);
    let side = 2.0 * scale * half;
    if !(side > 0.0) {
        return Err(RecropError::EmptyCrop);
    }
    Ok(OrientedCrop {
        center,
        side,
        angle,
    })
}

/// Image → crop-pixel transform for a crop rendered at `resolution`.
/// The crop corner at offset `(-side/2, -side/2)` maps to the origin.
pub fn crop_to_transform(crop: &OrientedCrop, resolution: f64) -> SimilarityTransform2D {
    let scale = resolution / crop.side;
    let angle = -crop.angle;
    let half = Vector2::new(0.5 * resolution, 0.5 * resolution);
    SimilarityTransform2D {
        scale,
        angle,
        translation: half - Rotation2::new(angle) * crop.center * scale,
    }
}

/// Crop-pixel → image transform.
pub fn crop_from_transform(crop: &OrientedCrop, resolution: f64) -> SimilarityTransform2D {
    crop_to_transform(crop, resolution).inverse()
}

/// Crop recomputed from the full 21-point hand. Falls back to `crop` when
/// the landmarks do not define an axis or an extent.
pub fn refine_crop(crop: &OrientedCrop, landmarks: &[Vector2<f64>], scale: f64) -> OrientedCrop {
    crop_from_landmarks(landmarks, HAND_AXIS, scale).unwrap_or(*crop)
}

fn cross(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| cross(poly[i], poly[(i + 1) % n]))
        .sum::<f64>()
        .abs()
}

/// Clip `subject` by the convex counter-clockwise polygon `clip`.
fn clip_convex(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut out = subject.to_vec();
    for k in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % clip.len()]);
        let side = |p: Vector2<f64>| cross(b - a, p - a);
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let (p, q) = (input[i], input[(i + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                out.push(p + (q - p) * (sp / (sp - sq)));
            }
        }
    }
    out
}

/// Intersection over union of two oriented squares.
pub fn crop_iou(a: &OrientedCrop, b: &OrientedCrop) -> f64 {
    let inter = polygon_area(&clip_convex(&a.corners(), &b.corners()));
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}
