//! Synthetic 2D hands for crop-pipeline simulations.

use bodylift::recrop::{
    crop_from_landmarks, crop_iou, refine_crop, OrientedCrop, HAND_AXIS, REFINED_SCALE, SEED_SCALE,
};
use nalgebra::{Rotation2, Vector2};
use rand::Rng;

use super::normal;

/// Open right hand, wrist at the origin, fingers along +y, unit length
/// from wrist to middle fingertip.
const TEMPLATE: [[f64; 2]; 21] = [
    [0.0, 0.0],
    [-0.14, 0.12],
    [-0.25, 0.23],
    [-0.33, 0.33],
    [-0.40, 0.43],
    [-0.12, 0.48],
    [-0.13, 0.67],
    [-0.14, 0.80],
    [-0.15, 0.92],
    [0.0, 0.50],
    [0.0, 0.71],
    [0.0, 0.86],
    [0.0, 1.0],
    [0.11, 0.48],
    [0.12, 0.66],
    [0.13, 0.79],
    [0.14, 0.90],
    [0.21, 0.42],
    [0.23, 0.56],
    [0.25, 0.66],
    [0.26, 0.75],
];

/// Palm landmarks a body model reports for a hand: wrist, index base,
/// pinky base, thumb base. The first two give the seed crop axis.
pub const PALM: [usize; 4] = [0, 5, 17, 2];

/// Template with random finger curl, placed by a random similarity.
pub fn random_hand(rng: &mut impl Rng) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = TEMPLATE.iter().map(|p| Vector2::new(p[0], p[1])).collect();
    for finger in 0..5 {
        let base = 1 + 4 * finger;
        let curl: f64 = rng.random_range(0.4..1.0);
        let root = pts[base];
        for k in base + 1..base + 4 {
            pts[k] = root + (pts[k] - root) * curl;
        }
    }
    let size: f64 = rng.random_range(40.0..160.0);
    let rot = Rotation2::new(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
    let shift = Vector2::new(
        rng.random_range(100.0..1100.0),
        rng.random_range(100.0..700.0),
    );
    if rng.random::<bool>() {
        // left hand
        pts.iter_mut().for_each(|p| p.x = -p.x);
    }
    pts.iter().map(|p| rot * p * size + shift).collect()
}

fn hand_size(hand: &[Vector2<f64>]) -> f64 {
    (hand[12] - hand[0]).norm()
}

fn jitter(points: &[Vector2<f64>], sigma: f64, rng: &mut impl Rng) -> Vec<Vector2<f64>> {
    points
        .iter()
        .map(|p| p + Vector2::new(normal(rng), normal(rng)) * sigma)
        .collect()
}

fn inside(crop: &OrientedCrop, p: &Vector2<f64>) -> bool {
    let q = Rotation2::new(-crop.angle) * (p - crop.center);
    q.x.abs().max(q.y.abs()) <= 0.5 * crop.side
}

/// Landmarks a hand model would predict from `crop`: small errors inside
/// the crop, large errors for the parts it cut off.
fn predict_in_crop(
    hand: &[Vector2<f64>],
    crop: &OrientedCrop,
    rng: &mut impl Rng,
) -> Vec<Vector2<f64>> {
    let size = hand_size(hand);
    hand.iter()
        .map(|p| {
            let sigma = if inside(crop, p) { 0.02 } else { 0.10 } * size;
            p + Vector2::new(normal(rng), normal(rng)) * sigma
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineScores {
    pub raw: f64,
    pub refined: f64,
    pub stale: f64,
}

/// Mean IoU against the ideal crop for `count` hands: the seed crop from
/// noisy palm landmarks, its refinement from the hand landmarks predicted
/// inside it, and a crop refined from the previous frame's landmarks.
pub fn simulate_pipeline(count: usize, rng: &mut impl Rng) -> PipelineScores {
    let mut sum = PipelineScores {
        raw: 0.0,
        refined: 0.0,
        stale: 0.0,
    };
    for _ in 0..count {
        let hand = random_hand(rng);
        let size = hand_size(&hand);
        let ideal = crop_from_landmarks(&hand, HAND_AXIS, REFINED_SCALE).unwrap();

        let palm: Vec<Vector2<f64>> = PALM.iter().map(|&i| hand[i]).collect();
        let raw =
            crop_from_landmarks(&jitter(&palm, 0.05 * size, rng), (0, 1), SEED_SCALE).unwrap();
        let refined = refine_crop(&raw, &predict_in_crop(&hand, &raw, rng), REFINED_SCALE);

        // previous frame: the same hand before a small motion
        let turn = Rotation2::new(normal(rng) * 8f64.to_radians());
        let step = Vector2::new(normal(rng), normal(rng)) * 0.15 * size;
        let c = hand.iter().sum::<Vector2<f64>>() / hand.len() as f64;
        let previous: Vec<Vector2<f64>> = hand.iter().map(|p| c + turn * (p - c) + step).collect();
        let stale = refine_crop(&raw, &jitter(&previous, 0.02 * size, rng), REFINED_SCALE);

        sum.raw += crop_iou(&raw, &ideal);
        sum.refined += crop_iou(&refined, &ideal);
        sum.stale += crop_iou(&stale, &ideal);
    }
    let n = count as f64;
    PipelineScores {
        raw: sum.raw / n,
        refined: sum.refined / n,
        stale: sum.stale / n,
    }
}
