//! Procedural stand-in body model.
//!
//! Twenty joints (sixteen body joints plus two stub joints per hand) in a
//! T-pose, y up, subject facing +z. The surface is a set of elliptical
//! vertex rings swept along the bones; skinning blends each ring with the
//! neighbouring joints near the bone ends. Landmarks average the nearest
//! rest vertices to fixed skeleton points laid out in the 33 + 21 + 21
//! topology.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{io::MODEL_FORMAT_VERSION, KinematicModel, LandmarkLayout, ModelError, Weighted};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelConfig {
    pub seed: u64,
    pub vertex_count: usize,
    pub ring_size: usize,
    pub shape_dim: usize,
    pub pose_dim: usize,
    /// Std of the frozen pose decoder entries.
    pub pose_scale: f64,
    pub regressor_neighbors: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vertex_count: 600,
            ring_size: 8,
            shape_dim: 8,
            pose_dim: 32,
            pose_scale: 0.04,
            regressor_neighbors: 8,
        }
    }
}

const JOINTS: [(&str, Option<usize>, [f64; 3]); 20] = [
    ("pelvis", None, [0.0, 0.0, 0.0]),
    ("spine", Some(0), [0.0, 0.25, 0.0]),
    ("neck", Some(1), [0.0, 0.50, 0.0]),
    ("head", Some(2), [0.0, 0.60, 0.0]),
    ("left_shoulder", Some(2), [0.17, 0.47, 0.0]),
    ("left_elbow", Some(4), [0.45, 0.47, 0.0]),
    ("left_wrist", Some(5), [0.70, 0.47, 0.0]),
    ("right_shoulder", Some(2), [-0.17, 0.47, 0.0]),
    ("right_elbow", Some(7), [-0.45, 0.47, 0.0]),
    ("right_wrist", Some(8), [-0.70, 0.47, 0.0]),
    ("left_hip", Some(0), [0.10, -0.06, 0.0]),
    ("left_knee", Some(10), [0.10, -0.50, 0.0]),
    ("left_ankle", Some(11), [0.10, -0.92, 0.0]),
    ("right_hip", Some(0), [-0.10, -0.06, 0.0]),
    ("right_knee", Some(13), [-0.10, -0.50, 0.0]),
    ("right_ankle", Some(14), [-0.10, -0.92, 0.0]),
    ("left_knuckles", Some(6), [0.80, 0.47, 0.0]),
    ("left_finger_mid", Some(16), [0.86, 0.47, 0.0]),
    ("right_knuckles", Some(9), [-0.80, 0.47, 0.0]),
    ("right_finger_mid", Some(18), [-0.86, 0.47, 0.0]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Torso,
    Neck,
    Head,
    Arm,
    Hand,
    Leg,
}

const GROUPS: usize = 6;

struct Segment {
    owner: usize,
    start: Vector3<f64>,
    end: Vector3<f64>,
    end_joint: Option<usize>,
    radii: (f64, f64),
    group: Group,
}

fn v3(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn joint(j: usize) -> Vector3<f64> {
    v3(JOINTS[j].2)
}

fn segments() -> Vec<Segment> {
    let seg = |owner, start, end, end_joint, radii, group| Segment {
        owner,
        start,
        end,
        end_joint,
        radii,
        group,
    };
    let mut out = vec![
        seg(
            0,
            v3([0.0, -0.06, 0.0]),
            joint(1),
            Some(1),
            (0.15, 0.10),
            Group::Torso,
        ),
        seg(1, joint(1), joint(2), Some(2), (0.16, 0.10), Group::Torso),
        seg(2, joint(2), joint(3), Some(3), (0.05, 0.05), Group::Neck),
        seg(
            3,
            joint(3),
            v3([0.0, 0.82, 0.0]),
            None,
            (0.08, 0.09),
            Group::Head,
        ),
    ];
    // (shoulder, elbow, wrist, knuckles, finger_mid, hip, knee, ankle, side)
    for (sh, el, wr, kn, fm, hip, knee, ank, side) in [
        (4, 5, 6, 16, 17, 10, 11, 12, 1.0),
        (7, 8, 9, 18, 19, 13, 14, 15, -1.0),
    ] {
        out.extend([
            seg(
                2,
                v3([0.0, 0.48, 0.0]),
                joint(sh),
                Some(sh),
                (0.05, 0.05),
                Group::Arm,
            ),
            seg(sh, joint(sh), joint(el), Some(el), (0.05, 0.05), Group::Arm),
            seg(el, joint(el), joint(wr), Some(wr), (0.04, 0.04), Group::Arm),
            seg(
                wr,
                joint(wr),
                joint(kn),
                Some(kn),
                (0.015, 0.045),
                Group::Hand,
            ),
            seg(
                kn,
                joint(kn),
                joint(fm),
                Some(fm),
                (0.012, 0.042),
                Group::Hand,
            ),
            seg(
                fm,
                joint(fm),
                v3([side * 0.93, 0.47, 0.0]),
                None,
                (0.01, 0.04),
                Group::Hand,
            ),
            seg(
                0,
                v3([0.0, -0.06, 0.0]),
                joint(hip),
                Some(hip),
                (0.08, 0.08),
                Group::Leg,
            ),
            seg(
                hip,
                joint(hip),
                joint(knee),
                Some(knee),
                (0.08, 0.08),
                Group::Leg,
            ),
            seg(
                knee,
                joint(knee),
                joint(ank),
                Some(ank),
                (0.055, 0.055),
                Group::Leg,
            ),
            seg(
                ank,
                joint(ank),
                v3([side * 0.10, -0.97, 0.15]),
                None,
                (0.04, 0.04),
                Group::Leg,
            ),
        ]);
    }
    out
}

/// Skeleton points the 75 landmarks are regressed towards.
fn landmark_targets() -> Vec<Vector3<f64>> {
    let mut body = vec![
        [0.0, 0.68, 0.09],     // nose
        [0.015, 0.70, 0.08],   // left eye inner
        [0.03, 0.70, 0.075],   // left eye
        [0.045, 0.70, 0.07],   // left eye outer
        [-0.015, 0.70, 0.08],  // right eye inner
        [-0.03, 0.70, 0.075],  // right eye
        [-0.045, 0.70, 0.07],  // right eye outer
        [0.08, 0.69, 0.0],     // left ear
        [-0.08, 0.69, 0.0],    // right ear
        [0.025, 0.645, 0.08],  // mouth left
        [-0.025, 0.645, 0.08], // mouth right
    ];
    let j = |i: usize| JOINTS[i].2;
    body.extend([j(4), j(7), j(5), j(8), j(6), j(9)]);
    // pinky, index, thumb alternate left/right
    for [x, y, z] in [
        [0.83, 0.47, -0.035],
        [0.83, 0.47, 0.035],
        [0.76, 0.47, 0.06],
    ] {
        body.push([x, y, z]);
        body.push([-x, y, z]);
    }
    body.extend([j(10), j(13), j(11), j(14), j(12), j(15)]);
    body.extend([
        [0.10, -0.96, -0.04],
        [-0.10, -0.96, -0.04],
        [0.10, -0.97, 0.15],
        [-0.10, -0.97, 0.15],
    ]);
    debug_assert_eq!(body.len(), 33);

    let mut hand = vec![[0.70, 0.47, 0.0]];
    hand.extend([
        [0.73, 0.47, 0.03],
        [0.76, 0.47, 0.05],
        [0.785, 0.47, 0.065],
        [0.81, 0.47, 0.075],
    ]);
    for (z, tip) in [(0.03, 0.90), (0.01, 0.91), (-0.01, 0.90), (-0.03, 0.88)] {
        for x in [0.80, 0.845, 0.875, tip] {
            hand.push([x, 0.47, z]);
        }
    }
    debug_assert_eq!(hand.len(), 21);

    let mut out: Vec<Vector3<f64>> = body.into_iter().map(v3).collect();
    out.extend(hand.iter().map(|&p| v3(p)));
    out.extend(hand.iter().map(|&[x, y, z]| v3([-x, y, z])));
    out
}

/// Largest-remainder split of `extra` rings proportional to segment length.
fn allocate_rings(segs: &[Segment], total: usize) -> Vec<usize> {
    let base = 2;
    let extra = total - base * segs.len();
    let lengths: Vec<f64> = segs.iter().map(|s| (s.end - s.start).norm()).collect();
    let sum: f64 = lengths.iter().sum();
    let quotas: Vec<f64> = lengths.iter().map(|l| l / sum * extra as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = extra - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.iter().map(|c| c + base).collect()
}

/// Orthonormal frame perpendicular to the bone direction.
fn perpendicular_frame(dir: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let p1 = Vector3::z().cross(dir).normalize();
    let p2 = dir.cross(&p1);
    (p1, p2)
}

pub fn toy_model(config: &ToyModelConfig) -> Result<KinematicModel, ModelError> {
    let segs = segments();
    let m = config.ring_size;
    if m < 3 || config.vertex_count % m != 0 || config.vertex_count / m < 2 * segs.len() {
        return Err(ModelError::Invalid(format!(
            "vertex count {} must be a multiple of ring size {} with at least {} rings",
            config.vertex_count,
            m,
            2 * segs.len()
        )));
    }
    if config.regressor_neighbors == 0 || config.regressor_neighbors > config.vertex_count {
        return Err(ModelError::Invalid("bad regressor neighbour count".into()));
    }
    let rings = allocate_rings(&segs, config.vertex_count / m);
    let parents: Vec<Option<usize>> = JOINTS.iter().map(|j| j.1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Per-group amplitudes for the seeded shape direction.
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let random_amp: Vec<f64> = (0..GROUPS).map(|_| 0.01 * unit.sample(&mut rng)).collect();

    let mut vertices = Vec::with_capacity(config.vertex_count);
    let mut skin = Vec::with_capacity(config.vertex_count);
    let mut shape = Vec::with_capacity(3 * config.vertex_count * config.shape_dim);
    let mut faces = Vec::new();

    for (seg, &n) in segs.iter().zip(&rings) {
        let dir = (seg.end - seg.start).normalize();
        let (p1, p2) = perpendicular_frame(&dir);
        let base = vertices.len();
        for i in 0..n {
            let s = (i as f64 + 0.5) / n as f64;
            let center = seg.start + (seg.end - seg.start) * s;

            let b_start = match parents[seg.owner] {
                Some(_) if s < 0.3 => 0.5 * (0.3 - s) / 0.3,
                _ => 0.0,
            };
            let b_end = match seg.end_joint {
                Some(_) if s > 0.7 => 0.5 * (s - 0.7) / 0.3,
                _ => 0.0,
            };
            let mut weights: Vec<Weighted> = vec![(seg.owner, 1.0 - b_start - b_end)];
            if b_start > 0.0 {
                weights.push((parents[seg.owner].expect("checked above"), b_start));
            }
            if b_end > 0.0 {
                weights.push((seg.end_joint.expect("checked above"), b_end));
            }

            for k in 0..m {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
                let radial = p1 * phi.cos() + p2 * phi.sin();
                vertices
                    .push(center + p1 * (seg.radii.0 * phi.cos()) + p2 * (seg.radii.1 * phi.sin()));
                skin.push(weights.clone());

                let g = seg.group;
                let mut dirs = vec![Vector3::zeros(); config.shape_dim];
                let comps = [
                    radial * 0.015,
                    if g == Group::Torso || g == Group::Neck {
                        radial * 0.02
                    } else {
                        Vector3::zeros()
                    },
                    if g == Group::Arm {
                        radial * 0.012
                    } else {
                        Vector3::zeros()
                    },
                    if g == Group::Leg {
                        radial * 0.015
                    } else {
                        Vector3::zeros()
                    },
                    if g == Group::Head {
                        radial * 0.015
                    } else {
                        Vector3::zeros()
                    },
                    if g == Group::Torso {
                        p2 * (0.02 * phi.sin().max(0.0))
                    } else {
                        Vector3::zeros()
                    },
                    if g == Group::Hand {
                        radial * 0.005
                    } else {
                        Vector3::zeros()
                    },
                    radial * random_amp[g as usize],
                ];
                for (d, c) in dirs.iter_mut().zip(comps) {
                    *d = c;
                }
                // extra dimensions beyond the named ones stay seeded-random
                for d in dirs.iter_mut().skip(comps.len()) {
                    *d = radial * (0.01 * unit.sample(&mut rng));
                }
                for axis in 0..3 {
                    shape.extend(dirs.iter().map(|d| d[axis]));
                }
            }
        }
        for i in 0..n - 1 {
            for k in 0..m {
                let a = base + i * m + k;
                let b = base + i * m + (k + 1) % m;
                faces.push([a, b, b + m]);
                faces.push([a, b + m, a + m]);
            }
        }
    }

    let joint_count = JOINTS.len();
    let decoder_dist = Normal::new(0.0, config.pose_scale)
        .map_err(|e| ModelError::Invalid(format!("pose scale: {e}")))?;
    let mut pose_decoder = vec![0.0; 6 * joint_count * config.pose_dim];
    // Root row block stays zero: the root orientation is carried by `r`.
    for x in pose_decoder.iter_mut().skip(6 * config.pose_dim) {
        *x = decoder_dist.sample(&mut rng);
    }

    let k = config.regressor_neighbors;
    let landmark_regressor = landmark_targets()
        .iter()
        .map(|target| {
            let mut idx: Vec<usize> = (0..vertices.len()).collect();
            idx.sort_by(|&a, &b| {
                (vertices[a] - target)
                    .norm_squared()
                    .total_cmp(&(vertices[b] - target).norm_squared())
                    .then(a.cmp(&b))
            });
            idx.truncate(k);
            idx.sort_unstable();
            idx.into_iter().map(|v| (v, 1.0 / k as f64)).collect()
        })
        .collect();

    let model = KinematicModel {
        format_version: MODEL_FORMAT_VERSION,
        joint_names: JOINTS.iter().map(|j| j.0.to_string()).collect(),
        parent: parents,
        rest_joints: JOINTS.iter().map(|j| v3(j.2)).collect(),
        rest_vertices: vertices,
        skin_weights: skin,
        shape_dim: config.shape_dim,
        shape_basis: shape,
        pose_dim: config.pose_dim,
        pose_decoder,
        landmark_regressor,
        layout: LandmarkLayout::default(),
        faces,
    };
    model.validate()?;
    Ok(model)
}
