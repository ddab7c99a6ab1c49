//! Synthetic training pairs: sample a generative state, pose the mesh,
//! regress and hip-center the landmarks, then add Gaussian noise.
//!
//! Every example draws from its own ChaCha stream keyed by
//! `(seed, example index)`, so any example can be regenerated on its own
//! and generation order does not matter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::{
    center_at_hips, Frame, KinematicModel, LandmarkEvaluator, LandmarkSet, ModelError, PoseState,
};
use crate::rotation::matrix_to_rot6d;

pub const DATASET_MAGIC: &[u8; 8] = b"BLDSET\0\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("invalid sampler config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    /// Half extents of the centered translation box (m).
    pub translation_half_extent: [f64; 3],
    /// Std of the additive landmark noise (m).
    pub noise_sigma: f64,
    pub latent_std: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            translation_half_extent: [0.1; 3],
            noise_sigma: 0.005,
            latent_std: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !self
            .translation_half_extent
            .iter()
            .all(|h| *h >= 0.0 && h.is_finite())
        {
            return Err(DatasetError::Config(
                "translation half extents must be ≥ 0".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DatasetError::Config("noise sigma must be ≥ 0".into()));
        }
        if !(self.latent_std >= 0.0 && self.latent_std.is_finite()) {
            return Err(DatasetError::Config("latent std must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Root-centered landmarks with noise.
    pub input: LandmarkSet,
    pub target: PoseState,
    /// Root-centered landmarks without noise.
    pub clean: LandmarkSet,
}

/// Uniform rotation: a normalized 4D Gaussian is uniform on S³.
pub fn sample_haar_so3<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            let quat = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
            return quat.to_rotation_matrix().into_inner();
        }
    }
}

pub fn sample_state<R: Rng + ?Sized>(
    model: &KinematicModel,
    config: &SamplerConfig,
    rng: &mut R,
) -> PoseState {
    let rot = sample_haar_so3(rng);
    let r = matrix_to_rot6d(&rot).expect("Haar sample is a rotation");
    let t = std::array::from_fn(|i| {
        let h = config.translation_half_extent[i];
        if h > 0.0 {
            rng.random_range(-h..=h)
        } else {
            0.0
        }
    });
    let mut latent = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| config.latent_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let beta = latent(model.shape_dim);
    let theta = latent(model.pose_dim);
    PoseState { r, t, beta, theta }
}

pub fn make_training_example<R: Rng + ?Sized>(
    evaluator: &LandmarkEvaluator<'_>,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<TrainingExample, ModelError> {
    let model = evaluator.model();
    let target = sample_state(model, config, rng);
    let clean = center_at_hips(&evaluator.landmarks(&target)?, &model.layout);
    let mut input = clean.clone();
    if config.noise_sigma > 0.0 {
        for p in input.points.iter_mut() {
            for c in p.iter_mut() {
                *c += config.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(TrainingExample {
        input,
        target,
        clean,
    })
}

/// Independent random stream of example `index`.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Regenerate example `index` of the dataset defined by `config`.
pub fn generate_example(
    evaluator: &LandmarkEvaluator<'_>,
    config: &SamplerConfig,
    index: u64,
) -> Result<TrainingExample, ModelError> {
    make_training_example(evaluator, config, &mut example_rng(config.seed, index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: u64,
    pub landmarks: u32,
    pub shape_dim: u32,
    pub pose_dim: u32,
    #[serde(with = "hex_digest")]
    pub model_digest: [u8; 32],
    pub config: SamplerConfig,
}

mod hex_digest {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(text).map_err(serde::de::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub examples: Vec<TrainingExample>,
}

pub fn generate_dataset(
    model: &KinematicModel,
    config: &SamplerConfig,
    count: usize,
) -> Result<Dataset, DatasetError> {
    if count == 0 {
        return Err(DatasetError::Config("count must be positive".into()));
    }
    config.validate()?;
    let evaluator = LandmarkEvaluator::new(model);
    let examples = (0..count as u64)
        .map(|i| generate_example(&evaluator, config, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            count: count as u64,
            landmarks: model.landmark_count() as u32,
            shape_dim: model.shape_dim as u32,
            pose_dim: model.pose_dim as u32,
            model_digest: model.digest(),
            config: config.clone(),
        },
        examples,
    })
}

fn write_points<W: Write>(w: &mut W, set: &LandmarkSet) -> std::io::Result<()> {
    for p in &set.points {
        for c in p.iter() {
            w.write_f64::<LittleEndian>(*c)?;
        }
    }
    Ok(())
}

fn read_points<R: Read>(r: &mut R, n: usize) -> std::io::Result<LandmarkSet> {
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let x = r.read_f64::<LittleEndian>()?;
        let y = r.read_f64::<LittleEndian>()?;
        let z = r.read_f64::<LittleEndian>()?;
        points.push(Vector3::new(x, y, z));
    }
    Ok(LandmarkSet {
        points,
        frame: Frame::RootCentered,
    })
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| r.read_f64::<LittleEndian>()).collect()
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Checks that the dataset was generated for `model`'s dimensions.
    pub fn check_model(&self, model: &KinematicModel) -> Result<(), DatasetError> {
        let h = &self.header;
        if h.landmarks as usize != model.landmark_count()
            || h.shape_dim as usize != model.shape_dim
            || h.pose_dim as usize != model.pose_dim
        {
            return Err(DatasetError::Format(format!(
                "dataset dims (S={}, β={}, θ={}) do not match the model (S={}, β={}, θ={})",
                h.landmarks,
                h.shape_dim,
                h.pose_dim,
                model.landmark_count(),
                model.shape_dim,
                model.pose_dim
            )));
        }
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<(), DatasetError> {
        let h = &self.header;
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(h.version)?;
        w.write_u64::<LittleEndian>(h.count)?;
        w.write_u32::<LittleEndian>(h.landmarks)?;
        w.write_u32::<LittleEndian>(h.shape_dim)?;
        w.write_u32::<LittleEndian>(h.pose_dim)?;
        w.write_all(&h.model_digest)?;
        w.write_u64::<LittleEndian>(h.config.seed)?;
        for e in h.config.translation_half_extent {
            w.write_f64::<LittleEndian>(e)?;
        }
        w.write_f64::<LittleEndian>(h.config.noise_sigma)?;
        w.write_f64::<LittleEndian>(h.config.latent_std)?;
        for ex in &self.examples {
            write_points(w, &ex.input)?;
            for x in ex.target.to_flat() {
                w.write_f64::<LittleEndian>(x)?;
            }
            write_points(w, &ex.clean)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(DatasetError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != DATASET_VERSION {
            return Err(DatasetError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let count = r.read_u64::<LittleEndian>()?;
        let landmarks = r.read_u32::<LittleEndian>()?;
        let shape_dim = r.read_u32::<LittleEndian>()?;
        let pose_dim = r.read_u32::<LittleEndian>()?;
        let mut model_digest = [0u8; 32];
        r.read_exact(&mut model_digest)?;
        let seed = r.read_u64::<LittleEndian>()?;
        let mut translation_half_extent = [0.0; 3];
        for e in translation_half_extent.iter_mut() {
            *e = r.read_f64::<LittleEndian>()?;
        }
        let noise_sigma = r.read_f64::<LittleEndian>()?;
        let latent_std = r.read_f64::<LittleEndian>()?;
        let (s, db, dt) = (landmarks as usize, shape_dim as usize, pose_dim as usize);
        let mut examples = Vec::with_capacity(count.min(1 << 20) as usize);
        for i in 0..count {
            let read = |r: &mut R| -> std::io::Result<TrainingExample> {
                let input = read_points(r, s)?;
                let flat = read_f64s(r, 9 + db + dt)?;
                let clean = read_points(r, s)?;
                Ok(TrainingExample {
                    input,
                    target: PoseState::from_flat(&flat, db, dt),
                    clean,
                })
            };
            examples.push(read(r).map_err(|e| {
                DatasetError::Format(format!("truncated at example {i} of {count}: {e}"))
            })?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(DatasetError::Format(
                "trailing bytes after last example".into(),
            ));
        }
        Ok(Self {
            header: DatasetHeader {
                version,
                count,
                landmarks,
                shape_dim,
                pose_dim,
                model_digest,
                config: SamplerConfig {
                    seed,
                    translation_half_extent,
                    noise_sigma,
                    latent_std,
                },
            },
            examples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_binary(&mut BufReader::new(File::open(path)?))
    }

    /// Lossless JSON-lines export: the header, then one record per example.
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<(), DatasetError> {
        let json = |e: serde_json::Error| DatasetError::Format(e.to_string());
        writeln!(w, "{}", serde_json::to_string(&self.header).map_err(json)?)?;
        for ex in &self.examples {
            let rec = TextRecord {
                input: ex.input.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
                target: ex.target.clone(),
                clean: ex.clean.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).map_err(json)?)?;
        }
        Ok(())
    }

    pub fn read_text<R: std::io::BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut lines = r.lines();
        let parse_err =
            |line: usize, e: serde_json::Error| DatasetError::Format(format!("line {line}: {e}"));
        let first = lines
            .next()
            .ok_or_else(|| DatasetError::Format("empty file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e))?;
        let mut examples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TextRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e))?;
            let set = |pts: Vec<[f64; 3]>| LandmarkSet {
                points: pts.into_iter().map(Vector3::from).collect(),
                frame: Frame::RootCentered,
            };
            examples.push(TrainingExample {
                input: set(rec.input),
                target: rec.target,
                clean: set(rec.clean),
            });
        }
        if examples.len() as u64 != header.count {
            return Err(DatasetError::Format(format!(
                "header says {} examples, found {}",
                header.count,
                examples.len()
            )));
        }
        Ok(Self { header, examples })
    }
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    input: Vec<[f64; 3]>,
    target: PoseState,
    clean: Vec<[f64; 3]>,
}
