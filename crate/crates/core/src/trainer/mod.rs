//! Lifter loss, optimizer and training loop.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use std::io::Write;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::{
    center_at_hips, Frame, KinematicModel, LandmarkEvaluator, LandmarkSet, ModelError, PoseState,
};
use crate::metrics::{mpjpe, mpjpe_pa, MetricsError};
use crate::mixer::{self, init_params, Checkpoint, MixerConfig, MixerError, MixerParams};
use crate::rotation::{
    geodesic_angle, geodesic_sq_with_grad, rot6d_to_matrix, rot6d_to_matrix_cached, rot6d_vjp,
};
use crate::sampling::{Dataset, DatasetError, TrainingExample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mixer(#[from] MixerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rotation: f64,
    pub translation: f64,
    pub shape: f64,
    pub pose: f64,
    /// Weight of the mean squared landmark error (hip-centered, meters).
    pub landmarks: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rotation: 1.0,
            translation: 1.0,
            shape: 0.1,
            pose: 0.1,
            landmarks: 100.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            rotation: 0.0,
            translation: 0.0,
            shape: 0.0,
            pose: 0.0,
            landmarks: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub eval_every: u64,
    pub seed: u64,
    /// Linear learning-rate warmup length; 0 disables it.
    pub warmup_steps: u64,
    /// Rescale the batch gradient to at most this norm.
    pub clip_norm: Option<f64>,
    /// Exponential moving average of the weights; evaluations and saved
    /// checkpoints use the averaged weights when set.
    pub ema_decay: Option<f64>,
    /// Cap on held-out examples used by periodic evaluations; the final
    /// evaluation always uses the whole split.
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 50_000,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            eval_every: 5000,
            seed: 0,
            warmup_steps: 0,
            clip_norm: None,
            ema_decay: Some(0.999),
            eval_limit: Some(500),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.adam.validate().map_err(TrainError::Config)?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be ≥ 1".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be ≥ 1".into()));
        }
        let w = &self.weights;
        if [w.rotation, w.translation, w.shape, w.pose, w.landmarks]
            .iter()
            .any(|x| !(*x >= 0.0 && x.is_finite()))
        {
            return Err(TrainError::Config(
                "loss weights must be finite and ≥ 0".into(),
            ));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(TrainError::Config("EMA decay must lie in [0, 1)".into()));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config("clip norm must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rotation: f64,
    pub translation: f64,
    pub shape: f64,
    pub pose: f64,
    pub landmarks: f64,
}

fn sq_diff(a: &[f64], b: &[f64], grad: &mut [f64], weight: f64) -> f64 {
    let mut sum = 0.0;
    for ((x, y), g) in a.iter().zip(b).zip(grad.iter_mut()) {
        let d = x - y;
        sum += d * d;
        *g += 2.0 * weight * d;
    }
    sum
}

/// Loss of a predicted state against a target, and its gradient with
/// respect to the prediction.
pub fn lifter_loss(
    evaluator: &LandmarkEvaluator<'_>,
    weights: &LossWeights,
    prediction: &PoseState,
    target: &PoseState,
) -> Result<(LossBreakdown, PoseState), TrainError> {
    let target_centered = if weights.landmarks > 0.0 {
        Some(evaluator.centered(target)?)
    } else {
        None
    };
    lifter_loss_with_landmarks(
        evaluator,
        weights,
        prediction,
        target,
        target_centered.as_ref(),
    )
}

/// As [`lifter_loss`] with the target's hip-centered landmarks supplied.
/// They are only read when the landmark weight is nonzero.
pub fn lifter_loss_with_landmarks(
    evaluator: &LandmarkEvaluator<'_>,
    weights: &LossWeights,
    prediction: &PoseState,
    target: &PoseState,
    target_centered: Option<&LandmarkSet>,
) -> Result<(LossBreakdown, PoseState), TrainError> {
    let model = evaluator.model();
    prediction.check(model)?;
    target.check(model)?;
    let mut grad = prediction.zeros_like();
    let mut parts = LossBreakdown::default();

    if weights.rotation > 0.0 {
        let (pred_rot, cache) = rot6d_to_matrix_cached(&prediction.r).map_err(ModelError::from)?;
        let tgt_rot = rot6d_to_matrix(&target.r).map_err(ModelError::from)?;
        let (angle_sq, g) = geodesic_sq_with_grad(&pred_rot, &tgt_rot);
        parts.rotation = weights.rotation * angle_sq;
        let g6 = rot6d_vjp(&cache, &(g * weights.rotation));
        for (a, b) in grad.r.iter_mut().zip(g6) {
            *a += b;
        }
    }
    parts.translation =
        weights.translation * sq_diff(&prediction.t, &target.t, &mut grad.t, weights.translation);
    parts.shape = weights.shape
        * sq_diff(
            &prediction.beta,
            &target.beta,
            &mut grad.beta,
            weights.shape,
        );
    parts.pose = weights.pose
        * sq_diff(
            &prediction.theta,
            &target.theta,
            &mut grad.theta,
            weights.pose,
        );

    if weights.landmarks > 0.0 {
        let target_centered = target_centered.ok_or_else(|| {
            TrainError::Config("landmark term needs the target's centered landmarks".into())
        })?;
        let cache = evaluator.forward(prediction)?;
        let pred_centered = center_at_hips(&cache.landmarks, &model.layout);
        let s = pred_centered.len() as f64;
        let mut sum = 0.0;
        let upstream: Vec<Vector3<f64>> = pred_centered
            .points
            .iter()
            .zip(&target_centered.points)
            .map(|(p, q)| {
                let d = p - q;
                sum += d.norm_squared();
                d * (2.0 * weights.landmarks / s)
            })
            .collect();
        parts.landmarks = weights.landmarks * sum / s;
        let g = evaluator.vjp_centered(&cache, &upstream);
        for (a, b) in grad.r.iter_mut().zip(g.r) {
            *a += b;
        }
        for (a, b) in grad.beta.iter_mut().zip(&g.beta) {
            *a += b;
        }
        for (a, b) in grad.theta.iter_mut().zip(&g.theta) {
            *a += b;
        }
    }
    parts.total = parts.rotation + parts.translation + parts.shape + parts.pose + parts.landmarks;
    Ok((parts, grad))
}

/// Held-out evaluation summary. Landmark errors use hip-centered landmarks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub count: usize,
    pub mpjpe_mm: f64,
    pub mpjpe_pa_mm: f64,
    pub rot_err_deg: f64,
    pub t_err_mm: f64,
    pub beta_rmse: f64,
    pub theta_rmse: f64,
}

/// Compare predicted states with the ground truth of `examples`.
pub fn evaluate_predictions(
    evaluator: &LandmarkEvaluator<'_>,
    predictions: &[PoseState],
    examples: &[TrainingExample],
) -> Result<EvalRecord, TrainError> {
    if predictions.len() != examples.len() {
        return Err(TrainError::Config(format!(
            "{} predictions for {} examples",
            predictions.len(),
            examples.len()
        )));
    }
    let mut rec = EvalRecord {
        count: examples.len(),
        ..EvalRecord::default()
    };
    if examples.is_empty() {
        return Ok(rec);
    }
    let (mut beta_sq, mut beta_n, mut theta_sq, mut theta_n) = (0.0, 0usize, 0.0, 0usize);
    for (pred, ex) in predictions.iter().zip(examples) {
        let centered = evaluator.centered(pred)?;
        let gt = LandmarkSet {
            points: ex.clean.points.clone(),
            frame: Frame::RootCentered,
        };
        rec.mpjpe_mm += mpjpe(&centered, &gt)?;
        rec.mpjpe_pa_mm += mpjpe_pa(&centered, &gt)?;
        let a = rot6d_to_matrix(&pred.r).map_err(ModelError::from)?;
        let b = rot6d_to_matrix(&ex.target.r).map_err(ModelError::from)?;
        rec.rot_err_deg += geodesic_angle(&a, &b).to_degrees();
        rec.t_err_mm += 1000.0 * (pred.translation() - ex.target.translation()).norm();
        for (x, y) in pred.beta.iter().zip(&ex.target.beta) {
            beta_sq += (x - y) * (x - y);
        }
        for (x, y) in pred.theta.iter().zip(&ex.target.theta) {
            theta_sq += (x - y) * (x - y);
        }
        beta_n += pred.beta.len();
        theta_n += pred.theta.len();
    }
    let n = examples.len() as f64;
    rec.mpjpe_mm /= n;
    rec.mpjpe_pa_mm /= n;
    rec.rot_err_deg /= n;
    rec.t_err_mm /= n;
    rec.beta_rmse = (beta_sq / beta_n.max(1) as f64).sqrt();
    rec.theta_rmse = (theta_sq / theta_n.max(1) as f64).sqrt();
    Ok(rec)
}

/// Run the lifter on `examples` and score its predictions.
pub fn evaluate(
    model: &KinematicModel,
    params: &MixerParams,
    examples: &[TrainingExample],
) -> Result<EvalRecord, TrainError> {
    params.config.check_model(model)?;
    let evaluator = LandmarkEvaluator::new(model);
    let predictions = examples
        .iter()
        .map(|ex| mixer::predict(params, &ex.input.points))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_predictions(&evaluator, &predictions, examples)
}

/// Index ranges of the training and held-out splits (last 10% held out).
pub fn split_indices(count: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let holdout = if count >= 2 { (count / 10).max(1) } else { 0 };
    (0..count - holdout, count - holdout..count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub eval_mpjpe_mm: f64,
    pub eval_mpjpe_pa_mm: f64,
    pub rot_err_deg: f64,
    pub t_err_mm: f64,
}

pub const METRICS_HEADER: &str =
    "step,train_loss,eval_mpjpe_mm,eval_mpjpe_pa_mm,rot_err_deg,t_err_mm";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9e},{:.6},{:.6},{:.6},{:.6}",
            self.step,
            self.train_loss,
            self.eval_mpjpe_mm,
            self.eval_mpjpe_pa_mm,
            self.rot_err_deg,
            self.t_err_mm
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.csv_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest held-out MPJPE seen at an evaluation.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<MetricsRow>,
    /// Full held-out evaluation of the best checkpoint.
    pub final_eval: EvalRecord,
    /// Per-step mean batch loss.
    pub losses: Vec<f64>,
}

/// Accumulate the mean-loss gradient of `batch` into `grads` and return the
/// mean loss, or NaN as soon as a prediction is non-finite.
pub fn batch_gradient(
    evaluator: &LandmarkEvaluator<'_>,
    params: &MixerParams,
    weights: &LossWeights,
    batch: &[&TrainingExample],
    grads: &mut MixerParams,
) -> Result<f64, TrainError> {
    grads.fill(0.0);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in batch {
        let (pred, cache) = mixer::forward(params, &ex.input.points)?;
        if !pred.is_finite() {
            return Ok(f64::NAN);
        }
        let (loss, mut g) =
            lifter_loss_with_landmarks(evaluator, weights, &pred, &ex.target, Some(&ex.clean))?;
        total += loss.total;
        g.r.iter_mut()
            .chain(g.t.iter_mut())
            .for_each(|x| *x *= scale);
        g.beta
            .iter_mut()
            .chain(g.theta.iter_mut())
            .for_each(|x| *x *= scale);
        mixer::backward_into(params, &cache, &g, grads)?;
    }
    Ok(total * scale)
}

/// Train a lifter from freshly initialized parameters.
pub fn train(
    model: &KinematicModel,
    dataset: &Dataset,
    mixer_config: &MixerConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress(model, dataset, mixer_config, config, |_| {})
}

/// [`train`] with a callback invoked after every evaluation.
pub fn train_with_progress(
    model: &KinematicModel,
    dataset: &Dataset,
    mixer_config: &MixerConfig,
    config: &TrainConfig,
    mut on_eval: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    mixer_config.validate()?;
    mixer_config.check_model(model)?;
    dataset.check_model(model)?;
    if dataset.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    let (train_range, holdout_range) = split_indices(dataset.len());
    let train_set = &dataset.examples[train_range];
    // a one-example dataset has no held-out split: score on the training example
    let holdout = if holdout_range.is_empty() {
        train_set
    } else {
        &dataset.examples[holdout_range]
    };
    let periodic = &holdout[..config
        .eval_limit
        .unwrap_or(holdout.len())
        .min(holdout.len())];

    let evaluator = LandmarkEvaluator::new(model);
    let mut params = init_params(mixer_config, config.seed)?;
    let mut grads = params.zeros_like();
    let mut adam = AdamState::new(params.len());
    let mut ema = config.ema_decay.map(|_| params.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();

    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(config.steps as usize);
    let mut interval_loss = 0.0;
    let mut interval_steps = 0u64;
    let mut best: Option<(f64, Checkpoint)> = None;

    let mut record = |step: u64,
                      params: &MixerParams,
                      train_loss: f64,
                      log: &mut Vec<MetricsRow>|
     -> Result<f64, TrainError> {
        let ev = evaluate(model, params, periodic)?;
        let row = MetricsRow {
            step,
            train_loss,
            eval_mpjpe_mm: ev.mpjpe_mm,
            eval_mpjpe_pa_mm: ev.mpjpe_pa_mm,
            rot_err_deg: ev.rot_err_deg,
            t_err_mm: ev.t_err_mm,
        };
        on_eval(&row);
        log.push(row);
        Ok(ev.mpjpe_mm)
    };

    let initial_loss = {
        let batch: Vec<&TrainingExample> = train_set.iter().take(config.batch_size).collect();
        batch_gradient(&evaluator, &params, &config.weights, &batch, &mut grads)?
    };
    let score = record(0, &params, initial_loss, &mut log)?;
    best = keep_best(best, score, &params, config.seed, 0);

    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let loss = batch_gradient(&evaluator, &params, &config.weights, &batch, &mut grads)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        if let Some(max_norm) = config.clip_norm {
            let norm = grads.data.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                grads.data.iter_mut().for_each(|g| *g *= s);
            }
        }
        let mut adam_cfg = config.adam.clone();
        if config.warmup_steps > 0 {
            adam_cfg.learning_rate *= (step as f64 / config.warmup_steps as f64).min(1.0);
        }
        adam_step(&mut params, &grads, &mut adam, &adam_cfg);
        if let (Some(avg), Some(decay)) = (ema.as_mut(), config.ema_decay) {
            // bias-corrected warm start: early averages lean on recent weights
            let d = decay.min((1.0 + step as f64) / (10.0 + step as f64));
            for (a, p) in avg.data.iter_mut().zip(&params.data) {
                *a = d * *a + (1.0 - d) * p;
            }
        }
        losses.push(loss);
        interval_loss += loss;
        interval_steps += 1;

        if step % config.eval_every == 0 || step == config.steps {
            let current = ema.as_ref().unwrap_or(&params);
            let score = record(
                step,
                current,
                interval_loss / interval_steps as f64,
                &mut log,
            )?;
            interval_loss = 0.0;
            interval_steps = 0;
            best = keep_best(best, score, current, config.seed, step);
        }
    }

    let (_, best) = best.expect("initial evaluation always runs");
    let final_eval = evaluate(model, &best.params, holdout)?;
    Ok(TrainOutcome {
        best,
        last: Checkpoint {
            params: ema.unwrap_or(params),
            seed: config.seed,
            step: config.steps,
        },
        log,
        final_eval,
        losses,
    })
}

fn keep_best(
    best: Option<(f64, Checkpoint)>,
    score: f64,
    params: &MixerParams,
    seed: u64,
    step: u64,
) -> Option<(f64, Checkpoint)> {
    match best {
        Some((b, c)) if b <= score || score.is_nan() => Some((b, c)),
        _ => Some((
            score,
            Checkpoint {
                params: params.clone(),
                seed,
                step,
            },
        )),
    }
}
