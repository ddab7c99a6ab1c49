//! MLP-Mixer lifter: root-centered landmarks in, body-model state out.
//!
//! Parameters live in one flat `f64` buffer; [`Layout`] names the slot of
//! every tensor in it. Matrices are stored column-major. Activations use
//! the row-per-token convention: a hidden state is an `S × C` matrix.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::{KinematicModel, PoseState};
use crate::rotation::IDENTITY_6D;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum MixerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("invalid mixer config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub tokens: usize,
    pub channels: usize,
    pub layers: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub shape_dim: usize,
    pub pose_dim: usize,
    /// Residual connections around both MLPs of every layer.
    pub residual: bool,
    /// Pre-normalization of both MLP inputs.
    pub layer_norm: bool,
    #[serde(default)]
    pub readout: Readout,
}

/// How the final `S × C` grid becomes the head input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Mean over tokens: `C` features.
    #[default]
    MeanPool,
    /// The whole grid, column-major: `S·C` features.
    Flatten,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            tokens: 75,
            channels: 64,
            layers: 4,
            token_hidden: 64,
            channel_hidden: 128,
            shape_dim: 8,
            pose_dim: 32,
            residual: true,
            layer_norm: true,
            readout: Readout::MeanPool,
        }
    }
}

impl MixerConfig {
    /// Default sizes with token count and head widths taken from `model`.
    pub fn for_model(model: &KinematicModel) -> Self {
        Self {
            tokens: model.landmark_count(),
            shape_dim: model.shape_dim,
            pose_dim: model.pose_dim,
            ..Self::default()
        }
    }

    pub fn head_dims(&self) -> [usize; 4] {
        [6, 3, self.shape_dim, self.pose_dim]
    }

    /// Width of the head input.
    pub fn feature_dim(&self) -> usize {
        match self.readout {
            Readout::MeanPool => self.channels,
            Readout::Flatten => self.tokens * self.channels,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.head_dims().iter().sum()
    }

    pub fn validate(&self) -> Result<(), MixerError> {
        let dims = [
            ("tokens", self.tokens),
            ("channels", self.channels),
            ("layers", self.layers),
            ("token_hidden", self.token_hidden),
            ("channel_hidden", self.channel_hidden),
            ("shape_dim", self.shape_dim),
            ("pose_dim", self.pose_dim),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(MixerError::InvalidConfig(format!("{name} must be ≥ 1")));
            }
        }
        Ok(())
    }

    /// Token count and head widths must match the model.
    pub fn check_model(&self, model: &KinematicModel) -> Result<(), MixerError> {
        if self.tokens != model.landmark_count()
            || self.shape_dim != model.shape_dim
            || self.pose_dim != model.pose_dim
        {
            return Err(MixerError::ShapeMismatch(format!(
                "mixer (S={}, Dβ={}, Dθ={}) vs model (S={}, Dβ={}, Dθ={})",
                self.tokens,
                self.shape_dim,
                self.pose_dim,
                model.landmark_count(),
                model.shape_dim,
                model.pose_dim
            )));
        }
        Ok(())
    }
}

/// Location of one tensor inside the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_gain: Slot,
    pub ln1_bias: Slot,
    /// `token_hidden × S`
    pub token1_w: Slot,
    pub token1_b: Slot,
    /// `S × token_hidden`
    pub token2_w: Slot,
    pub token2_b: Slot,
    pub ln2_gain: Slot,
    pub ln2_bias: Slot,
    /// `C × channel_hidden`
    pub channel1_w: Slot,
    pub channel1_b: Slot,
    /// `channel_hidden × C`
    pub channel2_w: Slot,
    pub channel2_b: Slot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// `3 × C`
    pub embed_w: Slot,
    pub embed_b: Slot,
    pub layers: Vec<LayerSlots>,
    /// `(weight F × d, bias d)` for the r, t, β and θ heads, `F` being
    /// [`MixerConfig::feature_dim`].
    pub heads: [(Slot, Slot); 4],
    pub total: usize,
    names: Vec<(String, Slot)>,
}

pub const HEAD_NAMES: [&str; 4] = ["r", "t", "beta", "theta"];

impl Layout {
    pub fn new(config: &MixerConfig) -> Self {
        let mut names = Vec::new();
        let mut offset = 0;
        let mut slot = |name: String, rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            names.push((name, s));
            s
        };
        let (s, c, th, ch) = (
            config.tokens,
            config.channels,
            config.token_hidden,
            config.channel_hidden,
        );
        let embed_w = slot("embed.w".into(), 3, c);
        let embed_b = slot("embed.b".into(), c, 1);
        let layers = (0..config.layers)
            .map(|l| LayerSlots {
                ln1_gain: slot(format!("layer{l}.ln1.gain"), c, 1),
                ln1_bias: slot(format!("layer{l}.ln1.bias"), c, 1),
                token1_w: slot(format!("layer{l}.token1.w"), th, s),
                token1_b: slot(format!("layer{l}.token1.b"), th, 1),
                token2_w: slot(format!("layer{l}.token2.w"), s, th),
                token2_b: slot(format!("layer{l}.token2.b"), s, 1),
                ln2_gain: slot(format!("layer{l}.ln2.gain"), c, 1),
                ln2_bias: slot(format!("layer{l}.ln2.bias"), c, 1),
                channel1_w: slot(format!("layer{l}.channel1.w"), c, ch),
                channel1_b: slot(format!("layer{l}.channel1.b"), ch, 1),
                channel2_w: slot(format!("layer{l}.channel2.w"), ch, c),
                channel2_b: slot(format!("layer{l}.channel2.b"), c, 1),
            })
            .collect();
        let dims = config.head_dims();
        let f = config.feature_dim();
        let heads = std::array::from_fn(|k| {
            let w = slot(format!("head.{}.w", HEAD_NAMES[k]), f, dims[k]);
            let b = slot(format!("head.{}.b", HEAD_NAMES[k]), dims[k], 1);
            (w, b)
        });
        Self {
            embed_w,
            embed_b,
            layers,
            heads,
            total: offset,
            names,
        }
    }

    /// Every tensor in storage order.
    pub fn leaves(&self) -> &[(String, Slot)] {
        &self.names
    }
}

/// Flat tensor buffer laid out by [`Layout`]. Used for both parameters and
/// their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    pub config: MixerConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

/// Gradient buffer, congruent with the parameters it differentiates.
pub type Gradients = MixerParams;

impl MixerParams {
    pub fn zeros(config: &MixerConfig) -> Self {
        let layout = Layout::new(config);
        Self {
            config: config.clone(),
            data: vec![0.0; layout.total],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view(&self, slot: Slot) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.data[slot.range()], slot.rows, slot.cols)
    }

    pub fn view_mut(&mut self, slot: Slot) -> DMatrixViewMut<'_, f64> {
        DMatrixViewMut::from_slice(&mut self.data[slot.range()], slot.rows, slot.cols)
    }

    pub fn slice(&self, slot: Slot) -> &[f64] {
        &self.data[slot.range()]
    }

    pub fn slice_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.data[slot.range()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_congruent(&self, other: &Self) -> bool {
        self.config == other.config && self.data.len() == other.data.len()
    }
}

/// Fan-in scaled Gaussian weights, zero biases, unit gains, and an r-head
/// bias equal to the identity rotation code.
pub fn init_params(config: &MixerConfig, seed: u64) -> Result<MixerParams, MixerError> {
    config.validate()?;
    let mut p = MixerParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = p.layout.clone();
    let mut gaussian = |p: &mut MixerParams, slot: Slot, fan_in: usize| {
        let std = 1.0 / (fan_in as f64).sqrt();
        for x in p.slice_mut(slot) {
            *x = std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    };
    gaussian(&mut p, layout.embed_w, 3);
    for l in &layout.layers {
        gaussian(&mut p, l.token1_w, config.tokens);
        gaussian(&mut p, l.token2_w, config.token_hidden);
        gaussian(&mut p, l.channel1_w, config.channels);
        gaussian(&mut p, l.channel2_w, config.channel_hidden);
        p.slice_mut(l.ln1_gain).fill(1.0);
        p.slice_mut(l.ln2_gain).fill(1.0);
    }
    for (w, _) in &layout.heads {
        gaussian(&mut p, *w, config.feature_dim());
    }
    p.slice_mut(layout.heads[0].1).copy_from_slice(&IDENTITY_6D);
    Ok(p)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-form GELU; returns the value and `tanh(u)` for the backward pass.
fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_K * (x + GELU_C * x * x * x);
    // tanh through one exp; saturates cleanly for large |u|
    let t = if u > 20.0 {
        1.0
    } else if u < -20.0 {
        -1.0
    } else {
        1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
    };
    (0.5 * x * (1.0 + t), t)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise layer normalization of an `S × C` matrix.
struct NormCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &DMatrix<f64>, gain: &[f64], bias: &[f64]) -> (DMatrix<f64>, NormCache) {
    let (rows, cols) = x.shape();
    let xs = x.as_slice();
    let mut mean = vec![0.0; rows];
    for col in xs.chunks_exact(rows) {
        for (m, v) in mean.iter_mut().zip(col) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= cols as f64);
    let mut var = vec![0.0; rows];
    for col in xs.chunks_exact(rows) {
        for ((s, v), m) in var.iter_mut().zip(col).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|s| 1.0 / (s / cols as f64 + LN_EPS).sqrt())
        .collect();
    let mut xhat = vec![0.0; rows * cols];
    let mut y = vec![0.0; rows * cols];
    for (c, ((xc, hc), yc)) in xs
        .chunks_exact(rows)
        .zip(xhat.chunks_exact_mut(rows))
        .zip(y.chunks_exact_mut(rows))
        .enumerate()
    {
        let (g, b) = (gain[c], bias[c]);
        for r in 0..rows {
            let h = (xc[r] - mean[r]) * inv_std[r];
            hc[r] = h;
            yc[r] = h * g + b;
        }
    }
    (
        DMatrix::from_vec(rows, cols, y),
        NormCache {
            xhat: DMatrix::from_vec(rows, cols, xhat),
            inv_std,
        },
    )
}

fn layer_norm_backward(
    cache: &NormCache,
    dy: &DMatrix<f64>,
    gain: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) -> DMatrix<f64> {
    let (rows, cols) = dy.shape();
    let mut dx = vec![0.0; rows * cols];
    let mut m1 = vec![0.0; rows];
    let mut m2 = vec![0.0; rows];
    for (c, ((dyc, hc), dc)) in dy
        .as_slice()
        .chunks_exact(rows)
        .zip(cache.xhat.as_slice().chunks_exact(rows))
        .zip(dx.chunks_exact_mut(rows))
        .enumerate()
    {
        let mut dg = 0.0;
        let mut db = 0.0;
        for r in 0..rows {
            let g = dyc[r];
            let h = hc[r];
            dg += g * h;
            db += g;
            let d = g * gain[c];
            dc[r] = d;
            m1[r] += d;
            m2[r] += d * h;
        }
        d_gain[c] += dg;
        d_bias[c] += db;
    }
    let n = cols as f64;
    for (hc, dc) in cache
        .xhat
        .as_slice()
        .chunks_exact(rows)
        .zip(dx.chunks_exact_mut(rows))
    {
        for r in 0..rows {
            dc[r] = cache.inv_std[r] * (dc[r] - m1[r] / n - hc[r] * m2[r] / n);
        }
    }
    DMatrix::from_vec(rows, cols, dx)
}

struct LayerCache {
    norm1: Option<NormCache>,
    u: DMatrix<f64>,
    z1: DMatrix<f64>,
    tanh1: DMatrix<f64>,
    a1: DMatrix<f64>,
    norm2: Option<NormCache>,
    v: DMatrix<f64>,
    z2: DMatrix<f64>,
    tanh2: DMatrix<f64>,
    a2: DMatrix<f64>,
}

/// Activations of one forward pass, consumed by [`backward`].
pub struct MixerCache {
    input: DMatrix<f64>,
    layers: Vec<LayerCache>,
    pooled: DVector<f64>,
    /// Largest absolute activation seen in the pass.
    pub max_activation: f64,
}

/// Adds `bias[c]` to every entry of column `c`.
fn add_row_bias(m: &mut DMatrix<f64>, bias: &[f64]) {
    let rows = m.nrows();
    for (col, b) in m.as_mut_slice().chunks_exact_mut(rows).zip(bias) {
        col.iter_mut().for_each(|x| *x += b);
    }
}

/// Adds `bias[r]` to every entry of row `r`.
fn add_col_bias(m: &mut DMatrix<f64>, bias: &[f64]) {
    let rows = m.nrows();
    for col in m.as_mut_slice().chunks_exact_mut(rows) {
        for (x, b) in col.iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn apply_gelu(z: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let zs = z.as_slice();
    let mut a = Vec::with_capacity(zs.len());
    let mut tanh = Vec::with_capacity(zs.len());
    for &x in zs {
        let (g, t) = gelu(x);
        a.push(g);
        tanh.push(t);
    }
    (
        DMatrix::from_vec(z.nrows(), z.ncols(), a),
        DMatrix::from_vec(z.nrows(), z.ncols(), tanh),
    )
}

fn gelu_backward(da: &mut DMatrix<f64>, z: &DMatrix<f64>, tanh: &DMatrix<f64>) {
    for ((d, x), t) in da
        .as_mut_slice()
        .iter_mut()
        .zip(z.as_slice())
        .zip(tanh.as_slice())
    {
        *d *= gelu_grad(*x, *t);
    }
}

fn column_sums(m: &DMatrix<f64>, out: &mut [f64]) {
    for (o, col) in out.iter_mut().zip(m.as_slice().chunks_exact(m.nrows())) {
        *o += col.iter().sum::<f64>();
    }
}

fn row_sums(m: &DMatrix<f64>, out: &mut [f64]) {
    for col in m.as_slice().chunks_exact(m.nrows()) {
        for (o, x) in out.iter_mut().zip(col) {
            *o += x;
        }
    }
}

fn amax(m: &DMatrix<f64>) -> f64 {
    m.as_slice().iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Input landmarks as an `S × 3` matrix, rejecting the wrong token count.
pub fn input_matrix(
    config: &MixerConfig,
    input: &[Vector3<f64>],
) -> Result<DMatrix<f64>, MixerError> {
    if input.len() != config.tokens {
        return Err(MixerError::ShapeMismatch(format!(
            "lifter takes exactly {} landmarks, got {}",
            config.tokens,
            input.len()
        )));
    }
    if !input.iter().all(|p| p.iter().all(|x| x.is_finite())) {
        return Err(MixerError::ShapeMismatch(
            "non-finite input landmark".into(),
        ));
    }
    Ok(DMatrix::from_fn(input.len(), 3, |r, c| input[r][c]))
}

fn head_outputs(config: &MixerConfig, flat: &[f64]) -> PoseState {
    PoseState::from_flat(flat, config.shape_dim, config.pose_dim)
}

/// Forward pass with cached activations.
pub fn forward(
    params: &MixerParams,
    input: &[Vector3<f64>],
) -> Result<(PoseState, MixerCache), MixerError> {
    let cfg = &params.config;
    let lay = &params.layout;
    let x = input_matrix(cfg, input)?;
    let mut h = &x * params.view(lay.embed_w);
    add_row_bias(&mut h, params.slice(lay.embed_b));
    let mut peak = amax(&h);

    let mut layers = Vec::with_capacity(cfg.layers);
    for ls in &lay.layers {
        let (u, norm1) = if cfg.layer_norm {
            let (u, c) = layer_norm(&h, params.slice(ls.ln1_gain), params.slice(ls.ln1_bias));
            (u, Some(c))
        } else {
            (h.clone(), None)
        };
        let mut z1 = params.view(ls.token1_w) * &u;
        add_col_bias(&mut z1, params.slice(ls.token1_b));
        let (a1, tanh1) = apply_gelu(&z1);
        let mut y1 = params.view(ls.token2_w) * &a1;
        add_col_bias(&mut y1, params.slice(ls.token2_b));
        let h_mid = if cfg.residual { h + y1 } else { y1 };

        let (v, norm2) = if cfg.layer_norm {
            let (v, c) = layer_norm(&h_mid, params.slice(ls.ln2_gain), params.slice(ls.ln2_bias));
            (v, Some(c))
        } else {
            (h_mid.clone(), None)
        };
        let mut z2 = &v * params.view(ls.channel1_w);
        add_row_bias(&mut z2, params.slice(ls.channel1_b));
        let (a2, tanh2) = apply_gelu(&z2);
        let mut y2 = &a2 * params.view(ls.channel2_w);
        add_row_bias(&mut y2, params.slice(ls.channel2_b));
        h = if cfg.residual { h_mid + y2 } else { y2 };

        peak = peak.max(amax(&z1)).max(amax(&z2)).max(amax(&h));
        layers.push(LayerCache {
            norm1,
            u,
            z1,
            tanh1,
            a1,
            norm2,
            v,
            z2,
            tanh2,
            a2,
        });
    }

    let pooled: DVector<f64> = match cfg.readout {
        Readout::MeanPool => h.row_mean().transpose(),
        Readout::Flatten => DVector::from_column_slice(h.as_slice()),
    };
    let mut out = Vec::with_capacity(cfg.output_dim());
    for (w, b) in &lay.heads {
        let o = params.view(*w).tr_mul(&pooled);
        out.extend(o.iter().zip(params.slice(*b)).map(|(o, b)| o + b));
    }
    peak = peak.max(out.iter().fold(0.0, |a, x| a.max(x.abs())));
    Ok((
        head_outputs(cfg, &out),
        MixerCache {
            input: x,
            layers,
            pooled,
            max_activation: peak,
        },
    ))
}

/// Prediction without keeping activations.
pub fn predict(params: &MixerParams, input: &[Vector3<f64>]) -> Result<PoseState, MixerError> {
    Ok(forward(params, input)?.0)
}

/// Reverse pass. Adds parameter gradients into `grads` and returns the
/// gradient with respect to the input landmarks (`S × 3`).
pub fn backward_into(
    params: &MixerParams,
    cache: &MixerCache,
    upstream: &PoseState,
    grads: &mut Gradients,
) -> Result<DMatrix<f64>, MixerError> {
    let cfg = &params.config;
    let lay = &params.layout;
    if !grads.is_congruent(params) {
        return Err(MixerError::ShapeMismatch(
            "gradient buffer does not match parameters".into(),
        ));
    }
    if cache.layers.len() != cfg.layers
        || cache.input.nrows() != cfg.tokens
        || cache.pooled.len() != cfg.feature_dim()
    {
        return Err(MixerError::StaleCache(
            "cache was produced by a different configuration".into(),
        ));
    }
    if upstream.beta.len() != cfg.shape_dim || upstream.theta.len() != cfg.pose_dim {
        return Err(MixerError::ShapeMismatch(
            "upstream gradient has wrong head widths".into(),
        ));
    }

    let s = cfg.tokens;
    let g_out = upstream.to_flat();
    let mut d_pooled = DVector::zeros(cfg.feature_dim());
    let mut start = 0;
    for (w, b) in &lay.heads {
        let g = DVector::from_column_slice(&g_out[start..start + b.rows]);
        start += b.rows;
        grads.view_mut(*w).ger(1.0, &cache.pooled, &g, 1.0);
        for (db, gi) in grads.slice_mut(*b).iter_mut().zip(g.iter()) {
            *db += gi;
        }
        d_pooled.gemv(1.0, &params.view(*w), &g, 1.0);
    }
    let mut dh = match cfg.readout {
        Readout::MeanPool => DMatrix::from_fn(s, cfg.channels, |_, c| d_pooled[c] / s as f64),
        Readout::Flatten => DMatrix::from_column_slice(s, cfg.channels, d_pooled.as_slice()),
    };

    for (ls, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // channel mixing
        let dy2 = &dh;
        grads
            .view_mut(ls.channel2_w)
            .gemm(1.0, &lc.a2.transpose(), dy2, 1.0);
        column_sums(dy2, grads.slice_mut(ls.channel2_b));
        let mut dz2 = dy2 * params.view(ls.channel2_w).transpose();
        gelu_backward(&mut dz2, &lc.z2, &lc.tanh2);
        grads
            .view_mut(ls.channel1_w)
            .gemm(1.0, &lc.v.transpose(), &dz2, 1.0);
        column_sums(&dz2, grads.slice_mut(ls.channel1_b));
        let dv = &dz2 * params.view(ls.channel1_w).transpose();
        let dv = match &lc.norm2 {
            Some(nc) => {
                let (g, rest) = split_gain_bias(grads, ls.ln2_gain, ls.ln2_bias);
                layer_norm_backward(nc, &dv, params.slice(ls.ln2_gain), g, rest)
            }
            None => dv,
        };
        let dh_mid = if cfg.residual { &dh + dv } else { dv };

        // token mixing
        let dy1 = &dh_mid;
        grads
            .view_mut(ls.token2_w)
            .gemm(1.0, dy1, &lc.a1.transpose(), 1.0);
        row_sums(dy1, grads.slice_mut(ls.token2_b));
        let mut dz1 = params.view(ls.token2_w).transpose() * dy1;
        gelu_backward(&mut dz1, &lc.z1, &lc.tanh1);
        grads
            .view_mut(ls.token1_w)
            .gemm(1.0, &dz1, &lc.u.transpose(), 1.0);
        row_sums(&dz1, grads.slice_mut(ls.token1_b));
        let du = params.view(ls.token1_w).transpose() * &dz1;
        let du = match &lc.norm1 {
            Some(nc) => {
                let (g, rest) = split_gain_bias(grads, ls.ln1_gain, ls.ln1_bias);
                layer_norm_backward(nc, &du, params.slice(ls.ln1_gain), g, rest)
            }
            None => du,
        };
        dh = if cfg.residual { dh_mid + du } else { du };
    }

    grads
        .view_mut(lay.embed_w)
        .gemm(1.0, &cache.input.transpose(), &dh, 1.0);
    column_sums(&dh, grads.slice_mut(lay.embed_b));
    Ok(&dh * params.view(lay.embed_w).transpose())
}

/// Gain and bias gradient slices; the layout places bias right after gain.
fn split_gain_bias(grads: &mut Gradients, gain: Slot, bias: Slot) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(gain.offset + gain.len(), bias.offset);
    let (g, b) = grads.data[gain.offset..bias.offset + bias.len()].split_at_mut(gain.len());
    (g, b)
}

/// Fresh gradients of one example plus the input gradient.
pub fn backward(
    params: &MixerParams,
    cache: &MixerCache,
    upstream: &PoseState,
) -> Result<(Gradients, DMatrix<f64>), MixerError> {
    let mut grads = params.zeros_like();
    let dx = backward_into(params, cache, upstream, &mut grads)?;
    Ok((grads, dx))
}
