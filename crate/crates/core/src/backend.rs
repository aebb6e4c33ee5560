//! Tiny trainable back ends mapping an `N x D` feature matrix to a score.
//!
//! Every model shares the same trunk: an optional trainable compression of
//! spectrogram frames, two strided temporal convolutions (total stride `L`),
//! and an optional bidirectional recurrent block. The trunk output is turned
//! into an utterance embedding in one of three ways:
//!
//! * [`Strategy::TrimPad`]: pad or randomly crop to `K` frames, flatten the
//!   `K/L x D_h` map and project it with one dense layer;
//! * [`Strategy::Chunked`]: apply the trim/pad network to consecutive chunks
//!   and average their scores;
//! * [`Strategy::PoolMean`] / [`Strategy::PoolAttention`]: pool over however
//!   many frames the trial has.
//!
//! The head is either an affine logit (sigmoid criterion) or a 64-d projection
//! scored by cosine against one weight vector per class.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::FeatureMatrix;
use crate::losses::{self, Label, LossConfig, LossError, NUM_CLASSES};
use crate::nn::layers::{attention_pool_on, conv1d, linear, recurrent_block, AttentionVars, GruVars};
use crate::nn::{glorot_uniform, NnError, ParamSet, Tape, Var};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("trial has no frames")]
    EmptyInput,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    TrimPad {
        #[serde(default = "default_trim_frames")]
        k: usize,
    },
    Chunked {
        #[serde(default = "default_chunk")]
        k: usize,
        #[serde(default = "default_chunk")]
        shift: usize,
    },
    PoolAttention,
    PoolMean,
}

fn default_trim_frames() -> usize {
    256
}
fn default_chunk() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub strategy: Strategy,
    pub kernel: usize,
    /// Stride of each of the two convolutions; `L = stride^2`.
    pub stride: usize,
    pub conv_channels: usize,
    /// Embedding width `D_h`.
    pub hidden: usize,
    /// Attention width `D_a`; `hidden / 2` when unset.
    pub attention_dim: Option<usize>,
    pub recurrent: bool,
    /// Learn a linear compression of the input frames (spectrogram input).
    pub compression: bool,
    pub compress_dim: usize,
    /// Width of the projection feeding the cosine heads.
    pub embed_dim: usize,
    pub leaky_slope: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::PoolMean,
            kernel: 3,
            stride: 2,
            conv_channels: 32,
            hidden: 32,
            attention_dim: None,
            recurrent: false,
            compression: false,
            compress_dim: 60,
            embed_dim: 64,
            leaky_slope: 0.01,
        }
    }
}

impl BackendConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    /// Total temporal stride of the convolution stack.
    pub fn total_stride(&self) -> usize {
        self.stride * self.stride
    }

    pub fn attention_width(&self) -> usize {
        self.attention_dim.unwrap_or(self.hidden / 2).max(1)
    }

    /// Hidden sequence length produced for an `n`-frame input.
    pub fn hidden_len(&self, n: usize) -> usize {
        n.div_ceil(self.stride).div_ceil(self.stride)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::InvalidConfig(m));
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.stride == 0 || self.conv_channels == 0 || self.hidden == 0 || self.embed_dim == 0 || self.compress_dim == 0 {
            return bad("widths and stride must be positive".into());
        }
        if self.recurrent && !self.hidden.is_multiple_of(2) {
            return bad(format!("recurrent block needs an even hidden width, got {}", self.hidden));
        }
        let l = self.total_stride();
        match self.strategy {
            Strategy::TrimPad { k } | Strategy::Chunked { k, .. } if k == 0 || k % l != 0 => {
                bad(format!("frame count {k} must be a positive multiple of the total stride {l}"))
            }
            Strategy::Chunked { shift: 0, .. } => bad("chunk shift must be positive".into()),
            _ => Ok(()),
        }
    }
}

/// Rows `0..N` copied and zero rows appended when `N <= K`; otherwise a
/// contiguous window of `K` rows starting at a uniform offset in `[0, N - K]`.
pub fn prepare_fixed_input<R: Rng + ?Sized>(x: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    if n <= k {
        let mut out = Array2::zeros((k, x.ncols()));
        out.slice_mut(s![..n, ..]).assign(&x);
        out
    } else {
        let start = rng.random_range(0..=n - k);
        x.slice(s![start..start + k, ..]).to_owned()
    }
}

/// Number of chunks covering `n` frames: `1 + ceil(max(n - k, 0) / shift)`.
pub fn chunk_count(n: usize, k: usize, shift: usize) -> usize {
    1 + n.saturating_sub(k).div_ceil(shift)
}

/// Consecutive `k`-frame chunks starting every `shift` frames; frames past the
/// end replicate the last frame.
pub fn split_chunks(x: ArrayView2<'_, f64>, k: usize, shift: usize) -> Vec<Array2<f64>> {
    let n = x.nrows();
    (0..chunk_count(n, k, shift))
        .map(|m| Array2::from_shape_fn((k, x.ncols()), |(r, c)| x[[(m * shift + r).min(n - 1), c]]))
        .collect()
}

/// Mean of `scorer` over the chunks of `x`.
pub fn chunk_and_score<F>(x: ArrayView2<'_, f64>, k: usize, shift: usize, mut scorer: F) -> Result<f64, BackendError>
where
    F: FnMut(usize, ArrayView2<'_, f64>) -> Result<f64, BackendError>,
{
    if x.nrows() == 0 {
        return Err(BackendError::EmptyInput);
    }
    let chunks = split_chunks(x, k, shift);
    let mut total = 0.0;
    for (m, c) in chunks.iter().enumerate() {
        total += scorer(m, c.view())?;
    }
    Ok(total / chunks.len() as f64)
}

/// Compression layer initialised from a `C x B` filterbank: `weight = fb^T`,
/// zero bias, so `frame W = fb frame` at initialisation.
pub fn init_spectrogram_compression(filterbank: &Array2<f64>, input_dim: usize) -> Result<(Array2<f64>, Array2<f64>), BackendError> {
    if filterbank.ncols() != input_dim {
        return Err(BackendError::ShapeMismatch(format!("filterbank has {} bins, input has {input_dim}", filterbank.ncols())));
    }
    Ok((filterbank.t().to_owned(), Array2::zeros((1, filterbank.nrows()))))
}

/// Parameter leaves of one tape, looked up by name.
struct Bound<'a> {
    params: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    fn new(t: &mut Tape, params: &'a ParamSet) -> Self {
        let vars = params.values().map(|v| t.leaf(v.clone())).collect();
        Self { params, vars }
    }

    fn get(&self, name: &str) -> Result<Var, BackendError> {
        self.params
            .names()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| BackendError::MissingParam(name.to_string()))
    }

    fn gru(&self, prefix: &str) -> Result<GruVars, BackendError> {
        Ok(GruVars {
            w_x: self.get(&format!("{prefix}.w_x"))?,
            u_z: self.get(&format!("{prefix}.u_z"))?,
            u_r: self.get(&format!("{prefix}.u_r"))?,
            u_n: self.get(&format!("{prefix}.u_n"))?,
            b: self.get(&format!("{prefix}.b"))?,
        })
    }
}

/// A back end, its head and the criterion that shapes the head.
#[derive(Debug, Clone, PartialEq)]
pub struct CountermeasureModel {
    pub backend: BackendConfig,
    pub loss: LossConfig,
    pub input_dim: usize,
    pub params: ParamSet,
}

impl CountermeasureModel {
    /// Glorot-uniform weights and zero biases, drawn from `rng` in parameter
    /// order. `filterbank` seeds the compression layer when it is enabled.
    pub fn init<R: Rng + ?Sized>(
        backend: BackendConfig,
        loss: LossConfig,
        input_dim: usize,
        filterbank: Option<&Array2<f64>>,
        rng: &mut R,
    ) -> Result<Self, BackendError> {
        backend.validate()?;
        loss.validate()?;
        if input_dim == 0 {
            return Err(BackendError::InvalidConfig("input dimension must be positive".into()));
        }
        let mut p = ParamSet::new();
        let dense = |p: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut R| {
            p.push(format!("{name}.weight"), glorot_uniform(rows, cols, rng));
            p.push(format!("{name}.bias"), Array2::zeros((1, cols)));
        };

        let mut width = input_dim;
        if backend.compression {
            let fb = filterbank.ok_or_else(|| BackendError::InvalidConfig("compression needs a filterbank".into()))?;
            if fb.nrows() != backend.compress_dim {
                return Err(BackendError::ShapeMismatch(format!("filterbank has {} channels, expected {}", fb.nrows(), backend.compress_dim)));
            }
            let (w, b) = init_spectrogram_compression(fb, input_dim)?;
            p.push("compress.weight", w);
            p.push("compress.bias", b);
            width = backend.compress_dim;
        }
        dense(&mut p, "conv1", backend.kernel * width, backend.conv_channels, rng);
        dense(&mut p, "conv2", backend.kernel * backend.conv_channels, backend.hidden, rng);
        if backend.recurrent {
            let h = backend.hidden;
            for layer in 0..2 {
                for dir in ["fw", "bw"] {
                    let prefix = format!("rnn{layer}.{dir}");
                    p.push(format!("{prefix}.w_x"), glorot_uniform(h, 3 * (h / 2), rng));
                    for gate in ["u_z", "u_r", "u_n"] {
                        p.push(format!("{prefix}.{gate}"), glorot_uniform(h / 2, h / 2, rng));
                    }
                    p.push(format!("{prefix}.b"), Array2::zeros((1, 3 * (h / 2))));
                }
            }
        }
        match backend.strategy {
            Strategy::PoolAttention => {
                let a = backend.attention_width();
                p.push("attn.w", glorot_uniform(backend.hidden, a, rng));
                p.push("attn.b", Array2::zeros((1, a)));
                p.push("attn.u", glorot_uniform(a, 1, rng));
            }
            Strategy::TrimPad { k } | Strategy::Chunked { k, .. } => {
                dense(&mut p, "flat", k / backend.total_stride() * backend.hidden, backend.hidden, rng);
            }
            Strategy::PoolMean => {}
        }
        if loss.uses_cosine_head() {
            dense(&mut p, "proj", backend.hidden, backend.embed_dim, rng);
            p.push("class.weight", glorot_uniform(NUM_CLASSES, backend.embed_dim, rng));
        } else {
            dense(&mut p, "head", backend.hidden, 1, rng);
        }
        Ok(Self {
            backend,
            loss,
            input_dim,
            params: p,
        })
    }

    /// Builds the trunk and pooling on `t`, returning the `1 x D_h` embedding.
    fn embed_on(&self, t: &mut Tape, b: &Bound<'_>, x: &Array2<f64>) -> Result<Var, BackendError> {
        if x.nrows() == 0 {
            return Err(BackendError::EmptyInput);
        }
        if x.ncols() != self.input_dim {
            return Err(BackendError::ShapeMismatch(format!("{} feature columns, model expects {}", x.ncols(), self.input_dim)));
        }
        let cfg = &self.backend;
        let mut h = t.leaf(x.clone());
        if cfg.compression {
            h = linear(t, h, b.get("compress.weight")?, b.get("compress.bias")?);
        }
        for conv in ["conv1", "conv2"] {
            let y = conv1d(t, h, b.get(&format!("{conv}.weight"))?, b.get(&format!("{conv}.bias"))?, cfg.kernel, cfg.stride);
            h = t.leaky_relu(y, cfg.leaky_slope);
        }
        if cfg.recurrent {
            let layers = [(b.gru("rnn0.fw")?, b.gru("rnn0.bw")?), (b.gru("rnn1.fw")?, b.gru("rnn1.bw")?)];
            h = recurrent_block(t, h, &layers);
        }
        Ok(match cfg.strategy {
            Strategy::PoolMean => t.mean_rows(h),
            Strategy::PoolAttention => {
                let vars = AttentionVars {
                    w: b.get("attn.w")?,
                    b: b.get("attn.b")?,
                    u: b.get("attn.u")?,
                };
                attention_pool_on(t, h, vars).0
            }
            Strategy::TrimPad { k } | Strategy::Chunked { k, .. } => {
                if x.nrows() != k {
                    return Err(BackendError::ShapeMismatch(format!("fixed-size network expects {k} frames, got {}", x.nrows())));
                }
                let flat = t.flatten(h);
                let y = linear(t, flat, b.get("flat.weight")?, b.get("flat.bias")?);
                t.leaky_relu(y, cfg.leaky_slope)
            }
        })
    }

    /// Head output: `1 x C` class cosines, or the `1 x 1` sigmoid logit.
    fn head_on(&self, t: &mut Tape, b: &Bound<'_>, o: Var) -> Result<Var, BackendError> {
        if self.loss.uses_cosine_head() {
            let e = linear(t, o, b.get("proj.weight")?, b.get("proj.bias")?);
            let e_hat = t.normalize_rows(e);
            let c_hat = t.normalize_rows(b.get("class.weight")?);
            let ct = t.transpose(c_hat);
            Ok(t.matmul(e_hat, ct))
        } else {
            Ok(linear(t, o, b.get("head.weight")?, b.get("head.bias")?))
        }
    }

    /// Network inputs for one trial: a single `K`-frame window (trim/pad, using
    /// `rng` only when cropping), the chunk list, or the whole matrix.
    pub fn prepare_inputs<R: Rng + ?Sized>(&self, x: &FeatureMatrix, rng: &mut R) -> Result<Vec<Array2<f64>>, BackendError> {
        if x.num_frames() == 0 {
            return Err(BackendError::EmptyInput);
        }
        Ok(match self.backend.strategy {
            Strategy::TrimPad { k } => vec![prepare_fixed_input(x.view(), k, rng)],
            Strategy::Chunked { k, shift } => split_chunks(x.view(), k, shift),
            Strategy::PoolMean | Strategy::PoolAttention => vec![x.data().clone()],
        })
    }

    /// Utterance embedding `o` of one prepared input.
    pub fn embedding(&self, input: &Array2<f64>) -> Result<Array1<f64>, BackendError> {
        let mut t = Tape::new();
        let b = Bound::new(&mut t, &self.params);
        let o = self.embed_on(&mut t, &b, input)?;
        Ok(t.value(o).row(0).to_owned())
    }

    /// Raw head output of one prepared input.
    pub fn head_output(&self, input: &Array2<f64>) -> Result<Vec<f64>, BackendError> {
        let mut t = Tape::new();
        let b = Bound::new(&mut t, &self.params);
        let o = self.embed_on(&mut t, &b, input)?;
        let out = self.head_on(&mut t, &b, o)?;
        Ok(t.value(out).iter().cloned().collect())
    }

    /// Bonafide score: mean of the per-input scores.
    pub fn score_inputs(&self, inputs: &[Array2<f64>]) -> Result<f64, BackendError> {
        if inputs.is_empty() {
            return Err(BackendError::EmptyInput);
        }
        let mut total = 0.0;
        for x in inputs {
            total += losses::inference_score(&self.head_output(x)?, &self.loss);
        }
        Ok(total / inputs.len() as f64)
    }

    pub fn score<R: Rng + ?Sized>(&self, x: &FeatureMatrix, rng: &mut R) -> Result<f64, BackendError> {
        self.score_inputs(&self.prepare_inputs(x, rng)?)
    }

    /// Mean criterion value over the prepared inputs of one trial, and its
    /// gradient with respect to every parameter.
    pub fn loss_and_grad(&self, inputs: &[Array2<f64>], target: Label) -> Result<(f64, ParamSet), BackendError> {
        if inputs.is_empty() {
            return Err(BackendError::EmptyInput);
        }
        let scale = 1.0 / inputs.len() as f64;
        let mut total = 0.0;
        let mut grads = self.params.zeros_like();
        for x in inputs {
            let mut t = Tape::new();
            let b = Bound::new(&mut t, &self.params);
            let o = self.embed_on(&mut t, &b, x)?;
            let out = self.head_on(&mut t, &b, o)?;
            let values: Vec<f64> = t.value(out).iter().cloned().collect();
            let (loss, dout) = losses::loss_and_grad(&values, target, &self.loss)?;
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss.into());
            }
            let local = Array2::from_shape_vec(t.value(out).raw_dim(), dout).expect("gradient matches head output");
            let root = t.custom(out, loss, local);
            let mut g = t.backward(root, scale);
            for (slot, &v) in grads.values_mut().zip(&b.vars) {
                let shape = slot.dim();
                *slot += &g.take_or_zeros(v, shape);
            }
            total += scale * loss;
        }
        Ok((total, grads))
    }

    /// Worst relative error between the analytic parameter gradient and
    /// central differences with step `eps`, for one prepared trial.
    pub fn gradient_check(&self, inputs: &[Array2<f64>], target: Label, eps: f64) -> Result<f64, BackendError> {
        self.loss_and_grad(inputs, target)?;
        let mut probe = self.clone();
        let flat = self.params.flatten();
        Ok(crate::nn::finite_difference_check(
            |theta| {
                probe.params.assign_flat(theta);
                match probe.loss_and_grad(inputs, target) {
                    Ok((l, g)) => (l, g.flatten()),
                    Err(_) => (f64::NAN, vec![f64::NAN; theta.len()]),
                }
            },
            &flat,
            eps,
        )?)
    }

    pub fn param_counts(&self) -> std::collections::BTreeMap<String, usize> {
        self.params.count_by_module()
    }
}
