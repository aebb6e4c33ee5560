//! Short-time spectral front ends: log power spectrogram (257-d), static
//! linear filterbank energies (60-d) and LFCC with dynamics (60-d).

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::SignalBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("empty signal")]
    EmptySignal,
    #[error("frame of {frame} samples exceeds FFT size {nfft}")]
    FrameTooLong { frame: usize, nfft: usize },
    #[error("{num_filters} filters collide after rounding to {nfft}-point FFT bins")]
    TooManyFilters { num_filters: usize, nfft: usize },
    #[error("invalid frontend config: {0}")]
    InvalidConfig(String),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("sample rate {got} does not match configured {expected}")]
    SampleRateMismatch { got: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Spec,
    Lfb,
    Lfcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

impl WindowKind {
    /// Periodic window of `len` samples.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Rectangular => vec![1.0; len],
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub nfft: usize,
    pub kind: FeatureKind,
    pub window: WindowKind,
    pub lfb_channels: usize,
    pub lfcc_channels: usize,
    pub lfcc_ceps: usize,
    pub delta_window: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            frame_len_ms: 20.0,
            frame_shift_ms: 10.0,
            nfft: 512,
            kind: FeatureKind::Lfcc,
            window: WindowKind::Hann,
            lfb_channels: 60,
            lfcc_channels: 20,
            lfcc_ceps: 20,
            delta_window: 2,
            log_floor: 1e-12,
        }
    }
}

impl FrontendConfig {
    pub fn with_kind(kind: FeatureKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn frame_len_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_len_ms / 1000.0).round() as usize
    }

    pub fn frame_shift_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn num_bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Width of the produced feature frames.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            FeatureKind::Spec => self.num_bins(),
            FeatureKind::Lfb => self.lfb_channels,
            FeatureKind::Lfcc => 3 * self.lfcc_ceps,
        }
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        let bad = |m: &str| Err(FrontendError::InvalidConfig(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.frame_len_samples() == 0 || self.frame_shift_samples() == 0 {
            return bad("frame length and shift must cover at least one sample");
        }
        if self.frame_len_samples() > self.nfft {
            return Err(FrontendError::FrameTooLong {
                frame: self.frame_len_samples(),
                nfft: self.nfft,
            });
        }
        if self.lfcc_ceps == 0 || self.lfcc_ceps > self.lfcc_channels {
            return bad("lfcc_ceps must be in 1..=lfcc_channels");
        }
        if self.delta_window == 0 {
            return bad("delta_window must be at least 1");
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return bad("log_floor must be a small positive value");
        }
        Ok(())
    }
}

/// N x D feature frames for one trial. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self, FrontendError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FrontendError::NonFinite);
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    /// Frame count.
    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Splits a signal into frames starting every `shift` samples; the final
/// frames are zero padded. Every frame start lies inside the signal.
pub fn frame_signal(samples: &[f64], frame_len: usize, shift: usize) -> Result<Vec<Vec<f64>>, FrontendError> {
    if samples.is_empty() {
        return Err(FrontendError::EmptySignal);
    }
    let count = samples.len().div_ceil(shift);
    Ok((0..count)
        .map(|m| {
            let start = m * shift;
            let end = (start + frame_len).min(samples.len());
            let mut frame = samples[start..end].to_vec();
            frame.resize(frame_len, 0.0);
            frame
        })
        .collect())
}

/// Cached FFT plan and analysis window.
#[derive(Clone)]
pub struct SpectrumAnalyzer {
    nfft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for SpectrumAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectrumAnalyzer").field("nfft", &self.nfft).finish()
    }
}

impl SpectrumAnalyzer {
    pub fn new(nfft: usize, window: Vec<f64>) -> Result<Self, FrontendError> {
        if window.len() > nfft {
            return Err(FrontendError::FrameTooLong {
                frame: window.len(),
                nfft,
            });
        }
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        Ok(Self { nfft, window, fft })
    }

    /// `|DFT_k|^2` of the windowed, zero-padded frame for `k = 0..=nfft/2`.
    pub fn power(&self, frame: &[f64]) -> Result<Vec<f64>, FrontendError> {
        if frame.len() != self.window.len() {
            return Err(FrontendError::FrameTooLong {
                frame: frame.len(),
                nfft: self.nfft,
            });
        }
        let mut buf = vec![Complex::new(0.0, 0.0); self.nfft];
        for (slot, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
            slot.re = x * w;
        }
        self.fft.process(&mut buf);
        Ok(buf[..self.nfft / 2 + 1].iter().map(|c| c.norm_sqr()).collect())
    }
}

/// One-shot power spectrum of `frame` under `window`, zero padded to `nfft`.
pub fn power_spectrum(frame: &[f64], window: WindowKind, nfft: usize) -> Result<Vec<f64>, FrontendError> {
    if frame.len() > nfft {
        return Err(FrontendError::FrameTooLong {
            frame: frame.len(),
            nfft,
        });
    }
    SpectrumAnalyzer::new(nfft, window.coefficients(frame.len()))?.power(frame)
}

/// Triangular filters with peaks of 1, boundaries spaced linearly over
/// `0..=sample_rate/2` and snapped to the nearest FFT bin.
pub fn build_linear_filterbank(num_filters: usize, nfft: usize, sample_rate: u32) -> Result<Array2<f64>, FrontendError> {
    if num_filters == 0 {
        return Err(FrontendError::InvalidConfig("num_filters must be at least 1".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let bins: Vec<usize> = (0..num_filters + 2)
        .map(|i| {
            let hz = i as f64 * nyquist / (num_filters + 1) as f64;
            (hz * nfft as f64 / sample_rate as f64).round() as usize
        })
        .collect();
    if bins.windows(2).any(|w| w[0] == w[1]) {
        return Err(FrontendError::TooManyFilters { num_filters, nfft });
    }
    let mut fb = Array2::zeros((num_filters, nfft / 2 + 1));
    for (i, mut row) in fb.rows_mut().into_iter().enumerate() {
        let (lo, mid, hi) = (bins[i], bins[i + 1], bins[i + 2]);
        for k in lo..=mid {
            row[k] = (k - lo) as f64 / (mid - lo) as f64;
        }
        for k in mid..=hi {
            row[k] = (hi - k) as f64 / (hi - mid) as f64;
        }
    }
    Ok(fb)
}

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn dct_ii(v: &[f64], n_out: usize) -> Vec<f64> {
    assert!(n_out <= v.len(), "n_out must not exceed the input length");
    let m = v.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            let sum: f64 = v
                .iter()
                .enumerate()
                .map(|(n, &x)| x * (PI * k as f64 * (2 * n + 1) as f64 / (2.0 * m)).cos())
                .sum();
            scale * sum
        })
        .collect()
}

/// Regression deltas over `±window` frames with edge replication.
pub fn compute_deltas(stat: ArrayView2<'_, f64>, window: usize) -> Array2<f64> {
    let n = stat.nrows();
    let denom = 2.0 * (1..=window).map(|w| (w * w) as f64).sum::<f64>();
    let mut out = Array2::zeros(stat.raw_dim());
    for t in 0..n {
        let mut row = out.row_mut(t);
        for w in 1..=window {
            let next = stat.row((t + w).min(n - 1));
            let prev = stat.row(t.saturating_sub(w));
            row.scaled_add(w as f64, &(&next - &prev));
        }
        row /= denom;
    }
    out
}

/// Reusable extractor holding the FFT plan and filterbanks for one config.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    cfg: FrontendConfig,
    analyzer: SpectrumAnalyzer,
    filterbank: Option<Array2<f64>>,
}

impl FeatureExtractor {
    pub fn new(cfg: FrontendConfig) -> Result<Self, FrontendError> {
        cfg.validate()?;
        let analyzer = SpectrumAnalyzer::new(cfg.nfft, cfg.window.coefficients(cfg.frame_len_samples()))?;
        let filterbank = match cfg.kind {
            FeatureKind::Spec => None,
            FeatureKind::Lfb => Some(build_linear_filterbank(cfg.lfb_channels, cfg.nfft, cfg.sample_rate)?),
            FeatureKind::Lfcc => Some(build_linear_filterbank(cfg.lfcc_channels, cfg.nfft, cfg.sample_rate)?),
        };
        Ok(Self {
            cfg,
            analyzer,
            filterbank,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn extract(&self, signal: &SignalBuffer) -> Result<FeatureMatrix, FrontendError> {
        if signal.sample_rate() != self.cfg.sample_rate {
            return Err(FrontendError::SampleRateMismatch {
                got: signal.sample_rate(),
                expected: self.cfg.sample_rate,
            });
        }
        let frames = frame_signal(
            signal.samples(),
            self.cfg.frame_len_samples(),
            self.cfg.frame_shift_samples(),
        )?;
        let bins = self.cfg.num_bins();
        let mut power = Array2::zeros((frames.len(), bins));
        for (mut row, frame) in power.rows_mut().into_iter().zip(&frames) {
            let p = self.analyzer.power(frame)?;
            row.assign(&ndarray::ArrayView1::from(&p[..]));
        }
        let floor = self.cfg.log_floor;
        let data = match self.cfg.kind {
            FeatureKind::Spec => power.mapv(|p| (p + floor).ln()),
            FeatureKind::Lfb => {
                let fb = self.filterbank.as_ref().expect("lfb filterbank");
                power.dot(&fb.t()).mapv(|e| (e + floor).ln())
            }
            FeatureKind::Lfcc => {
                let fb = self.filterbank.as_ref().expect("lfcc filterbank");
                let log_fb = power.dot(&fb.t()).mapv(|e| (e + floor).ln());
                let ceps = self.cfg.lfcc_ceps;
                let mut stat = Array2::zeros((frames.len(), ceps));
                for (t, mut row) in stat.rows_mut().into_iter().enumerate() {
                    let c = dct_ii(log_fb.row(t).as_slice().expect("contiguous"), ceps);
                    row.assign(&ndarray::ArrayView1::from(&c[..]));
                    row[0] = (power.row(t).sum() + floor).ln();
                }
                let delta = compute_deltas(stat.view(), self.cfg.delta_window);
                let delta2 = compute_deltas(delta.view(), self.cfg.delta_window);
                concatenate(Axis(1), &[stat.view(), delta.view(), delta2.view()]).expect("equal row counts")
            }
        };
        FeatureMatrix::new(data)
    }
}

pub fn extract_features(signal: &SignalBuffer, cfg: &FrontendConfig) -> Result<FeatureMatrix, FrontendError> {
    FeatureExtractor::new(cfg.clone())?.extract(signal)
}
