//! Waveform ingestion (PCM16 mono RIFF/WAVE) and the `FMAT` feature cache.
//!
//! Cache layout: ASCII `FMAT`, rows (u32 LE), cols (u32 LE), then
//! `rows * cols` little-endian IEEE-754 `f32` values in row-major order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::frontend::FeatureMatrix;

pub const CACHE_MAGIC: [u8; 4] = *b"FMAT";
pub const CACHE_HEADER_LEN: usize = 12;

/// Full-scale divisor for signed 16-bit samples.
const PCM16_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("not a RIFF/WAVE file")]
    NotWav,
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("truncated file")]
    TruncatedFile,
    #[error("bad cache magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("cache shape mismatch: header {rows}x{cols}, payload {payload} values")]
    ShapeMismatch { rows: usize, cols: usize, payload: usize },
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("non-finite value in feature matrix")]
    NonFinite,
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
}

/// A mono waveform normalised into `[-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl SignalBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidSignal("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(AudioError::InvalidSignal("empty signal".into()));
        }
        let limit = 1.0 + 2f64.powi(-15);
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() >= limit) {
            return Err(AudioError::InvalidSignal(format!("sample {bad} out of range")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Decodes an in-memory RIFF/WAVE image. Only PCM16 mono is accepted.
pub fn decode_wav(bytes: &[u8]) -> Result<SignalBuffer, AudioError> {
    if bytes.len() < 12 {
        return if bytes.len() >= 4 && &bytes[0..4] == b"RIFF" {
            Err(AudioError::TruncatedFile)
        } else {
            Err(AudioError::NotWav)
        };
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWav);
    }

    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(AudioError::TruncatedFile);
                }
                format = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (audio_format, channels, sample_rate, bits) =
                    format.ok_or_else(|| AudioError::UnsupportedEncoding("data before fmt".into()))?;
                if audio_format != 1 {
                    return Err(AudioError::UnsupportedEncoding(format!(
                        "audio format {audio_format}"
                    )));
                }
                if channels != 1 {
                    return Err(AudioError::UnsupportedEncoding(format!("{channels} channels")));
                }
                if bits != 16 {
                    return Err(AudioError::UnsupportedEncoding(format!("{bits} bits/sample")));
                }
                if body + size > bytes.len() || !size.is_multiple_of(2) {
                    return Err(AudioError::TruncatedFile);
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / PCM16_SCALE)
                    .collect();
                return SignalBuffer::new(samples, sample_rate);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    // no data chunk before end of file
    Err(AudioError::TruncatedFile)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<SignalBuffer, AudioError> {
    let bytes = fs::read(path)?;
    decode_wav(&bytes)
}

/// Quantises samples to PCM16 (round to nearest, saturating).
pub fn encode_wav(signal: &SignalBuffer) -> Vec<u8> {
    let data_len = signal.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&signal.sample_rate().to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in signal.samples() {
        let q = (s * PCM16_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(signal: &SignalBuffer, path: impl AsRef<Path>) -> Result<(), AudioError> {
    fs::write(path, encode_wav(signal))?;
    Ok(())
}

pub fn encode_feature_cache(matrix: &FeatureMatrix) -> Result<Vec<u8>, AudioError> {
    encode_matrix(matrix.data())
}

/// Serialises any finite matrix in the `FMAT` layout (values narrowed to `f32`).
pub fn encode_matrix(data: &Array2<f64>) -> Result<Vec<u8>, AudioError> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(AudioError::NonFinite);
    }
    let (rows, cols) = data.dim();
    let mut out = Vec::with_capacity(CACHE_HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(&CACHE_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    // iter() on a standard-layout array walks row-major
    for v in data.as_standard_layout().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses one `FMAT` block; returns the matrix and the number of bytes consumed.
pub fn decode_matrix(bytes: &[u8]) -> Result<(Array2<f64>, usize), AudioError> {
    if bytes.len() < CACHE_HEADER_LEN {
        return Err(AudioError::TruncatedFile);
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != CACHE_MAGIC {
        return Err(AudioError::BadMagic(magic));
    }
    let rows = u32_at(bytes, 4) as usize;
    let cols = u32_at(bytes, 8) as usize;
    let available = (bytes.len() - CACHE_HEADER_LEN) / 4;
    let needed = rows * cols;
    if available < needed {
        return Err(AudioError::ShapeMismatch {
            rows,
            cols,
            payload: available,
        });
    }
    let payload = &bytes[CACHE_HEADER_LEN..CACHE_HEADER_LEN + needed * 4];
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((rows, cols), values).expect("shape checked above");
    Ok((data, CACHE_HEADER_LEN + needed * 4))
}

pub fn decode_feature_cache(bytes: &[u8]) -> Result<FeatureMatrix, AudioError> {
    let (data, used) = decode_matrix(bytes)?;
    if used != bytes.len() {
        let (rows, cols) = data.dim();
        return Err(AudioError::ShapeMismatch {
            rows,
            cols,
            payload: (bytes.len() - CACHE_HEADER_LEN) / 4,
        });
    }
    FeatureMatrix::new(data).map_err(|_| AudioError::NonFinite)
}

pub fn write_feature_cache(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let bytes = encode_feature_cache(matrix)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<FeatureMatrix, AudioError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_feature_cache(&bytes)
}
