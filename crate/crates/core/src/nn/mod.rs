//! Differentiable building blocks with analytic gradients.

pub mod gradcheck;
pub mod layers;
pub mod tape;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{self, AudioError};

pub use gradcheck::{finite_difference_check, finite_difference_check_coords, relative_error};
pub use layers::{attention_pool, cosine_scores, length_normalize, length_normalize_backward, mean_pool, recurrent_layer, AttentionParams, GruParams, RecurrentParams};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("zero-length vector cannot be normalised")]
    ZeroVector,
    #[error("empty sequence")]
    EmptySequence,
    #[error("recurrent width {0} must be even")]
    OddWidth(usize),
    #[error("loss evaluated to a non-finite value")]
    NonFiniteLoss,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Io(#[from] AudioError),
}

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Array2<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn values(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.entries.iter_mut().map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values().map(|v| v.len()).sum()
    }

    /// Scalar counts grouped by the name prefix before the first `.`.
    pub fn count_by_module(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, v) in self.iter() {
            let module = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(module).or_insert(0) += v.len();
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|(n, v)| (n.clone(), Array2::zeros(v.raw_dim()))).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().flat_map(|v| v.iter().cloned()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat vector length");
        let mut it = flat.iter();
        for v in self.values_mut() {
            v.iter_mut().for_each(|x| *x = *it.next().expect("length checked"));
        }
    }

    /// `self += scale * other`, matching entries by position.
    pub fn scaled_add(&mut self, scale: f64, other: &ParamSet) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.scaled_add(scale, b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Concatenated `FMAT` blocks plus a name -> (rows, cols, offset) manifest.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, BTreeMap<String, ManifestEntry>), NnError> {
        let mut bytes = Vec::new();
        let mut manifest = BTreeMap::new();
        for (name, v) in self.iter() {
            manifest.insert(
                name.to_string(),
                ManifestEntry {
                    rows: v.nrows(),
                    cols: v.ncols(),
                    offset: bytes.len() as u64,
                },
            );
            bytes.extend(audio_io::encode_matrix(v)?);
        }
        Ok((bytes, manifest))
    }

    /// Rebuilds a set in `order` from bytes written by [`ParamSet::to_bytes`].
    pub fn from_bytes<'a>(bytes: &[u8], manifest: &BTreeMap<String, ManifestEntry>, order: impl IntoIterator<Item = &'a str>) -> Result<Self, NnError> {
        let mut out = ParamSet::new();
        for name in order {
            let entry = manifest.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
            let start = usize::try_from(entry.offset).map_err(|_| NnError::InvalidArgument("offset overflow".into()))?;
            if start > bytes.len() {
                return Err(NnError::Io(AudioError::TruncatedFile));
            }
            let (m, _) = audio_io::decode_matrix(&bytes[start..])?;
            if m.dim() != (entry.rows, entry.cols) {
                return Err(NnError::ShapeMismatch(format!("{name}: manifest {}x{}, block {:?}", entry.rows, entry.cols, m.dim())));
            }
            out.push(name, m);
        }
        Ok(out)
    }
}

/// Uniform initialisation in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_round_trip_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.push("conv1.weight", glorot_uniform(6, 4, &mut rng));
        p.push("conv1.bias", Array2::zeros((1, 4)));
        p.push("head.weight", glorot_uniform(4, 1, &mut rng));
        let flat = p.flatten();
        assert_eq!(flat.len(), 32);
        let mut q = p.zeros_like();
        q.assign_flat(&flat);
        assert_eq!(p, q);
        let counts = p.count_by_module();
        assert_eq!(counts["conv1"], 28);
        assert_eq!(counts["head"], 4);
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(p.get("conv1.weight").unwrap().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn persisted_blocks_reload() {
        let mut p = ParamSet::new();
        p.push("a", Array2::from_elem((2, 3), 0.5));
        p.push("b", Array2::from_elem((1, 1), -2.0));
        let (bytes, manifest) = p.to_bytes().unwrap();
        assert_eq!(manifest["b"].offset, 12 + 24);
        let back = ParamSet::from_bytes(&bytes, &manifest, ["a", "b"]).unwrap();
        assert_eq!(back, p);
        assert!(matches!(ParamSet::from_bytes(&bytes, &manifest, ["c"]), Err(NnError::UnknownParam(_))));
    }
}
