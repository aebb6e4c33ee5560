//! Micro-benchmarks: median wall time of a registered operation.

use std::time::Instant;

use thiserror::Error;

use crate::audio_io::SignalBuffer;
use crate::backend::BackendConfig;
use crate::frontend::{FeatureExtractor, FeatureKind, FrontendConfig};
use crate::losses::LossConfig;
use crate::metrics::eer_from_scores;
use crate::training::{extract_corpus, generate_synthetic_dataset, train_model, TrainConfig};

pub const OPS: [&str; 5] = ["lfcc", "lfb", "spec", "eer", "train_epoch"];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark {0:?}; available: lfcc, lfb, spec, eer, train_epoch")]
    UnknownOp(String),
    #[error("size and repetitions must be positive")]
    InvalidSize,
    #[error("benchmarked operation failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub op: String,
    /// Samples for front ends, scores for `eer`, trials per class for `train_epoch`.
    pub size: usize,
    pub median_ns: u128,
    /// `size` units per second.
    pub throughput: f64,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str = "op,size,median_ns,throughput";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.6e}", self.op, self.size, self.median_ns, self.throughput)
    }
}

fn tone(len: usize) -> SignalBuffer {
    let samples = (0..len).map(|n| 0.5 * (n as f64 * 0.07).sin() + 0.1 * (n as f64 * 1.3).cos()).collect();
    SignalBuffer::new(samples, 16000).expect("finite tone")
}

fn timed<F: FnMut() -> Result<(), BenchError>>(reps: usize, mut f: F) -> Result<u128, BenchError> {
    f()?; // warm-up
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_nanos().max(1));
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

pub fn bench(op: &str, size: usize, reps: usize) -> Result<BenchRecord, BenchError> {
    if size == 0 || reps == 0 {
        return Err(BenchError::InvalidSize);
    }
    let fail = |e: &dyn std::fmt::Display| BenchError::Failed(e.to_string());
    let median_ns = match op {
        "lfcc" | "lfb" | "spec" => {
            let kind = match op {
                "lfcc" => FeatureKind::Lfcc,
                "lfb" => FeatureKind::Lfb,
                _ => FeatureKind::Spec,
            };
            let extractor = FeatureExtractor::new(FrontendConfig::with_kind(kind)).map_err(|e| fail(&e))?;
            let signal = tone(size);
            timed(reps, || extractor.extract(&signal).map(drop).map_err(|e| fail(&e)))?
        }
        "eer" => {
            let bona: Vec<f64> = (0..size.div_ceil(2)).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 + 0.3).collect();
            let spoof: Vec<f64> = (0..size / 2 + 1).map(|i| ((i * 104729) % 1000) as f64 / 1000.0).collect();
            timed(reps, || eer_from_scores(&bona, &spoof).map(drop).map_err(|e| fail(&e)))?
        }
        "train_epoch" => {
            let frontend = FrontendConfig::default();
            let corpus = extract_corpus(&generate_synthetic_dataset(1, size, 16000, (1.0, 2.0)), &frontend).map_err(|e| fail(&e))?;
            let run = TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            };
            let backend = BackendConfig::default();
            timed(reps, || {
                train_model(&corpus, &frontend, &backend, &LossConfig::p2sgrad(), &run)
                    .map(drop)
                    .map_err(|e| fail(&e))
            })?
        }
        other => return Err(BenchError::UnknownOp(other.to_string())),
    };
    Ok(BenchRecord {
        op: op.to_string(),
        size,
        median_ns,
        throughput: size as f64 / (median_ns as f64 * 1e-9),
    })
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = format!("{}\n", BenchRecord::CSV_HEADER);
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
