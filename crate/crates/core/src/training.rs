//! Deterministic training harness.
//!
//! One `ChaCha8Rng` per run is consumed in a fixed order: parameter
//! initialisation, then for every epoch the batch shuffle followed by the
//! trim/pad window draws of each batch (taken sequentially before any parallel
//! work). Per-trial gradients are computed in parallel and summed in ascending
//! trial order, so a run is bit-reproducible regardless of thread scheduling.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::SignalBuffer;
use crate::backend::{BackendConfig, BackendError, CountermeasureModel};
use crate::frontend::{build_linear_filterbank, FeatureExtractor, FeatureKind, FeatureMatrix, FrontendConfig, FrontendError};
use crate::losses::{Label, LossConfig};
use crate::metrics::{MetricsError, ScoreRecord, ScoreSet};
use crate::nn::{NnError, ParamSet};

pub const BASE_LR: f64 = 3e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("training diverged at epoch {epoch}: mean loss {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Seed of the generator behind evaluation-time trim/pad windows.
    pub eval_seed: u64,
    pub lr: f64,
    pub lr_halving_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            seed: 1,
            eval_seed: 0,
            lr: BASE_LR,
            lr_halving_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs, batch_size and lr_halving_epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::InvalidConfig("bad optimiser hyper-parameters".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halving_epochs) as i32)
    }
}

/// `3e-4 * 0.5^floor(epoch / 10)`.
pub fn lr_at_epoch(epoch: usize) -> f64 {
    TrainConfig::default().lr_at_epoch(epoch)
}

/// Seed of the `k`-th run (1-based): `10^(k-1)`.
pub fn run_seed(k: u32) -> u64 {
    10u64.pow(k.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// One bias-corrected update `theta -= lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<(), TrainError> {
        if !grads.all_finite() {
            return Err(TrainError::NonFiniteGradient);
        }
        if grads.len() != params.len() || params.values().zip(grads.values()).any(|(p, g)| p.dim() != g.dim()) {
            return Err(TrainError::Backend(BackendError::ShapeMismatch("gradient shapes differ from parameters".into())));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let eps = self.eps;
        for (((p, g), m), v) in params.values_mut().zip(grads.values()).zip(self.m.values_mut()).zip(self.v.values_mut()) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Indices grouped into batches of similar duration: sort by duration (ties
/// by index), cut into consecutive groups, then shuffle the group order.
pub fn make_batches<R: Rng + ?Sized>(durations: &[f64], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]).then(a.cmp(&b)));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrial {
    pub speaker_id: String,
    pub trial_id: String,
    pub attack_id: String,
    pub key: Label,
    pub signal: SignalBuffer,
}

/// Attack id of the 4-bit quantiser.
pub const SYNTHETIC_ATTACK: &str = "Q4";

/// `clamp(round(8 x), -8, 7) / 8`: a 4-bit mid-tread quantiser on [-1, 1).
pub fn quantize_4bit(x: f64) -> f64 {
    (8.0 * x).round().clamp(-8.0, 7.0) / 8.0
}

fn one_pole_lowpass(x: &mut [f64], a: f64) {
    let mut y = 0.0;
    for v in x.iter_mut() {
        y = a * y + (1.0 - a) * *v;
        *v = y;
    }
}

/// `n_per_class` bonafide/spoof pairs. A bonafide trial is three harmonics of
/// a random fundamental in 100-400 Hz plus low-passed noise, peak 0.8; its
/// spoof counterpart is the same waveform quantised to 4 bits.
pub fn generate_synthetic_dataset(seed: u64, n_per_class: usize, sample_rate: u32, duration: (f64, f64)) -> Vec<SyntheticTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).expect("valid deviation");
    let (lo, hi) = if duration.0 <= duration.1 { duration } else { (duration.1, duration.0) };
    let sr = sample_rate as f64;
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        let secs = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let len = ((secs * sr).round() as usize).max(1);
        let f0 = rng.random_range(100.0..400.0);
        let partials: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(0.2..1.0), rng.random_range(0.0..2.0 * PI))).collect();
        let mut floor: Vec<f64> = (0..len).map(|_| noise.sample(&mut rng)).collect();
        one_pole_lowpass(&mut floor, 0.9);
        one_pole_lowpass(&mut floor, 0.9);
        let mut x: Vec<f64> = (0..len)
            .map(|n| {
                let t = n as f64 / sr;
                let tone: f64 = partials.iter().enumerate().map(|(h, (a, ph))| a * (2.0 * PI * (h + 1) as f64 * f0 * t + ph).sin()).sum();
                tone + floor[n]
            })
            .collect();
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            x.iter_mut().for_each(|v| *v *= 0.8 / peak);
        }
        let spoof: Vec<f64> = x.iter().map(|&v| quantize_4bit(v)).collect();
        let speaker = format!("SYN{:03}", i % 20);
        let bona_signal = SignalBuffer::new(x, sample_rate).expect("finite synthetic signal");
        let spoof_signal = SignalBuffer::new(spoof, sample_rate).expect("finite synthetic signal");
        out.push(SyntheticTrial {
            speaker_id: speaker.clone(),
            trial_id: format!("S{seed}_B{i:05}"),
            attack_id: "-".into(),
            key: Label::Bonafide,
            signal: bona_signal,
        });
        out.push(SyntheticTrial {
            speaker_id: speaker,
            trial_id: format!("S{seed}_Q{i:05}"),
            attack_id: SYNTHETIC_ATTACK.into(),
            key: Label::Spoof,
            signal: spoof_signal,
        });
    }
    out
}

/// Extracted features of one labelled trial.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub trial_id: String,
    pub attack_id: String,
    pub key: Label,
    pub features: FeatureMatrix,
}

pub fn extract_corpus(trials: &[SyntheticTrial], cfg: &FrontendConfig) -> Result<Vec<LabeledFeatures>, TrainError> {
    let extractor = FeatureExtractor::new(cfg.clone())?;
    trials
        .par_iter()
        .map(|t| {
            Ok(LabeledFeatures {
                trial_id: t.trial_id.clone(),
                attack_id: t.attack_id.clone(),
                key: t.key,
                features: extractor.extract(&t.signal)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// `epoch,lr,mean_loss` rows with a header.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,mean_loss\n");
    for e in log {
        out.push_str(&format!("{},{:e},{:.17e}\n", e.epoch, e.lr, e.mean_loss));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: CountermeasureModel,
    pub log: Vec<EpochLog>,
}

/// Filterbank used to initialise the spectrogram compression layer.
pub fn compression_filterbank(frontend: &FrontendConfig, backend: &BackendConfig) -> Result<Option<Array2<f64>>, TrainError> {
    if !backend.compression {
        return Ok(None);
    }
    if frontend.kind != FeatureKind::Spec {
        return Err(TrainError::InvalidConfig("input compression applies to spectrogram features only".into()));
    }
    Ok(Some(build_linear_filterbank(backend.compress_dim, frontend.nfft, frontend.sample_rate)?))
}

pub fn train_model(
    corpus: &[LabeledFeatures],
    frontend: &FrontendConfig,
    backend: &BackendConfig,
    loss: &LossConfig,
    run: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    run.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if frontend.kind == FeatureKind::Spec && !backend.compression {
        log::warn!("spectrogram input without a compression layer");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let fb = compression_filterbank(frontend, backend)?;
    let mut model = CountermeasureModel::init(backend.clone(), loss.clone(), frontend.feature_dim(), fb.as_ref(), &mut rng)?;
    let mut adam = AdamState::from_config(&model.params, run);
    let durations: Vec<f64> = corpus.iter().map(|t| t.features.num_frames() as f64).collect();
    let mut log = Vec::with_capacity(run.epochs);

    for epoch in 0..run.epochs {
        let lr = run.lr_at_epoch(epoch);
        let mut epoch_loss = 0.0;
        for batch in make_batches(&durations, run.batch_size, &mut rng) {
            let mut prepared = Vec::with_capacity(batch.len());
            for &i in &batch {
                prepared.push(model.prepare_inputs(&corpus[i].features, &mut rng)?);
            }
            let results: Vec<(f64, ParamSet)> = batch
                .par_iter()
                .zip(prepared.par_iter())
                .map(|(&i, inputs)| model.loss_and_grad(inputs, corpus[i].key))
                .collect::<Result<_, _>>()
                .map_err(|e| match e {
                    BackendError::Nn(NnError::NonFiniteLoss) => TrainError::DivergedLoss { epoch, loss: f64::NAN },
                    other => other.into(),
                })?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = model.params.zeros_like();
            for (l, g) in &results {
                epoch_loss += l;
                grads.scaled_add(scale, g);
            }
            adam.step(&mut model.params, &grads, lr)?;
        }
        let mean_loss = epoch_loss / corpus.len() as f64;
        if !mean_loss.is_finite() || !model.params.all_finite() {
            return Err(TrainError::DivergedLoss { epoch, loss: mean_loss });
        }
        log::debug!("epoch {epoch}: lr {lr:e}, mean loss {mean_loss:.6}");
        log.push(EpochLog { epoch, lr, mean_loss });
    }
    Ok(TrainOutcome { model, log })
}

/// One score per trial. Trim/pad windows are drawn sequentially from
/// `eval_seed`; scoring itself runs in parallel.
pub fn score_trials(model: &CountermeasureModel, corpus: &[LabeledFeatures], eval_seed: u64) -> Result<ScoreSet, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let prepared = corpus
        .iter()
        .map(|t| model.prepare_inputs(&t.features, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = prepared.par_iter().map(|inputs| model.score_inputs(inputs)).collect::<Result<Vec<f64>, _>>()?;
    let records = corpus
        .iter()
        .zip(scores)
        .map(|(t, s)| ScoreRecord::new(t.trial_id.clone(), t.attack_id.clone(), t.key, s))
        .collect();
    Ok(ScoreSet::new(records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Strategy;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Array2::from_elem((1, 3), v));
        p
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at_epoch(0), 3e-4);
        assert_eq!(lr_at_epoch(9), 3e-4);
        assert_eq!(lr_at_epoch(10), 1.5e-4);
        assert!((lr_at_epoch(25) - 7.5e-5).abs() < 1e-20);
        assert!((0..100).all(|e| lr_at_epoch(e + 1) <= lr_at_epoch(e)));
        assert_eq!((1..=6).map(run_seed).collect::<Vec<_>>(), vec![1, 10, 100, 1000, 10_000, 100_000]);
    }

    #[test]
    fn adam_first_steps() {
        let mut p = one_param(1.0);
        let mut state = AdamState::new(&p, 0.9, 0.999, 1e-8);
        state.step(&mut p, &one_param(0.0), 0.1).unwrap();
        assert_eq!(p, one_param(1.0));

        let mut p = ParamSet::new();
        p.push("w", Array2::from_shape_vec((1, 3), vec![0.0, 0.0, 0.0]).unwrap());
        let mut g = ParamSet::new();
        g.push("w", Array2::from_shape_vec((1, 3), vec![2.0, -0.5, 1e-3]).unwrap());
        let mut state = AdamState::new(&p, 0.9, 0.999, 1e-8);
        let mut twin = (p.clone(), state.clone());
        state.step(&mut p, &g, 1e-3).unwrap();
        for (got, sign) in p.flatten().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((got - sign * 1e-3).abs() < 1e-3 * 1e-5, "{got}");
        }
        twin.1.step(&mut twin.0, &g, 1e-3).unwrap();
        assert_eq!(twin.0, p);
        assert_eq!(twin.1, state);

        let mut bad = one_param(0.0);
        bad.get_mut("w").unwrap()[[0, 1]] = f64::NAN;
        assert!(matches!(state.step(&mut p, &bad, 1e-3), Err(TrainError::NonFiniteGradient)));
    }

    #[test]
    fn batches_follow_duration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = make_batches(&[1.0, 9.0, 2.0, 10.0], 2, &mut rng);
        b.sort();
        assert_eq!(b, vec![vec![0, 2], vec![1, 3]]);
        let x = make_batches(&[3.0; 7], 3, &mut ChaCha8Rng::seed_from_u64(8));
        let y = make_batches(&[3.0; 7], 3, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(x, y);
        let mut all: Vec<usize> = x.concat();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_corpus_contract() {
        let a = generate_synthetic_dataset(3, 4, 16000, (0.2, 0.5));
        assert_eq!(a, generate_synthetic_dataset(3, 4, 16000, (0.2, 0.5)));
        assert_eq!(a.len(), 8);
        for pair in a.chunks(2) {
            let (b, s) = (&pair[0], &pair[1]);
            assert_eq!((b.key, s.key), (Label::Bonafide, Label::Spoof));
            assert_ne!(b.signal, s.signal);
            let max_err = b.signal.samples().iter().zip(s.signal.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(max_err <= 1.0 / 16.0);
            assert!((0.2..=0.5).contains(&b.signal.duration_secs()));
        }
        let feats = extract_corpus(&a, &FrontendConfig::default()).unwrap();
        assert!(feats.iter().all(|f| f.features.num_frames() >= 1 && f.features.dim() == 60));
    }

    #[test]
    fn training_smoke_and_determinism() {
        let trials = generate_synthetic_dataset(5, 4, 16000, (0.2, 0.4));
        let frontend = FrontendConfig::default();
        let corpus = extract_corpus(&trials, &frontend).unwrap();
        let backend = BackendConfig {
            strategy: Strategy::TrimPad { k: 16 },
            conv_channels: 8,
            hidden: 8,
            embed_dim: 8,
            ..BackendConfig::default()
        };
        let run = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let a = train_model(&corpus, &frontend, &backend, &LossConfig::p2sgrad(), &run).unwrap();
        let b = train_model(&corpus, &frontend, &backend, &LossConfig::p2sgrad(), &run).unwrap();
        assert_eq!(a, b);
        assert!(a.log.iter().all(|e| e.mean_loss.is_finite()));
        assert!(log_to_csv(&a.log).starts_with("epoch,lr,mean_loss\n0,3e-4,"));
        let s1 = score_trials(&a.model, &corpus, 7).unwrap();
        assert_eq!(s1, score_trials(&a.model, &corpus, 7).unwrap());
        assert_eq!(s1.len(), corpus.len());
    }

    proptest! {
        #[test]
        fn adam_step_bounded_for_constant_magnitude(signs in prop::collection::vec(prop::bool::ANY, 1..30), mag in 1e-4f64..10.0) {
            let lr = 1e-3;
            let mut p = one_param(0.0);
            let mut state = AdamState::new(&p, 0.9, 0.999, 1e-8);
            for s in signs {
                let before = p.flatten();
                state.step(&mut p, &one_param(if s { mag } else { -mag }), lr).unwrap();
                for (a, b) in p.flatten().iter().zip(before) {
                    prop_assert!((a - b).abs() <= lr * (1.0 + 1e-9));
                }
            }
        }

        #[test]
        fn quantiser_error_is_half_a_step(x in -1.0f64..0.9375) {
            prop_assert!((quantize_4bit(x) - x).abs() <= 1.0 / 16.0);
        }
    }
}
