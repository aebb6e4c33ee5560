//! Training criteria over a binary bonafide/spoof decision.
//!
//! Class index 0 is bonafide (class 1) and index 1 is spoof (class 2).
//! Cosine-based criteria consume the vector of class cosines
//! `cos theta_k = c_hat_k . o_hat`; the sigmoid criterion consumes the affine
//! logit `(c_1 - c_2) . o + b`. Every criterion returns its value together with
//! the gradient with respect to its input so it can be chained into a tape.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::nn::{length_normalize, length_normalize_backward, NnError};

pub const NUM_CLASSES: usize = 2;
const PROB_FLOOR: f64 = 1e-30;
const COSINE_TOLERANCE: f64 = 1e-12;
const ARCCOS_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("cosine {0} outside [-1, 1]")]
    InvalidCosine(f64),
    #[error("expected {expected} inputs, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("unknown loss preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Bonafide
        } else {
            Label::Spoof
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            other => Err(format!("unknown key {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CeSoftmax,
    CeSigmoid,
    AmSoftmax,
    OcSoftmax,
    P2sgrad,
}

/// How the per-class margins of the one-class softmax are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcVariant {
    /// Single bonafide direction: bonafide trials are pushed above `m3[0]`
    /// and spoof trials below `m3[1]` on `cos theta_1` alone.
    OneClass,
    /// Softmax over both class cosines with the target's own margin subtracted.
    PerClassMargin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub m1: f64,
    #[serde(default)]
    pub m2: f64,
    /// Additive cosine margin per class.
    #[serde(default = "zero_margins")]
    pub m3: Vec<f64>,
    #[serde(default = "default_oc_variant")]
    pub oc_variant: OcVariant,
}

fn default_alpha() -> f64 {
    20.0
}
fn one() -> f64 {
    1.0
}
fn zero_margins() -> Vec<f64> {
    vec![0.0; NUM_CLASSES]
}
fn default_oc_variant() -> OcVariant {
    OcVariant::OneClass
}

impl LossConfig {
    pub fn ce_softmax() -> Self {
        Self {
            kind: LossKind::CeSoftmax,
            alpha: 20.0,
            m1: 1.0,
            m2: 0.0,
            m3: zero_margins(),
            oc_variant: OcVariant::OneClass,
        }
    }

    pub fn sigmoid() -> Self {
        Self {
            kind: LossKind::CeSigmoid,
            alpha: 1.0,
            ..Self::ce_softmax()
        }
    }

    pub fn am_softmax() -> Self {
        Self {
            kind: LossKind::AmSoftmax,
            m3: vec![0.9, 0.9],
            ..Self::ce_softmax()
        }
    }

    pub fn oc_softmax() -> Self {
        Self {
            kind: LossKind::OcSoftmax,
            m3: vec![0.9, 0.2],
            ..Self::ce_softmax()
        }
    }

    pub fn p2sgrad() -> Self {
        Self {
            kind: LossKind::P2sgrad,
            alpha: 1.0,
            ..Self::ce_softmax()
        }
    }

    /// Named presets: `ce`, `sigmoid`, `am`, `oc`, `p2sgrad`.
    pub fn preset(name: &str) -> Result<Self, LossError> {
        match name {
            "ce" => Ok(Self::ce_softmax()),
            "sigmoid" => Ok(Self::sigmoid()),
            "am" => Ok(Self::am_softmax()),
            "oc" => Ok(Self::oc_softmax()),
            "p2sgrad" => Ok(Self::p2sgrad()),
            other => Err(LossError::UnknownPreset(other.to_string())),
        }
    }

    pub fn uses_cosine_head(&self) -> bool {
        self.kind != LossKind::CeSigmoid
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0) {
            return Err(LossError::InvalidConfig("alpha must be positive".into()));
        }
        if self.m1 < 1.0 || self.m2 < 0.0 {
            return Err(LossError::InvalidConfig("need m1 >= 1 and m2 >= 0".into()));
        }
        if self.m3.len() != NUM_CLASSES {
            return Err(LossError::InvalidConfig(format!("m3 needs {NUM_CLASSES} entries")));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::p2sgrad()
    }
}

/// Accepts either a preset name or a full object.
pub fn deserialize_loss_config<'de, D: Deserializer<'de>>(d: D) -> Result<LossConfig, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Preset(String),
        Full(LossConfig),
    }
    match Repr::deserialize(d)? {
        Repr::Preset(name) => LossConfig::preset(&name).map_err(serde::de::Error::custom),
        Repr::Full(cfg) => Ok(cfg),
    }
}

fn check_cosines(cos: &[f64]) -> Result<(), LossError> {
    if cos.len() != NUM_CLASSES {
        return Err(LossError::WrongArity {
            expected: NUM_CLASSES,
            got: cos.len(),
        });
    }
    match cos.iter().find(|c| !(c.abs() <= 1.0 + COSINE_TOLERANCE)) {
        Some(&bad) => Err(LossError::InvalidCosine(bad)),
        None => Ok(()),
    }
}

/// `cos(m1 * theta + m2)` and its derivative with respect to `cos theta`.
fn angular_margin(c: f64, m1: f64, m2: f64) -> (f64, f64) {
    if m1 == 1.0 && m2 == 0.0 {
        return (c, 1.0);
    }
    let c = c.clamp(-ARCCOS_CLAMP, ARCCOS_CLAMP);
    let theta = c.acos();
    let phi = m1 * theta + m2;
    (phi.cos(), m1 * phi.sin() / theta.sin())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Logits and their derivatives w.r.t. the cosine each one depends on.
fn margin_logits(cos: &[f64], target: Label, cfg: &LossConfig) -> (Vec<f64>, Vec<f64>) {
    let y = target.index();
    let one_class = cfg.kind == LossKind::OcSoftmax && cfg.oc_variant == OcVariant::OneClass;
    if one_class {
        // z_0 = alpha (psi(cos_1) - m3_y), z_1 = 0; only cos_1 matters
        let (psi, dpsi) = angular_margin(cos[0], cfg.m1, cfg.m2);
        return (vec![cfg.alpha * (psi - cfg.m3[y]), 0.0], vec![cfg.alpha * dpsi, 0.0]);
    }
    let mut logits = Vec::with_capacity(cos.len());
    let mut dlogit = Vec::with_capacity(cos.len());
    for (k, &c) in cos.iter().enumerate() {
        if k == y {
            let (psi, dpsi) = angular_margin(c, cfg.m1, cfg.m2);
            logits.push(cfg.alpha * (psi - cfg.m3[k]));
            dlogit.push(cfg.alpha * dpsi);
        } else {
            logits.push(cfg.alpha * c);
            dlogit.push(cfg.alpha);
        }
    }
    (logits, dlogit)
}

/// Class posteriors under the (margin) softmax for a trial with label `target`.
pub fn margin_softmax_probs(cos: &[f64], target: Label, cfg: &LossConfig) -> Result<Vec<f64>, LossError> {
    check_cosines(cos)?;
    let (logits, _) = margin_logits(cos, target, cfg);
    Ok(softmax(&logits))
}

/// `-log P_y` with the probability floored at 1e-30.
pub fn cross_entropy(probs: &[f64], target: Label) -> f64 {
    -probs[target.index()].max(PROB_FLOOR).ln()
}

/// Cross entropy of the margin softmax and its gradient w.r.t. the cosines.
pub fn margin_softmax_loss(cos: &[f64], target: Label, cfg: &LossConfig) -> Result<(f64, Vec<f64>), LossError> {
    check_cosines(cos)?;
    let (logits, dlogit) = margin_logits(cos, target, cfg);
    let y = target.index();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[y];
    let probs = softmax(&logits);
    // logit k depends only on cosine k (the one-class slot 1 is constant)
    let grad = (0..logits.len())
        .map(|k| (probs[k] - if k == y { 1.0 } else { 0.0 }) * dlogit[k])
        .collect();
    Ok((loss, grad))
}

/// `P_1 = sigmoid(logit)` and the binary cross entropy, in log-sum-exp form.
pub fn sigmoid_binary(logit: f64, target: Label) -> (f64, f64) {
    let p = crate::nn::tape::stable_sigmoid(logit);
    let loss = match target {
        Label::Bonafide => softplus(-logit),
        Label::Spoof => softplus(logit),
    };
    (p, loss)
}

/// Sigmoid cross entropy and its derivative w.r.t. the logit.
pub fn sigmoid_loss(logit: f64, target: Label) -> (f64, f64) {
    let (p, loss) = sigmoid_binary(logit, target);
    let y = if target == Label::Bonafide { 1.0 } else { 0.0 };
    (loss, p - y)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `sum_k (cos theta_k - 1{y = k})^2`.
pub fn p2sgrad_mse(cos: &[f64], target: Label) -> Result<f64, LossError> {
    Ok(p2sgrad_loss(cos, target)?.0)
}

/// MSE value and gradient w.r.t. the cosines, `2 (cos_k - 1{y = k})`.
pub fn p2sgrad_loss(cos: &[f64], target: Label) -> Result<(f64, Vec<f64>), LossError> {
    check_cosines(cos)?;
    let residual: Vec<f64> = cos
        .iter()
        .enumerate()
        .map(|(k, &c)| c - if k == target.index() { 1.0 } else { 0.0 })
        .collect();
    let loss = residual.iter().map(|r| r * r).sum();
    Ok((loss, residual.iter().map(|r| 2.0 * r).collect()))
}

/// Value and gradient of the configured criterion w.r.t. the head output
/// (the class cosines, or the single sigmoid logit).
pub fn loss_and_grad(output: &[f64], target: Label, cfg: &LossConfig) -> Result<(f64, Vec<f64>), LossError> {
    match cfg.kind {
        LossKind::CeSigmoid => {
            if output.len() != 1 {
                return Err(LossError::WrongArity {
                    expected: 1,
                    got: output.len(),
                });
            }
            let (l, d) = sigmoid_loss(output[0], target);
            Ok((l, vec![d]))
        }
        LossKind::P2sgrad => p2sgrad_loss(output, target),
        LossKind::CeSoftmax | LossKind::AmSoftmax | LossKind::OcSoftmax => margin_softmax_loss(output, target, cfg),
    }
}

/// Bonafide score: `P_1` for the sigmoid head, `cos theta_1` otherwise.
pub fn inference_score(output: &[f64], cfg: &LossConfig) -> f64 {
    match cfg.kind {
        LossKind::CeSigmoid => crate::nn::tape::stable_sigmoid(output[0]),
        _ => output[0],
    }
}

/// Jacobian-vector form `d cos theta_k / d o` for every class, as rows.
pub fn cosine_gradients_wrt_embedding(o: ArrayView1<'_, f64>, weights: ArrayView2<'_, f64>) -> Result<Vec<Array1<f64>>, LossError> {
    weights
        .rows()
        .into_iter()
        .map(|c| {
            let c_hat = length_normalize(c)?;
            Ok(length_normalize_backward(o, c_hat.view())?)
        })
        .collect()
}

/// Analytic gradient of the P2SGrad MSE w.r.t. the embedding:
/// `2 sum_k (cos theta_k - 1{y = k}) d cos theta_k / d o`.
pub fn p2sgrad_grad_wrt_embedding(o: ArrayView1<'_, f64>, weights: ArrayView2<'_, f64>, target: Label) -> Result<(f64, Array1<f64>), LossError> {
    let cos = crate::nn::cosine_scores(o, weights)?;
    let (loss, dcos) = p2sgrad_loss(cos.as_slice().expect("contiguous"), target)?;
    let jac = cosine_gradients_wrt_embedding(o, weights)?;
    let mut grad = Array1::zeros(o.len());
    for (d, j) in dcos.iter().zip(&jac) {
        grad.scaled_add(*d, j);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_difference_check;
    use ndarray::{Array1, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_when_margins_vanish() {
        let cfg = LossConfig {
            alpha: 1.0,
            ..LossConfig::ce_softmax()
        };
        let p = margin_softmax_probs(&[0.3, 0.3], Label::Bonafide, &cfg).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn am_worked_example() {
        let p = margin_softmax_probs(&[0.8, 0.1], Label::Bonafide, &LossConfig::am_softmax()).unwrap();
        // reference value from arbitrary-precision evaluation
        assert!((p[0] - 0.017_986_209_962_091_56).abs() < 1e-12);
        let e = (-2f64).exp() / ((-2f64).exp() + 2f64.exp());
        assert!((p[0] - e).abs() < 1e-12);
    }

    #[test]
    fn larger_target_margin_lowers_target_probability() {
        for kind in [LossConfig::am_softmax(), LossConfig { oc_variant: OcVariant::PerClassMargin, ..LossConfig::oc_softmax() }] {
            for y in [Label::Bonafide, Label::Spoof] {
                let mut prev = f64::INFINITY;
                for m in [0.0, 0.2, 0.4, 0.6, 0.9] {
                    let mut cfg = kind.clone();
                    cfg.m3[y.index()] = m;
                    let p = margin_softmax_probs(&[0.4, -0.2], y, &cfg).unwrap()[y.index()];
                    assert!(p < prev);
                    prev = p;
                }
            }
        }
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[1.0, 0.0], Label::Bonafide), 0.0);
        assert!((cross_entropy(&[0.5, 0.5], Label::Spoof) - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[1.0, 0.0], Label::Spoof).is_finite());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_binary(0.0, Label::Bonafide).0, 0.5);
        let (p, l) = sigmoid_binary(800.0, Label::Bonafide);
        assert_eq!(p, 1.0);
        assert!(l < 1e-300);
        assert!((sigmoid_binary(2.0, Label::Bonafide).1 - 0.126_928_011_042_972_5).abs() < 1e-15);
        assert!(sigmoid_binary(-800.0, Label::Bonafide).1.is_finite());
    }

    #[test]
    fn p2sgrad_values() {
        assert_eq!(p2sgrad_mse(&[1.0, 0.0], Label::Bonafide).unwrap(), 0.0);
        assert_eq!(p2sgrad_mse(&[0.0, 0.0], Label::Bonafide).unwrap(), 1.0);
        assert!(matches!(p2sgrad_mse(&[1.5, 0.0], Label::Bonafide), Err(LossError::InvalidCosine(_))));
        assert!(matches!(margin_softmax_probs(&[0.0, -1.1], Label::Bonafide, &LossConfig::am_softmax()), Err(LossError::InvalidCosine(_))));
    }

    #[test]
    fn inference_scores() {
        assert_eq!(inference_score(&[1.0, -0.3], &LossConfig::p2sgrad()), 1.0);
        assert_eq!(inference_score(&[0.0], &LossConfig::sigmoid()), 0.5);
    }

    #[test]
    fn preset_parsing() {
        for name in ["ce", "sigmoid", "am", "oc", "p2sgrad"] {
            LossConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(LossConfig::preset("arc").is_err());
        let cfg: LossConfig = serde_json::from_str(r#"{"kind":"am_softmax","m3":[0.5,0.5]}"#).unwrap();
        assert_eq!(cfg.alpha, 20.0);
        #[derive(Deserialize)]
        struct W {
            #[serde(deserialize_with = "deserialize_loss_config")]
            loss: LossConfig,
        }
        let w: W = serde_json::from_str(r#"{"loss":"oc"}"#).unwrap();
        assert_eq!(w.loss, LossConfig::oc_softmax());
    }

    fn random_state(rng: &mut ChaCha8Rng, dim: usize) -> (Array1<f64>, Array2<f64>) {
        let o = Array1::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_simple_fn((2, dim), || rng.random_range(-1.0..1.0));
        (o, w)
    }

    fn embedding_loss(o: &[f64], w: &Array2<f64>, y: Label, cfg: &LossConfig) -> (f64, Vec<f64>) {
        let o = Array1::from(o.to_vec());
        let cos = crate::nn::cosine_scores(o.view(), w.view()).unwrap();
        let (l, dcos) = loss_and_grad(cos.as_slice().unwrap(), y, cfg).unwrap();
        let jac = cosine_gradients_wrt_embedding(o.view(), w.view()).unwrap();
        let mut g = Array1::zeros(o.len());
        for (d, j) in dcos.iter().zip(&jac) {
            g.scaled_add(*d, j);
        }
        (l, g.to_vec())
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let angular = LossConfig { m1: 2.0, m2: 0.1, ..LossConfig::am_softmax() };
        let per_class = LossConfig { oc_variant: OcVariant::PerClassMargin, ..LossConfig::oc_softmax() };
        for cfg in [LossConfig::ce_softmax(), LossConfig::am_softmax(), LossConfig::oc_softmax(), per_class, LossConfig::p2sgrad(), angular] {
            for i in 0..20 {
                let (o, w) = random_state(&mut rng, 8);
                let y = Label::from_index(i % 2);
                let err = finite_difference_check(|p| embedding_loss(p, &w, y, &cfg), o.as_slice().unwrap(), 1e-5).unwrap();
                assert!(err < 1e-5, "{:?}: {err}", cfg.kind);
            }
        }
        for _ in 0..20 {
            let logit: f64 = rng.random_range(-6.0..6.0);
            let err = finite_difference_check(
                |p| {
                    let (l, d) = sigmoid_loss(p[0], Label::Spoof);
                    (l, vec![d])
                },
                &[logit],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn p2sgrad_gradient_is_probability_to_similarity_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let (o, w) = random_state(&mut rng, 16);
            let (_, grad) = p2sgrad_grad_wrt_embedding(o.view(), w.view(), Label::Spoof).unwrap();
            // (cos_k - 1{y=k}) d cos_k / d o summed over classes
            let cos = crate::nn::cosine_scores(o.view(), w.view()).unwrap();
            let jac = cosine_gradients_wrt_embedding(o.view(), w.view()).unwrap();
            let reference = &jac[0] * cos[0] + &jac[1] * (cos[1] - 1.0);
            for (a, b) in grad.iter().zip(&reference) {
                assert!((a - 2.0 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn direction_claim_fails_for_nearly_collinear_class_vectors() {
        // with c_1 ~ c_2 the non-target residual dominates: the descent
        // direction lowers cos theta_y as well
        let o = Array1::from(vec![1.0, 0.2]);
        let w = ndarray::array![[1.0, 0.0], [1.0, 0.01]];
        let (_, grad) = p2sgrad_grad_wrt_embedding(o.view(), w.view(), Label::Bonafide).unwrap();
        let jac = cosine_gradients_wrt_embedding(o.view(), w.view()).unwrap();
        assert!((-&grad).dot(&jac[0]) < 0.0);
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_bounded(c0 in -1.0f64..1.0, c1 in -1.0f64..1.0, y in 0usize..2) {
            let y = Label::from_index(y);
            let p2s = p2sgrad_mse(&[c0, c1], y).unwrap();
            prop_assert!((0.0..=8.0).contains(&p2s));
            for cfg in [LossConfig::ce_softmax(), LossConfig::am_softmax(), LossConfig::oc_softmax()] {
                let (l, _) = margin_softmax_loss(&[c0, c1], y, &cfg).unwrap();
                prop_assert!(l >= 0.0);
                let p = margin_softmax_probs(&[c0, c1], y, &cfg).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn zero_margins_match_scaled_softmax(c0 in -1.0f64..1.0, c1 in -1.0f64..1.0, alpha in 0.5f64..30.0) {
            let cfg = LossConfig { alpha, ..LossConfig::ce_softmax() };
            let p = margin_softmax_probs(&[c0, c1], Label::Spoof, &cfg).unwrap();
            let z = [(alpha * c0).exp(), (alpha * c1).exp()];
            prop_assert!((p[0] - z[0] / (z[0] + z[1])).abs() < 1e-12);
        }
    }
}
