//! Quick gradient-check and oracle suite behind the `selftest` subcommand.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{BackendConfig, CountermeasureModel, Strategy};
use crate::frontend::{dct_ii, power_spectrum, FeatureMatrix, WindowKind};
use crate::losses::{p2sgrad_grad_wrt_embedding, cosine_gradients_wrt_embedding, Label, LossConfig};
use crate::metrics::{eer_from_scores, min_tdcf_from_scores, TdcfCostModel};
use crate::oracle;
use crate::stats::{holm_bonferroni, normal_cdf, normal_quantile};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> CheckResult {
    CheckResult {
        name,
        passed: worst.is_finite() && worst < tol,
        detail: format!("worst {worst:.3e} (tolerance {tol:.0e})"),
    }
}

/// Moves the model off the zero-bias initialisation, where zero-padded frames
/// put activations exactly on the LeakyReLU kink.
pub fn jitter_params<R: Rng + ?Sized>(model: &mut CountermeasureModel, rng: &mut R) {
    let mut flat = model.params.flatten();
    for v in flat.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    model.params.assign_flat(&flat);
}

fn gradients(rng: &mut ChaCha8Rng) -> f64 {
    let losses = [LossConfig::ce_softmax(), LossConfig::am_softmax(), LossConfig::oc_softmax(), LossConfig::sigmoid(), LossConfig::p2sgrad()];
    let strategies = [Strategy::PoolMean, Strategy::PoolAttention, Strategy::TrimPad { k: 8 }, Strategy::Chunked { k: 4, shift: 4 }];
    let mut worst = 0.0f64;
    for loss in &losses {
        for strategy in strategies {
            let cfg = BackendConfig {
                strategy,
                conv_channels: 4,
                hidden: 4,
                embed_dim: 4,
                ..BackendConfig::default()
            };
            let mut model = match CountermeasureModel::init(cfg, loss.clone(), 3, None, rng) {
                Ok(m) => m,
                Err(_) => return f64::INFINITY,
            };
            jitter_params(&mut model, rng);
            let x = Array2::from_shape_simple_fn((6, 3), || rng.random_range(-1.0..1.0));
            let Ok(x) = FeatureMatrix::new(x) else { return f64::INFINITY };
            let label = if rng.random_bool(0.5) { Label::Bonafide } else { Label::Spoof };
            let err = model
                .prepare_inputs(&x, rng)
                .and_then(|inputs| model.gradient_check(&inputs, label, 1e-5))
                .unwrap_or(f64::INFINITY);
            worst = worst.max(err);
        }
    }
    worst
}

fn spectra(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst = 0.0f64;
    for len in [16usize, 31, 64] {
        let frame: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let Ok(fast) = power_spectrum(&frame, WindowKind::Rectangular, 64) else { return f64::INFINITY };
        for (a, b) in fast.iter().zip(oracle::naive_dft_power(&frame, 64)) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn dct(rng: &mut ChaCha8Rng) -> f64 {
    let v: Vec<f64> = (0..20).map(|_| rng.random_range(-5.0..5.0)).collect();
    dct_ii(&v, 20).iter().zip(oracle::naive_dct_ii(&v)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nb = rng.random_range(1..40);
    let ns = rng.random_range(1..40);
    // coarse grid so ties occur
    let b = (0..nb).map(|_| (rng.random_range(0..30) as f64) / 10.0).collect();
    let s = (0..ns).map(|_| (rng.random_range(0..25) as f64) / 10.0).collect();
    (b, s)
}

fn eer(rng: &mut ChaCha8Rng) -> f64 {
    (0..100)
        .map(|_| {
            let (b, s) = random_scores(rng);
            eer_from_scores(&b, &s).map(|(e, _)| (e - oracle::brute_force_eer(&b, &s)).abs()).unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max)
}

fn tdcf(rng: &mut ChaCha8Rng) -> f64 {
    let cost = TdcfCostModel::default();
    let Ok((c1, c2)) = cost.coefficients() else { return f64::INFINITY };
    (0..100)
        .map(|_| {
            let (b, s) = random_scores(rng);
            min_tdcf_from_scores(&b, &s, &cost)
                .map(|(v, _)| (v - oracle::brute_force_min_tdcf(&b, &s, c1, c2)).abs())
                .unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max)
}

fn holm(rng: &mut ChaCha8Rng) -> f64 {
    let mismatches = (0..200)
        .filter(|_| {
            let m = rng.random_range(1..=50);
            let p: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..0.1)).collect();
            holm_bonferroni(&p, 0.05) != oracle::holm_step_down(&p, 0.05)
        })
        .count();
    mismatches as f64
}

fn quantiles() -> f64 {
    (1..1000)
        .map(|i| {
            let p = i as f64 / 1000.0;
            normal_quantile(p).map(|q| (normal_cdf(q) - p).abs()).unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max)
}

fn p2sgrad_direction(rng: &mut ChaCha8Rng) -> f64 {
    let mut violations = 0;
    for _ in 0..500 {
        let o = Array1::from_shape_simple_fn(16, || rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_simple_fn((2, 16), || rng.random_range(-1.0..1.0));
        let y = if rng.random_bool(0.5) { Label::Bonafide } else { Label::Spoof };
        let (Ok((_, g)), Ok(jac)) = (p2sgrad_grad_wrt_embedding(o.view(), w.view(), y), cosine_gradients_wrt_embedding(o.view(), w.view())) else {
            return f64::INFINITY;
        };
        if -g.dot(&jac[y.index()]) <= 0.0 {
            violations += 1;
        }
    }
    violations as f64
}

/// Runs every check with a fixed seed.
pub fn run_selftest() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(2021);
    vec![
        check("model gradients vs finite differences", gradients(&mut rng), 1e-5),
        check("power spectrum vs naive DFT", spectra(&mut rng), 1e-9),
        check("DCT-II vs O(M^2) sum", dct(&mut rng), 1e-10),
        check("EER vs threshold sweep", eer(&mut rng), 1e-9),
        check("min t-DCF vs threshold sweep", tdcf(&mut rng), 1e-12),
        check("Holm vs hand step-down (mismatches)", holm(&mut rng), 0.5),
        check("normal quantile round trip", quantiles(), 1e-10),
        check("P2SGrad descent raises target cosine (violations)", p2sgrad_direction(&mut rng), 0.5),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_selftest() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
