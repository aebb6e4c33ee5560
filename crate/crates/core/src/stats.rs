//! Pairwise significance testing of equal error rates.
//!
//! Two EERs measured on the same `N_bona + N_spoof` trials are compared with
//! the pooled two-proportion statistic
//!
//! ```text
//! z = 2 |EER_A - EER_B| / sqrt((EER_A (1 - EER_A) + EER_B (1 - EER_B)) (N_bona + N_spoof) / (N_bona N_spoof))
//! ```
//!
//! and all pairs of one comparison are corrected together with Holm's
//! step-down procedure on two-sided p values.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("z statistic undefined: both error rates have zero variance")]
    DegenerateVariance,
    #[error("probability {0} outside (0, 1)")]
    OutOfRange(f64),
    #[error("invalid EER {0}")]
    InvalidRate(f64),
    #[error("trial counts must be positive")]
    ZeroCount,
    #[error("need at least two observations, got {0}")]
    TooFewObservations(usize),
    #[error("observations disagree on trial counts")]
    MismatchedCounts,
}

pub fn z_statistic(eer_a: f64, eer_b: f64, n_bona: usize, n_spoof: usize) -> Result<f64, StatsError> {
    for e in [eer_a, eer_b] {
        if !(0.0..=1.0).contains(&e) {
            return Err(StatsError::InvalidRate(e));
        }
    }
    if n_bona == 0 || n_spoof == 0 {
        return Err(StatsError::ZeroCount);
    }
    if eer_a == eer_b {
        return Ok(0.0);
    }
    let (nb, ns) = (n_bona as f64, n_spoof as f64);
    let var = (eer_a * (1.0 - eer_a) + eer_b * (1.0 - eer_b)) * (nb + ns) / (nb * ns);
    if var <= 0.0 {
        return Err(StatsError::DegenerateVariance);
    }
    Ok(2.0 * (eer_a - eer_b).abs() / var.sqrt())
}

/// Power series of `erf`, used for `|x| < 2`.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x2 / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    2.0 / PI.sqrt() * sum
}

/// Continued fraction of `erfc` for `x >= 2`, evaluated by modified Lentz.
fn erfc_continued_fraction(x: f64) -> f64 {
    // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = x + a / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (PI.sqrt() * f)
}

pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.abs() < 2.0 {
        1.0 - erf_series(x)
    } else if x > 0.0 {
        erfc_continued_fraction(x)
    } else {
        2.0 - erfc_continued_fraction(-x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Two-sided p value `2 (1 - Phi(z))` for `z >= 0`.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    erfc(z.abs() / SQRT_2).min(1.0)
}

/// Inverse standard normal CDF: bisection to machine resolution, then Newton.
pub fn normal_quantile(p: f64) -> Result<f64, StatsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(StatsError::OutOfRange(p));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..2 {
        let pdf = normal_pdf(x);
        if pdf > 0.0 {
            let step = (normal_cdf(x) - p) / pdf;
            if step.is_finite() && step.abs() < 1e-6 {
                x -= step;
            }
        }
    }
    Ok(x)
}

/// Holm step-down rejections at family-wise level `alpha`, in input order.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut reject = vec![false; m];
    for (k, &i) in order.iter().enumerate() {
        if p_values[i] > alpha / (m - k) as f64 {
            break;
        }
        reject[i] = true;
    }
    reject
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EerObservation {
    pub model_id: String,
    pub run_index: usize,
    pub eer: f64,
    pub n_bona: usize,
    pub n_spoof: usize,
}

impl EerObservation {
    /// `model/run` with the run as a Roman numeral, e.g. `lfcc-p2s/III`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.model_id, roman(self.run_index))
    }
}

fn roman(mut n: usize) -> String {
    if n == 0 {
        return "0".into();
    }
    const TABLE: [(usize, &str); 13] = [
        (1000, "M"),
        (900, "CM"),
        (500, "D"),
        (400, "CD"),
        (100, "C"),
        (90, "XC"),
        (50, "L"),
        (40, "XL"),
        (10, "X"),
        (9, "IX"),
        (5, "V"),
        (4, "IV"),
        (1, "I"),
    ];
    let mut out = String::new();
    for (v, s) in TABLE {
        while n >= v {
            out.push_str(s);
            n -= v;
        }
    }
    out
}

/// Symmetric pairwise test results. An infinite `z` (distinct EERs that both
/// have zero variance) is written as `null` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceMatrix {
    pub labels: Vec<String>,
    pub eers: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub reject: Vec<Vec<bool>>,
    pub alpha_level: f64,
}

pub fn significance_matrix(obs: &[EerObservation], alpha_level: f64) -> Result<SignificanceMatrix, StatsError> {
    let n = obs.len();
    if n < 2 {
        return Err(StatsError::TooFewObservations(n));
    }
    let (nb, ns) = (obs[0].n_bona, obs[0].n_spoof);
    if obs.iter().any(|o| o.n_bona != nb || o.n_spoof != ns) {
        return Err(StatsError::MismatchedCounts);
    }
    let mut z = vec![vec![0.0; n]; n];
    let mut p = vec![vec![1.0; n]; n];
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let zij = match z_statistic(obs[i].eer, obs[j].eer, nb, ns) {
                Ok(v) => v,
                // Distinct rates at 0 and 1 have no sampling variance: certain difference.
                Err(StatsError::DegenerateVariance) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            let pij = two_sided_p(zij);
            z[i][j] = zij;
            z[j][i] = zij;
            p[i][j] = pij;
            p[j][i] = pij;
            pairs.push((i, j));
        }
    }
    let family: Vec<f64> = pairs.iter().map(|&(i, j)| p[i][j]).collect();
    let flags = holm_bonferroni(&family, alpha_level);
    let mut reject = vec![vec![false; n]; n];
    for (&(i, j), &r) in pairs.iter().zip(&flags) {
        reject[i][j] = r;
        reject[j][i] = r;
    }
    Ok(SignificanceMatrix {
        labels: obs.iter().map(EerObservation::label).collect(),
        eers: obs.iter().map(|o| o.eer).collect(),
        z,
        p,
        reject,
        alpha_level,
    })
}

impl SignificanceMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.size();
        (0..n).all(|i| {
            !self.reject[i][i]
                && self.z[i][i] == 0.0
                && (0..n).all(|j| self.reject[i][j] == self.reject[j][i] && self.z[i][j].to_bits() == self.z[j][i].to_bits())
        })
    }

    /// Binary P5 image, `cell` pixels per entry: significant pairs dark grey,
    /// everything else white.
    pub fn to_pgm(&self, cell: usize) -> Vec<u8> {
        let cell = cell.max(1);
        let side = self.size() * cell;
        let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
        for y in 0..side {
            for x in 0..side {
                out.push(if self.reject[y / cell][x / cell] { 64 } else { 255 });
            }
        }
        out
    }
}

/// Spread of EERs across runs of the same model, and how many of its run
/// pairs differ significantly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraModelSpread {
    pub runs: usize,
    pub min_eer: f64,
    pub max_eer: f64,
    pub spread: f64,
    pub significant_pairs: usize,
}

pub fn intra_model_spread(obs: &[EerObservation], matrix: &SignificanceMatrix) -> BTreeMap<String, IntraModelSpread> {
    let mut out: BTreeMap<String, IntraModelSpread> = BTreeMap::new();
    for (i, o) in obs.iter().enumerate() {
        let entry = out.entry(o.model_id.clone()).or_insert(IntraModelSpread {
            runs: 0,
            min_eer: f64::INFINITY,
            max_eer: f64::NEG_INFINITY,
            spread: 0.0,
            significant_pairs: 0,
        });
        entry.runs += 1;
        entry.min_eer = entry.min_eer.min(o.eer);
        entry.max_eer = entry.max_eer.max(o.eer);
        entry.spread = entry.max_eer - entry.min_eer;
        entry.significant_pairs += (0..i).filter(|&j| obs[j].model_id == o.model_id && matrix.reject[i][j]).count();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;

    const Z_REF: f64 = 7.175_340_516_573_772_5;
    const P_REF: f64 = 7.212_743_466_545_268e-13;

    fn obs(model: &str, run: usize, eer: f64, n: usize) -> EerObservation {
        EerObservation {
            model_id: model.into(),
            run_index: run,
            eer,
            n_bona: n,
            n_spoof: n,
        }
    }

    #[test]
    fn z_reference_value() {
        let z = z_statistic(0.0192, 0.05, 1000, 9000).unwrap();
        assert!((z - Z_REF).abs() < 1e-12);
        // Two-proportion form: difference over the pooled standard error of the sum of rates.
        let se = ((0.0192f64 * 0.9808 + 0.05 * 0.95) * (1.0 / 1000.0 + 1.0 / 9000.0)).sqrt();
        assert!((2.0 * (0.05 - 0.0192) / se - z).abs() < 1e-12);
        assert!((two_sided_p(z) - P_REF).abs() < 1e-24);
        assert_eq!(z_statistic(0.3, 0.3, 5, 5).unwrap(), 0.0);
        assert_eq!(z_statistic(0.0, 1.0, 5, 5), Err(StatsError::DegenerateVariance));
        assert_eq!(z_statistic(0.1, 0.2, 0, 5), Err(StatsError::ZeroCount));
    }

    #[test]
    fn cdf_reference_values() {
        let table = [
            (-6.0, 9.865_876_450_376_98e-10),
            (-4.75, 1.0170832425687032e-6),
            (-3.0, 0.0013498980316300945),
            (-1.5, 0.066_807_201_268_858_07),
            (-0.3, 0.382_088_577_811_047_4),
            (0.7, 0.758_036_347_776_927),
            (2.5, 0.993_790_334_674_223_8),
            (4.0, 0.999_968_328_758_166_9),
            (6.0, 0.999_999_999_013_412_3),
        ];
        for (x, want) in table {
            let got = normal_cdf(x);
            assert!(((got - want) / want).abs() < 1e-13, "Phi({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn quantile_reference_values() {
        let table = [
            (1e-6, -4.753_424_308_822_899),
            (0.001, -3.0902323061678135),
            (0.025, -1.9599639845400542),
            (0.3, -0.524_400_512_708_040_8),
            (0.9, 1.281_551_565_544_600_4),
            (0.975, 1.959963984540054),
            (0.999999, 4.753_424_308_822_899),
        ];
        for (p, want) in table {
            assert!((normal_quantile(p).unwrap() - want).abs() < 1e-9, "q({p})");
        }
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        assert!(normal_quantile(0.0).is_err() && normal_quantile(1.0).is_err());
    }

    #[test]
    fn holm_examples() {
        assert_eq!(holm_bonferroni(&[0.01], 0.05), vec![true]);
        assert_eq!(holm_bonferroni(&[0.9; 4], 0.05), vec![false; 4]);
        assert_eq!(holm_bonferroni(&[0.2, 0.01, 0.02], 0.05), vec![false, true, true]);
        // first failure stops later rejections even if they would pass alone
        assert_eq!(holm_bonferroni(&[0.03, 0.04], 0.05), vec![false, false]);
    }

    #[test]
    fn matrix_flags_the_outlier() {
        let o = vec![obs("a", 1, 0.10, 100_000), obs("a", 2, 0.1001, 100_000), obs("b", 1, 0.20, 100_000)];
        let m = significance_matrix(&o, 0.05).unwrap();
        assert!(m.is_symmetric());
        assert!(!m.reject[0][1]);
        assert!(m.reject[0][2] && m.reject[1][2]);
        assert_eq!(m.labels[1], "a/II");
        let spread = intra_model_spread(&o, &m);
        assert!((spread["a"].spread - 0.0001).abs() < 1e-12);
        assert_eq!(spread["a"].significant_pairs, 0);
        let pgm = m.to_pgm(8);
        assert!(pgm.starts_with(b"P5\n24 24\n255\n"));
        assert_eq!(pgm.len(), b"P5\n24 24\n255\n".len() + 24 * 24);
    }

    #[test]
    fn matrix_degenerate_pairs() {
        let o = vec![obs("a", 1, 0.0, 10), obs("a", 2, 0.0, 10), obs("b", 1, 1.0, 10)];
        let m = significance_matrix(&o, 0.05).unwrap();
        assert_eq!((m.z[0][1], m.p[0][1]), (0.0, 1.0));
        assert!(m.z[0][2].is_infinite() && m.p[0][2] == 0.0);
        assert!(m.reject[0][2] && !m.reject[0][1]);
        assert!(matches!(significance_matrix(&o[..1], 0.05), Err(StatsError::TooFewObservations(1))));
    }

    proptest! {
        #[test]
        fn holm_matches_hand_oracle(p in prop::collection::vec(0.0f64..0.2, 1..50)) {
            prop_assert_eq!(holm_bonferroni(&p, 0.05), oracle::holm_step_down(&p, 0.05));
        }

        #[test]
        fn holm_is_within_uncorrected(p in prop::collection::vec(0.0f64..0.2, 1..30)) {
            let holm = holm_bonferroni(&p, 0.05);
            for (r, pv) in holm.iter().zip(&p) {
                prop_assert!(!*r || *pv <= 0.05);
            }
        }

        #[test]
        fn quantile_inverts_cdf(p in 1e-6f64..(1.0 - 1e-6)) {
            let q = normal_quantile(p).unwrap();
            prop_assert!((normal_cdf(q) - p).abs() < 1e-10);
            prop_assert!((q + normal_quantile(1.0 - p).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn z_grows_with_gap(a in 0.01f64..0.25, gap in 0.001f64..0.2, extra in 0.001f64..0.05) {
            let z1 = z_statistic(a, a + gap, 500, 4000).unwrap();
            let z2 = z_statistic(a, a + gap + extra, 500, 4000).unwrap();
            prop_assert!(z2 > z1);
            prop_assert_eq!(z1, z_statistic(a + gap, a, 500, 4000).unwrap());
        }
    }
}
