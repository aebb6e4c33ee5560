//! Brute-force reference implementations used by the self-test and the test
//! suites. They deliberately avoid the fast paths of the main modules.

use std::f64::consts::PI;

/// `|X_k|^2`, `k = 0..=nfft/2`, by the O(n^2) DFT sum of a zero-padded frame.
pub fn naive_dft_power(frame: &[f64], nfft: usize) -> Vec<f64> {
    (0..=nfft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * (k * n) as f64 / nfft as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Orthonormal DCT-II by the double loop.
pub fn naive_dct_ii(v: &[f64]) -> Vec<f64> {
    let m = v.len();
    let mut out = vec![0.0; m];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (n, &x) in v.iter().enumerate() {
            acc += x * (PI / m as f64 * (n as f64 + 0.5) * k as f64).cos();
        }
        let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
        *slot = acc * scale;
    }
    out
}

/// Inverse of the orthonormal DCT-II (a scaled DCT-III).
pub fn naive_inverse_dct_ii(c: &[f64]) -> Vec<f64> {
    let m = c.len();
    (0..m)
        .map(|n| {
            c.iter()
                .enumerate()
                .map(|(k, &ck)| {
                    let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
                    scale * ck * (PI / m as f64 * (n as f64 + 0.5) * k as f64).cos()
                })
                .sum()
        })
        .collect()
}

fn rates_by_counting(bonafide: &[f64], spoof: &[f64], t: f64) -> (f64, f64) {
    let frr = bonafide.iter().filter(|&&s| s < t).count() as f64 / bonafide.len() as f64;
    let far = spoof.iter().filter(|&&s| s >= t).count() as f64 / spoof.len() as f64;
    (frr, far)
}

/// Threshold candidates: every distinct score, then `+inf` (reject all).
fn sweep(bonafide: &[f64], spoof: &[f64]) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = bonafide.iter().chain(spoof).cloned().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    ts.dedup();
    ts.push(f64::INFINITY);
    ts.iter().map(|&t| rates_by_counting(bonafide, spoof, t)).collect()
}

/// EER by counting errors at every candidate threshold and interpolating
/// across the first sign change of `FRR - FAR`.
pub fn brute_force_eer(bonafide: &[f64], spoof: &[f64]) -> f64 {
    let pts = sweep(bonafide, spoof);
    for w in pts.windows(2) {
        let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if d0 == 0.0 {
            return w[0].0;
        }
        if d0 < 0.0 && d1 > 0.0 {
            return ((w[0].0 + w[0].1) + (w[1].0 + w[1].1)) / 4.0;
        }
    }
    pts.last().expect("reject-all point").0
}

/// `min_t (C1 P_miss(t) + C2 P_fa(t)) / min(C1, C2)` over every threshold.
pub fn brute_force_min_tdcf(bonafide: &[f64], spoof: &[f64], c1: f64, c2: f64) -> f64 {
    sweep(bonafide, spoof)
        .into_iter()
        .map(|(miss, fa)| (c1 * miss + c2 * fa) / c1.min(c2))
        .fold(f64::INFINITY, f64::min)
}

/// Port of the v1 ASVspoof 2019 scoring routine: a DET curve built from the
/// merged, stably sorted scores (one point per score plus accept-all), and the
/// normalised two-coefficient t-DCF minimised over it. Returns `None` for the
/// negative-weight case the original aborts on.
#[allow(clippy::too_many_arguments)]
pub fn official_v1_min_tdcf(
    bonafide: &[f64],
    spoof: &[f64],
    p_spoof: f64,
    p_tar: f64,
    p_non: f64,
    c_miss_asv: f64,
    c_fa_asv: f64,
    c_miss_cm: f64,
    c_fa_cm: f64,
    p_fa_asv: f64,
    p_miss_asv: f64,
    p_miss_spoof_asv: f64,
) -> Option<f64> {
    let mut all: Vec<(f64, bool)> = bonafide.iter().map(|&s| (s, true)).chain(spoof.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let (nt, nn) = (bonafide.len() as f64, spoof.len() as f64);
    let mut frr = vec![0.0];
    let mut far = vec![1.0];
    let mut tar_sum = 0.0;
    for (i, &(_, is_tar)) in all.iter().enumerate() {
        if is_tar {
            tar_sum += 1.0;
        }
        frr.push(tar_sum / nt);
        far.push((nn - ((i + 1) as f64 - tar_sum)) / nn);
    }
    let c1 = p_tar * (c_miss_cm - c_miss_asv * p_miss_asv) - p_non * c_fa_asv * p_fa_asv;
    let c2 = c_fa_cm * p_spoof * (1.0 - p_miss_spoof_asv);
    if c1 < 0.0 || c2 < 0.0 {
        return None;
    }
    frr.iter().zip(&far).map(|(m, f)| (c1 * m + c2 * f) / c1.min(c2)).reduce(f64::min)
}

/// Holm step-down executed literally: walk the p values from smallest to
/// largest and stop at the first one above `alpha / (m - k)`.
pub fn holm_step_down(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len();
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut reject = vec![false; m];
    for k in 0..m {
        let (pos, &idx) = remaining
            .iter()
            .enumerate()
            .min_by(|a, b| p[*a.1].partial_cmp(&p[*b.1]).expect("finite p").then(a.1.cmp(b.1)))
            .expect("non-empty");
        if p[idx] > alpha / (m - k) as f64 {
            break;
        }
        reject[idx] = true;
        remaining.remove(pos);
    }
    reject
}
