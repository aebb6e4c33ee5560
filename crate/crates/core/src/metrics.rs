//! Detection metrics over countermeasure score sets: equal error rate, the
//! legacy two-coefficient min t-DCF, per-attack decomposition and score
//! averaging fusion.
//!
//! Operating points are taken at every distinct score `t` (accept iff
//! `score >= t`) plus one reject-all point, so ties always count as accepts.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::Label;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("score set needs at least one bonafide and one spoof trial")]
    SingleClass,
    #[error("degenerate t-DCF weights C1 = {c1}, C2 = {c2}")]
    DegenerateCost { c1: f64, c2: f64 },
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("score sets disagree on trial {0}")]
    TrialMismatch(String),
    #[error("duplicate trial id {0}")]
    DuplicateTrial(String),
    #[error("non-finite score for trial {0}")]
    NonFiniteScore(String),
    #[error("nothing to fuse")]
    EmptyFusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub trial_id: String,
    pub attack_id: String,
    pub key: Label,
    pub score: f64,
}

impl ScoreRecord {
    pub fn new(trial_id: impl Into<String>, attack_id: impl Into<String>, key: Label, score: f64) -> Self {
        Self {
            trial_id: trial_id.into(),
            attack_id: attack_id.into(),
            key,
            score,
        }
    }
}

/// Scored trials with unique ids and finite scores, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn new(records: Vec<ScoreRecord>) -> Result<Self, MetricsError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !r.score.is_finite() {
                return Err(MetricsError::NonFiniteScore(r.trial_id.clone()));
            }
            if !seen.insert(r.trial_id.as_str()) {
                return Err(MetricsError::DuplicateTrial(r.trial_id.clone()));
            }
        }
        Ok(Self { records })
    }

    /// Convenience constructor for anonymous bonafide/spoof score lists.
    pub fn from_scores(bonafide: &[f64], spoof: &[f64]) -> Result<Self, MetricsError> {
        let bona = bonafide.iter().enumerate().map(|(i, &s)| ScoreRecord::new(format!("B{i}"), "-", Label::Bonafide, s));
        let spf = spoof.iter().enumerate().map(|(i, &s)| ScoreRecord::new(format!("S{i}"), "spoof", Label::Spoof, s));
        Self::new(bona.chain(spf).collect())
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scores_for(&self, key: Label) -> Vec<f64> {
        self.records.iter().filter(|r| r.key == key).map(|r| r.score).collect()
    }

    pub fn counts(&self) -> (usize, usize) {
        let bona = self.records.iter().filter(|r| r.key == Label::Bonafide).count();
        (bona, self.records.len() - bona)
    }

    /// Sorted distinct attack ids among spoof records.
    pub fn attack_ids(&self) -> Vec<String> {
        let ids: std::collections::BTreeSet<&str> = self.records.iter().filter(|r| r.key == Label::Spoof).map(|r| r.attack_id.as_str()).collect();
        ids.into_iter().map(str::to_string).collect()
    }
}

/// One CM operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// Bonafide rejected (`score < threshold`).
    pub frr: f64,
    /// Spoof accepted (`score >= threshold`).
    pub far: f64,
}

/// All operating points in increasing threshold order: one per distinct
/// score plus a reject-all point at `max + 1`.
pub fn operating_points(bonafide: &[f64], spoof: &[f64]) -> Result<Vec<OperatingPoint>, MetricsError> {
    if bonafide.is_empty() || spoof.is_empty() {
        return Err(MetricsError::SingleClass);
    }
    let mut bona = bonafide.to_vec();
    let mut spf = spoof.to_vec();
    bona.sort_by(f64::total_cmp);
    spf.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = bona.iter().chain(&spf).cloned().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let top = *thresholds.last().expect("non-empty");
    thresholds.push(if top + 1.0 > top { top + 1.0 } else { f64::INFINITY });

    let (nb, ns) = (bona.len() as f64, spf.len() as f64);
    let (mut ib, mut is) = (0, 0);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            while ib < bona.len() && bona[ib] < t {
                ib += 1;
            }
            while is < spf.len() && spf[is] < t {
                is += 1;
            }
            OperatingPoint {
                threshold: t,
                frr: ib as f64 / nb,
                far: (spf.len() - is) as f64 / ns,
            }
        })
        .collect())
}

/// EER and its threshold from raw class scores.
pub fn eer_from_scores(bonafide: &[f64], spoof: &[f64]) -> Result<(f64, f64), MetricsError> {
    let points = operating_points(bonafide, spoof)?;
    // frr - far rises strictly from -1 at the lowest threshold to +1 at reject-all.
    let i = points.iter().position(|p| p.frr >= p.far).expect("reject-all point has frr = 1, far = 0");
    let hi = points[i];
    if hi.frr == hi.far {
        return Ok((hi.frr, hi.threshold));
    }
    let lo = points[i - 1];
    let eer = 0.5 * (0.5 * (lo.frr + lo.far) + 0.5 * (hi.frr + hi.far));
    let threshold = 0.5 * (lo.threshold + hi.threshold);
    if eer > 0.5 {
        log::warn!("EER {eer:.4} exceeds 0.5; the scorer looks inverted");
    }
    Ok((eer, threshold))
}

pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64), MetricsError> {
    eer_from_scores(&scores.scores_for(Label::Bonafide), &scores.scores_for(Label::Spoof))
}

/// Priors, costs and fixed ASV error rates of the legacy tandem cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TdcfCostModel {
    pub p_spoof: f64,
    pub p_tar: f64,
    pub p_non: f64,
    pub c_miss_asv: f64,
    pub c_fa_asv: f64,
    pub c_miss_cm: f64,
    pub c_fa_cm: f64,
    pub p_fa_asv: f64,
    pub p_miss_asv: f64,
    pub p_miss_spoof_asv: f64,
}

impl Default for TdcfCostModel {
    /// ASVspoof 2019 LA v1 priors and costs; the ASV rates default to an
    /// error-free ASV and should be replaced with measured values.
    fn default() -> Self {
        let p_spoof = 0.05;
        Self {
            p_spoof,
            p_tar: (1.0 - p_spoof) * 0.99,
            p_non: (1.0 - p_spoof) * 0.01,
            c_miss_asv: 1.0,
            c_fa_asv: 10.0,
            c_miss_cm: 1.0,
            c_fa_cm: 10.0,
            p_fa_asv: 0.0,
            p_miss_asv: 0.0,
            p_miss_spoof_asv: 0.0,
        }
    }
}

impl TdcfCostModel {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let priors = [self.p_spoof, self.p_tar, self.p_non];
        if priors.iter().any(|p| !(*p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MetricsError::InvalidCostModel("priors must be non-negative and sum to 1".into()));
        }
        let costs = [self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm];
        if costs.iter().any(|c| !(*c > 0.0)) {
            return Err(MetricsError::InvalidCostModel("costs must be positive".into()));
        }
        let rates = [self.p_fa_asv, self.p_miss_asv, self.p_miss_spoof_asv];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(MetricsError::InvalidCostModel("ASV rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The two weights `(C1, C2)` of `t-DCF = C1 P_miss_cm + C2 P_fa_cm`.
    pub fn coefficients(&self) -> Result<(f64, f64), MetricsError> {
        self.validate()?;
        let c1 = self.p_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv) - self.p_non * self.c_fa_asv * self.p_fa_asv;
        let c2 = self.c_fa_cm * self.p_spoof * (1.0 - self.p_miss_spoof_asv);
        if !(c1 > 0.0 && c2 > 0.0) {
            return Err(MetricsError::DegenerateCost { c1, c2 });
        }
        Ok((c1, c2))
    }
}

/// Normalised t-DCF at every operating point.
pub fn tdcf_curve(bonafide: &[f64], spoof: &[f64], cost: &TdcfCostModel) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (c1, c2) = cost.coefficients()?;
    let norm = c1.min(c2);
    Ok(operating_points(bonafide, spoof)?
        .into_iter()
        .map(|p| (p.threshold, (c1 * p.frr + c2 * p.far) / norm))
        .collect())
}

/// Minimum normalised t-DCF and the threshold attaining it.
pub fn min_tdcf_from_scores(bonafide: &[f64], spoof: &[f64], cost: &TdcfCostModel) -> Result<(f64, f64), MetricsError> {
    let curve = tdcf_curve(bonafide, spoof, cost)?;
    Ok(curve
        .into_iter()
        .fold((f64::INFINITY, f64::NAN), |best, (t, v)| if v < best.0 { (v, t) } else { best }))
}

pub fn compute_min_tdcf(scores: &ScoreSet, cost: &TdcfCostModel) -> Result<f64, MetricsError> {
    min_tdcf_from_scores(&scores.scores_for(Label::Bonafide), &scores.scores_for(Label::Spoof), cost).map(|(v, _)| v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackBreakdown {
    pub per_attack: BTreeMap<String, f64>,
    pub pooled: f64,
}

/// EER of all bonafide trials against each attack in turn, plus the pooled EER.
pub fn per_attack_breakdown(scores: &ScoreSet) -> Result<AttackBreakdown, MetricsError> {
    let bona = scores.scores_for(Label::Bonafide);
    let mut per_attack = BTreeMap::new();
    for attack in scores.attack_ids() {
        let spoof: Vec<f64> = scores
            .records()
            .iter()
            .filter(|r| r.key == Label::Spoof && r.attack_id == attack)
            .map(|r| r.score)
            .collect();
        per_attack.insert(attack, eer_from_scores(&bona, &spoof)?.0);
    }
    if per_attack.is_empty() {
        return Err(MetricsError::SingleClass);
    }
    Ok(AttackBreakdown {
        per_attack,
        pooled: compute_eer(scores)?.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_tdcf: f64,
    pub per_attack: BTreeMap<String, f64>,
    pub n_bona: usize,
    pub n_spoof: usize,
}

pub fn evaluate(scores: &ScoreSet, cost: &TdcfCostModel) -> Result<EvalReport, MetricsError> {
    let (eer, eer_threshold) = compute_eer(scores)?;
    let (n_bona, n_spoof) = scores.counts();
    Ok(EvalReport {
        eer,
        eer_threshold,
        min_tdcf: compute_min_tdcf(scores, cost)?,
        per_attack: per_attack_breakdown(scores)?.per_attack,
        n_bona,
        n_spoof,
    })
}

/// Per-trial arithmetic mean over several score sets. The output follows the
/// record order of the first set; scores are summed in sorted order so the
/// result does not depend on the order of `sets`.
pub fn fuse_scores(sets: &[ScoreSet]) -> Result<ScoreSet, MetricsError> {
    let first = sets.first().ok_or(MetricsError::EmptyFusion)?;
    let lookups: Vec<HashMap<&str, &ScoreRecord>> = sets
        .iter()
        .map(|s| s.records().iter().map(|r| (r.trial_id.as_str(), r)).collect())
        .collect();
    for s in sets {
        if let Some(extra) = s.records().iter().find(|r| !lookups[0].contains_key(r.trial_id.as_str())) {
            return Err(MetricsError::TrialMismatch(extra.trial_id.clone()));
        }
    }
    let mut fused = Vec::with_capacity(first.len());
    for rec in first.records() {
        let mut scores = Vec::with_capacity(sets.len());
        for table in &lookups {
            let other = table.get(rec.trial_id.as_str()).ok_or_else(|| MetricsError::TrialMismatch(rec.trial_id.clone()))?;
            if other.key != rec.key || other.attack_id != rec.attack_id {
                return Err(MetricsError::TrialMismatch(rec.trial_id.clone()));
            }
            scores.push(other.score);
        }
        scores.sort_by(f64::total_cmp);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        fused.push(ScoreRecord { score: mean, ..rec.clone() });
    }
    ScoreSet::new(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;

    fn set(b: &[f64], s: &[f64]) -> ScoreSet {
        ScoreSet::from_scores(b, s).unwrap()
    }

    #[test]
    fn eer_worked_examples() {
        assert_eq!(compute_eer(&set(&[0.9, 0.8], &[0.2, 0.1])).unwrap().0, 0.0);
        let (eer, t) = compute_eer(&set(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1])).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t, 0.7);
        let swapped = compute_eer(&set(&[-0.7, -0.2, -0.1], &[-0.9, -0.8, -0.3])).unwrap().0;
        assert!((swapped - eer).abs() < 1e-15);
        assert_eq!(compute_eer(&set(&[0.4], &[])), Err(MetricsError::SingleClass));
    }

    #[test]
    fn operating_points_span_both_extremes() {
        let pts = operating_points(&[0.5, 0.5, 0.9], &[0.5, 0.1]).unwrap();
        let first = pts.first().unwrap();
        let last = pts.last().unwrap();
        assert_eq!((first.frr, first.far), (0.0, 1.0));
        assert_eq!((last.frr, last.far), (1.0, 0.0));
        // ties at 0.5 are accepted
        let at_half = pts.iter().find(|p| p.threshold == 0.5).unwrap();
        assert_eq!((at_half.frr, at_half.far), (0.0, 0.5));
    }

    #[test]
    fn tdcf_basics() {
        let cost = TdcfCostModel::default();
        assert_eq!(compute_min_tdcf(&set(&[0.9, 0.8], &[0.2, 0.1]), &cost).unwrap(), 0.0);
        let curve = tdcf_curve(&[0.5], &[0.5], &cost).unwrap();
        let min = curve.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        assert_eq!(min, 1.0);
        let bad = TdcfCostModel {
            p_miss_asv: 1.0,
            p_fa_asv: 1.0,
            ..cost
        };
        assert!(matches!(bad.coefficients(), Err(MetricsError::DegenerateCost { .. })));
    }

    #[test]
    fn breakdown_toy_set() {
        let recs = vec![
            ScoreRecord::new("b1", "-", Label::Bonafide, 0.5),
            ScoreRecord::new("b2", "-", Label::Bonafide, 0.6),
            ScoreRecord::new("a1", "A", Label::Spoof, 0.1),
            ScoreRecord::new("a2", "A", Label::Spoof, 0.2),
            ScoreRecord::new("c1", "B", Label::Spoof, 0.5),
            ScoreRecord::new("c2", "B", Label::Spoof, 0.6),
        ];
        let out = per_attack_breakdown(&ScoreSet::new(recs).unwrap()).unwrap();
        assert_eq!(out.per_attack["A"], 0.0);
        assert_eq!(out.per_attack["B"], 0.5);
        assert!((out.pooled - 0.3125).abs() < 1e-15);
    }

    #[test]
    fn fusion_averages_and_checks_trials() {
        let a = ScoreSet::new(vec![ScoreRecord::new("t", "-", Label::Bonafide, 0.2)]).unwrap();
        let b = ScoreSet::new(vec![ScoreRecord::new("t", "-", Label::Bonafide, 0.8)]).unwrap();
        assert_eq!(fuse_scores(&[a.clone(), b]).unwrap().records()[0].score, 0.5);
        assert_eq!(fuse_scores(std::slice::from_ref(&a)).unwrap(), a);
        let c = ScoreSet::new(vec![ScoreRecord::new("u", "-", Label::Bonafide, 0.8)]).unwrap();
        assert!(matches!(fuse_scores(&[a.clone(), c]), Err(MetricsError::TrialMismatch(_))));
        assert!(ScoreSet::new(vec![a.records()[0].clone(), a.records()[0].clone()]).is_err());
    }

    proptest! {
        #[test]
        fn eer_matches_brute_force(
            bona in prop::collection::vec(-3.0f64..3.0, 1..40),
            spoof in prop::collection::vec(-3.0f64..3.0, 1..40),
        ) {
            let fast = eer_from_scores(&bona, &spoof).unwrap().0;
            prop_assert!((fast - oracle::brute_force_eer(&bona, &spoof)).abs() < 1e-9);
        }

        #[test]
        fn min_tdcf_matches_sweep(
            bona in prop::collection::vec(0u8..20, 1..12),
            spoof in prop::collection::vec(0u8..20, 1..12),
        ) {
            let b: Vec<f64> = bona.iter().map(|&v| v as f64 / 4.0).collect();
            let s: Vec<f64> = spoof.iter().map(|&v| v as f64 / 4.0).collect();
            let cost = TdcfCostModel::default();
            let (c1, c2) = cost.coefficients().unwrap();
            let (fast, _) = min_tdcf_from_scores(&b, &s, &cost).unwrap();
            prop_assert!((fast - oracle::brute_force_min_tdcf(&b, &s, c1, c2)).abs() < 1e-12);
        }

        #[test]
        fn fusion_ignores_set_order(xs in prop::collection::vec(-1.0f64..1.0, 3)) {
            let mk = |v: f64| ScoreSet::new(vec![ScoreRecord::new("t", "A1", Label::Spoof, v)]).unwrap();
            let sets: Vec<ScoreSet> = xs.iter().map(|&v| mk(v)).collect();
            let mut rev = sets.clone();
            rev.reverse();
            prop_assert_eq!(fuse_scores(&sets).unwrap(), fuse_scores(&rev).unwrap());
        }
    }
}
