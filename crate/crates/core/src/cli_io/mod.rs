//! File formats and configuration: protocol lists, score files, the toolkit
//! JSON config, persisted models and reports. The command-line surface lives
//! in [`commands`].

pub mod commands;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioError;
use crate::backend::{BackendConfig, BackendError, CountermeasureModel};
use crate::frontend::{FeatureKind, FrontendConfig, FrontendError};
use crate::losses::{deserialize_loss_config, Label, LossConfig, LossError};
use crate::metrics::{MetricsError, ScoreRecord, ScoreSet, TdcfCostModel};
use crate::nn::{ManifestEntry, NnError, ParamSet};
use crate::stats::StatsError;
use crate::training::{TrainConfig, TrainError};

pub use commands::run_subcommand;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: score {text:?} is not a number")]
    NonNumericScore { line: usize, text: String },
    #[error("duplicate trial {0}")]
    DuplicateTrial(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// One protocol row: `speaker trial - attack key`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub speaker_id: String,
    pub trial_id: String,
    pub attack_id: String,
    pub key: Label,
}

pub fn parse_protocol(text: &str) -> Result<Vec<TrialRecord>, CliError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = |reason: String| CliError::MalformedLine { line, reason };
        if fields.len() != 5 {
            return Err(malformed(format!("expected 5 columns, found {}", fields.len())));
        }
        let key: Label = fields[4].parse().map_err(malformed)?;
        let attack = fields[3];
        if (key == Label::Bonafide) != (attack == "-") {
            return Err(malformed(format!("key {key} inconsistent with attack id {attack:?}")));
        }
        if !seen.insert(fields[1].to_string()) {
            return Err(CliError::DuplicateTrial(fields[1].to_string()));
        }
        out.push(TrialRecord {
            speaker_id: fields[0].to_string(),
            trial_id: fields[1].to_string(),
            attack_id: attack.to_string(),
            key,
        });
    }
    Ok(out)
}

pub fn read_protocol(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>, CliError> {
    parse_protocol(&read_text(path.as_ref())?)
}

pub fn format_protocol(records: &[TrialRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{} {} - {} {}\n", r.speaker_id, r.trial_id, r.attack_id, r.key))
        .collect()
}

/// `%g` with six significant digits, as C's `printf` renders it.
pub fn format_score(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        strip_zeros(&format!("{:.*}", (5 - exp) as usize, x)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `trial attack key score` lines, LF terminated.
pub fn format_scores(set: &ScoreSet) -> String {
    set.records()
        .iter()
        .map(|r| format!("{} {} {} {}\n", r.trial_id, r.attack_id, r.key, format_score(r.score)))
        .collect()
}

pub fn parse_scores(text: &str) -> Result<ScoreSet, CliError> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(CliError::MalformedLine {
                line,
                reason: format!("expected 4 columns, found {}", fields.len()),
            });
        }
        let key: Label = fields[2].parse().map_err(|reason| CliError::MalformedLine { line, reason })?;
        let score: f64 = fields[3].parse().ok().filter(|s: &f64| s.is_finite()).ok_or_else(|| CliError::NonNumericScore {
            line,
            text: fields[3].to_string(),
        })?;
        records.push(ScoreRecord::new(fields[0], fields[1], key, score));
    }
    ScoreSet::new(records).map_err(|e| match e {
        MetricsError::DuplicateTrial(t) => CliError::DuplicateTrial(t),
        other => other.into(),
    })
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreSet, CliError> {
    parse_scores(&read_text(path.as_ref())?)
}

pub fn write_scores(set: &ScoreSet, path: impl AsRef<Path>) -> Result<(), CliError> {
    write_bytes(path.as_ref(), format_scores(set).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    /// Family-wise significance level of the pairwise tests.
    pub alpha_level: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { alpha_level: 0.05 }
    }
}

/// Every tunable of the pipeline in one JSON document. `loss` accepts either a
/// preset name (`"p2sgrad"`, `"am"`, ...) or a full object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ToolkitConfig {
    pub frontend: FrontendConfig,
    pub backend: BackendConfig,
    #[serde(deserialize_with = "deserialize_loss_config")]
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub tdcf: TdcfCostModel,
    pub stats: StatsConfig,
}


impl ToolkitConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        Self::from_json(&read_text(path.as_ref())?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.frontend.validate()?;
        self.backend.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.tdcf.validate()?;
        if !(self.stats.alpha_level > 0.0 && self.stats.alpha_level < 1.0) {
            return Err(CliError::InvalidConfig("stats.alpha_level must lie in (0, 1)".into()));
        }
        let spec = self.frontend.kind == FeatureKind::Spec;
        if spec != self.backend.compression {
            return Err(CliError::InvalidConfig(
                "backend.compression must be enabled exactly when the frontend produces spectrograms".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// `model.json`: configs plus the layout of `params.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub frontend: FrontendConfig,
    pub backend: BackendConfig,
    pub loss: LossConfig,
    pub input_dim: usize,
    pub seed: u64,
    pub eval_seed: u64,
    pub order: Vec<String>,
    pub params: BTreeMap<String, ManifestEntry>,
}

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "model.json";

pub fn save_model(dir: impl AsRef<Path>, model: &CountermeasureModel, frontend: &FrontendConfig, seed: u64, eval_seed: u64) -> Result<(), CliError> {
    let dir = dir.as_ref();
    let (bytes, params) = model.params.to_bytes()?;
    let manifest = ModelManifest {
        frontend: frontend.clone(),
        backend: model.backend.clone(),
        loss: model.loss.clone(),
        input_dim: model.input_dim,
        seed,
        eval_seed,
        order: model.params.names().map(str::to_string).collect(),
        params,
    };
    write_bytes(&dir.join(PARAMS_FILE), &bytes)?;
    write_bytes(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(CountermeasureModel, ModelManifest), CliError> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = serde_json::from_str(&read_text(&dir.join(MANIFEST_FILE))?)?;
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let params = ParamSet::from_bytes(&bytes, &manifest.params, manifest.order.iter().map(String::as_str))?;
    let model = CountermeasureModel {
        backend: manifest.backend.clone(),
        loss: manifest.loss.clone(),
        input_dim: manifest.input_dim,
        params,
    };
    Ok((model, manifest))
}

/// Fixed-width per-attack EER table.
pub fn format_attack_table(per_attack: &BTreeMap<String, f64>, pooled: f64) -> String {
    let mut out = String::from("attack      EER(%)\n");
    for (attack, eer) in per_attack {
        out.push_str(&format!("{attack:<10} {:>7.3}\n", 100.0 * eer));
    }
    out.push_str(&format!("{:<10} {:>7.3}\n", "pooled", 100.0 * pooled));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn partial_config_falls_back_to_defaults() {
        let cfg = ToolkitConfig::from_json(
            r#"{"frontend": {"kind": "lfcc"}, "backend": {"strategy": {"kind": "pool_attention"}}, "loss": "p2sgrad", "train": {"epochs": 30, "batch_size": 8}}"#,
        )
        .unwrap();
        assert_eq!(cfg.backend.strategy, crate::backend::Strategy::PoolAttention);
        assert_eq!(cfg.loss, LossConfig::p2sgrad());
        assert_eq!(cfg.tdcf, TdcfCostModel::default());
    }

    #[test]
    fn protocol_lines() {
        let recs = parse_protocol("LA_0001 LA_E_1001 - - bonafide\n\nLA_0001 LA_E_1002 - A09 spoof\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!((recs[0].key, recs[0].attack_id.as_str()), (Label::Bonafide, "-"));
        assert_eq!((recs[1].key, recs[1].attack_id.as_str()), (Label::Spoof, "A09"));
        assert_eq!(parse_protocol(&format_protocol(&recs)).unwrap(), recs);
        assert!(matches!(parse_protocol("LA_0001 LA_E_1001 - bonafide"), Err(CliError::MalformedLine { line: 1, .. })));
        assert!(matches!(parse_protocol("a t - A01 bonafide"), Err(CliError::MalformedLine { .. })));
        assert!(matches!(parse_protocol("a t - - spoof"), Err(CliError::MalformedLine { .. })));
        assert!(matches!(parse_protocol("a t - - maybe"), Err(CliError::MalformedLine { .. })));
        assert!(matches!(parse_protocol("a t - - bonafide\nb t - - bonafide"), Err(CliError::DuplicateTrial(_))));
    }

    #[test]
    fn score_formatting_matches_printf() {
        let cases = [
            (0.123456789, "0.123457"),
            (0.5, "0.5"),
            (1.0, "1"),
            (-0.25, "-0.25"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234567, "1.23457e-05"),
            (999999.5, "1e+06"),
            (0.0, "0"),
        ];
        for (x, want) in cases {
            assert_eq!(format_score(x), want, "{x}");
        }
    }

    #[test]
    fn score_files() {
        let set = ScoreSet::new(vec![ScoreRecord::new("t1", "A01", Label::Spoof, 0.123456789)]).unwrap();
        let text = format_scores(&set);
        assert_eq!(text, "t1 A01 spoof 0.123457\n");
        let back = parse_scores(&text).unwrap();
        assert!((back.records()[0].score - 0.123456789).abs() < 5e-7);
        assert!(parse_scores("").unwrap().is_empty());
        assert!(matches!(parse_scores("t1 A01 spoof high"), Err(CliError::NonNumericScore { line: 1, .. })));
        assert!(matches!(parse_scores("t1 spoof 0.3"), Err(CliError::MalformedLine { .. })));
    }

    #[test]
    fn config_presets_and_validation() {
        let cfg = ToolkitConfig::from_json(r#"{"loss": "am", "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.loss, LossConfig::am_softmax());
        assert_eq!(cfg.train.epochs, 3);
        let back = ToolkitConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(ToolkitConfig::from_json(r#"{"loss": "nope"}"#).is_err());
        assert!(ToolkitConfig::from_json(r#"{"frontend": {"kind": "spec"}}"#).is_err());
        assert!(ToolkitConfig::from_json(r#"{"frontend": {"kind": "spec"}, "backend": {"compression": true}}"#).is_ok());
        assert!(ToolkitConfig::from_json(r#"{"backend": {"strategy": {"kind": "trim_pad", "k": 30}}}"#).is_err());
    }

    proptest! {
        #[test]
        fn scores_round_trip_to_printed_precision(xs in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            let recs = xs.iter().enumerate().map(|(i, &x)| ScoreRecord::new(format!("t{i}"), "-", Label::Bonafide, x)).collect();
            let set = ScoreSet::new(recs).unwrap();
            let back = parse_scores(&format_scores(&set)).unwrap();
            for (a, b) in set.records().iter().zip(back.records()) {
                prop_assert_eq!(&a.trial_id, &b.trial_id);
                prop_assert!((a.score - b.score).abs() <= 5e-6 * a.score.abs().max(1e-300));
            }
            prop_assert_eq!(format_scores(&back), format_scores(&set));
        }
    }
}
