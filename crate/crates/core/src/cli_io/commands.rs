//! `spoofkit` subcommands. Exit status: 0 success, 1 operation failure,
//! 2 usage error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{
    format_attack_table, format_protocol, load_model, read_protocol, read_scores, save_model, write_bytes, write_scores, CliError,
    ToolkitConfig, TrialRecord,
};
use crate::audio_io::{read_feature_cache, read_wav, write_feature_cache, write_wav};
use crate::bench;
use crate::frontend::{FeatureExtractor, FrontendConfig};
use crate::metrics::{compute_eer, evaluate, fuse_scores, per_attack_breakdown};
use crate::selftest::run_selftest;
use crate::stats::{intra_model_spread, significance_matrix, EerObservation};
use crate::training::{generate_synthetic_dataset, run_seed, score_trials, train_model, LabeledFeatures, log_to_csv};

#[derive(Debug, Parser)]
#[command(name = "spoofkit", version, about = "Speech anti-spoofing countermeasure toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Protocol file: `speaker trial - attack key` per line.
    #[arg(long)]
    protocol: PathBuf,
    /// Directory holding `<trial>.wav`.
    #[arg(long)]
    wav_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic bonafide/spoof corpus (WAV files plus protocol).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        n_per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        min_dur: f64,
        #[arg(long, default_value_t = 4.0)]
        max_dur: f64,
    },
    /// Extract feature caches (`<trial>.fmat`) for every protocol trial.
    Extract {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; with `--runs K`, train K models with seeds 10^(k-1).
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        runs: Option<u32>,
        /// Score this protocol after training (writes `scores.txt`).
        #[arg(long, requires = "eval_wav_dir")]
        eval_protocol: Option<PathBuf>,
        #[arg(long)]
        eval_wav_dir: Option<PathBuf>,
    },
    /// Score a protocol with a trained model directory.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// EER, min t-DCF and per-attack EERs of a score file.
    Eval {
        scores: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise significance matrix over score files given as `[model=]path`.
    Compare {
        inputs: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        n_bona: Option<usize>,
        #[arg(long)]
        n_spoof: Option<usize>,
        /// Output prefix; writes `<out>.json` and `<out>.pgm`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Average scores of several files trial by trial.
    Fuse {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient-check and oracle suites.
    Selftest,
    /// Median timing of a registered operation (CSV output).
    Bench {
        #[arg(long)]
        op: String,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run_subcommand<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })
}

fn load_config(path: Option<&Path>) -> Result<ToolkitConfig, CliError> {
    match path {
        Some(p) => ToolkitConfig::load(p),
        None => Ok(ToolkitConfig::default()),
    }
}

fn load_features(data: &DataArgs, frontend: &FrontendConfig) -> Result<(Vec<TrialRecord>, Vec<LabeledFeatures>), CliError> {
    let protocol = read_protocol(&data.protocol)?;
    let extractor = FeatureExtractor::new(frontend.clone())?;
    let feats = protocol
        .iter()
        .map(|r| {
            let signal = read_wav(data.wav_dir.join(format!("{}.wav", r.trial_id)))?;
            Ok(LabeledFeatures {
                trial_id: r.trial_id.clone(),
                attack_id: r.attack_id.clone(),
                key: r.key,
                features: extractor.extract(&signal)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((protocol, feats))
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth {
            out,
            seed,
            n_per_class,
            min_dur,
            max_dur,
        } => {
            if n_per_class == 0 || !(min_dur > 0.0 && max_dur >= min_dur) {
                return Err(CliError::Usage("need n-per-class >= 1 and 0 < min-dur <= max-dur".into()));
            }
            let trials = generate_synthetic_dataset(seed, n_per_class, 16000, (min_dur, max_dur));
            ensure_dir(&out.join("wav"))?;
            let mut protocol = Vec::with_capacity(trials.len());
            for t in &trials {
                write_wav(&t.signal, out.join("wav").join(format!("{}.wav", t.trial_id)))?;
                protocol.push(TrialRecord {
                    speaker_id: t.speaker_id.clone(),
                    trial_id: t.trial_id.clone(),
                    attack_id: t.attack_id.clone(),
                    key: t.key,
                });
            }
            write_bytes(&out.join("protocol.txt"), format_protocol(&protocol).as_bytes())
        }
        Command::Extract { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (_, feats) = load_features(&data, &cfg.frontend)?;
            ensure_dir(&out)?;
            for f in &feats {
                let path = out.join(format!("{}.fmat", f.trial_id));
                write_feature_cache(&f.features, &path)?;
                // read back to fail loudly on a short write
                read_feature_cache(&path)?;
            }
            println!("wrote {} feature caches to {}", feats.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            seed,
            runs,
            eval_protocol,
            eval_wav_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            if runs == Some(0) {
                return Err(CliError::Usage("--runs must be at least 1".into()));
            }
            if runs.is_some() && seed.is_some() {
                return Err(CliError::Usage("--seed and --runs are mutually exclusive".into()));
            }
            let (_, train) = load_features(&data, &cfg.frontend)?;
            let eval = match (&eval_protocol, &eval_wav_dir) {
                (Some(p), Some(w)) => Some(load_features(
                    &DataArgs {
                        protocol: p.clone(),
                        wav_dir: w.clone(),
                    },
                    &cfg.frontend,
                )?),
                _ => None,
            };
            let plan: Vec<(u64, PathBuf)> = match runs {
                Some(k) => (1..=k).map(|i| (run_seed(i), out.join(format!("run{i}")))).collect(),
                None => vec![(seed.unwrap_or(cfg.train.seed), out.clone())],
            };
            for (s, dir) in plan {
                let run = crate::training::TrainConfig { seed: s, ..cfg.train.clone() };
                let outcome = train_model(&train, &cfg.frontend, &cfg.backend, &cfg.loss, &run)?;
                save_model(&dir, &outcome.model, &cfg.frontend, s, run.eval_seed)?;
                write_bytes(&dir.join("train_log.csv"), log_to_csv(&outcome.log).as_bytes())?;
                if let Some((_, feats)) = &eval {
                    let scores = score_trials(&outcome.model, feats, run.eval_seed)?;
                    write_scores(&scores, dir.join("scores.txt"))?;
                }
                let last = outcome.log.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
                println!("seed {s}: final mean loss {last:.6}, model in {}", dir.display());
            }
            Ok(())
        }
        Command::Score { model, data, out } => {
            let (m, manifest) = load_model(&model)?;
            let (_, feats) = load_features(&data, &manifest.frontend)?;
            let scores = score_trials(&m, &feats, manifest.eval_seed)?;
            write_scores(&scores, &out)
        }
        Command::Eval { scores, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let set = read_scores(&scores)?;
            let report = evaluate(&set, &cfg.tdcf)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                write_bytes(&path, json.as_bytes())?;
            }
            println!("{json}");
            print!("{}", format_attack_table(&report.per_attack, report.eer));
            Ok(())
        }
        Command::Compare {
            inputs,
            config,
            alpha,
            n_bona,
            n_spoof,
            out,
        } => {
            if inputs.len() < 2 {
                return Err(CliError::Usage(format!("compare needs at least two score files, got {}", inputs.len())));
            }
            let cfg = load_config(config.as_deref())?;
            let alpha = alpha.unwrap_or(cfg.stats.alpha_level);
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(CliError::Usage(format!("--alpha {alpha} outside (0, 1)")));
            }
            let mut observations = Vec::with_capacity(inputs.len());
            let mut next_run: BTreeMap<String, usize> = BTreeMap::new();
            for input in &inputs {
                let (model_id, path, run_dir) = parse_compare_input(input);
                let set = read_scores(&path)?;
                let (eer, _) = compute_eer(&set)?;
                let (nb, ns) = set.counts();
                let counter = next_run.entry(model_id.clone()).or_insert(0);
                *counter += 1;
                observations.push(EerObservation {
                    model_id,
                    run_index: run_dir.unwrap_or(*counter),
                    eer,
                    n_bona: n_bona.unwrap_or(nb),
                    n_spoof: n_spoof.unwrap_or(ns),
                });
            }
            let matrix = significance_matrix(&observations, alpha)?;
            let spread = intra_model_spread(&observations, &matrix);
            let report = serde_json::json!({
                "matrix": &matrix,
                "intra_model": &spread,
            });
            write_bytes(&out.with_extension("json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
            write_bytes(&out.with_extension("pgm"), &matrix.to_pgm(8))?;
            for (model, s) in &spread {
                println!(
                    "{model}: {} runs, EER {:.3}%..{:.3}% (spread {:.3} points), {} significant intra-model pairs",
                    s.runs,
                    100.0 * s.min_eer,
                    100.0 * s.max_eer,
                    100.0 * s.spread,
                    s.significant_pairs
                );
            }
            Ok(())
        }
        Command::Fuse { inputs, out } => {
            if inputs.is_empty() {
                return Err(CliError::Usage("fuse needs at least one score file".into()));
            }
            let sets = inputs.iter().map(read_scores).collect::<Result<Vec<_>, _>>()?;
            let fused = fuse_scores(&sets)?;
            write_scores(&fused, &out)?;
            if let Ok(b) = per_attack_breakdown(&fused) {
                print!("{}", format_attack_table(&b.per_attack, b.pooled));
            }
            Ok(())
        }
        Command::Selftest => {
            let results = run_selftest();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().all(|r| r.passed) {
                Ok(())
            } else {
                Err(CliError::InvalidConfig("self-test failed".into()))
            }
        }
        Command::Bench { op, size, reps, out } => {
            let record = bench::bench(&op, size, reps).map_err(|e| match e {
                bench::BenchError::Failed(m) => CliError::InvalidConfig(m),
                other => CliError::Usage(other.to_string()),
            })?;
            let csv = bench::to_csv(&[record]);
            if let Some(path) = out {
                write_bytes(&path, csv.as_bytes())?;
            }
            print!("{csv}");
            Ok(())
        }
    }
}

/// Splits `[model=]path`. Without an explicit id the model is named after the
/// directory above `run<k>/` (and the run index taken from `k`), or else after
/// the file stem.
fn parse_compare_input(input: &str) -> (String, PathBuf, Option<usize>) {
    let (explicit, path) = match input.split_once('=') {
        Some((id, p)) if !id.is_empty() => (Some(id.to_string()), PathBuf::from(p)),
        _ => (None, PathBuf::from(input)),
    };
    let parent = path.parent();
    let run = parent
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("run"))
        .and_then(|k| k.parse::<usize>().ok());
    let model = explicit.unwrap_or_else(|| {
        let from_run_dir = run
            .and_then(|_| parent.and_then(Path::parent))
            .and_then(|g| g.file_name())
            .and_then(|n| n.to_str())
            .map(str::to_string);
        from_run_dir.unwrap_or_else(|| path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string())
    });
    (model, path, run)
}
