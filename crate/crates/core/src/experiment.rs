//! Paired multi-trial experiments and their on-disk results.
//!
//! Trial `t` trains one standard and one residual model, both seeded with
//! `base_seed + t`. Each trial owns its own [`RngStream`], so results do not
//! depend on how many trials run concurrently.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{
    find_idx_file, load_split, DatasetSplit, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS,
};
use crate::dbn::{DbnMode, DbnModel, PretrainReport};
use crate::error::{Error, Result};
use crate::finetune::{evaluate_accuracy, fine_tune, ClassifierModel};
use crate::model_io::SavedModel;
use crate::rng::RngStream;
use crate::stats::{aggregate, compare, ComparisonVerdict, TrialReport};

pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const MODELS_DIR: &str = "models";
pub const CURVES_HEADER: [&str; 4] = ["model_tag", "trial", "epoch", "test_accuracy"];

const MODES: [DbnMode; 2] = [DbnMode::Standard, DbnMode::Residual];

/// Loads the train and test splits named by `config`, applying the subset limits.
pub fn load_datasets(config: &TrainConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    let dir = &config.data_dir;
    let locate = |stem: &str| {
        find_idx_file(dir, stem).ok_or_else(|| {
            Error::io(
                dir.join(stem),
                std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file (raw or .gz) not found"),
            )
        })
    };
    let train = load_split(
        &format!("{}-train", config.dataset),
        &locate(TRAIN_IMAGES)?,
        &locate(TRAIN_LABELS)?,
        config.encoding(),
        config.subset,
    )?;
    let test = load_split(
        &format!("{}-test", config.dataset),
        &locate(TEST_IMAGES)?,
        &locate(TEST_LABELS)?,
        config.encoding(),
        config.test_subset,
    )?;
    Ok((train, test))
}

fn class_count(widths: &[usize]) -> usize {
    *widths.last().expect("architecture has at least three widths")
}

/// Builds a stack from `seed` and runs greedy pretraining. Returns the RNG so
/// fine-tuning can continue the same stream.
pub fn pretrain_model(
    config: &TrainConfig,
    mode: DbnMode,
    seed: u64,
    train: &DatasetSplit,
) -> Result<(DbnModel, PretrainReport, RngStream)> {
    let widths = config.widths(train.n_features())?;
    let mut rng = RngStream::new(seed);
    let hidden = &widths[..widths.len() - 1];
    let mut dbn = DbnModel::new(hidden, mode, config.init_std, &mut rng)?;
    let report = dbn.pretrain_greedy(train.images(), &config.pretrain_config(), &mut rng)?;
    Ok((dbn, report, rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialTiming {
    pub model_tag: DbnMode,
    pub trial: usize,
    pub pretrain_secs: f64,
    pub finetune_secs: f64,
}

/// A finished trial: the fine-tuned model and its report.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: ClassifierModel,
    pub report: TrialReport,
    pub timing: TrialTiming,
}

/// Pretrains and fine-tunes one model for trial `trial`, seeded with
/// `base_seed + trial`.
pub fn train_trial(
    config: &TrainConfig,
    mode: DbnMode,
    trial: usize,
    train: &DatasetSplit,
    test: &DatasetSplit,
) -> Result<TrainedModel> {
    let seed = config.base_seed.wrapping_add(trial as u64);
    let widths = config.widths(train.n_features())?;
    let start = Instant::now();
    let (dbn, pretrain, mut rng) = pretrain_model(config, mode, seed, train)?;
    let pretrain_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut model = ClassifierModel::new(dbn, class_count(&widths))?
        .with_reinforced_forward(config.reinforced_finetune);
    let curve = fine_tune(&mut model, train, test, &config.finetune_config(), &mut rng)?;
    let final_accuracy = match curve.last() {
        Some(&acc) => acc,
        None => evaluate_accuracy(&model, test)?,
    };
    let finetune_secs = start.elapsed().as_secs_f64();

    Ok(TrainedModel {
        report: TrialReport {
            model_tag: mode,
            architecture: config.architecture.clone(),
            dataset: config.dataset.clone(),
            trial,
            seed,
            final_accuracy,
            accuracy_series: curve,
            pretrain_errors: pretrain.layer_errors,
        },
        model,
        timing: TrialTiming {
            model_tag: mode,
            trial,
            pretrain_secs,
            finetune_secs,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub model_tag: DbnMode,
    pub trial: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_secs: f64,
    pub trials: Vec<TrialTiming>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub config: TrainConfig,
    /// Sorted by trial index.
    pub standard: Vec<TrialReport>,
    pub residual: Vec<TrialReport>,
    pub failures: Vec<TrialFailure>,
    pub warnings: Vec<String>,
    /// Residual (a) against standard (b) over the trials where both succeeded.
    pub verdict: Option<ComparisonVerdict>,
    pub timings: Timings,
}

impl ExperimentResult {
    pub fn empty(config: TrainConfig) -> Self {
        Self {
            config,
            standard: Vec::new(),
            residual: Vec::new(),
            failures: Vec::new(),
            warnings: Vec::new(),
            verdict: None,
            timings: Timings::default(),
        }
    }

    pub fn reports(&self, mode: DbnMode) -> &[TrialReport] {
        match mode {
            DbnMode::Standard => &self.standard,
            DbnMode::Residual => &self.residual,
        }
    }
}

/// Called with every finished model, possibly from several threads at once.
pub type ModelSink<'a> = dyn Fn(&TrialReport, &ClassifierModel) -> Result<()> + Sync + 'a;

pub fn run_experiment(
    config: &TrainConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
) -> Result<ExperimentResult> {
    run_experiment_with(config, train, test, None)
}

/// Runs `config.trials` paired trials on up to `config.jobs` threads. Training
/// failures are recorded and the experiment continues; sink errors abort it.
pub fn run_experiment_with(
    config: &TrainConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    sink: Option<&ModelSink<'_>>,
) -> Result<ExperimentResult> {
    config.validate()?;
    config.widths(train.n_features())?;
    let start = Instant::now();
    let tasks: Vec<(usize, DbnMode)> = (0..config.trials)
        .flat_map(|t| MODES.map(|m| (t, m)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    // models go to the sink as soon as they finish and are dropped afterwards
    type Outcome = (usize, DbnMode, Result<(TrialReport, TrialTiming)>, Result<()>);
    let outcomes: Vec<Outcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(t, mode)| match train_trial(config, mode, t, train, test) {
                Ok(done) => {
                    let stored = sink.map_or(Ok(()), |s| s(&done.report, &done.model));
                    (t, mode, Ok((done.report, done.timing)), stored)
                }
                Err(e) => (t, mode, Err(e), Ok(())),
            })
            .collect()
    });

    let mut result = ExperimentResult::empty(config.clone());
    for (trial, mode, outcome, stored) in outcomes {
        stored?;
        match outcome {
            Ok((report, timing)) => {
                result.timings.trials.push(timing);
                match mode {
                    DbnMode::Standard => result.standard.push(report),
                    DbnMode::Residual => result.residual.push(report),
                }
            }
            Err(e) => result.failures.push(TrialFailure {
                model_tag: mode,
                trial,
                seed: config.base_seed.wrapping_add(trial as u64),
                error: e.to_string(),
            }),
        }
    }

    let failed: Vec<usize> = result.failures.iter().map(|f| f.trial).collect();
    for f in &result.failures {
        result.warnings.push(format!(
            "{} trial {} (seed {}) failed and is excluded from pairing: {}",
            f.model_tag, f.trial, f.seed, f.error
        ));
    }
    let paired = |reports: &[TrialReport]| -> Vec<TrialReport> {
        reports
            .iter()
            .filter(|r| !failed.contains(&r.trial))
            .cloned()
            .collect()
    };
    let (res, std) = (paired(&result.residual), paired(&result.standard));
    if !res.is_empty() {
        result.verdict = Some(compare(&res, &std)?);
    }
    result.timings.total_secs = start.elapsed().as_secs_f64();
    Ok(result)
}

pub fn model_file_name(mode: DbnMode, trial: usize) -> String {
    format!("{mode}_trial{trial:03}.rdbn")
}

/// A sink that writes every model to `out_dir/models/`.
pub fn model_writer(out_dir: &Path) -> Result<impl Fn(&TrialReport, &ClassifierModel) -> Result<()> + Sync> {
    let dir = out_dir.join(MODELS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(move |report: &TrialReport, model: &ClassifierModel| {
        SavedModel::from_classifier(model).save(&dir.join(model_file_name(report.model_tag, report.trial)))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub trials: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub final_accuracies: Vec<f64>,
}

impl ModeSummary {
    fn from_reports(reports: &[TrialReport]) -> Self {
        let finals: Vec<f64> = reports.iter().map(|r| r.final_accuracy).collect();
        let mean = (!finals.is_empty()).then(|| finals.iter().sum::<f64>() / finals.len() as f64);
        Self {
            trials: finals.len(),
            mean,
            std: aggregate(&finals).ok().map(|s| s.std),
            final_accuracies: finals,
        }
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dataset: String,
    pub architecture: String,
    pub standard: ModeSummary,
    pub residual: ModeSummary,
    /// Residual against standard; `null` when no trial pair completed.
    pub verdict: Option<ComparisonVerdict>,
    pub failures: Vec<TrialFailure>,
    pub warnings: Vec<String>,
    pub reports: Vec<TrialReport>,
    pub config: TrainConfig,
}

impl Summary {
    pub fn new(result: &ExperimentResult) -> Self {
        Self {
            dataset: result.config.dataset.clone(),
            architecture: result.config.architecture.clone(),
            standard: ModeSummary::from_reports(&result.standard),
            residual: ModeSummary::from_reports(&result.residual),
            verdict: result.verdict.clone(),
            failures: result.failures.clone(),
            warnings: result.warnings.clone(),
            reports: result
                .standard
                .iter()
                .chain(&result.residual)
                .cloned()
                .collect(),
            config: result.config.clone(),
        }
    }
}

pub fn write_curves<W: Write>(result: &ExperimentResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("writing curves: {e}"));
    w.write_record(CURVES_HEADER).map_err(csv_err)?;
    for mode in MODES {
        for r in result.reports(mode) {
            for (i, acc) in r.accuracy_series.iter().enumerate() {
                w.write_record([
                    mode.as_str().to_string(),
                    r.trial.to_string(),
                    (i + 1).to_string(),
                    acc.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("writing curves: {e}")))?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `curves.csv`, `summary.json`, `timings.json` and the `models/`
/// directory into `out_dir`. Wall-clock timings live in their own file so the
/// other two are reproducible byte for byte.
pub fn emit_results(result: &ExperimentResult, out_dir: &Path) -> Result<()> {
    let models = out_dir.join(MODELS_DIR);
    fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;

    let mut curves = Vec::new();
    write_curves(result, &mut curves)?;
    write_file(&out_dir.join(CURVES_FILE), &curves)?;

    let summary = serde_json::to_vec_pretty(&Summary::new(result))
        .map_err(|e| Error::InvalidArgument(format!("encoding summary: {e}")))?;
    write_file(&out_dir.join(SUMMARY_FILE), &summary)?;

    let timings = serde_json::to_vec_pretty(&result.timings)
        .map_err(|e| Error::InvalidArgument(format!("encoding timings: {e}")))?;
    write_file(&out_dir.join(TIMINGS_FILE), &timings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub model_tag: DbnMode,
    pub trial: usize,
    pub epoch: usize,
    pub test_accuracy: f64,
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let bad = |e: csv::Error| Error::InvalidArgument(format!("{}: {e}", path.display()));
    let header = reader.headers().map_err(bad)?.clone();
    if header.iter().ne(CURVES_HEADER) {
        return Err(Error::InvalidArgument(format!(
            "{}: unexpected header {:?}",
            path.display(),
            header
        )));
    }
    reader.deserialize().map(|row| row.map_err(bad)).collect()
}

/// Rebuilds per-trial reports from curve rows. The last epoch of each series
/// is the final accuracy; trials are paired by index.
pub fn reports_from_curves(rows: &[CurveRow]) -> Result<(Vec<TrialReport>, Vec<TrialReport>)> {
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| (r.model_tag, r.trial, r.epoch));
    let mut standard: Vec<TrialReport> = Vec::new();
    let mut residual: Vec<TrialReport> = Vec::new();
    for row in sorted {
        let list = match row.model_tag {
            DbnMode::Standard => &mut standard,
            DbnMode::Residual => &mut residual,
        };
        match list.last_mut() {
            Some(r) if r.trial == row.trial => {
                if row.epoch != r.accuracy_series.len() + 1 {
                    return Err(Error::InvalidArgument(format!(
                        "{} trial {}: epoch {} out of sequence",
                        row.model_tag, row.trial, row.epoch
                    )));
                }
                r.accuracy_series.push(row.test_accuracy);
                r.final_accuracy = row.test_accuracy;
            }
            _ => {
                if row.epoch != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "{} trial {}: series starts at epoch {}",
                        row.model_tag, row.trial, row.epoch
                    )));
                }
                list.push(TrialReport {
                    model_tag: row.model_tag,
                    architecture: String::new(),
                    dataset: String::new(),
                    trial: row.trial,
                    seed: row.trial as u64,
                    final_accuracy: row.test_accuracy,
                    accuracy_series: vec![row.test_accuracy],
                    pretrain_errors: Vec::new(),
                });
            }
        }
    }
    Ok((standard, residual))
}

/// Default output directory name for a run.
pub fn default_out_dir(config: &TrainConfig) -> PathBuf {
    PathBuf::from(format!("results/{}-seed{}", config.dataset, config.base_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// Two classes told apart by which half of the image is lit.
    pub(crate) fn toy_split(n: usize, seed: u64) -> DatasetSplit {
        let mut rng = RngStream::new(seed);
        let mut images = Array2::zeros((n, 8));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            for j in 0..8 {
                let on = (j < 4) == (class == 0);
                let p = if on { 0.9 } else { 0.1 };
                images[[i, j]] = f64::from(u8::from(rng.uniform() < p));
            }
            labels.push(class);
        }
        DatasetSplit::new("toy", images, labels).unwrap()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            architecture: "i:6:4:2".into(),
            batch_size: 4,
            bottom_epochs: 3,
            upper_epochs: 2,
            ft_epochs: 3,
            ft_lr: 0.05,
            trials: 2,
            base_seed: 11,
            dataset: "toy".into(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn smoke_single_trial() {
        let data = toy_split(10, 1);
        let cfg = TrainConfig {
            trials: 1,
            ..toy_config()
        };
        let result = run_experiment(&cfg, &data, &data).unwrap();
        assert_eq!(result.standard.len(), 1);
        assert_eq!(result.residual.len(), 1);
        assert_eq!(result.standard[0].seed, result.residual[0].seed);
        assert_eq!(result.standard[0].accuracy_series.len(), 3);
        let v = result.verdict.unwrap();
        assert_eq!(v.n_pairs, 1);
        assert!(!v.significant);
    }

    #[test]
    fn harness_matches_direct_training() {
        let train = toy_split(40, 2);
        let test = toy_split(20, 3);
        let cfg = toy_config();
        let result = run_experiment(&cfg, &train, &test).unwrap();

        // direct pipeline, written out without the harness helpers
        let seed = cfg.base_seed + 1;
        let mut rng = RngStream::new(seed);
        let mut dbn = DbnModel::new(&[8, 6, 4], DbnMode::Standard, cfg.init_std, &mut rng).unwrap();
        dbn.pretrain_greedy(train.images(), &cfg.pretrain_config(), &mut rng)
            .unwrap();
        let mut model = ClassifierModel::new(dbn, 2).unwrap();
        let curve = fine_tune(&mut model, &train, &test, &cfg.finetune_config(), &mut rng).unwrap();

        assert_eq!(result.standard[1].accuracy_series, curve);
        assert_eq!(result.standard[1].seed, seed);
    }

    #[test]
    fn parallelism_does_not_change_results() {
        let data = toy_split(30, 4);
        let serial = run_experiment(&toy_config(), &data, &data).unwrap();
        let parallel = run_experiment(
            &TrainConfig {
                jobs: 4,
                ..toy_config()
            },
            &data,
            &data,
        )
        .unwrap();
        assert_eq!(serial.standard, parallel.standard);
        assert_eq!(serial.residual, parallel.residual);
    }

    #[test]
    fn paired_first_layers_match() {
        let data = toy_split(30, 5);
        let cfg = toy_config();
        let (std_dbn, std_rep, _) = pretrain_model(&cfg, DbnMode::Standard, 3, &data).unwrap();
        let (res_dbn, res_rep, _) = pretrain_model(&cfg, DbnMode::Residual, 3, &data).unwrap();
        assert_eq!(std_dbn.layers()[0], res_dbn.layers()[0]);
        assert_eq!(std_rep.layer_errors[0], res_rep.layer_errors[0]);
    }

    #[test]
    fn emitted_files_are_deterministic_and_parse() {
        let data = toy_split(20, 6);
        let cfg = toy_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [a.path(), b.path()] {
            let sink = model_writer(dir).unwrap();
            let result = run_experiment_with(&cfg, &data, &data, Some(&sink)).unwrap();
            emit_results(&result, dir).unwrap();
        }
        for f in [CURVES_FILE, SUMMARY_FILE] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let curves = fs::read_to_string(a.path().join(CURVES_FILE)).unwrap();
        assert_eq!(curves.lines().count(), 1 + 2 * 2 * 3);

        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(a.path().join(SUMMARY_FILE)).unwrap()).unwrap();
        fn all_finite(v: &serde_json::Value) -> bool {
            match v {
                serde_json::Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
                serde_json::Value::Array(xs) => xs.iter().all(all_finite),
                serde_json::Value::Object(m) => m.values().all(all_finite),
                _ => true,
            }
        }
        assert!(all_finite(&json));
        assert_eq!(
            TrainConfig::from_file(&a.path().join(SUMMARY_FILE)).unwrap(),
            cfg
        );

        let model_path = a.path().join(MODELS_DIR).join(model_file_name(DbnMode::Residual, 1));
        let saved = SavedModel::load(&model_path).unwrap();
        assert_eq!(saved.dbn.mode(), DbnMode::Residual);
    }

    #[test]
    fn empty_result_writes_headers() {
        let dir = tempfile::tempdir().unwrap();
        let result = ExperimentResult::empty(TrainConfig {
            trials: 0,
            ..TrainConfig::default()
        });
        emit_results(&result, dir.path()).unwrap();
        let curves = fs::read_to_string(dir.path().join(CURVES_FILE)).unwrap();
        assert_eq!(curves, "model_tag,trial,epoch,test_accuracy\n");
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
        assert!(json["verdict"].is_null());
        assert!(dir.path().join(MODELS_DIR).is_dir());
    }

    #[test]
    fn curves_round_trip_into_reports() {
        let data = toy_split(20, 7);
        let cfg = toy_config();
        let result = run_experiment(&cfg, &data, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_results(&result, dir.path()).unwrap();
        let rows = read_curves(&dir.path().join(CURVES_FILE)).unwrap();
        assert_eq!(rows.len(), 12);
        let (std, res) = reports_from_curves(&rows).unwrap();
        for (got, want) in std.iter().zip(&result.standard).chain(res.iter().zip(&result.residual)) {
            assert_eq!(got.accuracy_series, want.accuracy_series);
            assert_eq!(got.final_accuracy, want.final_accuracy);
        }
    }

    #[test]
    fn training_failures_are_recorded() {
        let data = toy_split(20, 8);
        let cfg = TrainConfig {
            ft_lr: 1e308,
            ..toy_config()
        };
        let result = run_experiment(&cfg, &data, &data).unwrap();
        assert_eq!(result.failures.len(), 4);
        assert!(result.failures.iter().all(|f| f.error.contains("non-finite")));
        assert_eq!(result.warnings.len(), 4);
        assert!(result.verdict.is_none());
    }

    #[test]
    fn rejects_mismatched_architecture() {
        let data = toy_split(10, 9);
        let cfg = TrainConfig {
            architecture: "9:4:2".into(),
            ..toy_config()
        };
        assert!(run_experiment(&cfg, &data, &data).is_err());
    }
}
