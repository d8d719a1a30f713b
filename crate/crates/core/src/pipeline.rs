//! The six operator commands as library functions.
//!
//! Every command creates its output directory, writes the fully resolved
//! configuration to `resolved_config.json`, and keeps an `INCOMPLETE` marker
//! there until it succeeds. A directory that still holds the marker after a
//! run is partial output.
//!
//! Randomness comes from one master seed per command: the corpus seed for
//! `generate`, the training seed for `train`, and the evaluation seed (MC
//! passes and degradations, through named substreams) for the rest.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::baselines::{train_ensemble, EnsembleBundle, McDropoutConfig, DEFAULT_MEMBERS, DEFAULT_PASSES};
use crate::data::store::{page_file_name, read_pgm};
use crate::data::{build_corpus, read_corpus, standard_suite, write_corpus, Corpus, CorpusBuildConfig, NamedDegradation, Partition};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_report, degradation_eval, export_features, read_predictions, selective_prediction, spatial_uncertainty_map,
    write_calibration_csv, write_comparison_csv, write_degradation_csv, write_error_cdf_csv, write_features_csv,
    write_matrix_csv, write_predictions, write_reliability_csv, write_selective_csv, ComparisonRow, DegradationRow,
    EvalReport, EvalSet, Method, PredictionRecord, ReportOptions, UncertaintyKind,
};
use crate::models::{Model, ModelKind};
use crate::rng::substream;
use crate::training::{train, write_history_csv, HeadKind, TrainConfig, TrainData};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

/// Runs `body` inside `out` with the config echo and the incomplete marker.
pub fn run_in<C: Serialize, T>(out: &Path, config: &C, body: impl FnOnce() -> Result<T>) -> Result<T> {
    if !out.exists() {
        info!("creating output directory {}", out.display());
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(INCOMPLETE_MARKER);
    fs::write(&marker, "run did not finish\n").map_err(|e| Error::io(&marker, e))?;
    let echo = out.join(RESOLVED_CONFIG);
    fs::write(&echo, serde_json::to_string_pretty(config)? + "\n").map_err(|e| Error::io(&echo, e))?;
    let value = body()?;
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub out: PathBuf,
    pub corpus: CorpusBuildConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            out: PathBuf::from("corpus"),
            corpus: CorpusBuildConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub pages: usize,
    pub patches: usize,
    pub rejected: usize,
    pub train_pages: usize,
    pub val_pages: usize,
    pub test_pages: usize,
}

pub fn cmd_generate(config: &GenerateConfig) -> Result<GenerateSummary> {
    run_in(&config.out, config, || {
        let (corpus, pages) = build_corpus(&config.corpus)?;
        write_corpus(&config.out, &corpus, &pages)?;
        let summary = GenerateSummary {
            pages: corpus.pages.len(),
            patches: corpus.patches.len(),
            rejected: corpus.rejected,
            train_pages: corpus.split.train.len(),
            val_pages: corpus.split.val.len(),
            test_pages: corpus.split.test.len(),
        };
        info!("wrote {} pages and {} patches to {}", summary.pages, summary.patches, config.out.display());
        Ok(summary)
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    #[default]
    Evidential,
    Point,
    Classifier,
    /// Independently seeded point regressors.
    Ensemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub method: TrainMethod,
    pub members: usize,
    pub train: TrainConfig,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("model"),
            method: TrainMethod::default(),
            members: DEFAULT_MEMBERS,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Checkpoint, or ensemble manifest.
    pub artifact: PathBuf,
    pub best_epochs: Vec<Option<usize>>,
    pub best_val_mae_years: Vec<f64>,
}

pub fn cmd_train(config: &TrainRunConfig) -> Result<TrainSummary> {
    run_in(&config.out, config, || {
        let corpus = read_corpus(&config.corpus)?;
        let data = TrainData::from_corpus(&corpus, config.train.extractor.input_side)?;
        let best_mae = |h: &[crate::training::EpochRecord], best: Option<usize>| {
            best.and_then(|e| h.iter().find(|r| r.epoch == e)).map_or(f64::NAN, |r| r.val_mae_years)
        };
        let head = match config.method {
            TrainMethod::Ensemble => {
                let (bundle, outcomes) = train_ensemble(&data, &config.train, config.members)?;
                let epochs: Vec<usize> = outcomes.iter().map(|o| o.best_epoch.unwrap_or(0)).collect();
                let artifact = bundle.save(&config.out, &epochs)?;
                for (i, o) in outcomes.iter().enumerate() {
                    write_history_csv(&config.out.join(format!("history_member_{i}.csv")), &o.history)?;
                }
                return Ok(TrainSummary {
                    artifact,
                    best_epochs: outcomes.iter().map(|o| o.best_epoch).collect(),
                    best_val_mae_years: outcomes.iter().map(|o| best_mae(&o.history, o.best_epoch)).collect(),
                });
            }
            TrainMethod::Evidential => HeadKind::Evidential,
            TrainMethod::Point => HeadKind::Point,
            TrainMethod::Classifier => HeadKind::Classifier,
        };
        let cfg = TrainConfig {
            model_kind: head,
            ..config.train.clone()
        };
        let outcome = train(&data, &cfg)?;
        let artifact = config.out.join(CHECKPOINT_FILE);
        outcome.model.save(&artifact, cfg.seed, outcome.best_epoch.unwrap_or(0))?;
        write_history_csv(&config.out.join("history.csv"), &outcome.history)?;
        Ok(TrainSummary {
            artifact,
            best_epochs: vec![outcome.best_epoch],
            best_val_mae_years: vec![best_mae(&outcome.history, outcome.best_epoch)],
        })
    })
}

/// A checkpoint or an ensemble, as found on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Loaded {
    Single(Model),
    Ensemble(EnsembleBundle),
}

impl Loaded {
    /// Reads a checkpoint file, an ensemble manifest, or a directory holding
    /// either.
    pub fn from_path(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            let manifest = path.join(ENSEMBLE_MANIFEST);
            if manifest.exists() {
                manifest
            } else {
                path.join(CHECKPOINT_FILE)
            }
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.get("format").and_then(|f| f.as_str()) == Some("nigdate-ensemble") {
            Ok(Loaded::Ensemble(EnsembleBundle::load(&file)?))
        } else {
            Ok(Loaded::Single(Model::load(&file)?.0))
        }
    }

    pub fn input_side(&self) -> usize {
        match self {
            Loaded::Single(m) => m.config.input_side,
            Loaded::Ensemble(b) => b.members[0].config.input_side,
        }
    }

    /// The evaluation method this artifact stands for. `mc_dropout` turns a
    /// single regressor into an MC-Dropout predictor.
    pub fn method(&self, mc_dropout: Option<McDropoutConfig>, seed: u64) -> Result<Method<'_>> {
        Ok(match (self, mc_dropout) {
            (Loaded::Single(model), Some(config)) => Method::McDropout {
                model,
                config,
                seed: substream(seed, "mc_dropout"),
            },
            (Loaded::Ensemble(_), Some(_)) => {
                return Err(Error::Config("MC-Dropout applies to a single checkpoint, not an ensemble".into()))
            }
            (Loaded::Ensemble(b), None) => Method::Ensemble(b),
            (Loaded::Single(m), None) => match m.kind {
                ModelKind::Evidential => Method::Evidential(m),
                ModelKind::Point => Method::Point(m),
                ModelKind::Classifier { .. } => Method::Classifier(m),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub corpus: PathBuf,
    /// Checkpoint, ensemble manifest, or a training output directory.
    pub model: PathBuf,
    pub out: PathBuf,
    pub partition: Partition,
    pub seed: u64,
    /// Evaluate a single regressor as MC-Dropout.
    pub mc_dropout: bool,
    pub passes: usize,
    pub report: ReportOptions,
    pub export_features: bool,
    /// Pages to map with a sliding window (evidential models only).
    pub spatial_pages: Vec<u32>,
    pub spatial_stride: usize,
    /// Also run the degradation suite.
    pub degradations: bool,
    pub suite: Vec<NamedDegradation>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            corpus: PathBuf::from("corpus"),
            model: PathBuf::from("model"),
            out: PathBuf::from("eval"),
            partition: Partition::Test,
            seed: 0,
            mc_dropout: false,
            passes: DEFAULT_PASSES,
            report: ReportOptions::default(),
            export_features: false,
            spatial_pages: Vec::new(),
            spatial_stride: 56,
            degradations: false,
            suite: standard_suite(),
        }
    }
}

impl EvaluateConfig {
    fn mc(&self) -> Option<McDropoutConfig> {
        self.mc_dropout.then_some(McDropoutConfig { passes: self.passes })
    }
}

/// Predicts one partition and builds the report, without touching disk.
pub fn evaluate_records(
    corpus: &Corpus,
    method: &Method,
    partition: Partition,
    input_side: usize,
    options: &ReportOptions,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let set = EvalSet::from_corpus(corpus, partition, input_side)?;
    if set.is_empty() {
        return Err(Error::Config(format!("the {} partition has no patches", partition.name())));
    }
    let records = method.predict(&set.meta, &set.inputs)?;
    let report = build_report(method.name(), method.passes(), &records, options)?;
    Ok((report, records))
}

fn write_report_files(out: &Path, report: &EvalReport, records: &[PredictionRecord]) -> Result<()> {
    report.save(&out.join("report.json"))?;
    write_predictions(&out.join("predictions.json"), records)?;
    write_error_cdf_csv(&out.join("error-cdf.csv"), &[(&report.method, &report.error_cdf)])?;
    if !report.calibration_curve.is_empty() {
        write_calibration_csv(&out.join("calibration-curve.csv"), &[(&report.method, &report.calibration_curve)])?;
    }
    if !report.selective.is_empty() {
        write_selective_csv(&out.join("selective.csv"), &report.selective)?;
    }
    if !report.reliability.is_empty() {
        write_reliability_csv(&out.join("reliability.csv"), &report.reliability)?;
    }
    Ok(())
}

pub fn cmd_evaluate(config: &EvaluateConfig) -> Result<EvalReport> {
    run_in(&config.out, config, || {
        let corpus = read_corpus(&config.corpus)?;
        let loaded = Loaded::from_path(&config.model)?;
        let method = loaded.method(config.mc(), config.seed)?;
        let side = loaded.input_side();
        let (report, records) = evaluate_records(&corpus, &method, config.partition, side, &config.report)?;
        write_report_files(&config.out, &report, &records)?;
        if config.export_features {
            let Loaded::Single(model) = &loaded else {
                return Err(Error::Config("feature export needs a single checkpoint".into()));
            };
            let set = EvalSet::from_corpus(&corpus, config.partition, side)?;
            write_features_csv(&config.out.join("features.csv"), &export_features(model, &set)?)?;
        }
        for &page in &config.spatial_pages {
            let Loaded::Single(model) = &loaded else {
                return Err(Error::Config("spatial maps need a single evidential checkpoint".into()));
            };
            let path = config.corpus.join(page_file_name(page));
            let (pixels, width, height) = read_pgm(&path)?;
            let window = corpus.config.patch_size;
            let map = spatial_uncertainty_map(model, &pixels, height, width, window, config.spatial_stride)?;
            write_matrix_csv(&config.out.join(format!("spatial-aleatoric-page{page}.csv")), &map.aleatoric_std_years)?;
            write_matrix_csv(&config.out.join(format!("spatial-epistemic-page{page}.csv")), &map.epistemic_scale)?;
        }
        if config.degradations {
            let rows = run_degradations(&corpus, &method, config.partition, &config.suite, config.seed, side)?;
            write_degradation_csv(&config.out.join("degradation.csv"), &rows)?;
        }
        info!(
            "{}: MAE {:.2} years over {} patches",
            report.method, report.mae_years, report.n
        );
        Ok(report)
    })
}

fn run_degradations(
    corpus: &Corpus,
    method: &Method,
    partition: Partition,
    suite: &[NamedDegradation],
    seed: u64,
    side: usize,
) -> Result<Vec<DegradationRow>> {
    let patches = corpus.partition(partition);
    degradation_eval(method, corpus, &patches, suite, seed, side)
}

pub fn cmd_degrade_eval(config: &EvaluateConfig) -> Result<Vec<DegradationRow>> {
    run_in(&config.out, config, || {
        let corpus = read_corpus(&config.corpus)?;
        let loaded = Loaded::from_path(&config.model)?;
        let method = loaded.method(config.mc(), config.seed)?;
        let rows = run_degradations(&corpus, &method, config.partition, &config.suite, config.seed, loaded.input_side())?;
        write_degradation_csv(&config.out.join("degradation.csv"), &rows)?;
        fs::write(
            config.out.join("degradation.json"),
            serde_json::to_string_pretty(&rows)? + "\n",
        )
        .map_err(|e| Error::io(&config.out, e))?;
        Ok(rows)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectiveConfig {
    /// `predictions.json` written by `evaluate`.
    pub predictions: PathBuf,
    pub out: PathBuf,
    pub fractions: Vec<f64>,
    pub key: UncertaintyKind,
}

impl Default for SelectiveConfig {
    fn default() -> Self {
        SelectiveConfig {
            predictions: PathBuf::from("eval/predictions.json"),
            out: PathBuf::from("selective"),
            fractions: crate::evaluation::default_retain_fractions(),
            key: UncertaintyKind::Total,
        }
    }
}

pub fn cmd_selective(config: &SelectiveConfig) -> Result<Vec<crate::evaluation::SelectiveRow>> {
    run_in(&config.out, config, || {
        let records = read_predictions(&config.predictions)?;
        let rows = selective_prediction(&records, &config.fractions, config.key)?;
        write_selective_csv(&config.out.join("selective.csv"), &rows)?;
        Ok(rows)
    })
}

/// Inputs of the method comparison. Paths default to the layout produced by
/// training each method into `<models>/<method>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub corpus: PathBuf,
    pub models: PathBuf,
    pub out: PathBuf,
    pub partition: Partition,
    pub seed: u64,
    pub passes: usize,
    pub report: ReportOptions,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            corpus: PathBuf::from("corpus"),
            models: PathBuf::from("models"),
            out: PathBuf::from("report"),
            partition: Partition::Test,
            seed: 0,
            passes: DEFAULT_PASSES,
            report: ReportOptions::default(),
        }
    }
}

/// Row order of the comparison table.
pub const COMPARISON_ORDER: [&str; 5] = ["classifier", "point", "mc_dropout", "ensemble", "evidential"];

/// Evaluates classifier, point regressor, MC-Dropout (over the point
/// regressor), ensemble and evidential model on one partition.
pub fn cmd_report(config: &ReportConfig) -> Result<Vec<ComparisonRow>> {
    run_in(&config.out, config, || {
        let corpus = read_corpus(&config.corpus)?;
        let load = |name: &str| Loaded::from_path(&config.models.join(name));
        let classifier = load("classifier")?;
        let point = load("point")?;
        let ensemble = load("ensemble")?;
        let evidential = load("evidential")?;
        let mc = McDropoutConfig { passes: config.passes };
        let methods = [
            (&classifier, None),
            (&point, None),
            (&point, Some(mc)),
            (&ensemble, None),
            (&evidential, None),
        ];
        let mut reports = Vec::new();
        for (loaded, mc) in methods {
            let method = loaded.method(mc, config.seed)?;
            let (report, records) =
                evaluate_records(&corpus, &method, config.partition, loaded.input_side(), &config.report)?;
            let dir = config.out.join(report.method.as_str());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_report_files(&dir, &report, &records)?;
            reports.push(report);
        }
        debug_assert!(reports.iter().map(|r| r.method.as_str()).eq(COMPARISON_ORDER));
        let rows: Vec<ComparisonRow> = reports.iter().map(EvalReport::comparison_row).collect();
        write_comparison_csv(&config.out.join("comparison.csv"), &rows)?;
        let curves: Vec<(&str, &[_])> = reports
            .iter()
            .filter(|r| !r.calibration_curve.is_empty())
            .map(|r| (r.method.as_str(), r.calibration_curve.as_slice()))
            .collect();
        write_calibration_csv(&config.out.join("calibration-curve.csv"), &curves)?;
        let cdfs: Vec<(&str, &[_])> = reports.iter().map(|r| (r.method.as_str(), r.error_cdf.as_slice())).collect();
        write_error_cdf_csv(&config.out.join("error-cdf.csv"), &cdfs)?;
        Ok(rows)
    })
}
