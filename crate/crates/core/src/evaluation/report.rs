//! The evaluation report, the degradation protocol and the CSV companions.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{
    bias, calibration_curve, default_confidence_grid, default_retain_fractions, error_cdf, mae, mpiw, picp,
    reliability_diagram, selective_prediction, spearman, stable_mean, uncertainty_spearman, CalibrationPoint,
    CdfPoint, ReliabilityBin, SelectiveRow, SpearmanResult, UncertaintyKind,
};
use super::pages::{aggregate_pages, summarize_pages, PageSummary};
use super::records::{patch_meta, Method, PredictionRecord};
use crate::data::{degrade, Corpus, NamedDegradation, StoredPatch};
use crate::error::{Error, Result};
use crate::models::prepare_input;
use crate::rng::{child, rng_from, substream};

pub const REPORT_SCHEMA: &str = "nigdate-eval-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportOptions {
    pub confidence: f64,
    pub confidence_grid: Vec<f64>,
    pub retain_fractions: Vec<f64>,
    pub selective_key: UncertaintyKind,
    pub reliability_bins: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            confidence: 0.9,
            confidence_grid: default_confidence_grid(),
            retain_fractions: default_retain_fractions(),
            selective_key: UncertaintyKind::Total,
            reliability_bins: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodexBreakdown {
    pub codex: String,
    pub n: usize,
    pub mae_years: f64,
    pub bias_years: f64,
    pub picp: Option<f64>,
    pub spearman_total: Option<SpearmanResult>,
    pub spearman_aleatoric: Option<SpearmanResult>,
}

/// Everything measured for one method on one record set. Fields a method
/// cannot supply are `null` (scalars) or empty (curves).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub version: u32,
    pub method: String,
    pub passes: usize,
    pub n: usize,
    pub confidence: f64,
    pub mae_years: f64,
    pub bias_years: f64,
    pub picp: Option<f64>,
    pub mpiw_years: Option<f64>,
    pub mean_total_std_years: Option<f64>,
    pub mean_aleatoric_std_years: Option<f64>,
    pub mean_epistemic_scale: Option<f64>,
    pub spearman_total: Option<SpearmanResult>,
    pub spearman_aleatoric: Option<SpearmanResult>,
    pub spearman_epistemic: Option<SpearmanResult>,
    /// Aleatoric std against the page fading level.
    pub spearman_aleatoric_fading: Option<SpearmanResult>,
    pub error_cdf: Vec<CdfPoint>,
    pub calibration_curve: Vec<CalibrationPoint>,
    pub selective: Vec<SelectiveRow>,
    pub reliability: Vec<ReliabilityBin>,
    pub per_codex: Vec<CodexBreakdown>,
    pub pages: PageSummary,
}

fn mean_of(records: &[PredictionRecord], kind: UncertaintyKind) -> Option<f64> {
    let v: Option<Vec<f64>> = records.iter().map(|r| kind.of(r)).collect();
    v.filter(|v| !v.is_empty()).map(stable_mean)
}

fn has_predictive(records: &[PredictionRecord]) -> bool {
    records.iter().all(|r| r.predictive.is_some())
}

pub fn build_report(
    method: &str,
    passes: usize,
    records: &[PredictionRecord],
    opts: &ReportOptions,
) -> Result<EvalReport> {
    let interval = has_predictive(records);
    let conf = opts.confidence;
    let ranked = records.iter().all(|r| opts.selective_key.of(r).is_some());
    let aleatoric_fading = match records.iter().map(|r| r.aleatoric_std_years).collect::<Option<Vec<f64>>>() {
        Some(a) if a.len() >= 3 => spearman(&a, &records.iter().map(|r| r.fading).collect::<Vec<_>>())?,
        _ => None,
    };
    let mut by_codex: BTreeMap<&str, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_codex.entry(&r.codex).or_default().push(r.clone());
    }
    let per_codex = by_codex
        .into_iter()
        .map(|(codex, rs)| {
            Ok(CodexBreakdown {
                codex: codex.to_string(),
                n: rs.len(),
                mae_years: mae(&rs)?,
                bias_years: bias(&rs)?,
                picp: if interval { Some(picp(&rs, conf)?) } else { None },
                spearman_total: uncertainty_spearman(&rs, UncertaintyKind::Total)?,
                spearman_aleatoric: uncertainty_spearman(&rs, UncertaintyKind::Aleatoric)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        schema: REPORT_SCHEMA.into(),
        version: REPORT_VERSION,
        method: method.into(),
        passes,
        n: records.len(),
        confidence: conf,
        mae_years: mae(records)?,
        bias_years: bias(records)?,
        picp: if interval { Some(picp(records, conf)?) } else { None },
        mpiw_years: if interval { Some(mpiw(records, conf)?) } else { None },
        mean_total_std_years: mean_of(records, UncertaintyKind::Total),
        mean_aleatoric_std_years: mean_of(records, UncertaintyKind::Aleatoric),
        mean_epistemic_scale: mean_of(records, UncertaintyKind::Epistemic),
        spearman_total: uncertainty_spearman(records, UncertaintyKind::Total)?,
        spearman_aleatoric: uncertainty_spearman(records, UncertaintyKind::Aleatoric)?,
        spearman_epistemic: uncertainty_spearman(records, UncertaintyKind::Epistemic)?,
        spearman_aleatoric_fading: aleatoric_fading,
        error_cdf: error_cdf(records),
        calibration_curve: if interval {
            calibration_curve(records, &opts.confidence_grid)?
        } else {
            Vec::new()
        },
        selective: if ranked {
            selective_prediction(records, &opts.retain_fractions, opts.selective_key)?
        } else {
            Vec::new()
        },
        reliability: if records.iter().all(|r| r.total_std_years.is_some()) {
            reliability_diagram(records, opts.reliability_bins)?
        } else {
            Vec::new()
        },
        per_codex,
        pages: summarize_pages(&aggregate_pages(records)?, conf)?,
    })
}

impl EvalReport {
    /// One row of the method comparison table. The correlation column is the
    /// aleatoric one when the method has it, else the total.
    pub fn comparison_row(&self) -> ComparisonRow {
        ComparisonRow {
            method: self.method.clone(),
            passes: self.passes,
            mae_years: self.mae_years,
            picp: self.picp,
            mpiw_years: self.mpiw_years,
            spearman_rho: self.spearman_aleatoric.or(self.spearman_total).map(|s| s.rho),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: EvalReport = serde_json::from_str(&text)?;
        if report.schema != REPORT_SCHEMA || report.version != REPORT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported report {} v{}", report.schema, report.version),
            });
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub passes: usize,
    pub mae_years: f64,
    pub picp: Option<f64>,
    pub mpiw_years: Option<f64>,
    pub spearman_rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub condition: String,
    pub mae_years: f64,
    pub mean_std_years: Option<f64>,
    pub mean_aleatoric_std_years: Option<f64>,
}

/// Degrades every patch under each suite entry and re-runs inference. Entry
/// `k` draws patch noise from `child(child(degradation stream, k), patch_id)`,
/// so all methods see the same corrupted pixels.
pub fn degradation_eval(
    method: &Method,
    corpus: &Corpus,
    patches: &[&StoredPatch],
    suite: &[NamedDegradation],
    seed: u64,
    input_side: usize,
) -> Result<Vec<DegradationRow>> {
    let size = corpus.config.patch_size;
    let meta = patches.iter().map(|p| patch_meta(corpus, p)).collect::<Result<Vec<_>>>()?;
    let stream = substream(seed, "degradation");
    suite
        .iter()
        .enumerate()
        .map(|(k, entry)| {
            let row_stream = child(stream, k as u64);
            let inputs = patches
                .iter()
                .map(|p| match &entry.spec {
                    None => prepare_input(&p.pixels, size, input_side),
                    Some(spec) => {
                        let mut rng = rng_from(child(row_stream, p.patch_id));
                        prepare_input(&degrade(&p.pixels, size, spec, &mut rng)?, size, input_side)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let records = method.predict(&meta, &inputs)?;
            Ok(DegradationRow {
                condition: entry.name.clone(),
                mae_years: mae(&records)?,
                mean_std_years: mean_of(&records, UncertaintyKind::Total),
                mean_aleatoric_std_years: mean_of(&records, UncertaintyKind::Aleatoric),
            })
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Serialize)]
struct CalibrationCsvRow<'a> {
    method: &'a str,
    nominal: f64,
    empirical: f64,
}

/// Columns `method,nominal,empirical`.
pub fn write_calibration_csv(path: &Path, curves: &[(&str, &[CalibrationPoint])]) -> Result<()> {
    write_rows(
        path,
        curves.iter().flat_map(|(m, pts)| {
            pts.iter().map(move |p| CalibrationCsvRow {
                method: m,
                nominal: p.nominal,
                empirical: p.empirical,
            })
        }),
    )
}

#[derive(Serialize)]
struct CdfCsvRow<'a> {
    method: &'a str,
    abs_error_years: f64,
    fraction: f64,
}

/// Columns `method,abs_error_years,fraction`.
pub fn write_error_cdf_csv(path: &Path, curves: &[(&str, &[CdfPoint])]) -> Result<()> {
    write_rows(
        path,
        curves.iter().flat_map(|(m, pts)| {
            pts.iter().map(move |p| CdfCsvRow {
                method: m,
                abs_error_years: p.abs_error_years,
                fraction: p.fraction,
            })
        }),
    )
}

/// Columns `fraction,kept,mae_years,mean_uncertainty`.
pub fn write_selective_csv(path: &Path, rows: &[SelectiveRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Columns `bin,count,mean_std_years,mae_years`.
pub fn write_reliability_csv(path: &Path, bins: &[ReliabilityBin]) -> Result<()> {
    write_rows(path, bins)
}

/// Columns `method,passes,mae_years,picp,mpiw_years,spearman_rho`; empty
/// cells where a method has no value.
pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Columns `condition,mae_years,mean_std_years,mean_aleatoric_std_years`.
pub fn write_degradation_csv(path: &Path, rows: &[DegradationRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Records as a JSON array.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    fs::write(path, serde_json::to_string(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::records::{PatchMeta, Predictive};

    fn records() -> Vec<PredictionRecord> {
        (0..30)
            .map(|i| {
                let meta = PatchMeta {
                    patch_id: i,
                    page_id: (i / 5) as u32,
                    codex: if i < 15 { "A" } else { "B" }.into(),
                    fading: (i % 7) as f64 / 7.0,
                    label_year: if i < 15 { 900.0 } else { 1000.0 },
                    true_year: 0.0,
                };
                let e = ((i * 37) % 23) as f64 - 11.0;
                let mut r = PredictionRecord::bare(&meta, meta.label_year + e);
                let s = 3.0 + e.abs() * 0.5 + (i % 3) as f64;
                r.aleatoric_std_years = Some(s * 0.8);
                r.total_std_years = Some(s);
                r.epistemic_scale = Some(0.1 + (i % 4) as f64);
                r.predictive = Some(Predictive::StudentT {
                    loc: r.predicted_year,
                    scale: s,
                    dof: 6.0,
                });
                r
            })
            .collect()
    }

    #[test]
    fn report_fields_are_consistent() {
        let rs = records();
        let rep = build_report("evidential", 1, &rs, &ReportOptions::default()).unwrap();
        assert_eq!(rep.n, 30);
        assert_eq!(rep.mae_years, mae(&rs).unwrap());
        assert_eq!(rep.selective.last().unwrap().mae_years, rep.mae_years);
        assert!(rep.calibration_curve.windows(2).all(|w| w[0].nominal < w[1].nominal));
        assert!(rep.error_cdf.windows(2).all(|w| w[0].abs_error_years < w[1].abs_error_years));
        assert_eq!(rep.per_codex.len(), 2);
        assert_eq!(rep.pages.pages, 6);
        assert!(rep.picp.unwrap() >= 0.0 && rep.picp.unwrap() <= 1.0);
        assert_eq!(rep.reliability.iter().map(|b| b.count).sum::<usize>(), 30);
    }

    #[test]
    fn bare_records_leave_uncertainty_empty() {
        let rs: Vec<_> = records()
            .into_iter()
            .map(|mut r| {
                r.aleatoric_std_years = None;
                r.total_std_years = None;
                r.epistemic_scale = None;
                r.predictive = None;
                r
            })
            .collect();
        let rep = build_report("classifier", 1, &rs, &ReportOptions::default()).unwrap();
        assert!(rep.picp.is_none() && rep.spearman_total.is_none());
        assert!(rep.calibration_curve.is_empty() && rep.selective.is_empty() && rep.reliability.is_empty());
        assert_eq!(rep.comparison_row().spearman_rho, None);
    }

    #[test]
    fn report_round_trips_and_checks_schema() {
        let dir = tempfile::tempdir().unwrap();
        let rep = build_report("evidential", 1, &records(), &ReportOptions::default()).unwrap();
        let path = dir.path().join("report.json");
        rep.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), rep);
        let mut other = rep.clone();
        other.version = 99;
        other.save(&path).unwrap();
        assert!(matches!(EvalReport::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_headers() {
        let dir = tempfile::tempdir().unwrap();
        let rep = build_report("evidential", 1, &records(), &ReportOptions::default()).unwrap();
        let head = |name: &str| {
            let text = fs::read_to_string(dir.path().join(name)).unwrap();
            text.lines().next().unwrap().to_string()
        };
        write_calibration_csv(&dir.path().join("c.csv"), &[("evidential", &rep.calibration_curve)]).unwrap();
        write_selective_csv(&dir.path().join("s.csv"), &rep.selective).unwrap();
        write_reliability_csv(&dir.path().join("r.csv"), &rep.reliability).unwrap();
        write_error_cdf_csv(&dir.path().join("e.csv"), &[("evidential", &rep.error_cdf)]).unwrap();
        write_comparison_csv(&dir.path().join("t.csv"), &[rep.comparison_row()]).unwrap();
        assert_eq!(head("c.csv"), "method,nominal,empirical");
        assert_eq!(head("s.csv"), "fraction,kept,mae_years,mean_uncertainty");
        assert_eq!(head("r.csv"), "bin,count,mean_std_years,mae_years");
        assert_eq!(head("e.csv"), "method,abs_error_years,fraction");
        assert_eq!(head("t.csv"), "method,passes,mae_years,picp,mpiw_years,spearman_rho");
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let rs = records();
        write_predictions(&path, &rs).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), rs);
    }
}
