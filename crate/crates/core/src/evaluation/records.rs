//! Per-patch prediction records and the methods that produce them.

use serde::{Deserialize, Serialize};

use crate::baselines::{ensemble_predict, gaussian_half_width, mc_dropout_predict, EnsembleBundle, McDropoutConfig};
use crate::data::{Corpus, Partition, StoredPatch};
use crate::error::{Error, Result};
use crate::models::{prepare_input, Mode, Model, ModelKind, Outputs};
use crate::nig::decompose;
use crate::special::student_t_quantile;

/// Predictive distribution over the year, in years CE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Predictive {
    StudentT { loc: f64, scale: f64, dof: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl Predictive {
    /// Central interval at `confidence`.
    pub fn interval(&self, confidence: f64) -> Result<(f64, f64)> {
        match *self {
            Predictive::StudentT { loc, scale, dof } => {
                if !(0.0..1.0).contains(&confidence) {
                    return Err(Error::domain(
                        "interval",
                        format!("confidence must lie in [0, 1), got {confidence}"),
                    ));
                }
                let half = if confidence == 0.0 {
                    0.0
                } else {
                    student_t_quantile(dof, 0.5 + confidence / 2.0)? * scale
                };
                Ok((loc - half, loc + half))
            }
            Predictive::Gaussian { mean, std } => {
                let half = gaussian_half_width(std, confidence)?;
                Ok((mean - half, mean + half))
            }
        }
    }
}

/// Where a patch came from and what it should be dated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub patch_id: u64,
    pub page_id: u32,
    pub codex: String,
    pub fading: f64,
    /// Supervision target; every error is measured against it.
    pub label_year: f64,
    /// Latent generator year, for reference only.
    pub true_year: f64,
}

/// One prediction. Uncertainty fields are absent for methods that do not
/// produce them (point regressor, classifier) or do not split them
/// (sampling baselines carry only a total).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub patch_id: u64,
    pub page_id: u32,
    pub codex: String,
    pub fading: f64,
    pub label_year: f64,
    pub true_year: f64,
    pub predicted_year: f64,
    pub aleatoric_std_years: Option<f64>,
    pub total_std_years: Option<f64>,
    pub epistemic_scale: Option<f64>,
    pub predictive: Option<Predictive>,
}

impl PredictionRecord {
    pub fn bare(meta: &PatchMeta, predicted_year: f64) -> Self {
        PredictionRecord {
            patch_id: meta.patch_id,
            page_id: meta.page_id,
            codex: meta.codex.clone(),
            fading: meta.fading,
            label_year: meta.label_year,
            true_year: meta.true_year,
            predicted_year,
            aleatoric_std_years: None,
            total_std_years: None,
            epistemic_scale: None,
            predictive: None,
        }
    }

    pub fn error(&self) -> f64 {
        self.predicted_year - self.label_year
    }

    pub fn abs_error(&self) -> f64 {
        self.error().abs()
    }

    pub fn interval(&self, confidence: f64) -> Result<Option<(f64, f64)>> {
        self.predictive.map(|p| p.interval(confidence)).transpose()
    }
}

/// Prepared model inputs with their metadata, in patch-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub meta: Vec<PatchMeta>,
    pub inputs: Vec<Vec<f64>>,
}

impl EvalSet {
    pub fn from_patches(corpus: &Corpus, patches: &[&StoredPatch], input_side: usize) -> Result<Self> {
        let size = corpus.config.patch_size;
        let mut meta = Vec::with_capacity(patches.len());
        let mut inputs = Vec::with_capacity(patches.len());
        for p in patches {
            meta.push(patch_meta(corpus, p)?);
            inputs.push(prepare_input(&p.pixels, size, input_side)?);
        }
        Ok(EvalSet { meta, inputs })
    }

    pub fn from_corpus(corpus: &Corpus, part: Partition, input_side: usize) -> Result<Self> {
        EvalSet::from_patches(corpus, &corpus.partition(part), input_side)
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

pub fn patch_meta(corpus: &Corpus, p: &StoredPatch) -> Result<PatchMeta> {
    let page = corpus
        .page(p.page_id)
        .ok_or_else(|| Error::Contract(format!("patch {} refers to unknown page {}", p.patch_id, p.page_id)))?;
    Ok(PatchMeta {
        patch_id: p.patch_id,
        page_id: p.page_id,
        codex: page.codex.clone(),
        fading: page.fading,
        label_year: p.label_year,
        true_year: page.true_year,
    })
}

/// A way of turning prepared inputs into prediction records.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Evidential(&'a Model),
    Point(&'a Model),
    Classifier(&'a Model),
    McDropout {
        model: &'a Model,
        config: McDropoutConfig,
        seed: u64,
    },
    Ensemble(&'a EnsembleBundle),
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Evidential(_) => "evidential",
            Method::Point(_) => "point",
            Method::Classifier(_) => "classifier",
            Method::McDropout { .. } => "mc_dropout",
            Method::Ensemble(_) => "ensemble",
        }
    }

    /// Forward passes needed per input.
    pub fn passes(&self) -> usize {
        match self {
            Method::McDropout { config, .. } => config.passes,
            Method::Ensemble(b) => b.len(),
            _ => 1,
        }
    }

    /// Records for `inputs`, which must align with `meta`.
    pub fn predict(&self, meta: &[PatchMeta], inputs: &[Vec<f64>]) -> Result<Vec<PredictionRecord>> {
        if meta.len() != inputs.len() {
            return Err(Error::Contract(format!(
                "{} metadata rows for {} inputs",
                meta.len(),
                inputs.len()
            )));
        }
        match *self {
            Method::Evidential(model) => {
                let Outputs::Nig(ps) = model.infer(inputs, Mode::Eval, 0)? else {
                    return Err(wrong_head("evidential", model));
                };
                let s = model.scale;
                meta.iter()
                    .zip(ps)
                    .map(|(m, p)| {
                        let d = decompose(&p)?;
                        let mut r = PredictionRecord::bare(m, s.denormalize(p.gamma));
                        r.aleatoric_std_years = Some(s.std_to_years(d.aleatoric_var.sqrt()));
                        r.total_std_years = Some(s.std_to_years(d.total_var.sqrt()));
                        r.epistemic_scale = Some(d.epistemic_scale);
                        r.predictive = Some(Predictive::StudentT {
                            loc: r.predicted_year,
                            scale: s.std_to_years(p.predictive_scale()),
                            dof: p.predictive_dof(),
                        });
                        Ok(r)
                    })
                    .collect()
            }
            Method::Point(model) => {
                if model.kind != ModelKind::Point {
                    return Err(wrong_head("point", model));
                }
                let ys = model.predict_years(inputs, Mode::Eval, 0)?;
                Ok(meta.iter().zip(ys).map(|(m, y)| PredictionRecord::bare(m, y)).collect())
            }
            Method::Classifier(model) => {
                if !matches!(model.kind, ModelKind::Classifier { .. }) {
                    return Err(wrong_head("classifier", model));
                }
                let ys = model.predict_years(inputs, Mode::Eval, 0)?;
                Ok(meta.iter().zip(ys).map(|(m, y)| PredictionRecord::bare(m, y)).collect())
            }
            Method::McDropout { model, config, seed } => {
                let preds = mc_dropout_predict(model, inputs, &config, seed)?;
                Ok(gaussian_records(meta, &preds, model))
            }
            Method::Ensemble(bundle) => {
                let preds = ensemble_predict(bundle, inputs)?;
                Ok(gaussian_records(meta, &preds, &bundle.members[0]))
            }
        }
    }
}

fn wrong_head(expected: &str, model: &Model) -> Error {
    Error::Contract(format!("{expected} method given a {} model", model.kind.name()))
}

fn gaussian_records(
    meta: &[PatchMeta],
    preds: &[crate::baselines::GaussianPrediction],
    model: &Model,
) -> Vec<PredictionRecord> {
    let s = model.scale;
    meta.iter()
        .zip(preds)
        .map(|(m, p)| {
            let mut r = PredictionRecord::bare(m, s.denormalize(p.mean));
            let std = s.std_to_years(p.std());
            r.total_std_years = Some(std);
            r.predictive = Some(Predictive::Gaussian {
                mean: r.predicted_year,
                std,
            });
            r
        })
        .collect()
}
