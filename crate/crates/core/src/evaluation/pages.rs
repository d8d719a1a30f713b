//! Page-level predictions from patch predictions.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::metrics::{mae, picp, uncertainty_spearman, SpearmanResult, UncertaintyKind};
use super::records::{PredictionRecord, Predictive};
use crate::error::{Error, Result};

/// Page metrics computed over page-level records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageSummary {
    pub pages: usize,
    pub mae_years: f64,
    pub picp: f64,
    pub spearman: Option<SpearmanResult>,
}

/// One record per page: the mean of its patch predictions, with the sample
/// standard deviation of those predictions as uncertainty and a Gaussian
/// interval around the mean. `patch_id` carries the page id, `fading` and the
/// years come from the page's first patch.
pub fn aggregate_pages(records: &[PredictionRecord]) -> Result<Vec<PredictionRecord>> {
    let mut by_page: BTreeMap<u32, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_page.entry(r.page_id).or_default().push(r);
    }
    let mut out = Vec::with_capacity(by_page.len());
    for (page_id, patches) in by_page {
        let first = patches[0];
        if patches.iter().any(|r| r.label_year != first.label_year) {
            return Err(Error::Contract(format!("page {page_id} mixes label years")));
        }
        let n = patches.len() as f64;
        let mean = patches.iter().map(|r| r.predicted_year).sum::<f64>() / n;
        let std = if patches.len() > 1 {
            (patches.iter().map(|r| (r.predicted_year - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            warn!("page {page_id} has a single patch; its uncertainty is 0");
            0.0
        };
        out.push(PredictionRecord {
            patch_id: u64::from(page_id),
            page_id,
            codex: first.codex.clone(),
            fading: first.fading,
            label_year: first.label_year,
            true_year: first.true_year,
            predicted_year: mean,
            aleatoric_std_years: None,
            total_std_years: Some(std),
            epistemic_scale: None,
            predictive: Some(Predictive::Gaussian { mean, std }),
        });
    }
    Ok(out)
}

pub fn summarize_pages(pages: &[PredictionRecord], confidence: f64) -> Result<PageSummary> {
    Ok(PageSummary {
        pages: pages.len(),
        mae_years: mae(pages)?,
        picp: picp(pages, confidence)?,
        spearman: uncertainty_spearman(pages, UncertaintyKind::Total)?,
    })
}
