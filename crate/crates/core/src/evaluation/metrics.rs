//! Scalar metrics and curves over prediction records.
//!
//! Means are taken over sorted values, so a metric depends only on the
//! multiset of its inputs and not on record order.

use serde::{Deserialize, Serialize};

use super::records::PredictionRecord;
use crate::error::{Error, Result};
use crate::special::student_t_cdf;

/// Order-independent mean of a nonempty list.
pub(crate) fn stable_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.iter().sum::<f64>() / n
}

fn nonempty(records: &[PredictionRecord], op: &str) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract(format!("{op} of an empty record set")));
    }
    Ok(())
}

pub fn mae(records: &[PredictionRecord]) -> Result<f64> {
    nonempty(records, "mae")?;
    Ok(stable_mean(records.iter().map(|r| r.abs_error()).collect()))
}

/// Mean signed error (prediction minus label).
pub fn bias(records: &[PredictionRecord]) -> Result<f64> {
    nonempty(records, "bias")?;
    Ok(stable_mean(records.iter().map(|r| r.error()).collect()))
}

fn intervals(records: &[PredictionRecord], confidence: f64) -> Result<Vec<(f64, f64)>> {
    records
        .iter()
        .map(|r| {
            r.interval(confidence)?.ok_or_else(|| {
                Error::Contract(format!("patch {} has no predictive distribution", r.patch_id))
            })
        })
        .collect()
}

/// Fraction of labels inside closed intervals at `confidence`.
pub fn picp(records: &[PredictionRecord], confidence: f64) -> Result<f64> {
    nonempty(records, "picp")?;
    let ivs = intervals(records, confidence)?;
    Ok(coverage(records.iter().map(|r| r.label_year).zip(ivs)))
}

pub(crate) fn coverage(pairs: impl Iterator<Item = (f64, (f64, f64))>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (y, (lo, hi)) in pairs {
        n += 1;
        if lo <= y && y <= hi {
            hit += 1;
        }
    }
    hit as f64 / n as f64
}

/// Mean interval width at `confidence`, years.
pub fn mpiw(records: &[PredictionRecord], confidence: f64) -> Result<f64> {
    nonempty(records, "mpiw")?;
    let ivs = intervals(records, confidence)?;
    Ok(stable_mean(ivs.iter().map(|(lo, hi)| hi - lo).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Two-sided, from the t approximation with n − 2 degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation. `Ok(None)` when either input is constant.
pub fn spearman(u: &[f64], e: &[f64]) -> Result<Option<SpearmanResult>> {
    if u.len() != e.len() {
        return Err(Error::Contract(format!("spearman on {} vs {} values", u.len(), e.len())));
    }
    if u.len() < 3 {
        return Err(Error::Contract(format!("spearman needs at least 3 pairs, got {}", u.len())));
    }
    if u.iter().chain(e).any(|v| !v.is_finite()) {
        return Err(Error::Contract("spearman on non-finite values".into()));
    }
    let (ru, re) = (average_ranks(u), average_ranks(e));
    let n = u.len() as f64;
    let (mu, me) = (ru.iter().sum::<f64>() / n, re.iter().sum::<f64>() / n);
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in ru.iter().zip(&re) {
        suv += (a - mu) * (b - me);
        suu += (a - mu) * (a - mu);
        svv += (b - me) * (b - me);
    }
    if suu == 0.0 || svv == 0.0 {
        return Ok(None);
    }
    let rho = (suv / (suu * svv).sqrt()).clamp(-1.0, 1.0);
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
        (2.0 * (1.0 - student_t_cdf(t.abs(), n - 2.0))).clamp(0.0, 1.0)
    };
    Ok(Some(SpearmanResult {
        rho,
        p_value,
        n: u.len(),
    }))
}

/// Which uncertainty a ranking or correlation uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    #[default]
    Total,
    Aleatoric,
    Epistemic,
}

impl UncertaintyKind {
    pub fn of(&self, r: &PredictionRecord) -> Option<f64> {
        match self {
            UncertaintyKind::Total => r.total_std_years,
            UncertaintyKind::Aleatoric => r.aleatoric_std_years,
            UncertaintyKind::Epistemic => r.epistemic_scale,
        }
    }
}

/// Spearman between one uncertainty and |error|. `Ok(None)` when the records
/// lack that uncertainty or it is constant.
pub fn uncertainty_spearman(records: &[PredictionRecord], kind: UncertaintyKind) -> Result<Option<SpearmanResult>> {
    let u: Option<Vec<f64>> = records.iter().map(|r| kind.of(r)).collect();
    match u {
        Some(u) if u.len() >= 3 => {
            let e: Vec<f64> = records.iter().map(|r| r.abs_error()).collect();
            spearman(&u, &e)
        }
        _ => Ok(None),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub nominal: f64,
    pub empirical: f64,
}

/// 0.05, 0.10, …, 0.95.
pub fn default_confidence_grid() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

pub fn calibration_curve(records: &[PredictionRecord], grid: &[f64]) -> Result<Vec<CalibrationPoint>> {
    nonempty(records, "calibration_curve")?;
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.iter()
        .map(|&c| {
            Ok(CalibrationPoint {
                nominal: c,
                empirical: picp(records, c)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveRow {
    pub fraction: f64,
    pub kept: usize,
    pub mae_years: f64,
    pub mean_uncertainty: f64,
}

pub fn default_retain_fractions() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
}

/// Number of records kept at `fraction`: ⌈fraction·n⌉, at least one.
pub fn kept_count(fraction: f64, n: usize) -> usize {
    // The epsilon absorbs products such as 0.3 · 10 = 3.0000000000000004.
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Keeps the most certain prefix at each fraction. Records are ranked by
/// ascending uncertainty, ties by patch id.
pub fn selective_prediction(
    records: &[PredictionRecord],
    fractions: &[f64],
    key: UncertaintyKind,
) -> Result<Vec<SelectiveRow>> {
    nonempty(records, "selective_prediction")?;
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("retain fraction {f} is outside (0, 1]")));
    }
    let mut ranked: Vec<(f64, &PredictionRecord)> = records
        .iter()
        .map(|r| {
            key.of(r)
                .map(|u| (u, r))
                .ok_or_else(|| Error::Contract(format!("patch {} has no {key:?} uncertainty", r.patch_id)))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.patch_id.cmp(&b.1.patch_id)));
    let mut fractions = fractions.to_vec();
    fractions.sort_by(f64::total_cmp);
    Ok(fractions
        .iter()
        .map(|&fraction| {
            let kept = kept_count(fraction, ranked.len());
            let prefix = &ranked[..kept];
            SelectiveRow {
                fraction,
                kept,
                mae_years: stable_mean(prefix.iter().map(|(_, r)| r.abs_error()).collect()),
                mean_uncertainty: stable_mean(prefix.iter().map(|(u, _)| *u).collect()),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin: usize,
    pub count: usize,
    pub mean_std_years: f64,
    pub mae_years: f64,
}

/// Equal-count bins over ascending total std. A run of equal std values
/// that straddles a boundary stays in the lower bin, so later bins may be
/// short or empty; only occupied bins are returned.
pub fn reliability_diagram(records: &[PredictionRecord], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    if n_bins == 0 {
        return Err(Error::Config("reliability diagram needs at least one bin".into()));
    }
    nonempty(records, "reliability_diagram")?;
    let mut ranked: Vec<(f64, f64, u64)> = records
        .iter()
        .map(|r| {
            r.total_std_years
                .map(|u| (u, r.abs_error(), r.patch_id))
                .ok_or_else(|| Error::Contract(format!("patch {} has no total uncertainty", r.patch_id)))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
    let n = ranked.len();
    let mut bins = Vec::new();
    let mut start = 0;
    for b in 0..n_bins {
        let mut end = ((b + 1) * n).div_ceil(n_bins).max(start);
        while end > start && end < n && ranked[end].0 == ranked[end - 1].0 {
            end += 1;
        }
        if end > start {
            let slice = &ranked[start..end];
            bins.push(ReliabilityBin {
                bin: b,
                count: slice.len(),
                mean_std_years: stable_mean(slice.iter().map(|t| t.0).collect()),
                mae_years: stable_mean(slice.iter().map(|t| t.1).collect()),
            });
        }
        start = end;
    }
    Ok(bins)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub abs_error_years: f64,
    pub fraction: f64,
}

/// Empirical CDF of |error|: one point per distinct error value.
pub fn error_cdf(records: &[PredictionRecord]) -> Vec<CdfPoint> {
    let mut errs: Vec<f64> = records.iter().map(|r| r.abs_error()).collect();
    errs.sort_by(f64::total_cmp);
    let n = errs.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &e) in errs.iter().enumerate() {
        let point = CdfPoint {
            abs_error_years: e,
            fraction: (i + 1) as f64 / n,
        };
        match out.last_mut() {
            Some(last) if last.abs_error_years == e => *last = point,
            _ => out.push(point),
        }
    }
    out
}
