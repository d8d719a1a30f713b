//! Sliding-window uncertainty maps and feature export.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::{EvalSet, PatchMeta};
use crate::data::{crop, tile_count, tile_offsets};
use crate::error::{Error, Result};
use crate::models::{prepare_input, Mode, Model, Outputs};
use crate::nig::decompose;

/// Per-window uncertainty on the window grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialMap {
    pub window: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub aleatoric_std_years: Vec<Vec<f64>>,
    pub epistemic_scale: Vec<Vec<f64>>,
}

pub fn spatial_uncertainty_map(
    model: &Model,
    pixels: &[u8],
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
) -> Result<SpatialMap> {
    if pixels.len() != height * width {
        return Err(Error::Contract(format!(
            "page buffer holds {} pixels, expected {height}×{width}",
            pixels.len()
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be positive".into()));
    }
    if height < window || width < window {
        return Err(Error::Contract(format!(
            "{height}×{width} page is smaller than the {window} px window"
        )));
    }
    let (rows, cols) = (tile_count(height, window, stride), tile_count(width, window, stride));
    let inputs: Vec<Vec<f64>> = tile_offsets(height, width, window, stride)
        .into_iter()
        .map(|(r, c)| prepare_input(&crop(pixels, width, r, c, window), window, model.config.input_side))
        .collect::<Result<_>>()?;
    let Outputs::Nig(ps) = model.infer(&inputs, Mode::Eval, 0)? else {
        return Err(Error::Contract("spatial maps need an evidential model".into()));
    };
    let mut aleatoric = vec![vec![0.0; cols]; rows];
    let mut epistemic = vec![vec![0.0; cols]; rows];
    for (k, p) in ps.iter().enumerate() {
        let d = decompose(p)?;
        aleatoric[k / cols][k % cols] = model.scale.std_to_years(d.aleatoric_var.sqrt());
        epistemic[k / cols][k % cols] = d.epistemic_scale;
    }
    Ok(SpatialMap {
        window,
        stride,
        rows,
        cols,
        aleatoric_std_years: aleatoric,
        epistemic_scale: epistemic,
    })
}

/// Headerless matrix, one CSV row per grid row.
pub fn write_matrix_csv(path: &Path, matrix: &[Vec<f64>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    for row in matrix {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Extractor features (eval mode) alongside patch metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub feature_dim: usize,
    pub meta: Vec<PatchMeta>,
    pub features: Vec<Vec<f64>>,
}

pub fn export_features(model: &Model, set: &EvalSet) -> Result<FeatureTable> {
    Ok(FeatureTable {
        feature_dim: model.config.feature_dim,
        meta: set.meta.clone(),
        features: model.features(&set.inputs)?,
    })
}

/// Header `patch_id,page_id,codex,label_year,true_year,f0,…`, one row per patch.
pub fn write_features_csv(path: &Path, table: &FeatureTable) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header: Vec<String> = ["patch_id", "page_id", "codex", "label_year", "true_year"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..table.feature_dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (m, f) in table.meta.iter().zip(&table.features) {
        let mut row = vec![
            m.patch_id.to_string(),
            m.page_id.to_string(),
            m.codex.clone(),
            m.label_year.to_string(),
            m.true_year.to_string(),
        ];
        row.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
