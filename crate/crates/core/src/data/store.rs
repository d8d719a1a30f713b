//! Building a tiled, filtered, split corpus and its on-disk layout.
//!
//! A corpus directory holds:
//!
//! - `corpus.json`: the build configuration plus patch geometry;
//! - `manifest.csv`: one row per page
//!   (`id,codex,true_year,label_year,fading,partition,path`);
//! - `pages/page_NNNN.pgm`: binary PGM (P5, maxval 255) of every page;
//! - `patches.bin`: admitted patches as raw `size × size` row-major bytes,
//!   concatenated with no header or padding;
//! - `patches.idx.csv`: one row per admitted patch
//!   (`patch_id,page_id,row,col,offset,label_year,laplacian_var,dark_fraction`)
//!   where `offset` is the byte offset of the patch in `patches.bin`.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use log::info;
use serde::{Deserialize, Serialize};

use super::split::{split_documents, Partition, Split};
use super::synth::{generate_corpus, Page, SyntheticCorpusConfig};
use super::tiling::{dark_fraction, tile_page, FilterConfig, PATCH_SIZE, PATCH_STRIDE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusBuildConfig {
    pub synth: SyntheticCorpusConfig,
    pub patch_size: usize,
    pub stride: usize,
    pub filters: FilterConfig,
    pub split_fractions: [f64; 3],
}

impl Default for CorpusBuildConfig {
    fn default() -> Self {
        CorpusBuildConfig {
            synth: SyntheticCorpusConfig::default(),
            patch_size: PATCH_SIZE,
            stride: PATCH_STRIDE,
            filters: FilterConfig::default(),
            split_fractions: [0.70, 0.15, 0.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageMeta {
    pub id: u32,
    pub codex: String,
    pub true_year: f64,
    pub label_year: f64,
    pub fading: f64,
    pub partition: Partition,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredPatch {
    pub patch_id: u64,
    pub page_id: u32,
    pub row: usize,
    pub col: usize,
    pub label_year: f64,
    pub laplacian_var: f64,
    pub dark_fraction: f64,
    pub pixels: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct IndexRow {
    patch_id: u64,
    page_id: u32,
    row: usize,
    col: usize,
    offset: u64,
    label_year: f64,
    laplacian_var: f64,
    dark_fraction: f64,
}

/// Admitted patches with their page metadata and split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusBuildConfig,
    pub pages: Vec<PageMeta>,
    pub patches: Vec<StoredPatch>,
    pub split: Split,
    /// Tiles rejected by either filter.
    pub rejected: usize,
}

impl Corpus {
    pub fn page(&self, id: u32) -> Option<&PageMeta> {
        self.pages.iter().find(|p| p.id == id)
    }

    /// Patches of one partition, in patch-id order.
    pub fn partition(&self, part: Partition) -> Vec<&StoredPatch> {
        let ids = self.split.get(part);
        self.patches.iter().filter(|p| ids.binary_search(&p.page_id).is_ok()).collect()
    }

    pub fn codex_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.pages.iter().map(|p| p.codex.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// Distinct label years present, ascending.
    pub fn label_years(&self) -> Vec<f64> {
        let mut labels: Vec<f64> = self.pages.iter().map(|p| p.label_year).collect();
        labels.sort_by(f64::total_cmp);
        labels.dedup();
        labels
    }
}

pub fn page_file_name(id: u32) -> String {
    format!("pages/page_{id:04}.pgm")
}

/// Generates pages, tiles and filters them, and splits by document.
/// Returns the rendered pages too so callers can persist or reuse them.
pub fn build_corpus(config: &CorpusBuildConfig) -> Result<(Corpus, Vec<Page>)> {
    let pages = generate_corpus(&config.synth)?;
    let split = split_documents(&pages, config.split_fractions, config.synth.seed)?;
    let mut patches = Vec::new();
    let mut rejected = 0;
    for page in &pages {
        for tile in tile_page(page, config.patch_size, config.stride, &config.filters) {
            if !tile.admitted(&config.filters) {
                rejected += 1;
                continue;
            }
            patches.push(StoredPatch {
                patch_id: patches.len() as u64,
                page_id: page.id,
                row: tile.row,
                col: tile.col,
                label_year: tile.label_year,
                laplacian_var: tile.laplacian_var,
                dark_fraction: dark_fraction(&tile.pixels, config.filters.dark_threshold),
                pixels: tile.pixels,
            });
        }
    }
    let metas = pages
        .iter()
        .map(|p| PageMeta {
            id: p.id,
            codex: p.codex.clone(),
            true_year: p.true_year,
            label_year: p.label_year,
            fading: p.fading,
            partition: split.partition_of(p.id).expect("split covers every page"),
            path: page_file_name(p.id),
        })
        .collect();
    info!(
        "corpus: {} pages, {} admitted patches, {} rejected",
        pages.len(),
        patches.len(),
        rejected
    );
    Ok((
        Corpus {
            config: config.clone(),
            pages: metas,
            patches,
            split,
            rejected,
        },
        pages,
    ))
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    config: CorpusBuildConfig,
    patch_count: usize,
    rejected: usize,
}

const CORPUS_FORMAT: &str = "nigdate-corpus";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes the corpus (and, if given, page images) under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, pages: &[Page]) -> Result<()> {
    let pages_dir = dir.join("pages");
    fs::create_dir_all(&pages_dir).map_err(|e| Error::io(&pages_dir, e))?;
    for page in pages {
        let path = dir.join(page_file_name(page.id));
        write_pgm(&path, &page.pixels, page.side, page.side)?;
    }

    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_writer(create(&manifest)?);
    for m in &corpus.pages {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;

    let bin_path = dir.join("patches.bin");
    let mut bin = create(&bin_path)?;
    let idx_path = dir.join("patches.idx.csv");
    let mut idx = csv::Writer::from_writer(create(&idx_path)?);
    let mut offset = 0u64;
    for p in &corpus.patches {
        bin.write_all(&p.pixels).map_err(|e| Error::io(&bin_path, e))?;
        idx.serialize(IndexRow {
            patch_id: p.patch_id,
            page_id: p.page_id,
            row: p.row,
            col: p.col,
            offset,
            label_year: p.label_year,
            laplacian_var: p.laplacian_var,
            dark_fraction: p.dark_fraction,
        })?;
        offset += p.pixels.len() as u64;
    }
    bin.flush().map_err(|e| Error::io(&bin_path, e))?;
    idx.flush().map_err(|e| Error::io(&idx_path, e))?;

    let header = CorpusHeader {
        format: CORPUS_FORMAT.into(),
        version: 1,
        config: corpus.config.clone(),
        patch_count: corpus.patches.len(),
        rejected: corpus.rejected,
    };
    let header_path = dir.join("corpus.json");
    fs::write(&header_path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&header_path, e))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let header_path = dir.join("corpus.json");
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: CorpusHeader = serde_json::from_str(&text)?;
    if header.format != CORPUS_FORMAT {
        return Err(Error::Format {
            path: header_path,
            detail: format!("unexpected format tag {}", header.format),
        });
    }

    let manifest = dir.join("manifest.csv");
    let mut pages: Vec<PageMeta> = Vec::new();
    for row in csv::Reader::from_path(&manifest)?.deserialize() {
        pages.push(row?);
    }
    let mut split = Split::default();
    for p in &pages {
        match p.partition {
            Partition::Train => split.train.push(p.id),
            Partition::Val => split.val.push(p.id),
            Partition::Test => split.test.push(p.id),
        }
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }

    let bin_path = dir.join("patches.bin");
    let mut bytes = Vec::new();
    File::open(&bin_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&bin_path, e))?;
    let size = header.config.patch_size;
    let mut patches = Vec::with_capacity(header.patch_count);
    for row in csv::Reader::from_path(dir.join("patches.idx.csv"))?.deserialize() {
        let r: IndexRow = row?;
        let start = r.offset as usize;
        let end = start + size * size;
        if end > bytes.len() {
            return Err(Error::Format {
                path: bin_path,
                detail: format!("patch {} extends past end of file", r.patch_id),
            });
        }
        patches.push(StoredPatch {
            patch_id: r.patch_id,
            page_id: r.page_id,
            row: r.row,
            col: r.col,
            label_year: r.label_year,
            laplacian_var: r.laplacian_var,
            dark_fraction: r.dark_fraction,
            pixels: bytes[start..end].to_vec(),
        });
    }
    if patches.len() != header.patch_count {
        return Err(Error::Format {
            path: dir.join("patches.idx.csv"),
            detail: format!("expected {} patches, found {}", header.patch_count, patches.len()),
        });
    }
    Ok(Corpus {
        config: header.config,
        pages,
        patches,
        split,
        rejected: header.rejected,
    })
}

pub fn write_pgm(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "pixel buffer does not match dimensions".into(),
        });
    }
    let mut out = create(path)?;
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a grayscale PGM; returns `(pixels, width, height)`.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: PathBuf::from(path),
            detail: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w as usize, h as usize))
}
