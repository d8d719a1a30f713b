//! Synthetic manuscript corpus: page generation, tiling, quality filters,
//! document-level splitting, degradations and the on-disk format.

pub mod degrade;
pub mod split;
pub mod store;
pub mod synth;
pub mod tiling;

pub use degrade::{degrade, standard_suite, DegradationSpec, NamedDegradation};
pub use split::{split_documents, Partition, Split};
pub use store::{build_corpus, read_corpus, write_corpus, Corpus, CorpusBuildConfig, PageMeta, StoredPatch};
pub use synth::{
    default_codices, generate_corpus, render_page, CodexSpec, FadingField, LabelRule, Page, Quadrant, StrokeStyle,
    SyntheticCorpusConfig,
};
pub use tiling::{crop, is_blank, is_blurry, laplacian_variance, tile_count, tile_offsets, tile_page, FilterConfig, Patch};
