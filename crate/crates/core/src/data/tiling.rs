//! Grid tiling of pages and the blank/blur admission filters.

use log::warn;
use serde::{Deserialize, Serialize};

use super::synth::Page;

pub const PATCH_SIZE: usize = 224;
pub const PATCH_STRIDE: usize = 112;

/// A square window cut from a page.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub page_id: u32,
    /// Top-left corner in page coordinates.
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub pixels: Vec<u8>,
    pub label_year: f64,
    pub is_blank: bool,
    pub laplacian_var: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Pixels strictly below this value count as ink.
    pub dark_threshold: u8,
    /// A patch is blank when its dark fraction is strictly below this.
    pub min_dark_fraction: f64,
    /// A patch is blurry when its Laplacian variance is strictly below this.
    pub min_laplacian_var: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            dark_threshold: 128,
            min_dark_fraction: 0.03,
            min_laplacian_var: 80.0,
        }
    }
}

/// Number of grid positions along one axis.
pub fn tile_count(extent: usize, size: usize, stride: usize) -> usize {
    if extent < size || stride == 0 {
        0
    } else {
        (extent - size) / stride + 1
    }
}

/// Top-left offsets of every grid-aligned window, row-major.
pub fn tile_offsets(height: usize, width: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    let (nr, nc) = (tile_count(height, size, stride), tile_count(width, size, stride));
    (0..nr)
        .flat_map(|r| (0..nc).map(move |c| (r * stride, c * stride)))
        .collect()
}

/// Copies the `size × size` window at `(row, col)` out of a row-major image.
pub fn crop(pixels: &[u8], width: usize, row: usize, col: usize, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size);
    for r in row..row + size {
        out.extend_from_slice(&pixels[r * width + col..r * width + col + size]);
    }
    out
}

/// Cuts a square page into windows and evaluates both filters on each.
/// A page smaller than the window yields nothing.
pub fn tile_page(page: &Page, size: usize, stride: usize, filters: &FilterConfig) -> Vec<Patch> {
    if page.side < size {
        warn!("page {} ({} px) is smaller than the {size} px window", page.id, page.side);
        return Vec::new();
    }
    tile_offsets(page.side, page.side, size, stride)
        .into_iter()
        .map(|(row, col)| {
            let pixels = crop(&page.pixels, page.side, row, col, size);
            Patch {
                page_id: page.id,
                row,
                col,
                size,
                is_blank: is_blank(&pixels, filters),
                laplacian_var: laplacian_variance(&pixels, size, size),
                pixels,
                label_year: page.label_year,
            }
        })
        .collect()
}

pub fn dark_fraction(pixels: &[u8], dark_threshold: u8) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    pixels.iter().filter(|&&p| p < dark_threshold).count() as f64 / pixels.len() as f64
}

pub fn is_blank(pixels: &[u8], filters: &FilterConfig) -> bool {
    dark_fraction(pixels, filters.dark_threshold) < filters.min_dark_fraction
}

/// Variance of the 4-neighbour Laplacian response over the valid region.
pub fn laplacian_variance(pixels: &[u8], height: usize, width: usize) -> f64 {
    if height < 3 || width < 3 {
        return 0.0;
    }
    let px = |r: usize, c: usize| f64::from(pixels[r * width + c]);
    let n = ((height - 2) * (width - 2)) as f64;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for r in 1..height - 1 {
        for c in 1..width - 1 {
            let v = px(r - 1, c) + px(r + 1, c) + px(r, c - 1) + px(r, c + 1) - 4.0 * px(r, c);
            sum += v;
            sum_sq += v * v;
        }
    }
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

pub fn is_blurry(pixels: &[u8], height: usize, width: usize, filters: &FilterConfig) -> bool {
    laplacian_variance(pixels, height, width) < filters.min_laplacian_var
}

impl Patch {
    pub fn is_blurry(&self, filters: &FilterConfig) -> bool {
        self.laplacian_var < filters.min_laplacian_var
    }

    /// Passes both filters.
    pub fn admitted(&self, filters: &FilterConfig) -> bool {
        !self.is_blank && !self.is_blurry(filters)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn page(side: usize) -> Page {
        Page {
            id: 3,
            codex: "A".into(),
            side,
            pixels: (0..side * side).map(|i| (i % 251) as u8).collect(),
            true_year: 900.0,
            label_year: 900.0,
            fading: 0.0,
            mean_stroke_width: 0.0,
        }
    }

    #[test]
    fn tile_counts() {
        let f = FilterConfig::default();
        assert_eq!(tile_page(&page(448), 224, 112, &f).len(), 9);
        assert_eq!(tile_page(&page(224), 224, 112, &f).len(), 1);
        assert_eq!(tile_page(&page(200), 224, 112, &f).len(), 0);
        assert_eq!(tile_offsets(335, 224, 224, 112).len(), 1);
        assert_eq!(tile_count(1232, 224, 112), 10);
    }

    #[test]
    fn blank_filter_boundaries() {
        let f = FilterConfig::default();
        assert!(is_blank(&[255; 100], &f));
        assert!(!is_blank(&[0; 100], &f));
        let mut three = vec![255u8; 1000];
        three[..30].fill(0);
        assert!(!is_blank(&three, &f), "exactly 3% dark is not blank");
        three[29] = 255;
        assert!(is_blank(&three, &f));
    }

    #[test]
    fn laplacian_examples() {
        assert_eq!(laplacian_variance(&[77; 64], 8, 8), 0.0);
        assert!(is_blurry(&[77; 64], 8, 8, &FilterConfig::default()));
        // Checkerboard: every interior response is ±4·255, so the variance is (1020)².
        let n = 10;
        let board: Vec<u8> = (0..n * n).map(|i| if (i / n + i % n) % 2 == 0 { 0 } else { 255 }).collect();
        let v = laplacian_variance(&board, n, n);
        assert!((v - 1020.0f64.powi(2)).abs() < 1e-6, "{v}");
    }

    proptest! {
        #[test]
        fn offsets_map_back_to_page_pixels(h in 224usize..700, w in 224usize..700, stride in 1usize..300) {
            let size = 224;
            let pixels: Vec<u8> = (0..h * w).map(|i| ((i * 7919) % 256) as u8).collect();
            let offs = tile_offsets(h, w, size, stride);
            prop_assert_eq!(offs.len(), tile_count(h, size, stride) * tile_count(w, size, stride));
            for &(r, c) in &offs {
                prop_assert!(r + size <= h && c + size <= w);
                let patch = crop(&pixels, w, r, c, size);
                for &(dr, dc) in &[(0, 0), (size - 1, size - 1), (17, 200)] {
                    prop_assert_eq!(patch[dr * size + dc], pixels[(r + dr) * w + c + dc]);
                }
            }
        }

        #[test]
        fn filters_commute(pixels in prop::collection::vec(any::<u8>(), 16 * 16), frac in 0.0f64..0.5, lap in 0.0f64..20000.0) {
            let f = FilterConfig { min_dark_fraction: frac, min_laplacian_var: lap, ..Default::default() };
            let blank_first = !is_blank(&pixels, &f) && !is_blurry(&pixels, 16, 16, &f);
            let blur_first = !is_blurry(&pixels, 16, 16, &f) && !is_blank(&pixels, &f);
            prop_assert_eq!(blank_first, blur_first);
        }
    }
}
