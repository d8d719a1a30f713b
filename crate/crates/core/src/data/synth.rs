//! Procedural manuscript pages.
//!
//! Pages are ruled lines of pseudo-glyphs drawn with a round nib. Each codex
//! interpolates its stroke style linearly between two anchor styles across
//! its year range, so script features drift with date. A per-page fading
//! level attenuates ink, drops strokes, lays down stains, mottles the
//! parchment and adds pixel noise; it is the latent control behind
//! aleatoric difficulty.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child, rng_from, substream};

/// Nib pressure along a stroke, `s ∈ [0, 1]`.
fn pressure_profile(s: f64) -> f64 {
    0.8 + 0.4 * (std::f64::consts::PI * s).sin()
}

/// Mean of [`pressure_profile`] over a stroke.
const PROFILE_MEAN: f64 = 0.8 + 0.8 / std::f64::consts::PI;

const DROPOUT_PER_FADE: f64 = 0.5;
const ATTENUATION_PER_FADE: f64 = 0.7;
const STAIN_PER_FADE: f64 = 70.0;
const BASE_NOISE: f64 = 3.0;
const NOISE_PER_FADE: f64 = 5.0;
const MOTTLE_PER_FADE: f64 = 30.0;
const MOTTLE_CELL: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrokeStyle {
    /// Nib diameter in pixels.
    pub stroke_width: f64,
    /// Horizontal shear per unit height.
    pub slant: f64,
    /// Mean glyph advance in pixels.
    pub spacing: f64,
    /// Bowl roundness; 0 gives angular letter forms.
    pub curvature: f64,
    pub x_height: f64,
    pub line_spacing: f64,
    /// Probability a minim gets a foot serif.
    pub serif_rate: f64,
    /// Gray level of fresh ink.
    pub ink_tone: f64,
}

impl StrokeStyle {
    pub fn lerp(&self, other: &StrokeStyle, t: f64) -> StrokeStyle {
        let l = |a: f64, b: f64| a + (b - a) * t;
        StrokeStyle {
            stroke_width: l(self.stroke_width, other.stroke_width),
            slant: l(self.slant, other.slant),
            spacing: l(self.spacing, other.spacing),
            curvature: l(self.curvature, other.curvature),
            x_height: l(self.x_height, other.x_height),
            line_spacing: l(self.line_spacing, other.line_spacing),
            serif_rate: l(self.serif_rate, other.serif_rate),
            ink_tone: l(self.ink_tone, other.ink_tone),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodexSpec {
    pub name: String,
    /// Half-open `[first, end)` range of true years.
    pub years: (f64, f64),
    /// Style at the first year.
    pub early: StrokeStyle,
    /// Style at the end of the range.
    pub late: StrokeStyle,
}

impl CodexSpec {
    pub fn style_at(&self, year: f64) -> StrokeStyle {
        let t = ((year - self.years.0) / (self.years.1 - self.years.0)).clamp(0.0, 1.0);
        self.early.lerp(&self.late, t)
    }
}

/// Maps a true year to its supervision label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Bucket `[c − 50, c + 50)` is labelled `c` for every multiple of 100.
    #[default]
    NearestCentury,
    /// Bucket `[c, c + 100)` is labelled `c + 50`.
    CenturyFloorMidpoint,
}

impl LabelRule {
    pub fn label(&self, year: f64) -> f64 {
        match self {
            LabelRule::NearestCentury => ((year + 50.0) / 100.0).floor() * 100.0,
            LabelRule::CenturyFloorMidpoint => (year / 100.0).floor() * 100.0 + 50.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub pages_per_codex: usize,
    pub page_side: usize,
    pub codices: Vec<CodexSpec>,
    /// Fading level per page is uniform on this range.
    pub fading: (f64, f64),
    pub label_rule: LabelRule,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            pages_per_codex: 20,
            page_side: 1232,
            codices: default_codices(),
            fading: (0.0, 1.0),
            label_rule: LabelRule::NearestCentury,
            seed: 0,
        }
    }
}

/// Two related book hands followed by a distinct angular one.
pub fn default_codices() -> Vec<CodexSpec> {
    let caroline_early = StrokeStyle {
        stroke_width: 3.0,
        slant: 0.22,
        spacing: 24.0,
        curvature: 0.75,
        x_height: 30.0,
        line_spacing: 64.0,
        serif_rate: 0.05,
        ink_tone: 62.0,
    };
    let caroline_late = StrokeStyle {
        stroke_width: 3.8,
        slant: 0.14,
        spacing: 21.0,
        curvature: 0.6,
        x_height: 27.0,
        line_spacing: 58.0,
        serif_rate: 0.15,
        ink_tone: 56.0,
    };
    let b_early = StrokeStyle {
        stroke_width: 4.4,
        slant: 0.08,
        spacing: 19.0,
        curvature: 0.5,
        x_height: 25.0,
        line_spacing: 50.0,
        serif_rate: 0.3,
        ink_tone: 40.0,
    };
    let b_late = StrokeStyle {
        stroke_width: 4.9,
        slant: 0.04,
        spacing: 18.0,
        curvature: 0.42,
        x_height: 24.0,
        line_spacing: 48.0,
        serif_rate: 0.4,
        ink_tone: 36.0,
    };
    let gothic_early = StrokeStyle {
        stroke_width: 6.0,
        slant: 0.0,
        spacing: 14.0,
        curvature: 0.1,
        x_height: 30.0,
        line_spacing: 52.0,
        serif_rate: 0.9,
        ink_tone: 16.0,
    };
    let gothic_late = StrokeStyle {
        stroke_width: 6.8,
        slant: -0.02,
        spacing: 13.0,
        curvature: 0.05,
        x_height: 32.0,
        line_spacing: 52.0,
        serif_rate: 1.0,
        ink_tone: 14.0,
    };
    vec![
        CodexSpec {
            name: "A".into(),
            years: (850.0, 950.0),
            early: caroline_early,
            late: caroline_late,
        },
        CodexSpec {
            name: "B".into(),
            years: (960.0, 1020.0),
            early: b_early,
            late: b_late,
        },
        CodexSpec {
            name: "C".into(),
            years: (1275.0, 1325.0),
            early: gothic_early,
            late: gothic_late,
        },
    ]
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codices.is_empty() {
            return Err(Error::Config("corpus needs at least one codex".into()));
        }
        if self.page_side == 0 {
            return Err(Error::Config("page side must be positive".into()));
        }
        let (lo, hi) = self.fading;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("fading range ({lo}, {hi}) must lie in [0, 1]")));
        }
        for c in &self.codices {
            if !(c.years.0 < c.years.1) {
                return Err(Error::Config(format!("codex {} has an empty year range", c.name)));
            }
        }
        for (i, a) in self.codices.iter().enumerate() {
            for b in &self.codices[i + 1..] {
                if a.name == b.name {
                    return Err(Error::Config(format!("duplicate codex name {}", a.name)));
                }
                if a.years.0 < b.years.1 && b.years.0 < a.years.1 {
                    return Err(Error::Config(format!(
                        "codex year ranges overlap: {} {:?} and {} {:?}",
                        a.name, a.years, b.name, b.years
                    )));
                }
            }
        }
        Ok(())
    }

    /// Distinct label years of the configured codices, ascending.
    pub fn label_years(&self) -> Vec<f64> {
        let mut labels: Vec<f64> = Vec::new();
        for c in &self.codices {
            // Sample the range finely; a codex may straddle a bucket edge.
            for k in 0..=100 {
                let y = c.years.0 + (c.years.1 - c.years.0) * f64::from(k) / 100.0;
                if y < c.years.1 || k == 0 {
                    labels.push(self.label_rule.label(y));
                }
            }
        }
        labels.sort_by(f64::total_cmp);
        labels.dedup();
        labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

/// Fading level as a function of page position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FadingField {
    Uniform(f64),
    Quadrant { base: f64, faded: f64, quadrant: Quadrant },
}

impl FadingField {
    pub fn at(&self, x: f64, y: f64, side: usize) -> f64 {
        match *self {
            FadingField::Uniform(f) => f,
            FadingField::Quadrant { base, faded, quadrant } => {
                let half = side as f64 / 2.0;
                let inside = match quadrant {
                    Quadrant::TopLeft => x < half && y < half,
                    Quadrant::TopRight => x >= half && y < half,
                    Quadrant::BottomLeft => x < half && y >= half,
                    Quadrant::BottomRight => x >= half && y >= half,
                };
                if inside {
                    faded
                } else {
                    base
                }
            }
        }
    }

    /// Area-weighted mean level.
    pub fn mean(&self) -> f64 {
        match *self {
            FadingField::Uniform(f) => f,
            FadingField::Quadrant { base, faded, .. } => 0.75 * base + 0.25 * faded,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Page {
    pub id: u32,
    pub codex: String,
    pub side: usize,
    /// Row-major grayscale, `side × side`.
    pub pixels: Vec<u8>,
    pub true_year: f64,
    pub label_year: f64,
    pub fading: f64,
    /// Mean nib width actually laid down by the renderer.
    pub mean_stroke_width: f64,
}

/// Renders every page of the corpus. Page `i` depends only on the master
/// seed and `i`.
pub fn generate_corpus(config: &SyntheticCorpusConfig) -> Result<Vec<Page>> {
    config.validate()?;
    let stream = substream(config.seed, "data");
    let mut pages = Vec::with_capacity(config.pages_per_codex * config.codices.len());
    for (ci, codex) in config.codices.iter().enumerate() {
        for k in 0..config.pages_per_codex {
            let id = (ci * config.pages_per_codex + k) as u32;
            let page_seed = child(stream, u64::from(id));
            let mut rng = rng_from(page_seed);
            let year = rng.random_range(codex.years.0..codex.years.1);
            let (lo, hi) = config.fading;
            let fading = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let rendered = render_page(
                codex,
                year,
                &FadingField::Uniform(fading),
                config.page_side,
                child(page_seed, 1),
            );
            pages.push(Page {
                id,
                codex: codex.name.clone(),
                side: config.page_side,
                pixels: rendered.pixels,
                true_year: year,
                label_year: config.label_rule.label(year),
                fading,
                mean_stroke_width: rendered.mean_stroke_width,
            });
        }
    }
    Ok(pages)
}

pub struct Rendered {
    pub pixels: Vec<u8>,
    pub mean_stroke_width: f64,
}

struct Canvas {
    side: usize,
    /// Ink coverage in [0, 1].
    ink: Vec<f32>,
    width_sum: f64,
    width_weight: f64,
}

impl Canvas {
    fn stamp(&mut self, cx: f64, cy: f64, radius: f64, pressure: f32) {
        let side = self.side as i64;
        let reach = radius + 1.0;
        let (x0, x1) = ((cx - reach).floor() as i64, (cx + reach).ceil() as i64);
        let (y0, y1) = ((cy - reach).floor() as i64, (cy + reach).ceil() as i64);
        for y in y0.max(0)..=y1.min(side - 1) {
            for x in x0.max(0)..=x1.min(side - 1) {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                // One-pixel soft edge.
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0) as f32 * pressure;
                let slot = &mut self.ink[(y * side + x) as usize];
                if cover > *slot {
                    *slot = cover;
                }
            }
        }
    }

    /// Quadratic Bézier stroke from `a` to `b` bowed by `bow` at its middle.
    fn stroke(&mut self, a: (f64, f64), ctrl: (f64, f64), b: (f64, f64), width: f64, pressure: f32) {
        let approx_len = ((ctrl.0 - a.0).hypot(ctrl.1 - a.1) + (b.0 - ctrl.0).hypot(b.1 - ctrl.1)).max(1.0);
        let steps = (approx_len / 0.6).ceil() as usize;
        for i in 0..=steps {
            let s = i as f64 / steps as f64;
            let u = 1.0 - s;
            let x = u * u * a.0 + 2.0 * u * s * ctrl.0 + s * s * b.0;
            let y = u * u * a.1 + 2.0 * u * s * ctrl.1 + s * s * b.1;
            self.stamp(x, y, 0.5 * width * pressure_profile(s), pressure);
        }
        // Probe statistic: the profile's exact mean, weighted per stroke.
        self.width_sum += width * PROFILE_MEAN;
        self.width_weight += 1.0;
    }
}

/// Renders one page of `codex` at `year`.
pub fn render_page(codex: &CodexSpec, year: f64, fading: &FadingField, side: usize, seed: u64) -> Rendered {
    let style = codex.style_at(year);
    let mut rng = rng_from(seed);
    let mut canvas = Canvas {
        side,
        ink: vec![0.0; side * side],
        width_sum: 0.0,
        width_weight: 0.0,
    };
    let margin = 16.0;
    let xh = style.x_height;
    let mut baseline = margin + xh * 1.6;
    while baseline < side as f64 + xh {
        let mut x = margin;
        while x < side as f64 - margin {
            let advance = style.spacing * rng.random_range(0.85..1.15);
            if rng.random::<f64>() < 0.15 {
                // Word gap.
                x += advance * 0.9;
                continue;
            }
            draw_glyph(&mut canvas, &style, fading, x, baseline, &mut rng);
            x += advance;
        }
        baseline += style.line_spacing * rng.random_range(0.97..1.03);
    }

    let mut pixels = background(side, &mut rng);
    let ink_tone = style.ink_tone + rng.random_range(-4.0..4.0);
    for (p, &c) in pixels.iter_mut().zip(&canvas.ink) {
        *p -= (*p - ink_tone) * f64::from(c);
    }
    apply_stains(&mut pixels, side, fading, &mut rng);
    apply_mottle(&mut pixels, side, fading, &mut rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(side * side);
    for (i, v) in pixels.into_iter().enumerate() {
        let f = fading.at((i % side) as f64, (i / side) as f64, side);
        let n = noise.sample(&mut rng) * (BASE_NOISE + NOISE_PER_FADE * f);
        out.push((v + n).round().clamp(0.0, 255.0) as u8);
    }
    Rendered {
        pixels: out,
        mean_stroke_width: if canvas.width_weight > 0.0 {
            canvas.width_sum / canvas.width_weight
        } else {
            style.stroke_width * PROFILE_MEAN
        },
    }
}

fn draw_glyph(canvas: &mut Canvas, style: &StrokeStyle, fading: &FadingField, x: f64, base: f64, rng: &mut ChaCha8Rng) {
    let xh = style.x_height;
    let side = canvas.side;
    let shear = |px: f64, py: f64| (px + style.slant * (base - py), py);
    let bow = style.curvature * xh * 0.35;
    let mut strokes: Vec<[(f64, f64); 3]> = Vec::new();
    let pick: f64 = rng.random();
    let w = style.spacing * 0.55;
    if pick < 0.45 {
        // Minim, optionally with an arch into a second minim.
        let top = base - xh;
        strokes.push([(x, top), (x + bow * 0.2, base - xh * 0.5), (x, base)]);
        if rng.random::<f64>() < 0.4 {
            strokes.push([(x, top + xh * 0.15), (x + w * 0.5, top - bow * 0.5), (x + w, top + xh * 0.2)]);
            strokes.push([(x + w, top + xh * 0.2), (x + w, base - xh * 0.4), (x + w, base)]);
        }
        if rng.random::<f64>() < style.serif_rate {
            strokes.push([(x, base), (x + w * 0.2, base + 1.0), (x + w * 0.4, base - xh * 0.12)]);
        }
    } else if pick < 0.7 {
        // Bowl; low curvature turns it into a lozenge.
        let (cx, top) = (x + w * 0.5, base - xh);
        strokes.push([(cx, top), (x - bow, base - xh * 0.5), (cx, base)]);
        strokes.push([(cx, top), (x + w + bow, base - xh * 0.5), (cx, base)]);
    } else if pick < 0.85 {
        let top = base - xh * 1.7;
        strokes.push([(x, top), (x + bow * 0.2, base - xh * 0.8), (x, base)]);
        strokes.push([(x, top), (x + w * 0.3, top - bow * 0.3), (x + w * 0.5, top + xh * 0.1)]);
    } else {
        let bottom = base + xh * 0.6;
        strokes.push([(x, base - xh), (x - bow * 0.2, base), (x, bottom)]);
        if rng.random::<f64>() < 0.5 {
            strokes.push([(x, base - xh), (x + w * 0.6, base - xh - bow * 0.4), (x + w, base - xh * 0.6)]);
        }
    }
    for [a, c, b] in strokes {
        // Ink loss is gentle until fading is well advanced.
        let f = fading.at(a.0, a.1, side).powi(2);
        if rng.random::<f64>() < DROPOUT_PER_FADE * f {
            continue;
        }
        let pressure = ((1.0 - ATTENUATION_PER_FADE * f) * rng.random_range(0.92..1.0)) as f32;
        canvas.stroke(shear(a.0, a.1), shear(c.0, c.1), shear(b.0, b.1), style.stroke_width, pressure);
    }
}

/// Parchment tone with gentle low-frequency variation.
fn background(side: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tone = rng.random_range(200.0..218.0);
    let waves: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..3)
        .map(|_| {
            let (fx, fy) = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
            let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
            let amp = rng.random_range(1.0..3.0);
            let k = std::f64::consts::TAU / side as f64;
            let cols = (0..side).map(|x| (k * fx * x as f64 + px).cos()).collect();
            let rows = (0..side).map(|y| (k * fy * y as f64 + py).cos()).collect();
            (rows, cols, amp)
        })
        .collect();
    let mut out = vec![tone; side * side];
    for (y, line) in out.chunks_mut(side).enumerate() {
        for (rows, cols, amp) in &waves {
            let r = rows[y] * amp;
            for (v, c) in line.iter_mut().zip(cols) {
                *v += r * c;
            }
        }
    }
    out
}

/// Blotchy low-frequency noise, bilinear over a coarse random grid, scaled
/// by the local fading level.
fn apply_mottle(pixels: &mut [f64], side: usize, fading: &FadingField, rng: &mut ChaCha8Rng) {
    let cells = side / MOTTLE_CELL + 2;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let grid: Vec<f64> = (0..cells * cells).map(|_| unit.sample(rng)).collect();
    for y in 0..side {
        let gy = y as f64 / MOTTLE_CELL as f64;
        let (iy, ty) = (gy.floor() as usize, gy.fract());
        for x in 0..side {
            let f = fading.at(x as f64, y as f64, side);
            if f <= 0.0 {
                continue;
            }
            let gx = x as f64 / MOTTLE_CELL as f64;
            let (ix, tx) = (gx.floor() as usize, gx.fract());
            let g = |r: usize, c: usize| grid[r * cells + c];
            let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
            let bottom = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
            pixels[y * side + x] += MOTTLE_PER_FADE * f * (top * (1.0 - ty) + bottom * ty);
        }
    }
}

/// Darkening stains whose strength follows the local fading level.
fn apply_stains(pixels: &mut [f64], side: usize, fading: &FadingField, rng: &mut ChaCha8Rng) {
    let count = (side * side) / (300 * 300) + 2;
    for _ in 0..count {
        let (cx, cy) = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
        let radius: f64 = rng.random_range(60.0..160.0);
        let amp = STAIN_PER_FADE * fading.at(cx, cy, side) * rng.random_range(0.5..1.0);
        if amp <= 0.0 {
            continue;
        }
        let reach = (radius * 2.5) as i64;
        let (x0, y0) = (cx as i64, cy as i64);
        for y in (y0 - reach).max(0)..(y0 + reach).min(side as i64) {
            for x in (x0 - reach).max(0)..(x0 + reach).min(side as i64) {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                pixels[y as usize * side + x as usize] -= amp * (-d2 / (2.0 * radius * radius)).exp();
            }
        }
    }
}
