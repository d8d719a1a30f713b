//! Image degradations applied to clean patches at evaluation time.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationSpec {
    Blur { sigma: f64 },
    LowContrast { factor: f64 },
    /// Blockwise 8×8 DCT coefficient quantization; lower quality means
    /// coarser steps.
    DctQuant { quality: f64 },
    Impulse { fraction: f64 },
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DegradationSpec::Blur { sigma } => sigma >= 0.0 && sigma.is_finite(),
            DegradationSpec::LowContrast { factor } => factor > 0.0 && factor <= 1.0,
            DegradationSpec::DctQuant { quality } => quality > 0.0 && quality <= 1.0,
            DegradationSpec::Impulse { fraction } => (0.0..=1.0).contains(&fraction),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid degradation {self:?}")))
        }
    }
}

/// A named row of the degradation table; `None` is the clean baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedDegradation {
    pub name: String,
    pub spec: Option<DegradationSpec>,
}

pub fn standard_suite() -> Vec<NamedDegradation> {
    let row = |name: &str, spec| NamedDegradation {
        name: name.into(),
        spec,
    };
    vec![
        row("Clean (baseline)", None),
        row("Blur (mild)", Some(DegradationSpec::Blur { sigma: 1.0 })),
        row("Blur (strong)", Some(DegradationSpec::Blur { sigma: 3.0 })),
        row("Low contrast", Some(DegradationSpec::LowContrast { factor: 0.4 })),
        row("JPEG (mild)", Some(DegradationSpec::DctQuant { quality: 0.6 })),
        row("JPEG (strong)", Some(DegradationSpec::DctQuant { quality: 0.15 })),
        row("Impulse noise", Some(DegradationSpec::Impulse { fraction: 0.05 })),
    ]
}

/// Applies `spec` to a row-major `side × side` patch. Only impulse noise
/// draws from `rng`.
pub fn degrade<R: Rng + ?Sized>(pixels: &[u8], side: usize, spec: &DegradationSpec, rng: &mut R) -> Result<Vec<u8>> {
    spec.validate()?;
    if pixels.len() != side * side {
        return Err(Error::Shape {
            op: "degrade",
            left: (side, side),
            right: (pixels.len(), 1),
        });
    }
    Ok(match *spec {
        DegradationSpec::Blur { sigma } => gaussian_blur(pixels, side, sigma),
        DegradationSpec::LowContrast { factor } => low_contrast(pixels, factor),
        DegradationSpec::DctQuant { quality } => dct_quantize(pixels, side, quality),
        DegradationSpec::Impulse { fraction } => impulse(pixels, fraction, rng),
    })
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|k| k / total).collect()
}

/// Separable Gaussian with clamped edges.
pub fn gaussian_blur(pixels: &[u8], side: usize, sigma: f64) -> Vec<u8> {
    if sigma == 0.0 {
        return pixels.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let last = side as i64 - 1;
    let src: Vec<f64> = pixels.iter().map(|&p| f64::from(p)).collect();
    let mut tmp = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            tmp[r * side + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * src[r * side + (c as i64 + k as i64 - radius).clamp(0, last) as usize])
                .sum();
        }
    }
    let mut out = vec![0u8; side * side];
    for r in 0..side {
        for c in 0..side {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[(r as i64 + k as i64 - radius).clamp(0, last) as usize * side + c])
                .sum();
            out[r * side + c] = to_u8(v);
        }
    }
    out
}

pub fn low_contrast(pixels: &[u8], factor: f64) -> Vec<u8> {
    if pixels.is_empty() {
        return Vec::new();
    }
    let mean = pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / pixels.len() as f64;
    pixels
        .iter()
        .map(|&p| to_u8(mean + factor * (f64::from(p) - mean)))
        .collect()
}

/// Standard luminance quantization table.
const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Quantization steps for `quality ∈ (0, 1]`, using the usual
/// percentage-quality scaling of the luminance table.
pub fn quant_steps(quality: f64) -> [f64; 64] {
    let q = (quality * 100.0).clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut steps = [1.0; 64];
    for (s, t) in steps.iter_mut().zip(LUMA_TABLE) {
        *s = ((t * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    steps
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

/// Orthonormal 2-D DCT of an 8×8 block (`inverse` transposes the basis).
fn dct8(block: &[f64; 64], basis: &[[f64; 8]; 8], inverse: bool) -> [f64; 64] {
    let m = |a: usize, b: usize| if inverse { basis[b][a] } else { basis[a][b] };
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for y in 0..8 {
            tmp[u * 8 + y] = (0..8).map(|x| m(u, x) * block[x * 8 + y]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|y| m(v, y) * tmp[u * 8 + y]).sum();
        }
    }
    out
}

pub fn dct_quantize(pixels: &[u8], side: usize, quality: f64) -> Vec<u8> {
    let steps = quant_steps(quality);
    let basis = dct_basis();
    let mut out = pixels.to_vec();
    for br in (0..side).step_by(8) {
        for bc in (0..side).step_by(8) {
            let mut block = [0.0; 64];
            for i in 0..8 {
                for j in 0..8 {
                    // Replicate edges of partial blocks.
                    let (r, c) = ((br + i).min(side - 1), (bc + j).min(side - 1));
                    block[i * 8 + j] = f64::from(pixels[r * side + c]) - 128.0;
                }
            }
            let mut coef = dct8(&block, &basis, false);
            for (k, s) in coef.iter_mut().zip(&steps) {
                *k = (*k / s).round() * s;
            }
            let back = dct8(&coef, &basis, true);
            for i in 0..8.min(side - br) {
                for j in 0..8.min(side - bc) {
                    out[(br + i) * side + bc + j] = to_u8(back[i * 8 + j] + 128.0);
                }
            }
        }
    }
    out
}

/// Sets exactly `round(fraction · n)` distinct pixels to 0 or 255.
pub fn impulse<R: Rng + ?Sized>(pixels: &[u8], fraction: f64, rng: &mut R) -> Vec<u8> {
    let mut out = pixels.to_vec();
    let k = (fraction * pixels.len() as f64).round() as usize;
    for i in sample(rng, pixels.len(), k.min(pixels.len())) {
        out[i] = if rng.random::<bool>() { 255 } else { 0 };
    }
    out
}
