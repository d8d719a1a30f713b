//! Feature extractor and the three interchangeable heads.
//!
//! The extractor is a small MLP over a downsampled, flattened grayscale
//! patch: every layer is `Linear → ReLU`, and dropout follows the last hidden
//! layer. The head is one linear layer whose width depends on [`ModelKind`].

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nig::{NigNodes, NigParams, YearScale, EVIDENCE_FLOOR};
use crate::rng::{child, rng_from};

const INFERENCE_CHUNK: usize = 256;
const CHECKPOINT_FORMAT: &str = "nigdate-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Patches are downsampled to `input_side × input_side` before the MLP.
    pub input_side: usize,
    pub hidden_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub feature_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            input_side: 32,
            hidden_widths: vec![256, 256],
            dropout_rate: 0.3,
            feature_dim: 64,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || self.feature_dim == 0 || self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("extractor widths must all be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_side * self.input_side
    }

    /// (fan-in, fan-out) of every extractor layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim();
        for &w in self.hidden_widths.iter().chain(std::iter::once(&self.feature_dim)) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Evidential,
    Point,
    /// One bucket per label year; a prediction is the winning bucket's year.
    Classifier { bucket_years: Vec<f64> },
}

impl ModelKind {
    pub fn head_width(&self) -> usize {
        match self {
            ModelKind::Evidential => 4,
            ModelKind::Point => 1,
            ModelKind::Classifier { bucket_years } => bucket_years.len(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Evidential => "evidential",
            ModelKind::Point => "point",
            ModelKind::Classifier { .. } => "classifier",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ModelKind::Classifier { bucket_years } = self {
            if bucket_years.len() < 2 {
                return Err(Error::Config("classifier needs at least 2 buckets".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Weights plus the configuration that fixes their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ExtractorConfig,
    pub scale: YearScale,
    params: Vec<Param>,
}

/// Node handles of a model bound to a tape, in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: Vec<NodeId>,
}

pub struct Forward {
    pub features: NodeId,
    pub raw: NodeId,
}

/// Batched outputs of [`Model::infer`].
#[derive(Clone, Debug)]
pub enum Outputs {
    Nig(Vec<NigParams>),
    Point(Vec<f64>),
    Logits(Vec<Vec<f64>>),
}

impl Outputs {
    pub fn len(&self) -> usize {
        match self {
            Outputs::Nig(v) => v.len(),
            Outputs::Point(v) => v.len(),
            Outputs::Logits(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of trainable scalars for a configuration.
pub fn parameter_count(config: &ExtractorConfig, kind: &ModelKind) -> usize {
    let extractor: usize = config.layer_dims().iter().map(|(i, o)| i * o + o).sum();
    extractor + config.feature_dim * kind.head_width() + kind.head_width()
}

impl Model {
    /// Fresh model: weights uniform in ±1/√fan_in, biases zero.
    pub fn new(kind: ModelKind, config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        kind.validate()?;
        let mut rng = rng_from(seed);
        let mut params = Vec::new();
        let mut linear = |name: String, fan_in: usize, fan_out: usize, bias_decay: bool, rng: &mut _| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| Rng::random_range(rng, -bound..bound))
                .collect();
            params.push(Param {
                name: format!("{name}.weight"),
                value: Tensor::from_vec(fan_in, fan_out, w).expect("shape"),
                decay: true,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros(1, fan_out),
                decay: bias_decay,
            });
        };
        for (i, (fan_in, fan_out)) in config.layer_dims().into_iter().enumerate() {
            linear(format!("extractor.{i}"), fan_in, fan_out, true, &mut rng);
        }
        // The head bias is excluded from weight decay.
        linear("head".into(), config.feature_dim, kind.head_width(), false, &mut rng);
        Ok(Model {
            kind,
            config,
            scale: YearScale::default(),
            params,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            params: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    fn layer_count(&self) -> usize {
        self.config.hidden_widths.len() + 1
    }

    /// Extractor output for a batch `input` (n × input_side²).
    pub fn forward_features(&self, tape: &mut Tape, bound: &Bound, input: NodeId, mode: Mode) -> Result<NodeId> {
        let (_, width) = tape.shape(input);
        if width != self.config.input_dim() {
            return Err(Error::Shape {
                op: "forward_features",
                left: (1, self.config.input_dim()),
                right: tape.shape(input),
            });
        }
        let hidden = self.config.hidden_widths.len();
        let mut h = input;
        for layer in 0..self.layer_count() {
            let w = bound.params[2 * layer];
            let b = bound.params[2 * layer + 1];
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = tape.relu(z);
            if layer + 1 == hidden && mode == Mode::Train {
                h = tape.dropout(h, self.config.dropout_rate)?;
            }
        }
        Ok(h)
    }

    pub fn head_raw(&self, tape: &mut Tape, bound: &Bound, features: NodeId) -> Result<NodeId> {
        let n = bound.params.len();
        let z = tape.matmul(features, bound.params[n - 2])?;
        tape.add(z, bound.params[n - 1])
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: NodeId, mode: Mode) -> Result<Forward> {
        let features = self.forward_features(tape, bound, input, mode)?;
        let raw = self.head_raw(tape, bound, features)?;
        Ok(Forward { features, raw })
    }

    fn run_chunks<T>(
        &self,
        inputs: &[Vec<f64>],
        mode: Mode,
        seed: u64,
        mut visit: impl FnMut(&Tape, &Forward) -> Result<T>,
    ) -> Result<Vec<T>> {
        let mut out = Vec::new();
        for (ci, chunk) in inputs.chunks(INFERENCE_CHUNK).enumerate() {
            let mut tape = Tape::new(child(seed, ci as u64));
            let bound = self.bind(&mut tape);
            let x = tape.constant(Tensor::from_rows(chunk)?);
            let fwd = self.forward(&mut tape, &bound, x, mode)?;
            out.push(visit(&tape, &fwd)?);
        }
        Ok(out)
    }

    /// Head outputs for a batch of prepared inputs. In [`Mode::Train`] dropout
    /// is active with masks derived from `seed`; in [`Mode::Eval`] the seed is
    /// irrelevant.
    pub fn infer(&self, inputs: &[Vec<f64>], mode: Mode, seed: u64) -> Result<Outputs> {
        let raws = self.run_chunks(inputs, mode, seed, |tape, fwd| Ok(tape.value(fwd.raw).clone()))?;
        let rows = raws.iter().flat_map(|t| (0..t.rows()).map(move |r| t.row(r).to_vec()));
        Ok(match self.kind {
            ModelKind::Evidential => Outputs::Nig(rows.map(|r| evidential_head_values(&r)).collect()),
            ModelKind::Point => Outputs::Point(rows.map(|r| r[0]).collect()),
            ModelKind::Classifier { .. } => Outputs::Logits(rows.collect()),
        })
    }

    /// Extractor features (eval mode) for a batch of prepared inputs.
    pub fn features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let chunks = self.run_chunks(inputs, Mode::Eval, 0, |tape, fwd| Ok(tape.value(fwd.features).clone()))?;
        Ok(chunks
            .iter()
            .flat_map(|t| (0..t.rows()).map(move |r| t.row(r).to_vec()))
            .collect())
    }

    /// Point predictions in years CE, whatever the head.
    pub fn predict_years(&self, inputs: &[Vec<f64>], mode: Mode, seed: u64) -> Result<Vec<f64>> {
        Ok(match self.infer(inputs, mode, seed)? {
            Outputs::Nig(ps) => ps.iter().map(|p| self.scale.denormalize(p.gamma)).collect(),
            Outputs::Point(ys) => ys.iter().map(|&y| self.scale.denormalize(y)).collect(),
            Outputs::Logits(ls) => {
                let ModelKind::Classifier { bucket_years } = &self.kind else { unreachable!() };
                ls.iter().map(|l| classifier_prediction(l, bucket_years)).collect()
            }
        })
    }

    pub fn to_checkpoint(&self, seed: u64, epoch: usize) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            scale: self.scale,
            seed,
            epoch,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let template = Model::new(ck.kind.clone(), ck.config.clone(), 0)?;
        if template.params.len() != ck.params.len() {
            return Err(Error::Config("checkpoint parameter count does not match config".into()));
        }
        for (t, p) in template.params.iter().zip(&ck.params) {
            if t.name != p.name || t.value.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    left: t.value.shape(),
                    right: p.value.shape(),
                });
            }
        }
        Ok(Model {
            kind: ck.kind,
            config: ck.config,
            scale: ck.scale,
            params: ck.params,
        })
    }

    pub fn save(&self, path: &Path, seed: u64, epoch: usize) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint(seed, epoch))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        let model = Model::from_checkpoint(ck.clone())?;
        Ok((model, ck))
    }
}

/// Text checkpoint: config echo, seed, epoch and every weight array with its
/// shape. Floats round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub config: ExtractorConfig,
    pub scale: YearScale,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<Param>,
}

/// Maps raw head outputs `(γ, ν, α, β)` (n×4) to constrained NIG columns.
pub fn evidential_head(tape: &mut Tape, raw: NodeId) -> Result<NigNodes> {
    let (_, cols) = tape.shape(raw);
    if cols != 4 {
        return Err(Error::Shape {
            op: "evidential_head",
            left: (1, 4),
            right: tape.shape(raw),
        });
    }
    let floor = tape.scalar(EVIDENCE_FLOOR);
    let alpha_floor = tape.scalar(1.0 + EVIDENCE_FLOOR);
    let gamma = tape.column(raw, 0)?;
    let mut constrained = |j: usize, offset: NodeId| -> Result<NodeId> {
        let c = tape.column(raw, j)?;
        let s = tape.softplus(c);
        tape.add(s, offset)
    };
    let nu = constrained(1, floor)?;
    let alpha = constrained(2, alpha_floor)?;
    let beta = constrained(3, floor)?;
    Ok(NigNodes { gamma, nu, alpha, beta })
}

/// Scalar counterpart of [`evidential_head`].
pub fn evidential_head_values(raw: &[f64]) -> NigParams {
    NigParams {
        gamma: raw[0],
        nu: softplus(raw[1]) + EVIDENCE_FLOOR,
        alpha: softplus(raw[2]) + 1.0 + EVIDENCE_FLOOR,
        beta: softplus(raw[3]) + EVIDENCE_FLOOR,
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Year of the arg-max bucket. Ties go to the earliest bucket.
pub fn classifier_prediction(logits: &[f64], bucket_years: &[f64]) -> f64 {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    bucket_years[best]
}

/// Area-averaged downsample of a `side × side` 8-bit patch to
/// `input_side × input_side`, scaled to [0, 1].
pub fn prepare_input(pixels: &[u8], side: usize, input_side: usize) -> Result<Vec<f64>> {
    if pixels.len() != side * side || side == 0 || input_side == 0 || input_side > side {
        return Err(Error::Shape {
            op: "prepare_input",
            left: (side, side),
            right: (pixels.len(), input_side),
        });
    }
    let ratio = side as f64 / input_side as f64;
    // Fractional overlap of source index `s` with output cell `o` along one axis.
    let spans: Vec<Vec<(usize, f64)>> = (0..input_side)
        .map(|o| {
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            (lo.floor() as usize..(hi.ceil() as usize).min(side))
                .map(|s| {
                    let w = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (s, w)
                })
                .filter(|&(_, w)| w > 0.0)
                .collect()
        })
        .collect();
    let norm = 1.0 / (ratio * ratio * 255.0);
    let mut out = Vec::with_capacity(input_side * input_side);
    for rows in &spans {
        for cols in &spans {
            let mut acc = 0.0;
            for &(r, wr) in rows {
                let line = &pixels[r * side..(r + 1) * side];
                for &(c, wc) in cols {
                    acc += wr * wc * f64::from(line[c]);
                }
            }
            out.push(acc * norm);
        }
    }
    Ok(out)
}
