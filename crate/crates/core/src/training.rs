//! Mini-batch training with AdamW and a per-epoch cosine schedule.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::{Corpus, Partition, StoredPatch};
use crate::error::{Error, Result};
use crate::models::{evidential_head, prepare_input, ExtractorConfig, Mode, Model, ModelKind, Outputs, Param};
use crate::nig::{evidential_loss_node, predictive_interval, DEFAULT_LAMBDA};
use crate::rng::{child, rng_from, substream};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MAX_ROTATION_DEG: f64 = 3.0;

/// Which head to train; classifier buckets come from the data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Evidential,
    Point,
    Classifier,
}

impl HeadKind {
    pub fn model_kind(&self, label_years: &[f64]) -> ModelKind {
        match self {
            HeadKind::Evidential => ModelKind::Evidential,
            HeadKind::Point => ModelKind::Point,
            HeadKind::Classifier => ModelKind::Classifier {
                bucket_years: label_years.to_vec(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub model_kind: HeadKind,
    pub extractor: ExtractorConfig,
    /// Horizontal flips and small rotations of training inputs.
    pub augment: bool,
    /// Confidence of the validation PICP column.
    pub val_confidence: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 1e-4,
            epochs: 60,
            batch_size: 64,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            model_kind: HeadKind::Evidential,
            extractor: ExtractorConfig::default(),
            augment: true,
            val_confidence: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("weight decay and lambda must be non-negative".into()));
        }
        self.extractor.validate()
    }
}

/// Learning rate for `epoch ∈ [0, epochs]`.
pub fn cosine_lr(epoch: usize, config: &TrainConfig) -> f64 {
    if config.epochs == 0 {
        return config.lr;
    }
    let t = epoch.min(config.epochs) as f64 / config.epochs as f64;
    0.5 * config.lr * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Param]) -> Self {
        let zeros = |p: &Param| Tensor::zeros(p.value.rows(), p.value.cols());
        OptimizerState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One AdamW update. Decay is decoupled and skipped for parameters marked
/// `decay: false`. A non-finite gradient aborts before anything changes.
pub fn adamw_step(params: &mut [Param], grads: &[Tensor], state: &mut OptimizerState, lr: f64, weight_decay: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: p.value.shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            *w *= decay;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One prepared training or evaluation input.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub patch_id: u64,
    pub page_id: u32,
    pub input: Vec<f64>,
    pub label_year: f64,
}

pub fn prepare_examples(patches: &[&StoredPatch], side: usize, input_side: usize) -> Result<Vec<Example>> {
    patches
        .iter()
        .map(|p| {
            Ok(Example {
                patch_id: p.patch_id,
                page_id: p.page_id,
                input: prepare_input(&p.pixels, side, input_side)?,
                label_year: p.label_year,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    /// Distinct label years (classifier buckets), ascending.
    pub label_years: Vec<f64>,
}

impl TrainData {
    pub fn from_corpus(corpus: &Corpus, input_side: usize) -> Result<Self> {
        let size = corpus.config.patch_size;
        Ok(TrainData {
            train: prepare_examples(&corpus.partition(Partition::Train), size, input_side)?,
            val: prepare_examples(&corpus.partition(Partition::Val), size, input_side)?,
            label_years: corpus.label_years(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae_years: f64,
    /// Only the evidential head produces intervals.
    pub val_picp: Option<f64>,
}

pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation MAE.
    pub model: Model,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["epoch", "lr", "train_loss", "val_mae_years", "val_picp"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.val_mae_years.to_string(),
            r.val_picp.map(|p| p.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Horizontal flip and a nearest-neighbour rotation of a square input.
pub fn augment_input(input: &[f64], side: usize, flip: bool, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let mid = (side as f64 - 1.0) / 2.0;
    let last = side as i64 - 1;
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for col in 0..side {
            let (y, x) = (r as f64 - mid, col as f64 - mid);
            let sx = (c * x + s * y + mid).round() as i64;
            let sy = (-s * x + c * y + mid).round() as i64;
            let mut sx = sx.clamp(0, last) as usize;
            let sy = sy.clamp(0, last) as usize;
            if flip {
                sx = side - 1 - sx;
            }
            out[r * side + col] = input[sy * side + sx];
        }
    }
    out
}

/// Builds the training loss of one batch; returns the loss node.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &crate::models::Bound,
    inputs: Tensor,
    label_years: &[f64],
    lambda: f64,
) -> Result<NodeId> {
    let n = label_years.len() as f64;
    let x = tape.constant(inputs);
    let fwd = model.forward(tape, bound, x, Mode::Train)?;
    match &model.kind {
        ModelKind::Evidential => {
            let y = tape.constant(Tensor::column_vector(
                label_years.iter().map(|&t| model.scale.normalize(t)).collect(),
            ));
            let nig = evidential_head(tape, fwd.raw)?;
            evidential_loss_node(tape, &nig, y, lambda)
        }
        ModelKind::Point => {
            let y = tape.constant(Tensor::column_vector(
                label_years.iter().map(|&t| model.scale.normalize(t)).collect(),
            ));
            let d = tape.sub(fwd.raw, y)?;
            let sq = tape.mul(d, d)?;
            let total = tape.sum(sq);
            let inv = tape.scalar(1.0 / n);
            tape.mul(total, inv)
        }
        ModelKind::Classifier { bucket_years } => {
            let k = bucket_years.len();
            let mut onehot = Tensor::zeros(label_years.len(), k);
            for (i, t) in label_years.iter().enumerate() {
                let j = bucket_years.iter().position(|b| b == t).ok_or_else(|| {
                    Error::Config(format!("label year {t} is not one of the classifier buckets {bucket_years:?}"))
                })?;
                onehot.data_mut()[i * k + j] = 1.0;
            }
            let onehot = tape.constant(onehot);
            let lse = tape.logsumexp_rows(fwd.raw);
            let lse = tape.sum(lse);
            let picked = tape.mul(fwd.raw, onehot)?;
            let picked = tape.sum(picked);
            let total = tape.sub(lse, picked)?;
            let inv = tape.scalar(1.0 / n);
            tape.mul(total, inv)
        }
    }
}

/// Validation MAE in years and, for the evidential head, PICP.
pub fn validate_model(model: &Model, val: &[Example], confidence: f64) -> Result<(f64, Option<f64>)> {
    let inputs: Vec<Vec<f64>> = val.iter().map(|e| e.input.clone()).collect();
    let outputs = model.infer(&inputs, Mode::Eval, 0)?;
    let preds = model.predict_years(&inputs, Mode::Eval, 0)?;
    let mut errs: Vec<f64> = preds.iter().zip(val).map(|(p, e)| (p - e.label_year).abs()).collect();
    errs.sort_by(f64::total_cmp);
    let mae = errs.iter().sum::<f64>() / errs.len() as f64;
    let picp = match outputs {
        Outputs::Nig(ps) => {
            let mut hits = 0usize;
            for (p, e) in ps.iter().zip(val) {
                let (lo, hi) = predictive_interval(p, confidence)?;
                let y = model.scale.normalize(e.label_year);
                if lo <= y && y <= hi {
                    hits += 1;
                }
            }
            Some(hits as f64 / val.len() as f64)
        }
        _ => None,
    };
    Ok((mae, picp))
}

/// Trains one model. Shuffle order, dropout masks, augmentation and
/// initialisation all derive from `config.seed`.
pub fn train(data: &TrainData, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty train and val partitions (got {} and {})",
            data.train.len(),
            data.val.len()
        )));
    }
    let kind = config.model_kind.model_kind(&data.label_years);
    let mut model = Model::new(kind, config.extractor.clone(), substream(config.seed, "init"))?;
    let mut outcome = TrainOutcome {
        model: model.clone(),
        best_epoch: None,
        history: Vec::new(),
    };
    let shuffle_stream = substream(config.seed, "shuffle");
    let dropout_stream = substream(config.seed, "dropout");
    let augment_stream = substream(config.seed, "augment");
    let side = config.extractor.input_side;
    let mut state = OptimizerState::new(model.params());
    let mut best_mae = f64::INFINITY;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config);
        order.sort_unstable();
        order.shuffle(&mut rng_from(child(shuffle_stream, epoch as u64)));
        let mut aug_rng = rng_from(child(augment_stream, epoch as u64));
        let epoch_dropout = child(dropout_stream, epoch as u64);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let rows: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| {
                    let input = &data.train[i].input;
                    if config.augment {
                        let flip = aug_rng.random::<bool>();
                        let deg = aug_rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
                        augment_input(input, side, flip, deg)
                    } else {
                        input.clone()
                    }
                })
                .collect();
            let labels: Vec<f64> = batch.iter().map(|&i| data.train[i].label_year).collect();
            let mut tape = Tape::new(child(epoch_dropout, b as u64));
            let bound = model.bind(&mut tape);
            let loss = batch_loss(&model, &mut tape, &bound, Tensor::from_rows(&rows)?, &labels, config.lambda)?;
            let value = tape.value(loss).item().expect("scalar loss");
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = bound
                .params
                .iter()
                .zip(model.params())
                .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols())))
                .collect();
            adamw_step(model.params_mut(), &grads, &mut state, lr, config.weight_decay)?;
            loss_sum += value * batch.len() as f64;
        }
        let (val_mae, val_picp) = validate_model(&model, &data.val, config.val_confidence)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / data.train.len() as f64,
            val_mae_years: val_mae,
            val_picp,
        };
        debug!("{} epoch {epoch}: {record:?}", model.kind.name());
        if val_mae < best_mae {
            best_mae = val_mae;
            outcome.model = model.clone();
            outcome.best_epoch = Some(epoch);
        }
        outcome.history.push(record);
    }
    if let Some(best) = outcome.best_epoch {
        info!(
            "{}: best val MAE {:.2} y at epoch {best} of {}",
            model.kind.name(),
            best_mae,
            config.epochs
        );
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            extractor: ExtractorConfig {
                input_side: 4,
                hidden_widths: vec![16],
                dropout_rate: 0.1,
                feature_dim: 8,
            },
            batch_size: 8,
            epochs: 3,
            ..Default::default()
        }
    }

    fn toy(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|i| {
                let label = [900.0, 1000.0, 1300.0][i % 3];
                let level = (label - 800.0) / 600.0;
                Example {
                    patch_id: i as u64,
                    page_id: i as u32,
                    input: (0..16).map(|_| level + rng.random_range(-0.1..0.1)).collect(),
                    label_year: label,
                }
            })
            .collect()
    }

    fn data() -> TrainData {
        TrainData {
            train: toy(48, 1),
            val: toy(12, 2),
            label_years: vec![900.0, 1000.0, 1300.0],
        }
    }

    #[test]
    fn cosine_examples() {
        let c = TrainConfig::default();
        assert_eq!(cosine_lr(0, &c), 3e-4);
        assert!(cosine_lr(60, &c).abs() < 1e-20);
        assert!((cosine_lr(30, &c) - 1.5e-4).abs() < 1e-18);
    }

    fn single(value: f64, decay: bool) -> Vec<Param> {
        vec![Param {
            name: "p".into(),
            value: Tensor::scalar(value),
            decay,
        }]
    }

    #[test]
    fn adamw_null_and_decay_only_updates() {
        let mut p = single(1.5, true);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, 1e-3, 0.0).unwrap();
        assert_eq!(p[0].value.item(), Some(1.5));
        adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, 1e-3, 0.5).unwrap();
        assert_eq!(p[0].value.item(), Some(1.5 * (1.0 - 1e-3 * 0.5)));
    }

    #[test]
    fn adamw_one_step_on_square() {
        // f(p) = p², p = 1: g = 2, m̂ = 2, v̂ = 4, so p ← 1 − lr·2/(2 + ε).
        let mut p = single(1.0, true);
        let mut st = OptimizerState::new(&p);
        let lr = 0.1;
        adamw_step(&mut p, &[Tensor::scalar(2.0)], &mut st, lr, 0.0).unwrap();
        let expect = 1.0 - lr * 2.0 / (2.0 + 1e-8);
        assert!((p[0].value.item().unwrap() - expect).abs() < 1e-15);
        assert!(expect < 1.0);
    }

    #[test]
    fn adamw_rejects_nan_with_name() {
        let mut p = single(1.0, true);
        p[0].name = "head.weight".into();
        let mut st = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut st, 1e-3, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "head.weight"));
        assert_eq!(p[0].value.item(), Some(1.0));
    }

    #[test]
    fn head_bias_escapes_decay() {
        // Constant gradient −1 pushes the parameter up; heavy decay would pull
        // a decayed copy back towards zero, the exempt one keeps growing.
        let mut p = vec![
            Param {
                name: "head.bias".into(),
                value: Tensor::scalar(0.0),
                decay: false,
            },
            Param {
                name: "w".into(),
                value: Tensor::scalar(0.0),
                decay: true,
            },
        ];
        let mut st = OptimizerState::new(&p);
        let mut prev = 0.0;
        for _ in 0..200 {
            adamw_step(&mut p, &[Tensor::scalar(-1.0), Tensor::scalar(-1.0)], &mut st, 0.05, 10.0).unwrap();
            let b = p[0].value.item().unwrap();
            assert!(b > prev);
            prev = b;
        }
        assert!(p[0].value.item().unwrap() > 5.0 * p[1].value.item().unwrap());

        let m = Model::new(ModelKind::Evidential, cfg().extractor, 0).unwrap();
        let exempt: Vec<&str> = m.params().iter().filter(|p| !p.decay).map(|p| p.name.as_str()).collect();
        assert_eq!(exempt, vec!["head.bias"]);
        assert_eq!(m.params().last().unwrap().value.len(), 4);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let c = TrainConfig { epochs: 0, ..cfg() };
        let out = train(&data(), &c).unwrap();
        assert!(out.history.is_empty());
        let init = Model::new(ModelKind::Evidential, c.extractor.clone(), substream(c.seed, "init")).unwrap();
        assert_eq!(out.model, init);
    }

    #[test]
    fn empty_partition_is_config_error() {
        let mut d = data();
        d.val.clear();
        assert!(matches!(train(&d, &cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_weights_and_history() {
        let a = train(&data(), &cfg()).unwrap();
        let b = train(&data(), &cfg()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        let c = train(&data(), &TrainConfig { seed: 1, ..cfg() }).unwrap();
        assert_ne!(a.model, c.model);
        for (i, r) in a.history.iter().enumerate() {
            assert_eq!(r.epoch, i);
        }
    }

    #[test]
    fn repeated_batch_loss_is_non_increasing() {
        let batch = toy(16, 5);
        let labels: Vec<f64> = batch.iter().map(|e| e.label_year).collect();
        let rows: Vec<Vec<f64>> = batch.iter().map(|e| e.input.clone()).collect();
        for head in [HeadKind::Evidential, HeadKind::Point, HeadKind::Classifier] {
            let mut ex = cfg().extractor;
            ex.dropout_rate = 0.0;
            let mut model = Model::new(head.model_kind(&[900.0, 1000.0, 1300.0]), ex, 11).unwrap();
            let mut st = OptimizerState::new(model.params());
            let mut prev = f64::INFINITY;
            for step in 0..50 {
                let mut tape = Tape::new(0);
                let bound = model.bind(&mut tape);
                let loss =
                    batch_loss(&model, &mut tape, &bound, Tensor::from_rows(&rows).unwrap(), &labels, 0.1).unwrap();
                let v = tape.value(loss).item().unwrap();
                assert!(v <= prev + 1e-12, "{head:?} step {step}: {v} > {prev}");
                prev = v;
                let mut g = tape.backward(loss).unwrap();
                let grads: Vec<Tensor> = bound.params.iter().map(|&id| g.take(id).unwrap()).collect();
                adamw_step(model.params_mut(), &grads, &mut st, 1e-3, 0.0).unwrap();
            }
        }
    }

    #[test]
    fn augmentation_identity_and_flip() {
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        assert_eq!(augment_input(&x, 3, false, 0.0), x);
        assert_eq!(augment_input(&x, 3, true, 0.0), vec![2., 1., 0., 5., 4., 3., 8., 7., 6.]);
    }

    #[test]
    fn history_csv_has_spec_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let out = train(&data(), &cfg()).unwrap();
        write_history_csv(&path, &out.history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,val_mae_years,val_picp\n"));
        assert_eq!(text.lines().count(), 1 + cfg().epochs);
    }
}
