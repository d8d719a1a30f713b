//! Sampling baselines: MC-Dropout over a point regressor and a deep ensemble
//! of independently seeded point regressors. Both report a Gaussian
//! predictive in normalized units.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Mode, Model, ModelKind, Outputs};
use crate::rng::{child, substream};
use crate::special::normal_quantile;
use crate::training::{train, HeadKind, TrainConfig, TrainData, TrainOutcome};

pub const DEFAULT_PASSES: usize = 50;
pub const DEFAULT_MEMBERS: usize = 5;

const ENSEMBLE_FORMAT: &str = "nigdate-ensemble";
const ENSEMBLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct McDropoutConfig {
    /// Stochastic forward passes per input.
    pub passes: usize,
}

impl Default for McDropoutConfig {
    fn default() -> Self {
        McDropoutConfig { passes: DEFAULT_PASSES }
    }
}

impl McDropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::Config("MC-Dropout needs at least one pass".into()));
        }
        Ok(())
    }
}

/// Mean and variance of a Gaussian predictive, normalized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianPrediction {
    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    /// `mean ± z·std` with `z` the two-sided normal quantile.
    pub fn interval(&self, confidence: f64) -> Result<(f64, f64)> {
        let half = gaussian_half_width(self.std(), confidence)?;
        Ok((self.mean - half, self.mean + half))
    }
}

pub fn gaussian_half_width(std: f64, confidence: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&confidence) {
        return Err(Error::domain(
            "gaussian_interval",
            format!("confidence must lie in [0, 1), got {confidence}"),
        ));
    }
    if confidence == 0.0 {
        return Ok(0.0);
    }
    Ok(normal_quantile(0.5 + confidence / 2.0)? * std)
}

/// Normalized point output of a regressor; the evidential head contributes γ.
fn point_outputs(model: &Model, inputs: &[Vec<f64>], mode: Mode, seed: u64) -> Result<Vec<f64>> {
    match model.infer(inputs, mode, seed)? {
        Outputs::Point(v) => Ok(v),
        Outputs::Nig(ps) => Ok(ps.iter().map(|p| p.gamma).collect()),
        Outputs::Logits(_) => Err(Error::Contract(
            "sampling baselines need a regression head, not a classifier".into(),
        )),
    }
}

/// Runs `passes` dropout-active forward passes. Pass `t` draws its masks from
/// `child(seed, t)`, so results depend only on the seed.
pub fn mc_dropout_predict(
    model: &Model,
    inputs: &[Vec<f64>],
    config: &McDropoutConfig,
    seed: u64,
) -> Result<Vec<GaussianPrediction>> {
    config.validate()?;
    if model.config.dropout_rate == 0.0 {
        warn!("MC-Dropout on a model with dropout rate 0; every pass is identical");
    }
    if config.passes == 1 {
        warn!("MC-Dropout with a single pass; variance reported as 0");
    }
    let samples: Vec<Vec<f64>> = (0..config.passes)
        .map(|t| point_outputs(model, inputs, Mode::Train, child(seed, t as u64)))
        .collect::<Result<_>>()?;
    let t = config.passes as f64;
    Ok((0..inputs.len())
        .map(|i| {
            let mean = samples.iter().map(|s| s[i]).sum::<f64>() / t;
            let variance = if config.passes > 1 {
                samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / (t - 1.0)
            } else {
                0.0
            };
            GaussianPrediction { mean, variance }
        })
        .collect())
}

/// Independently seeded regressors with identical configs.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleBundle {
    pub members: Vec<Model>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format: String,
    pub version: u32,
    pub members: Vec<MemberEntry>,
}

/// Checkpoint path relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub checkpoint: PathBuf,
    pub seed: u64,
}

impl EnsembleBundle {
    pub fn new(members: Vec<Model>, seeds: Vec<u64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        }
        if members.len() != seeds.len() {
            return Err(Error::Config(format!(
                "{} members but {} seeds",
                members.len(),
                seeds.len()
            )));
        }
        let first = &members[0];
        if members.iter().any(|m| m.kind != first.kind || m.config != first.config) {
            return Err(Error::Config("ensemble members must share one configuration".into()));
        }
        if matches!(first.kind, ModelKind::Classifier { .. }) {
            return Err(Error::Config("ensemble members must be regressors".into()));
        }
        Ok(EnsembleBundle { members, seeds })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Writes `member_<i>.json` checkpoints and `ensemble.json` into `dir`;
    /// returns the manifest path.
    pub fn save(&self, dir: &Path, epochs: &[usize]) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for (i, (m, &seed)) in self.members.iter().zip(&self.seeds).enumerate() {
            let name = PathBuf::from(format!("member_{i}.json"));
            m.save(&dir.join(&name), seed, epochs.get(i).copied().unwrap_or(0))?;
            entries.push(MemberEntry { checkpoint: name, seed });
        }
        let manifest = EnsembleManifest {
            format: ENSEMBLE_FORMAT.into(),
            version: ENSEMBLE_VERSION,
            members: entries,
        };
        let path = dir.join("ensemble.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: EnsembleManifest = serde_json::from_str(&text)?;
        if manifest.format != ENSEMBLE_FORMAT || manifest.version != ENSEMBLE_VERSION {
            return Err(Error::Format {
                path: manifest_path.to_path_buf(),
                detail: format!("unsupported manifest {} v{}", manifest.format, manifest.version),
            });
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut members = Vec::new();
        let mut seeds = Vec::new();
        for entry in &manifest.members {
            members.push(Model::load(&dir.join(&entry.checkpoint))?.0);
            seeds.push(entry.seed);
        }
        EnsembleBundle::new(members, seeds)
    }
}

/// Seed of ensemble member `i` under a master training seed.
pub fn member_seed(master: u64, i: usize) -> u64 {
    child(substream(master, "ensemble"), i as u64)
}

/// Trains `members` point regressors that differ only in seed.
pub fn train_ensemble(
    data: &TrainData,
    config: &TrainConfig,
    members: usize,
) -> Result<(EnsembleBundle, Vec<TrainOutcome>)> {
    if members == 0 {
        return Err(Error::Config("an ensemble needs at least one member".into()));
    }
    let mut outcomes = Vec::new();
    let mut seeds = Vec::new();
    for i in 0..members {
        let seed = member_seed(config.seed, i);
        info!("training ensemble member {}/{members} (seed {seed})", i + 1);
        let cfg = TrainConfig {
            seed,
            model_kind: HeadKind::Point,
            ..config.clone()
        };
        outcomes.push(train(data, &cfg)?);
        seeds.push(seed);
    }
    let bundle = EnsembleBundle::new(outcomes.iter().map(|o| o.model.clone()).collect(), seeds)?;
    Ok((bundle, outcomes))
}

/// Mean and population variance across members for each input.
pub fn ensemble_predict(bundle: &EnsembleBundle, inputs: &[Vec<f64>]) -> Result<Vec<GaussianPrediction>> {
    let outputs: Vec<Vec<f64>> = bundle
        .members
        .iter()
        .map(|m| point_outputs(m, inputs, Mode::Eval, 0))
        .collect::<Result<_>>()?;
    combine_members(&outputs)
}

/// `member_outputs[m][i]` is member `m`'s prediction for input `i`. Values are
/// summed in sorted order so the result ignores member order bit for bit.
pub fn combine_members(member_outputs: &[Vec<f64>]) -> Result<Vec<GaussianPrediction>> {
    let Some(first) = member_outputs.first() else {
        return Err(Error::Config("an ensemble needs at least one member".into()));
    };
    if member_outputs.iter().any(|m| m.len() != first.len()) {
        return Err(Error::Contract("ensemble members returned different counts".into()));
    }
    let k = member_outputs.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let mut v: Vec<f64> = member_outputs.iter().map(|m| m[i]).collect();
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / k;
            let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
            dev.sort_by(f64::total_cmp);
            GaussianPrediction {
                mean,
                variance: dev.iter().sum::<f64>() / k,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ExtractorConfig;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(dropout_rate: f64) -> ExtractorConfig {
        ExtractorConfig {
            input_side: 4,
            hidden_widths: vec![32],
            dropout_rate,
            feature_dim: 8,
        }
    }

    fn inputs(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        (0..n).map(|_| (0..16).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn five_member_example() {
        let outs: Vec<Vec<f64>> = [0.1, 0.2, 0.3, 0.4, 0.5].iter().map(|&v| vec![v]).collect();
        let p = combine_members(&outs).unwrap()[0];
        assert!((p.mean - 0.3).abs() < 1e-15);
        assert!((p.variance - 0.02).abs() < 1e-15);
    }

    #[test]
    fn singleton_and_identical_members_have_zero_variance() {
        let m = Model::new(ModelKind::Point, tiny(0.3), 1).unwrap();
        let x = inputs(5, 2);
        let direct = point_outputs(&m, &x, Mode::Eval, 0).unwrap();
        let one = EnsembleBundle::new(vec![m.clone()], vec![1]).unwrap();
        for (p, d) in ensemble_predict(&one, &x).unwrap().iter().zip(&direct) {
            assert_eq!(p.mean, *d);
            assert_eq!(p.variance, 0.0);
        }
        let three = EnsembleBundle::new(vec![m.clone(), m.clone(), m], vec![1, 1, 1]).unwrap();
        assert!(ensemble_predict(&three, &x).unwrap().iter().all(|p| p.variance == 0.0));
    }

    #[test]
    fn empty_and_mismatched_bundles_rejected() {
        assert!(matches!(EnsembleBundle::new(vec![], vec![]), Err(Error::Config(_))));
        assert!(matches!(combine_members(&[]), Err(Error::Config(_))));
        let a = Model::new(ModelKind::Point, tiny(0.3), 1).unwrap();
        let b = Model::new(ModelKind::Point, tiny(0.1), 2).unwrap();
        assert!(EnsembleBundle::new(vec![a.clone(), b], vec![1, 2]).is_err());
        assert!(EnsembleBundle::new(vec![a], vec![1, 2]).is_err());
    }

    #[test]
    fn bundle_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let members: Vec<Model> = (0..3).map(|s| Model::new(ModelKind::Point, tiny(0.3), s).unwrap()).collect();
        let bundle = EnsembleBundle::new(members, vec![10, 11, 12]).unwrap();
        let path = bundle.save(dir.path(), &[1, 2, 3]).unwrap();
        assert_eq!(EnsembleBundle::load(&path).unwrap(), bundle);
    }

    #[test]
    fn zero_dropout_collapses_to_the_deterministic_output() {
        let m = Model::new(ModelKind::Point, tiny(0.0), 3).unwrap();
        let x = inputs(6, 4);
        let direct = point_outputs(&m, &x, Mode::Eval, 0).unwrap();
        let mc = mc_dropout_predict(&m, &x, &McDropoutConfig { passes: 7 }, 9).unwrap();
        for (p, d) in mc.iter().zip(&direct) {
            assert!((p.mean - d).abs() < 1e-12);
            assert!(p.variance < 1e-24);
        }
    }

    #[test]
    fn single_pass_and_zero_passes() {
        let m = Model::new(ModelKind::Point, tiny(0.3), 3).unwrap();
        let x = inputs(4, 5);
        let one = mc_dropout_predict(&m, &x, &McDropoutConfig { passes: 1 }, 0).unwrap();
        assert!(one.iter().all(|p| p.variance == 0.0));
        assert!(matches!(
            mc_dropout_predict(&m, &x, &McDropoutConfig { passes: 0 }, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fixed_seed_reproduces_and_classifiers_are_refused() {
        let m = Model::new(ModelKind::Point, tiny(0.3), 3).unwrap();
        let x = inputs(4, 5);
        let cfg = McDropoutConfig { passes: 12 };
        assert_eq!(mc_dropout_predict(&m, &x, &cfg, 8).unwrap(), mc_dropout_predict(&m, &x, &cfg, 8).unwrap());
        assert!(mc_dropout_predict(&m, &x, &cfg, 8).unwrap().iter().any(|p| p.variance > 0.0));
        let c = Model::new(
            ModelKind::Classifier {
                bucket_years: vec![900.0, 1000.0],
            },
            tiny(0.3),
            3,
        )
        .unwrap();
        assert!(matches!(mc_dropout_predict(&c, &x, &cfg, 8), Err(Error::Contract(_))));
    }

    #[test]
    fn more_passes_give_a_steadier_mean() {
        let m = Model::new(ModelKind::Point, tiny(0.3), 21).unwrap();
        let x = inputs(100, 22);
        let spread = |passes: usize| {
            let runs: Vec<Vec<GaussianPrediction>> = (0..8)
                .map(|r| mc_dropout_predict(&m, &x, &McDropoutConfig { passes }, 1000 + r).unwrap())
                .collect();
            let mut total = 0.0;
            for i in 0..x.len() {
                let means: Vec<f64> = runs.iter().map(|run| run[i].mean).collect();
                let mu = means.iter().sum::<f64>() / means.len() as f64;
                total += (means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt();
            }
            total / x.len() as f64
        };
        let (s10, s200) = (spread(10), spread(200));
        assert!(s200 < s10, "std at T=200 {s200} vs T=10 {s10}");
    }

    #[test]
    fn gaussian_interval_matches_z() {
        let p = GaussianPrediction { mean: 1.0, variance: 4.0 };
        let (lo, hi) = p.interval(0.9).unwrap();
        assert!((hi - 1.0 - 1.6448536269514722 * 2.0).abs() < 1e-9);
        assert!((1.0 - lo - (hi - 1.0)).abs() < 1e-12);
        assert!(p.interval(1.0).is_err());
    }

    proptest! {
        #[test]
        fn member_order_is_irrelevant(
            vals in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..7),
            rot in 0usize..7,
        ) {
            let mut shuffled = vals.clone();
            shuffled.reverse();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            prop_assert_eq!(combine_members(&vals).unwrap(), combine_members(&shuffled).unwrap());
        }
    }
}
