use serde::{Deserialize, Serialize};

use crate::diffcore::AdamConfig;
use crate::error::{Error, Result};
use crate::geo_graph::DEFAULT_THRESHOLD_KM;
use crate::loss::LossWeights;
use crate::model::ModelConfig;

/// Which node set training runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Training stations only.
    #[default]
    Stations,
    /// Training stations plus every grid cell as a permanently unobserved
    /// node; the AOD term then acts on grid edges.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    /// Window length in steps.
    pub window: usize,
    /// Samples per optimizer step.
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub task: Task,
    /// Use the AOD term when the dataset carries an AOD field.
    pub use_aod: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.5,
            epochs: 60,
            window: 24,
            batch_size: 4,
            batches_per_epoch: 8,
            patience: 10,
            seed: 0,
            optimizer: AdamConfig::default(),
            task: Task::Stations,
            use_aod: true,
        }
    }
}

/// Chronological time split and station hold-out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Stations withheld from training and scored at validation/test time.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            val_fraction: 0.2,
            holdout_fraction: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub threshold_km: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            threshold_km: DEFAULT_THRESHOLD_KM,
        }
    }
}

/// Everything a `train` run reads from its configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub loss: LossWeights,
    pub graph: GraphConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.model.met_channels != 2 || self.model.emission_channels != 1 {
            return bad("datasets carry wind (u, v) and one emission channel: set met_channels = 2, emission_channels = 1".into());
        }
        let t = &self.train;
        if !(t.mask_ratio > 0.0 && t.mask_ratio < 1.0) {
            return bad(format!("train.mask_ratio must lie in (0, 1), got {}", t.mask_ratio));
        }
        let rf = self.model.receptive_field();
        if t.window < rf {
            return bad(format!("train.window {} is shorter than the receptive field {rf}", t.window));
        }
        if t.batch_size == 0 || t.batches_per_epoch == 0 {
            return bad("train.batch_size and train.batches_per_epoch must be positive".into());
        }
        let o = &t.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("train.optimizer needs lr > 0, betas in [0, 1) and eps > 0".into());
        }
        let s = &self.split;
        if !(s.train_fraction > 0.0) || !(s.val_fraction >= 0.0) || s.train_fraction + s.val_fraction > 1.0 {
            return bad("split fractions must satisfy train > 0, val >= 0, train + val <= 1".into());
        }
        if !(0.0..1.0).contains(&s.holdout_fraction) {
            return bad(format!("split.holdout_fraction must lie in [0, 1), got {}", s.holdout_fraction));
        }
        if !(self.graph.threshold_km > 0.0) {
            return bad("graph.threshold_km must be positive".into());
        }
        Ok(())
    }
}
