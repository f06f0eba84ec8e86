//! Training configuration: TOML file plus dotted `key=value` overrides.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ProbabilityPath;
use crate::losses::{LossWeights, MelVariant};
use crate::model::{DiscriminatorConfig, EstimatorConfig, ModelScale, DEFAULT_PERIODS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Conditional flow matching pretraining.
    Fm,
    /// Adversarial fine-tuning of the fixed-step generator.
    Turbo,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Fm => "fm",
            Stage::Turbo => "turbo",
        }
    }
}

/// Where turbo training takes its generator weights from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    FromCheckpoint,
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl OptimConfig {
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Fm => Self {
                lr: 2e-4,
                betas: [0.8, 0.99],
                weight_decay: 0.01,
                eps: 1e-8,
                grad_clip: 0.0,
            },
            Stage::Turbo => Self {
                lr: 2e-5,
                betas: [0.8, 0.99],
                weight_decay: 0.01,
                eps: 1e-8,
                grad_clip: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [b1, b2] = self.betas;
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0
            && self.grad_clip >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub use_gan: bool,
    pub mel_variant: MelVariant,
    pub lambda_fm: f64,
    pub lambda_mel: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            use_gan: true,
            mel_variant: MelVariant::Multi,
            lambda_fm: w.lambda_fm,
            lambda_mel: w.lambda_mel,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_fm: self.lambda_fm,
            lambda_mel: self.lambda_mel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Preset name; `hidden_dim` / `final_dim` default to the preset's.
    pub scale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_dim: Option<usize>,
    pub periods: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            scale: "tiny".into(),
            hidden_dim: None,
            final_dim: None,
            periods: DEFAULT_PERIODS.to_vec(),
        }
    }
}

impl ModelSection {
    pub fn model_scale(&self) -> Result<ModelScale> {
        let preset = ModelScale::preset(&self.scale)?;
        ModelScale::new(
            &preset.name,
            self.hidden_dim.unwrap_or(preset.hidden_dim),
            self.final_dim.unwrap_or(preset.final_dim),
        )
    }

    pub fn estimator(&self, n_mels: usize, conditioning_hop: usize) -> Result<EstimatorConfig> {
        let mut cfg = EstimatorConfig::new(self.model_scale()?, n_mels, conditioning_hop);
        cfg.periods = self.periods.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Corpus directory holding `corpus.toml`.
    pub corpus: String,
    /// Training crop length in samples; 0 keeps the corpus default.
    pub segment_length: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            segment_length: 0,
        }
    }
}

/// Every hyperparameter of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Total optimizer steps of the run (resumed runs continue up to it).
    pub steps: usize,
    /// Global batch size.
    pub batch_size: usize,
    /// Euler steps of the turbo generator (2 or 4).
    pub n_steps: usize,
    pub seed: u64,
    pub init: Init,
    /// Teacher checkpoint for `init = "from_checkpoint"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
    pub sigma_min: f64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub model: ModelSection,
    pub discriminator: DiscriminatorConfig,
    pub data: DataSection,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            steps: match stage {
                Stage::Fm => 2000,
                Stage::Turbo => 1000,
            },
            batch_size: 4,
            n_steps: 4,
            seed: 0,
            init: Init::FromCheckpoint,
            teacher: None,
            sigma_min: ProbabilityPath::default().sigma_min,
            checkpoint_every: 0,
            optim: OptimConfig::for_stage(stage),
            loss: LossConfig::default(),
            model: ModelSection::default(),
            discriminator: DiscriminatorConfig::default(),
            data: DataSection::default(),
        }
    }

    /// Stage defaults, then the TOML `file` contents, then each `key=value`
    /// override in order (last writer wins).
    pub fn resolve(stage: Stage, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let cfg = resolve_layers(&Self::for_stage(stage), file, overrides)?;
        if cfg.stage != stage {
            return Err(Error::Config(format!(
                "config declares stage {:?} but this command runs {:?}",
                cfg.stage.as_str(),
                stage.as_str()
            )));
        }
        cfg.validate()?;
        Ok(cfg.with_explicit_scale()?)
    }

    /// Fills preset-derived model widths so the snapshot has no hidden
    /// defaults.
    fn with_explicit_scale(mut self) -> Result<Self> {
        let scale = self.model.model_scale()?;
        self.model.hidden_dim = Some(scale.hidden_dim);
        self.model.final_dim = Some(scale.final_dim);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !matches!(self.n_steps, 2 | 4) {
            return Err(Error::Config(format!("n_steps must be 2 or 4, got {}", self.n_steps)));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Config("sigma_min must lie in (0, 1)".into()));
        }
        self.optim.validate()?;
        self.loss.weights().validate()?;
        self.model.model_scale()?;
        if self.stage == Stage::Turbo && self.init == Init::FromCheckpoint && self.teacher.as_deref().unwrap_or("").is_empty() {
            return Err(Error::Config(
                "turbo training needs a teacher checkpoint or init = \"scratch\"".into(),
            ));
        }
        Ok(())
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `defaults`, then the TOML `file` contents, then each `key=value`
/// override in order.
pub fn resolve_layers<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&str>,
    overrides: &[String],
) -> Result<T> {
    let mut value = toml::Table::try_from(defaults).map_err(|e| Error::Config(format!("cannot encode defaults: {e}")))?;
    if let Some(text) = file {
        let layer: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, layer);
    }
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    toml::Value::Table(value)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {ov:?} has an empty key segment")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {ov:?}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ovs(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn stage_defaults_follow_the_recipe() {
        let fm = TrainConfig::resolve(Stage::Fm, None, &[]).unwrap();
        assert_eq!(fm.optim.lr, 2e-4);
        assert_eq!(fm.optim.betas, [0.8, 0.99]);
        let turbo = TrainConfig::resolve(Stage::Turbo, None, &ovs(&["teacher=t.ckpt"])).unwrap();
        assert_eq!(turbo.optim.lr, 2e-5);
        assert_eq!(turbo.optim.grad_clip, 1.0);
        assert_eq!((turbo.loss.lambda_fm, turbo.loss.lambda_mel), (2.0, 45.0));
        assert!(turbo.loss.use_gan);
    }

    #[test]
    fn overrides_apply_last_writer_wins() {
        let file = "steps = 10\n[loss]\nuse_gan = true\n";
        let cfg = TrainConfig::resolve(
            Stage::Turbo,
            Some(file),
            &ovs(&["loss.use_gan=false", "init=scratch", "steps=20", "steps=30", "loss.mel_variant=mstft"]),
        )
        .unwrap();
        assert!(!cfg.loss.use_gan);
        assert_eq!(cfg.init, Init::Scratch);
        assert_eq!(cfg.steps, 30);
        assert_eq!(cfg.loss.mel_variant, MelVariant::Mstft);
    }

    #[test]
    fn turbo_needs_teacher_or_explicit_scratch() {
        let err = TrainConfig::resolve(Stage::Turbo, None, &[]).unwrap_err();
        assert_eq!(err.class(), "config");
        assert!(TrainConfig::resolve(Stage::Turbo, None, &ovs(&["init=scratch"])).is_ok());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for bad in [&["loss.use_gann=false"][..], &["n_steps=3"], &["optim.lr=-1"], &["stage=turbo"], &["nokey"]] {
            let err = TrainConfig::resolve(Stage::Fm, None, &ovs(bad)).unwrap_err();
            assert_eq!(err.class(), "config", "{bad:?}");
        }
    }

    #[test]
    fn snapshot_reproduces_the_config() {
        let cfg = TrainConfig::resolve(Stage::Fm, None, &ovs(&["model.scale=s", "seed=7"])).unwrap();
        assert_eq!(cfg.model.hidden_dim, Some(256));
        let text = cfg.to_toml().unwrap();
        let again = TrainConfig::resolve(Stage::Fm, Some(&text), &[]).unwrap();
        assert_eq!(again, cfg);
    }
}
