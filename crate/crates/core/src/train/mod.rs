//! Two-stage training: flow-matching pretraining and adversarial fine-tuning
//! of the fixed-step generator, with checkpointing and loss logs.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{apply_override, resolve_layers, DataSection, Init, LossConfig, ModelSection, OptimConfig, Stage, TrainConfig};
pub use optim::{AdamW, UpdateStats};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{cfm_loss_with, fixed_step_generate, standard_normal, CfmDraw, ProbabilityPath};
use crate::losses::{
    adv_d_loss, adv_g_loss_from_outputs, feature_matching_loss, final_generator_loss, ReconstructionLoss,
};
use crate::model::{Discriminator, DiscriminatorEnsemble, EstimatorConfig, VectorFieldEstimator};
use crate::signal::{MelConfig, StftConfig};

/// Precision of all training arithmetic.
pub const TRAIN_DTYPE: DType = DType::F32;
/// Decay of the running loss averages.
pub const RUNNING_DECAY: f64 = 0.98;
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: Stage,
    /// Loss components of this step by name (`cfm`, or `d`, `adv_g`, `fm`,
    /// `mel`, `g`).
    pub losses: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub clipped: bool,
    pub wall_clock_s: f64,
}

/// Everything that evolves during training.
#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub mel: MelConfig,
    pub generator: VectorFieldEstimator,
    pub g_opt: AdamW,
    pub discriminator: Option<DiscriminatorEnsemble>,
    pub d_opt: Option<AdamW>,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub running: BTreeMap<String, f64>,
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn prefixed(prefix: &str, arrays: BTreeMap<String, crate::model::HostArray>) -> impl Iterator<Item = (String, crate::model::HostArray)> + '_ {
    arrays.into_iter().map(move |(k, v)| (format!("{prefix}/{k}"), v))
}

impl TrainState {
    /// Randomly initialized networks and zeroed optimizer moments.
    fn fresh(
        config: TrainConfig,
        sample_rate: u32,
        (stft, mel): (StftConfig, MelConfig),
        estimator: EstimatorConfig,
        device: &Device,
    ) -> Result<Self> {
        let generator = VectorFieldEstimator::new(estimator, TRAIN_DTYPE, device, config.seed)?;
        let g_opt = AdamW::new(config.optim.clone(), generator.params())?;
        let (discriminator, d_opt) = if config.stage == Stage::Turbo && config.loss.use_gan {
            let d = DiscriminatorEnsemble::new(
                config.discriminator.clone(),
                sample_rate,
                TRAIN_DTYPE,
                device,
                config.seed.wrapping_add(1),
            )?;
            let opt = AdamW::new(config.optim.clone(), d.params())?;
            (Some(d), Some(opt))
        } else {
            (None, None)
        };
        Ok(Self {
            rng: data_rng(config.seed),
            config,
            sample_rate,
            stft,
            mel,
            generator,
            g_opt,
            discriminator,
            d_opt,
            step: 0,
            running: BTreeMap::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        tensors.extend(prefixed("g", self.generator.params().to_host()?));
        tensors.extend(prefixed("g_opt", self.g_opt.state_arrays()?));
        if let (Some(d), Some(opt)) = (&self.discriminator, &self.d_opt) {
            tensors.extend(prefixed("d", d.params().to_host()?));
            tensors.extend(prefixed("d_opt", opt.state_arrays()?));
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                stage: self.config.stage,
                step: self.step,
                sample_rate: self.sample_rate,
                stft: self.stft,
                mel: self.mel,
                estimator: self.generator.config().clone(),
                discriminator: self.discriminator.as_ref().map(|d| d.config().clone()),
                config: self.config.clone(),
                rng: RngState::capture(&self.rng),
                g_opt_step: self.g_opt.step_count(),
                d_opt_step: self.d_opt.as_ref().map(AdamW::step_count),
                running: self.running.clone(),
            },
            tensors,
        })
    }

    /// Exact reconstruction of a saved state.
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let meta = &ck.meta;
        let mut state = Self::fresh(
            meta.config.clone(),
            meta.sample_rate,
            (meta.stft, meta.mel),
            meta.estimator.clone(),
            device,
        )?;
        if state.discriminator.as_ref().map(|d| d.config()) != meta.discriminator.as_ref() {
            return Err(Error::Checkpoint("discriminator configuration does not match its config".into()));
        }
        state.generator.params().load_host(&ck.group("g"))?;
        state.g_opt.load_state(meta.g_opt_step, &ck.group("g_opt"))?;
        if let (Some(d), Some(opt)) = (&state.discriminator, &mut state.d_opt) {
            d.params().load_host(&ck.group("d"))?;
            opt.load_state(meta.d_opt_step.unwrap_or(0), &ck.group("d_opt"))?;
        }
        state.step = meta.step;
        state.rng = meta.rng.restore()?;
        state.running = meta.running.clone();
        Ok(state)
    }
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    state.to_checkpoint()?.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<TrainState> {
    TrainState::from_checkpoint(&Checkpoint::load(path)?, device)
}

/// Rebuilds only the generator of a checkpoint, for inference.
pub fn load_generator(ck: &Checkpoint, dtype: DType, device: &Device) -> Result<VectorFieldEstimator> {
    let g = VectorFieldEstimator::new(ck.meta.estimator.clone(), dtype, device, 0)?;
    g.params().load_host(&ck.group("g"))?;
    Ok(g)
}

#[derive(Debug)]
struct Output {
    dir: PathBuf,
    log: File,
}

/// Drives one training run over a dataset split.
#[derive(Debug)]
pub struct Trainer {
    state: TrainState,
    data: Dataset,
    path: ProbabilityPath,
    recon: Option<ReconstructionLoss>,
    device: Device,
    output: Option<Output>,
    log: Vec<LogRecord>,
}

impl Trainer {
    /// Starts a run. A turbo run with `init = "from_checkpoint"` takes its
    /// generator from `teacher`, or from the `teacher` path of the config
    /// when none is passed; the discriminator always starts fresh.
    pub fn new(config: TrainConfig, mut data: Dataset, teacher: Option<&Checkpoint>) -> Result<Self> {
        config.validate()?;
        if config.data.segment_length > 0 {
            data.set_segment_length(config.data.segment_length)?;
        }
        let spec = data.spec();
        let estimator = config.model.estimator(spec.mel.n_mels, spec.stft.hop_size)?;
        let device = Device::Cpu;
        let state = TrainState::fresh(config, spec.sample_rate, (spec.stft, spec.mel), estimator, &device)?;
        if state.config.stage == Stage::Turbo && state.config.init == Init::FromCheckpoint {
            let loaded;
            let teacher = match teacher {
                Some(t) => t,
                None => {
                    let path = state.config.teacher.as_deref().unwrap_or_default();
                    loaded = Checkpoint::load(path)?;
                    &loaded
                }
            };
            let same_features = (teacher.meta.sample_rate, teacher.meta.stft, teacher.meta.mel)
                == (state.sample_rate, state.stft, state.mel);
            if teacher.meta.estimator != *state.generator.config() || !same_features {
                return Err(Error::Checkpoint(format!(
                    "teacher is incompatible: estimator {:?} at {} Hz, run needs {:?} at {} Hz \
                     with matching Mel settings",
                    teacher.meta.estimator,
                    teacher.meta.sample_rate,
                    state.generator.config(),
                    state.sample_rate
                )));
            }
            state.generator.params().load_host(&teacher.group("g"))?;
        }
        Self::from_state(state, data)
    }

    /// Continues a saved run on `data`.
    pub fn resume(ck: &Checkpoint, mut data: Dataset) -> Result<Self> {
        let state = TrainState::from_checkpoint(ck, &Device::Cpu)?;
        if state.config.data.segment_length > 0 {
            data.set_segment_length(state.config.data.segment_length)?;
        }
        let spec = data.spec();
        if (spec.sample_rate, spec.stft, spec.mel) != (state.sample_rate, state.stft, state.mel) {
            return Err(Error::Checkpoint(
                "checkpoint was trained on different sample rate or Mel settings".into(),
            ));
        }
        Self::from_state(state, data)
    }

    fn from_state(state: TrainState, data: Dataset) -> Result<Self> {
        let device = Device::Cpu;
        let cfg = &state.config;
        let spec = data.spec();
        let recon = match cfg.stage {
            Stage::Fm => None,
            Stage::Turbo => Some(ReconstructionLoss::new(
                cfg.loss.mel_variant,
                spec.sample_rate,
                spec.stft,
                &spec.mel,
                TRAIN_DTYPE,
                &device,
            )?),
        };
        if let Some(d) = &state.discriminator {
            if spec.segment_length < d.min_len() {
                return Err(Error::Config(format!(
                    "segment length {} is shorter than the discriminators need ({})",
                    spec.segment_length,
                    d.min_len()
                )));
            }
        }
        Ok(Self {
            path: ProbabilityPath::new(cfg.sigma_min)?,
            state,
            data,
            recon,
            device,
            output: None,
            log: Vec::new(),
        })
    }

    /// Writes the resolved config to `dir` and appends log records there;
    /// checkpoints are also written to `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let snapshot = dir.join(CONFIG_SNAPSHOT);
        std::fs::write(&snapshot, self.state.config.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
        let log_path = dir.join(LOG_FILE);
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        self.output = Some(Output { dir, log });
        Ok(self)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn generator(&self) -> &VectorFieldEstimator {
        &self.state.generator
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Records of the steps run by this trainer.
    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.state.to_checkpoint()
    }

    /// Runs until the configured step count is reached.
    pub fn run(&mut self) -> Result<Checkpoint> {
        while (self.state.step as usize) < self.state.config.steps {
            self.step()?;
        }
        let ck = self.checkpoint()?;
        if let Some(out) = &self.output {
            ck.save(out.dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(ck)
    }

    /// One optimizer step (one D and one G update in the adversarial stage).
    pub fn step(&mut self) -> Result<LogRecord> {
        let start = Instant::now();
        let (losses, stats) = match self.state.config.stage {
            Stage::Fm => self.fm_step(),
            Stage::Turbo => self.turbo_step(),
        }
        .inspect_err(|e| {
            if matches!(e, Error::NonFinite { .. }) {
                self.write_diagnostic();
            }
        })?;
        self.state.step += 1;
        for (k, &v) in &losses {
            let avg = self.state.running.entry(k.clone()).or_insert(v);
            *avg = RUNNING_DECAY * *avg + (1.0 - RUNNING_DECAY) * v;
        }
        let record = LogRecord {
            step: self.state.step,
            stage: self.state.config.stage,
            losses,
            grad_norm: stats.grad_norm,
            clipped: stats.clipped,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        if let Some(out) = &mut self.output {
            let line = serde_json::to_string(&record).map_err(|e| Error::Checkpoint(e.to_string()))?;
            writeln!(out.log, "{line}").map_err(|e| Error::io(out.dir.join(LOG_FILE), e))?;
            let every = self.state.config.checkpoint_every;
            if every > 0 && self.state.step % every as u64 == 0 {
                self.state
                    .to_checkpoint()?
                    .save(out.dir.join(format!("step_{:06}.ckpt", self.state.step)))?;
            }
        }
        self.log.push(record.clone());
        Ok(record)
    }

    fn write_diagnostic(&self) {
        if let Some(out) = &self.output {
            let path = out.dir.join(format!("diagnostic_step_{:06}.ckpt", self.state.step + 1));
            if let Ok(ck) = self.state.to_checkpoint() {
                let _ = ck.save(path);
            }
        }
    }

    fn fm_step(&mut self) -> Result<(BTreeMap<String, f64>, UpdateStats)> {
        let b = self.state.config.batch_size;
        let (x, c) = self.data.sample_batch(b, &mut self.state.rng, TRAIN_DTYPE, &self.device)?;
        let len = x.dim(1)?;
        let draw = CfmDraw::sample(b, len, &mut self.state.rng, TRAIN_DTYPE, &self.device)?;
        let loss = cfm_loss_with(&self.state.generator, &self.path, &x, &c, &draw)?;
        let value = finite("cfm", &loss, self.state.step as usize + 1)?;
        let grads = loss.backward()?;
        let stats = self.state.g_opt.update(self.state.generator.params(), &grads)?;
        Ok((BTreeMap::from([("cfm".to_string(), value)]), stats))
    }

    fn turbo_step(&mut self) -> Result<(BTreeMap<String, f64>, UpdateStats)> {
        let cfg = &self.state.config;
        let (b, n_steps, weights) = (cfg.batch_size, cfg.n_steps, cfg.loss.weights());
        let (x, c) = self.data.sample_batch(b, &mut self.state.rng, TRAIN_DTYPE, &self.device)?;
        let len = x.dim(1)?;
        let x0 = standard_normal(b, len, &mut self.state.rng, TRAIN_DTYPE, &self.device)?;
        let x_hat = fixed_step_generate(&self.state.generator, &x0, &c, n_steps)?;
        let recon = self.recon.as_ref().expect("turbo stage builds its reconstruction loss");
        let step = self.state.step as usize + 1;
        let mut losses = BTreeMap::new();

        let g_loss = match (&self.state.discriminator, &mut self.state.d_opt) {
            (Some(d), Some(d_opt)) => {
                let d_loss = adv_d_loss(d, &x, &x_hat.detach())?;
                losses.insert("d".to_string(), finite("adv_d", &d_loss, step)?);
                d_opt.update(d.params(), &d_loss.backward()?)?;

                let real = d.discriminate(&x)?;
                let fake = d.discriminate(&x_hat)?;
                let adv = adv_g_loss_from_outputs(&fake)?;
                let fm = feature_matching_loss(&real, &fake)?;
                let mel = recon.forward(&x, &x_hat)?;
                let total = final_generator_loss(&adv, &fm, &mel, &weights, step)?;
                losses.insert("adv_g".to_string(), finite("adv_g", &adv, step)?);
                losses.insert("fm".to_string(), finite("fm", &fm, step)?);
                losses.insert("mel".to_string(), finite("mel", &mel, step)?);
                total
            }
            _ => {
                let mel = recon.forward(&x, &x_hat)?;
                losses.insert("mel".to_string(), finite("mel", &mel, step)?);
                mel.affine(weights.lambda_mel, 0.0)?
            }
        };
        losses.insert("g".to_string(), finite("g", &g_loss, step)?);
        let grads = g_loss.backward()?;
        let stats = self.state.g_opt.update(self.state.generator.params(), &grads)?;
        Ok((losses, stats))
    }
}

/// Scalar value of a loss term, or a halt naming the term.
fn finite(name: &str, t: &Tensor, step: usize) -> Result<f64> {
    let v: f64 = t.to_dtype(DType::F64)?.to_scalar()?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            component: name.into(),
            step,
        });
    }
    Ok(v)
}

/// Stage-1 flow-matching pretraining.
pub fn pretrain_fm(config: TrainConfig, data: Dataset, out: Option<&Path>) -> Result<Checkpoint> {
    if config.stage != Stage::Fm {
        return Err(Error::Config("pretraining needs stage = \"fm\"".into()));
    }
    let mut trainer = Trainer::new(config, data, None)?;
    if let Some(dir) = out {
        trainer = trainer.with_output(dir)?;
    }
    trainer.run()
}

/// Stage-2 adversarial fine-tuning of the fixed-step generator.
pub fn finetune_turbo(
    config: TrainConfig,
    data: Dataset,
    teacher: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<Checkpoint> {
    if config.stage != Stage::Turbo {
        return Err(Error::Config("fine-tuning needs stage = \"turbo\"".into()));
    }
    let mut trainer = Trainer::new(config, data, teacher)?;
    if let Some(dir) = out {
        trainer = trainer.with_output(dir)?;
    }
    trainer.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_corpus, DatasetSpec, Split, ToyCorpusOptions};

    fn corpus(dir: &Path) -> DatasetSpec {
        let opts = ToyCorpusOptions {
            n_items: 4,
            duration: 0.5,
            segment_length: 4096,
            ..ToyCorpusOptions::default()
        };
        make_toy_corpus(dir, &opts).unwrap()
    }

    fn train_split(spec: &DatasetSpec) -> Dataset {
        Dataset::open(spec, Split::Train).unwrap()
    }

    fn fm_config(steps: usize) -> TrainConfig {
        let mut cfg = TrainConfig::for_stage(Stage::Fm);
        cfg.steps = steps;
        cfg.batch_size = 1;
        cfg.data.segment_length = 2048;
        cfg
    }

    fn turbo_config(use_gan: bool) -> TrainConfig {
        let mut cfg = TrainConfig::for_stage(Stage::Turbo);
        cfg.steps = 1;
        cfg.batch_size = 1;
        cfg.init = Init::Scratch;
        cfg.loss.use_gan = use_gan;
        cfg
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let spec = corpus(dir.path());
        let cfg = fm_config(0);
        let ck = pretrain_fm(cfg.clone(), train_split(&spec), None).unwrap();
        let fresh = VectorFieldEstimator::new(ck.meta.estimator.clone(), TRAIN_DTYPE, &Device::Cpu, cfg.seed).unwrap();
        assert_eq!(ck.group("g"), fresh.params().to_host().unwrap());
        assert_eq!(ck.meta.step, 0);
    }

    #[test]
    fn output_dir_gets_snapshot_log_and_final_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let spec = corpus(&dir.path().join("corpus"));
        let out = dir.path().join("run");
        pretrain_fm(fm_config(2), train_split(&spec), Some(&out)).unwrap();
        let snapshot = std::fs::read_to_string(out.join(CONFIG_SNAPSHOT)).unwrap();
        let reparsed = TrainConfig::resolve(Stage::Fm, Some(&snapshot), &[]).unwrap();
        assert_eq!(reparsed.steps, 2);
        let log = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
        let records: Vec<LogRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2]);
        assert!(records[0].losses["cfm"].is_finite());
        let ck = Checkpoint::load(out.join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(ck.meta.step, 2);
    }

    #[test]
    fn turbo_without_gan_optimizes_weighted_mel_only() {
        let dir = tempfile::tempdir().unwrap();
        let spec = corpus(dir.path());
        let mut trainer = Trainer::new(turbo_config(false), train_split(&spec), None).unwrap();
        assert!(trainer.state().discriminator.is_none());
        let rec = trainer.step().unwrap();
        assert_eq!(rec.losses.keys().collect::<Vec<_>>(), vec!["g", "mel"]);
        assert!((rec.losses["g"] - 45.0 * rec.losses["mel"]).abs() <= 1e-4 * rec.losses["g"]);
    }

    #[test]
    fn teacher_initializes_generator_and_discriminator_starts_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let spec = corpus(dir.path());
        let teacher = pretrain_fm(fm_config(1), train_split(&spec), None).unwrap();
        let mut cfg = turbo_config(true);
        cfg.init = Init::FromCheckpoint;
        cfg.teacher = Some("unused.ckpt".into());
        cfg.seed = 9;
        let trainer = Trainer::new(cfg.clone(), train_split(&spec), Some(&teacher)).unwrap();
        assert_eq!(trainer.generator().params().to_host().unwrap(), teacher.group("g"));
        let d = trainer.state().discriminator.as_ref().unwrap();
        let fresh = DiscriminatorEnsemble::new(cfg.discriminator.clone(), spec.sample_rate, TRAIN_DTYPE, &Device::Cpu, 10).unwrap();
        assert_eq!(d.params().to_host().unwrap(), fresh.params().to_host().unwrap());
        assert_eq!(trainer.state().step, 0);
    }

    #[test]
    fn incompatible_teacher_is_a_structural_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = corpus(dir.path());
        let mut fm = fm_config(0);
        fm.model.hidden_dim = Some(16);
        let teacher = pretrain_fm(fm, train_split(&spec), None).unwrap();
        let mut cfg = turbo_config(false);
        cfg.init = Init::FromCheckpoint;
        cfg.teacher = Some("unused.ckpt".into());
        let err = Trainer::new(cfg, train_split(&spec), Some(&teacher)).unwrap_err();
        assert_eq!(err.class(), "checkpoint", "{err}");
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let spec = corpus(dir.path());
        let mut full = Trainer::new(fm_config(4), train_split(&spec), None).unwrap();
        full.run().unwrap();
        let mut first = Trainer::new(fm_config(2), train_split(&spec), None).unwrap();
        let ck = first.run().unwrap();
        let bytes = ck.to_bytes().unwrap();
        let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
        ck.meta.config.steps = 4;
        let mut resumed = Trainer::resume(&ck, train_split(&spec)).unwrap();
        resumed.run().unwrap();
        let tail: Vec<_> = full.log()[2..].iter().map(|r| r.losses.clone()).collect();
        let again: Vec<_> = resumed.log().iter().map(|r| r.losses.clone()).collect();
        assert_eq!(tail, again);
        assert_eq!(
            full.checkpoint().unwrap().tensors,
            resumed.checkpoint().unwrap().tensors
        );
    }
}
