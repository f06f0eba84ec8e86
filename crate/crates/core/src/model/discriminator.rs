//! Multi-period and multi-scale sub-band CQT discriminators.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, Conv1d, Conv2d};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::signal::{fold_periods, CqtConfig, CqtTransform};

const LRELU_SLOPE: f64 = 0.1;

/// Score map and intermediate activations of one discriminator branch.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub score: Tensor,
    pub features: Vec<Tensor>,
}

impl DiscriminatorOutput {
    pub fn detach(&self) -> Self {
        Self {
            score: self.score.detach(),
            features: self.features.iter().map(Tensor::detach).collect(),
        }
    }
}

/// Anything that scores a batch of waveforms `(n, len)` with one output per
/// branch, in a fixed branch order.
pub trait Discriminator {
    fn discriminate(&self, x: &Tensor) -> Result<Vec<DiscriminatorOutput>>;
    fn branch_count(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// Channel widths of the strided MPD stack.
    pub mpd_channels: Vec<usize>,
    pub cqt: CqtConfig,
    /// Channels of the CQT sub-band stems and the shared stack.
    pub cqtd_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: super::estimator::DEFAULT_PERIODS.to_vec(),
            mpd_channels: vec![8, 16, 32],
            cqt: CqtConfig::default(),
            cqtd_channels: 8,
        }
    }
}

#[derive(Debug)]
struct PeriodDiscriminator {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodDiscriminator {
    fn new(store: &mut ParamStore, period: usize, channels: &[usize]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv1d::new(store, &format!("mpd.p{period}.conv{i}"), c_in, c, 5, 3, 2)?);
            c_in = c;
        }
        convs.push(Conv1d::new(
            store,
            &format!("mpd.p{period}.conv{}", channels.len()),
            c_in,
            c_in,
            5,
            1,
            2,
        )?);
        let post = Conv1d::new(store, &format!("mpd.p{period}.post"), c_in, 1, 3, 1, 1)?;
        Ok(Self {
            period,
            convs,
            post,
        })
    }

    fn min_len(&self) -> usize {
        self.period
    }

    fn forward(&self, x: &Tensor) -> Result<DiscriminatorOutput> {
        let (_, len) = x.dims2()?;
        let p = self.period;
        let padded = x.pad_with_zeros(1, 0, len.div_ceil(p) * p - len)?;
        let mut h = fold_periods(&padded.unsqueeze(1)?, p)?;
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, LRELU_SLOPE)?;
            features.push(h.clone());
        }
        let score = self.post.forward(&h)?;
        features.push(score.clone());
        Ok(DiscriminatorOutput { score, features })
    }
}

#[derive(Debug)]
struct CqtDiscriminator {
    transform: CqtTransform,
    bins_per_octave: usize,
    stems: Vec<Conv2d>,
    stack: Vec<Conv2d>,
    post: Conv2d,
}

impl CqtDiscriminator {
    fn new(
        store: &mut ParamStore,
        cfg: &CqtConfig,
        sample_rate: u32,
        scale: usize,
        channels: usize,
    ) -> Result<Self> {
        let transform = CqtTransform::new(cfg, sample_rate, scale, store.dtype(), &store.device().clone())?;
        let name = format!("cqtd.s{scale}");
        let stems = (0..cfg.octaves)
            .map(|o| Conv2d::new(store, &format!("{name}.band{o}"), 1, channels, 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let stack = vec![
            Conv2d::new(store, &format!("{name}.conv0"), channels, 2 * channels, 3, 1, 1)?,
            Conv2d::new(store, &format!("{name}.conv1"), 2 * channels, 2 * channels, 3, 2, 2)?,
        ];
        let post = Conv2d::new(store, &format!("{name}.post"), 2 * channels, 1, 3, 1, 1)?;
        Ok(Self {
            transform,
            bins_per_octave: cfg.bins_per_octave,
            stems,
            stack,
            post,
        })
    }

    fn min_len(&self) -> usize {
        2 * self.transform.hop()
    }

    fn forward(&self, x: &Tensor) -> Result<DiscriminatorOutput> {
        let spec = self.transform.forward(x)?.unsqueeze(1)?;
        let bands = self
            .stems
            .iter()
            .enumerate()
            .map(|(o, stem)| {
                let band = spec.narrow(2, o * self.bins_per_octave, self.bins_per_octave)?;
                leaky_relu(&stem.forward(&band)?, LRELU_SLOPE)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut h = Tensor::cat(&bands, 2)?;
        let mut features = vec![h.clone()];
        for conv in &self.stack {
            h = leaky_relu(&conv.forward(&h)?, LRELU_SLOPE)?;
            features.push(h.clone());
        }
        let score = self.post.forward(&h)?;
        features.push(score.clone());
        Ok(DiscriminatorOutput { score, features })
    }
}

/// MPD branches (one per period) followed by CQT branches (one per scale).
#[derive(Debug)]
pub struct DiscriminatorEnsemble {
    cfg: DiscriminatorConfig,
    params: ParamStore,
    mpd: Vec<PeriodDiscriminator>,
    cqtd: Vec<CqtDiscriminator>,
}

impl DiscriminatorEnsemble {
    pub fn new(
        cfg: DiscriminatorConfig,
        sample_rate: u32,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<Self> {
        cfg.cqt.validate(sample_rate)?;
        if cfg.periods.is_empty() || cfg.periods.contains(&0) || cfg.mpd_channels.is_empty() {
            return Err(Error::Config("discriminator periods and channels must be non-empty".into()));
        }
        let mut store = ParamStore::new(dtype, device, seed);
        let mpd = cfg
            .periods
            .iter()
            .map(|&p| PeriodDiscriminator::new(&mut store, p, &cfg.mpd_channels))
            .collect::<Result<Vec<_>>>()?;
        let cqtd = cfg
            .cqt
            .scales
            .iter()
            .map(|&s| CqtDiscriminator::new(&mut store, &cfg.cqt, sample_rate, s, cfg.cqtd_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            params: store,
            mpd,
            cqtd,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Minimum input length accepted by every branch.
    pub fn min_len(&self) -> usize {
        self.mpd
            .iter()
            .map(PeriodDiscriminator::min_len)
            .chain(self.cqtd.iter().map(CqtDiscriminator::min_len))
            .max()
            .unwrap_or(1)
    }
}

impl Discriminator for DiscriminatorEnsemble {
    fn discriminate(&self, x: &Tensor) -> Result<Vec<DiscriminatorOutput>> {
        let (_, len) = x.dims2()?;
        if len < self.min_len() {
            return Err(Error::Length(format!(
                "discriminators need at least {} samples, got {len}",
                self.min_len()
            )));
        }
        let mut outs = Vec::with_capacity(self.branch_count());
        for d in &self.mpd {
            outs.push(d.forward(x)?);
        }
        for d in &self.cqtd {
            outs.push(d.forward(x)?);
        }
        Ok(outs)
    }

    fn branch_count(&self) -> usize {
        self.mpd.len() + self.cqtd.len()
    }
}
