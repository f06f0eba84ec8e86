//! Training objectives.
//!
//! Reductions: mean inside every spectrogram or feature map, mean across Mel
//! resolutions, sum across discriminator branches and feature layers.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Discriminator, DiscriminatorOutput};
use crate::signal::{largest_valid_n_mels, AudioBuffer, MelConfig, MelTransform, Stft, StftConfig};

pub const DEFAULT_HOPS: [usize; 7] = [8, 16, 32, 64, 128, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MelResolution {
    pub hop_size: usize,
    pub win_size: usize,
    pub n_fft: usize,
    pub n_mels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiScaleMelSpec {
    pub resolutions: Vec<MelResolution>,
}

impl MultiScaleMelSpec {
    /// Hops 8..512, window = FFT = 4·hop, `min(80, 10·hop)` Mel filters,
    /// reduced further until no filter is empty at that FFT size.
    pub fn default_for(sample_rate: u32) -> Self {
        let resolutions = DEFAULT_HOPS
            .iter()
            .map(|&hop| {
                let win = 4 * hop;
                MelResolution {
                    hop_size: hop,
                    win_size: win,
                    n_fft: win,
                    n_mels: largest_valid_n_mels(sample_rate, win, (10 * hop).min(80)),
                }
            })
            .collect();
        Self { resolutions }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::Config("multi-scale spec has no resolutions".into()));
        }
        for r in &self.resolutions {
            StftConfig::new(r.n_fft, r.hop_size, r.win_size)?;
        }
        Ok(())
    }

    pub fn largest_window(&self) -> usize {
        self.resolutions.iter().map(|r| r.win_size).max().unwrap_or(0)
    }
}

/// Mean absolute log-Mel difference. `x` is the reference and receives no
/// gradient.
pub fn mel_loss(x: &Tensor, x_hat: &Tensor, mel: &MelTransform) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!(
            "reference {:?} and estimate {:?} differ in shape",
            x.dims(),
            x_hat.dims()
        )));
    }
    let target = mel.forward(&x.detach())?;
    Ok((mel.forward(x_hat)? - target)?.abs()?.mean_all()?)
}

/// Host-side [`mel_loss`] on two buffers.
pub fn mel_loss_audio(x: &AudioBuffer, x_hat: &AudioBuffer, cfg: &StftConfig, mel: &MelConfig) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Shape(format!("{} vs {} samples", x.len(), x_hat.len())));
    }
    let t = MelTransform::new(x.sample_rate(), *cfg, mel, DType::F64, &Device::Cpu)?;
    let l = mel_loss(&x.to_tensor(DType::F64, &Device::Cpu)?, &x_hat.to_tensor(DType::F64, &Device::Cpu)?, &t)?;
    Ok(l.to_scalar()?)
}

#[derive(Debug, Clone)]
pub struct MultiScaleMelLoss {
    spec: MultiScaleMelSpec,
    transforms: Vec<MelTransform>,
}

impl MultiScaleMelLoss {
    pub fn new(spec: MultiScaleMelSpec, sample_rate: u32, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let transforms = spec
            .resolutions
            .iter()
            .map(|r| {
                let stft = StftConfig::new(r.n_fft, r.hop_size, r.win_size)?;
                MelTransform::new(sample_rate, stft, &MelConfig::with_n_mels(r.n_mels), dtype, device)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, transforms })
    }

    pub fn spec(&self) -> &MultiScaleMelSpec {
        &self.spec
    }

    pub fn transforms(&self) -> &[MelTransform] {
        &self.transforms
    }

    /// Mean of [`mel_loss`] over every resolution.
    pub fn forward(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        check_len(x, self.spec.largest_window())?;
        let mut total: Option<Tensor> = None;
        for t in &self.transforms {
            let l = mel_loss(x, x_hat, t)?;
            total = Some(match total {
                Some(acc) => (acc + l)?,
                None => l,
            });
        }
        let total = total.expect("validated non-empty");
        Ok(total.affine(1.0 / self.transforms.len() as f64, 0.0)?)
    }
}

fn check_len(x: &Tensor, needed: usize) -> Result<()> {
    let len = x.dim(candle_core::D::Minus1)?;
    if len < needed {
        return Err(Error::Length(format!(
            "multi-resolution loss needs at least {needed} samples, got {len}"
        )));
    }
    Ok(())
}

/// Spectral convergence plus log-magnitude L1, averaged over resolutions.
#[derive(Debug, Clone)]
pub struct MultiResolutionStftLoss {
    stfts: Vec<Stft>,
    largest_window: usize,
}

impl MultiResolutionStftLoss {
    pub fn new(spec: &MultiScaleMelSpec, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let stfts = spec
            .resolutions
            .iter()
            .map(|r| Stft::new(StftConfig::new(r.n_fft, r.hop_size, r.win_size)?, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stfts,
            largest_window: spec.largest_window(),
        })
    }

    pub fn forward(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        check_len(x, self.largest_window)?;
        let x = x.detach();
        let mut total: Option<Tensor> = None;
        for stft in &self.stfts {
            let m = stft.magnitude(&x)?;
            let m_hat = stft.magnitude(x_hat)?;
            let sc = ((&m - &m_hat)?.sqr()?.sum_all()?.sqrt()? / m.sqr()?.sum_all()?.sqrt()?)?;
            let log_l1 = (m.maximum(crate::signal::LOG_FLOOR)?.log()? - m_hat.maximum(crate::signal::LOG_FLOOR)?.log()?)?
                .abs()?
                .mean_all()?;
            let l = (sc + log_l1)?;
            total = Some(match total {
                Some(acc) => (acc + l)?,
                None => l,
            });
        }
        Ok(total.expect("non-empty").affine(1.0 / self.stfts.len() as f64, 0.0)?)
    }
}

/// Which reconstruction term the turbo stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelVariant {
    /// Seven-resolution Mel loss.
    Multi,
    /// One Mel loss at the conditioning resolution.
    Single,
    /// Multi-resolution STFT loss over the same seven resolutions.
    Mstft,
}

#[derive(Debug, Clone)]
pub enum ReconstructionLoss {
    Multi(MultiScaleMelLoss),
    Single(MelTransform),
    Mstft(MultiResolutionStftLoss),
}

impl ReconstructionLoss {
    pub fn new(
        variant: MelVariant,
        sample_rate: u32,
        stft: StftConfig,
        mel: &MelConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let spec = MultiScaleMelSpec::default_for(sample_rate);
        Ok(match variant {
            MelVariant::Multi => Self::Multi(MultiScaleMelLoss::new(spec, sample_rate, dtype, device)?),
            MelVariant::Single => Self::Single(MelTransform::new(sample_rate, stft, mel, dtype, device)?),
            MelVariant::Mstft => Self::Mstft(MultiResolutionStftLoss::new(&spec, dtype, device)?),
        })
    }

    pub fn forward(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        match self {
            Self::Multi(l) => l.forward(x, x_hat),
            Self::Single(t) => mel_loss(x, x_hat, t),
            Self::Mstft(l) => l.forward(x, x_hat),
        }
    }
}

fn sum_scalars(terms: Vec<Tensor>) -> Result<Tensor> {
    let mut iter = terms.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Shape("no discriminator outputs".into()))?;
    iter.try_fold(first, |acc, t| Ok((acc + t)?))
}

/// LSGAN discriminator objective from precomputed outputs.
pub fn adv_d_loss_from_outputs(real: &[DiscriminatorOutput], fake: &[DiscriminatorOutput]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!(
            "{} real vs {} fake discriminator outputs",
            real.len(),
            fake.len()
        )));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(r, f)| {
            let r_loss = r.score.affine(1.0, -1.0)?.sqr()?.mean_all()?;
            let f_loss = f.score.sqr()?.mean_all()?;
            Ok((r_loss + f_loss)?)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_scalars(terms)
}

/// LSGAN discriminator objective. The generated batch is detached.
pub fn adv_d_loss<D: Discriminator + ?Sized>(d: &D, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    let real = d.discriminate(&x.detach())?;
    let fake = d.discriminate(&x_hat.detach())?;
    adv_d_loss_from_outputs(&real, &fake)
}

pub fn adv_g_loss_from_outputs(fake: &[DiscriminatorOutput]) -> Result<Tensor> {
    let terms = fake
        .iter()
        .map(|f| Ok(f.score.affine(1.0, -1.0)?.sqr()?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    sum_scalars(terms)
}

/// LSGAN generator objective; gradients reach the generator through `x_hat`.
pub fn adv_g_loss<D: Discriminator + ?Sized>(d: &D, x_hat: &Tensor) -> Result<Tensor> {
    adv_g_loss_from_outputs(&d.discriminate(x_hat)?)
}

/// L1 distance between discriminator activations, real side held constant.
pub fn feature_matching_loss(real: &[DiscriminatorOutput], fake: &[DiscriminatorOutput]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!(
            "{} real vs {} fake branches",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::new();
    for (b, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.features.len() != f.features.len() {
            return Err(Error::Shape(format!(
                "branch {b}: {} real vs {} fake feature maps",
                r.features.len(),
                f.features.len()
            )));
        }
        for (fr, ff) in r.features.iter().zip(&f.features) {
            if fr.dims() != ff.dims() {
                return Err(Error::Shape(format!(
                    "branch {b}: feature shapes {:?} vs {:?}",
                    fr.dims(),
                    ff.dims()
                )));
            }
            terms.push((ff - fr.detach())?.abs()?.mean_all()?);
        }
    }
    sum_scalars(terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_mel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fm: 2.0,
            lambda_mel: 45.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fm >= 0.0 && self.lambda_mel >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// `adv + λ_fm·fm + λ_mel·mel` on plain numbers.
    pub fn combine(&self, adv: f64, fm: f64, mel: f64) -> Result<f64> {
        for (name, v) in [("adv_g", adv), ("fm", fm), ("mel", mel)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: name.into(),
                    step: 0,
                });
            }
        }
        Ok(adv + self.lambda_fm * fm + self.lambda_mel * mel)
    }
}

/// Generator objective `adv + λ_fm·fm + λ_mel·mel`. Any non-finite component
/// aborts with its name.
pub fn final_generator_loss(
    adv_g: &Tensor,
    fm: &Tensor,
    mel: &Tensor,
    w: &LossWeights,
    step: usize,
) -> Result<Tensor> {
    for (name, t) in [("adv_g", adv_g), ("fm", fm), ("mel", mel)] {
        let v: f64 = t.to_dtype(DType::F64)?.to_scalar()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                step,
            });
        }
    }
    Ok(((adv_g + fm.affine(w.lambda_fm, 0.0)?)? + mel.affine(w.lambda_mel, 0.0)?)?)
}
