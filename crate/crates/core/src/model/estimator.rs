//! Period-aware vector-field estimator.
//!
//! The waveform and the sample-rate conditioning are folded into
//! `(period × len/period)` grids for every configured period. Each period has
//! its own small U-Net running along the folded time axis (a `(k, 1)` 2-D
//! convolution written as a 1-D convolution over the folded batch). The U-Net
//! levels sit at 1/4, 1/16 and 1/64 of the folded length; only the output head
//! runs at full resolution, where it also sees the noisy waveform again.
//! Branch outputs are unfolded back to waveform order and averaged. A stack of
//! gated dilated convolutions at full resolution, conditioned on the log-Mel
//! frames and the time embedding, refines the mix together with the noisy
//! waveform before the final projection. A time-dependent gain on the noisy
//! waveform is added to the output.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{repeat_last, sigmoid, Conv1d, Linear};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::flow::VectorField;
use crate::signal::{fold_periods, unfold_period_tensor, AudioBuffer, MelSpectrogram};

/// Downsampling factor of each U-Net level along the folded axis.
const LEVEL_STRIDE: usize = 4;
/// Total downsampling inside a branch.
const BRANCH_STRIDE: usize = LEVEL_STRIDE * LEVEL_STRIDE * LEVEL_STRIDE;

/// Fixed affine map of log-Mel conditioning to roughly unit range.
const COND_SHIFT: f64 = 5.0;
const COND_SCALE: f64 = 0.25;

/// Dilations of the full-resolution refinement stack.
const REFINE_DILATIONS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

pub const DEFAULT_PERIODS: [usize; 5] = [2, 3, 5, 7, 11];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelScale {
    pub name: String,
    pub hidden_dim: usize,
    pub final_dim: usize,
}

impl ModelScale {
    pub fn new(name: &str, hidden_dim: usize, final_dim: usize) -> Result<Self> {
        let scale = Self {
            name: name.to_string(),
            hidden_dim,
            final_dim,
        };
        scale.validate()?;
        Ok(scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.final_dim == 0 || self.hidden_dim < self.final_dim {
            return Err(Error::Config(format!(
                "model scale {} needs hidden_dim ({}) >= final_dim ({}) >= 1",
                self.name, self.hidden_dim, self.final_dim
            )));
        }
        if self.hidden_dim < 4 {
            return Err(Error::Config("hidden_dim must be at least 4".into()));
        }
        Ok(())
    }

    /// Desk-scale preset that trains on a CPU in minutes.
    pub fn tiny() -> Self {
        Self::new("tiny", 32, 4).expect("valid preset")
    }

    pub fn small() -> Self {
        Self::new("S", 256, 16).expect("valid preset")
    }

    pub fn base() -> Self {
        Self::new("B", 512, 32).expect("valid preset")
    }

    pub fn large() -> Self {
        Self::new("L", 768, 48).expect("valid preset")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Self::tiny()),
            "s" | "small" => Ok(Self::small()),
            "b" | "base" => Ok(Self::base()),
            "l" | "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown model scale {other:?}"))),
        }
    }

    /// Channel widths of the three U-Net levels, finest first.
    fn channels(&self) -> [usize; 3] {
        let c0 = (self.hidden_dim / 4).max(self.final_dim);
        let c1 = (self.hidden_dim / 2).max(c0);
        [c0, c1, self.hidden_dim]
    }

    /// Width of the refinement stack.
    fn refine_channels(&self) -> usize {
        2 * self.channels()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub scale: ModelScale,
    pub periods: Vec<usize>,
    pub n_mels: usize,
    /// Waveform samples per conditioning frame.
    pub conditioning_hop: usize,
}

impl EstimatorConfig {
    pub fn new(scale: ModelScale, n_mels: usize, conditioning_hop: usize) -> Self {
        Self {
            scale,
            periods: DEFAULT_PERIODS.to_vec(),
            n_mels,
            conditioning_hop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        if self.periods.is_empty() || self.periods.contains(&0) {
            return Err(Error::Config("periods must be non-empty and positive".into()));
        }
        if self.n_mels == 0 || self.conditioning_hop == 0 {
            return Err(Error::Config("n_mels and conditioning_hop must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of `t ∈ [0, 1]`, `(n,)` → `(n, dim)`.
fn time_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    // Frequencies from 1 to ~1000 rad per unit time, geometric.
    let freqs: Vec<f64> = (0..half)
        .map(|i| (i as f64 * 1000f64.ln() / (half.max(2) - 1) as f64).exp())
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[args.sin()?, args.cos()?], 1)?)
}

#[derive(Debug)]
struct PeriodBranch {
    period: usize,
    down0: Conv1d,
    enc0: Conv1d,
    down1: Conv1d,
    enc1: Conv1d,
    down2: Conv1d,
    mid: Conv1d,
    up1: Conv1d,
    dec1: Conv1d,
    up0: Conv1d,
    dec0: Conv1d,
    head: Conv1d,
    time0: Linear,
    time1: Linear,
    time2: Linear,
}

impl PeriodBranch {
    fn new(store: &mut ParamStore, cfg: &EstimatorConfig, period: usize, cond_ch: usize) -> Result<Self> {
        let p = format!("branch.p{period}");
        let [c0, c1, c2] = cfg.scale.channels();
        let h = cfg.scale.hidden_dim;
        let (k, pad) = (5, 2);
        let down_k = 2 * LEVEL_STRIDE;
        let down_pad = (down_k - LEVEL_STRIDE) / 2;
        let down = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            Conv1d::new(store, &format!("{p}.{name}"), i, o, down_k, LEVEL_STRIDE, down_pad)
        };
        let conv = |store: &mut ParamStore, name: &str, i: usize, o: usize| {
            Conv1d::new(store, &format!("{p}.{name}"), i, o, k, 1, pad)
        };
        Ok(Self {
            period,
            down0: down(store, "down0", 1 + cond_ch, c0)?,
            enc0: conv(store, "enc0", c0, c0)?,
            down1: down(store, "down1", c0, c1)?,
            enc1: conv(store, "enc1", c1, c1)?,
            down2: down(store, "down2", c1, c2)?,
            mid: conv(store, "mid", c2, c2)?,
            up1: conv(store, "up1", c2, c1)?,
            dec1: conv(store, "dec1", c1, c1)?,
            up0: conv(store, "up0", c1, c0)?,
            dec0: conv(store, "dec0", c0, c0)?,
            head: conv(store, "head", c0 + 1, cfg.scale.final_dim)?,
            time0: Linear::new(store, &format!("{p}.time0"), h, c0)?,
            time1: Linear::new(store, &format!("{p}.time1"), h, c1)?,
            time2: Linear::new(store, &format!("{p}.time2"), h, c2)?,
        })
    }

    /// `input`: `(n, 1 + cond_ch, len)` with the noisy waveform in channel 0;
    /// `temb`: `(n, hidden)`. Returns `(n, final_dim, len)`.
    fn forward(&self, input: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (n, _, len) = input.dims3()?;
        let p = self.period;
        let block = p * BRANCH_STRIDE;
        let padded_len = len.div_ceil(block) * block;
        let x = input.pad_with_zeros(2, 0, padded_len - len)?;
        let x = fold_periods(&x, p)?;

        // Each item's embedding repeated once per phase, matching the fold order.
        let bias = |lin: &Linear| -> Result<Tensor> {
            let b = lin.forward(temb)?;
            let c = b.dim(1)?;
            Ok(b.unsqueeze(1)?
                .broadcast_as((n, p, c))?
                .contiguous()?
                .reshape((n * p, c, 1))?)
        };

        let h0 = self.down0.forward(&x)?.broadcast_add(&bias(&self.time0)?)?.silu()?;
        let skip0 = self.enc0.forward(&h0)?.silu()?;
        let h1 = self.down1.forward(&skip0)?.broadcast_add(&bias(&self.time1)?)?.silu()?;
        let skip1 = self.enc1.forward(&h1)?.silu()?;
        let h2 = self.down2.forward(&skip1)?.broadcast_add(&bias(&self.time2)?)?.silu()?;
        let h2 = self.mid.forward(&h2)?.silu()?;
        let u1 = (self.up1.forward(&repeat_last(&h2, LEVEL_STRIDE)?)? + skip1)?.silu()?;
        let u1 = self.dec1.forward(&u1)?.silu()?;
        let u0 = (self.up0.forward(&repeat_last(&u1, LEVEL_STRIDE)?)? + skip0)?.silu()?;
        let u0 = self.dec0.forward(&u0)?.silu()?;
        let full = Tensor::cat(&[&repeat_last(&u0, LEVEL_STRIDE)?, &x.narrow(1, 0, 1)?], 1)?;
        let out = self.head.forward(&full)?;
        let out = unfold_period_tensor(&out, p)?;
        Ok(out.narrow(2, 0, len)?)
    }
}

/// Gated residual layer: `tanh(a) · σ(b)` with `[a; b]` the dilated
/// convolution plus conditioning and time projections.
#[derive(Debug)]
struct RefineLayer {
    conv: Conv1d,
    cond: Conv1d,
    time: Linear,
    out: Conv1d,
}

impl RefineLayer {
    fn new(store: &mut ParamStore, name: &str, r: usize, n_mels: usize, h: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::dilated(store, &format!("{name}.conv"), r, 2 * r, 3, 1, dilation, dilation)?,
            cond: Conv1d::new(store, &format!("{name}.cond"), n_mels, 2 * r, 1, 1, 0)?,
            time: Linear::new(store, &format!("{name}.time"), h, 2 * r)?,
            out: Conv1d::new(store, &format!("{name}.out"), r, 2 * r, 1, 1, 0)?,
        })
    }

    /// Returns the residual-updated input and the skip contribution.
    fn forward(&self, x: &Tensor, cond: &Tensor, temb: &Tensor, hop: usize) -> Result<(Tensor, Tensor)> {
        let r = x.dim(1)?;
        let c = repeat_last(&self.cond.forward(cond)?, hop)?;
        let a = self
            .conv
            .forward(x)?
            .add(&c)?
            .broadcast_add(&self.time.forward(temb)?.unsqueeze(2)?)?;
        let z = (a.narrow(1, 0, r)?.tanh()? * sigmoid(&a.narrow(1, r, r)?)?)?;
        let y = self.out.forward(&z)?;
        let res = ((x + y.narrow(1, 0, r)?)? * std::f64::consts::FRAC_1_SQRT_2)?;
        Ok((res, y.narrow(1, r, r)?))
    }
}

/// `G(x_t, c, t)`: predicts the flow velocity for a noisy waveform.
#[derive(Debug)]
pub struct VectorFieldEstimator {
    cfg: EstimatorConfig,
    params: ParamStore,
    time_in: Linear,
    time_out: Linear,
    cond_in: Conv1d,
    branches: Vec<PeriodBranch>,
    refine_in: Conv1d,
    refine: Vec<RefineLayer>,
    out: Conv1d,
    skip_gain: Linear,
}

impl VectorFieldEstimator {
    pub fn new(cfg: EstimatorConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, device, seed);
        let h = cfg.scale.hidden_dim;
        let [c0, ..] = cfg.scale.channels();
        let time_in = Linear::new(&mut store, "time.in", h, h)?;
        let time_out = Linear::new(&mut store, "time.out", h, h)?;
        let cond_in = Conv1d::new(&mut store, "cond.in", cfg.n_mels, c0, 3, 1, 1)?;
        let branches = cfg
            .periods
            .iter()
            .map(|&p| PeriodBranch::new(&mut store, &cfg, p, c0))
            .collect::<Result<Vec<_>>>()?;
        let r = cfg.scale.refine_channels();
        let refine_in = Conv1d::new(&mut store, "refine.in", cfg.scale.final_dim + 1, r, 1, 1, 0)?;
        let refine = REFINE_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| RefineLayer::new(&mut store, &format!("refine.l{i}"), r, cfg.n_mels, h, d))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv1d::new(&mut store, "out", r, 1, 7, 1, 3)?;
        let skip_gain = Linear::new(&mut store, "out.gain", h, 1)?;
        Ok(Self {
            cfg,
            params: store,
            time_in,
            time_out,
            cond_in,
            branches,
            refine_in,
            refine,
            out,
            skip_gain,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// `x_t`: `(n, len)`, `cond`: `(n, n_mels, frames)`, `t`: `(n,)`.
    pub fn forward(&self, x_t: &Tensor, cond: &Tensor, t: &Tensor) -> Result<Tensor> {
        let (n, len) = x_t.dims2()?;
        let (nc, mels, frames) = cond.dims3()?;
        if nc != n || mels != self.cfg.n_mels {
            return Err(Error::Shape(format!(
                "conditioning is {nc}x{mels}x{frames}, expected {n}x{}x_",
                self.cfg.n_mels
            )));
        }
        if frames * self.cfg.conditioning_hop != len {
            return Err(Error::Shape(format!(
                "{frames} conditioning frames × hop {} != {len} samples",
                self.cfg.conditioning_hop
            )));
        }
        if t.dims() != [n] {
            return Err(Error::Shape(format!("time has shape {:?}, expected [{n}]", t.dims())));
        }
        let temb = time_embedding(t, self.cfg.scale.hidden_dim)?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?;
        let cond = cond.affine(COND_SCALE, COND_SHIFT * COND_SCALE)?;
        let c = self.cond_in.forward(&cond)?.silu()?;
        let c = repeat_last(&c, self.cfg.conditioning_hop)?;
        let input = Tensor::cat(&[&x_t.unsqueeze(1)?, &c], 1)?;

        let mut acc: Option<Tensor> = None;
        for branch in &self.branches {
            let y = branch.forward(&input, &temb)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        let mixed = acc.expect("at least one branch").affine(1.0 / self.branches.len() as f64, 0.0)?;
        let mixed = Tensor::cat(&[&mixed, &x_t.unsqueeze(1)?], 1)?;
        let mut h = self.refine_in.forward(&mixed)?;
        let mut skip: Option<Tensor> = None;
        for layer in &self.refine {
            let (next, s) = layer.forward(&h, &cond, &temb, self.cfg.conditioning_hop)?;
            h = next;
            skip = Some(match skip {
                Some(acc) => (acc + s)?,
                None => s,
            });
        }
        let skip = skip.expect("non-empty refinement stack").affine(1.0 / (self.refine.len() as f64).sqrt(), 0.0)?;
        let gain = self.skip_gain.forward(&temb)?;
        Ok((self.out.forward(&skip)?.squeeze(1)? + x_t.broadcast_mul(&gain)?)?)
    }

    /// Single-item convenience wrapper over [`VectorFieldEstimator::forward`].
    pub fn estimate_vector_field(
        &self,
        x_t: &AudioBuffer,
        c: &MelSpectrogram,
        t: f64,
    ) -> Result<AudioBuffer> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("t = {t} outside [0, 1]")));
        }
        let dtype = self.params.dtype();
        let device = self.params.device();
        let x = x_t.to_tensor(dtype, device)?;
        let cond = c.to_tensor(dtype, device)?;
        let t = Tensor::from_vec(vec![t], 1, device)?.to_dtype(dtype)?;
        let v = self.forward(&x, &cond, &t)?;
        AudioBuffer::from_tensor(&v, x_t.sample_rate())
    }
}

impl VectorField for VectorFieldEstimator {
    fn velocity(&self, x_t: &Tensor, cond: &Tensor, t: &Tensor) -> Result<Tensor> {
        self.forward(x_t, cond, t)
    }
}
