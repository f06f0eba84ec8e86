//! Audio transforms used by the losses, the discriminators and the metrics.
//!
//! Every transform exists in two flavours: a tensor path (`Stft`,
//! `MelTransform`, `CqtTransform`) that is differentiable through candle's
//! autograd and works on batches shaped `(batch, samples)`, and host-side
//! helpers (`stft`, `mel_spectrogram`, `cqt`) that take an [`AudioBuffer`]
//! and return plain row-major spectrograms computed in `f64`.
//!
//! Framing follows the usual vocoder alignment: the signal is reflect-padded
//! by `(n_fft - hop) / 2` on each side so that `frames * hop == len` whenever
//! the hop divides the length.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::spectral::FftMagnitude;

/// Clamp applied before every log compression.
pub const LOG_FLOOR: f64 = 1e-5;

/// Added to the power spectrum before the square root so the magnitude has a
/// finite derivative at zero.
pub(crate) const MAGNITUDE_EPS: f64 = 1e-12;

/// Host dtype for the `AudioBuffer` helpers.
const HOST_DTYPE: DType = DType::F64;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("audio buffer is empty".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sample {i} is not finite ({})",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// `(1, len)` tensor of the samples.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.samples, (1, self.samples.len()), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Inverse of [`AudioBuffer::to_tensor`]; accepts `(len,)` or `(1, len)`.
    pub fn from_tensor(t: &Tensor, sample_rate: u32) -> Result<Self> {
        let samples = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        Self::new(samples, sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop_size: usize,
    pub win_size: usize,
    pub window: Window,
}

impl StftConfig {
    pub fn new(n_fft: usize, hop_size: usize, win_size: usize) -> Result<Self> {
        let cfg = Self {
            n_fft,
            hop_size,
            win_size,
            window: Window::Hann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_window(mut self, window: Window) -> Self {
        self.window = window;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_size == 0 || self.hop_size > self.win_size || self.win_size > self.n_fft {
            return Err(Error::Config(format!(
                "stft needs 0 < hop ({}) <= win ({}) <= n_fft ({})",
                self.hop_size, self.win_size, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Reflect padding applied on the (left, right) of the signal.
    pub fn padding(&self) -> (usize, usize) {
        let total = self.n_fft - self.hop_size;
        (total / 2, total - total / 2)
    }

    /// Number of analysis frames for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        let (l, r) = self.padding();
        (len + l + r - self.n_fft) / self.hop_size + 1
    }

    /// Smallest signal the reflect padding can handle.
    pub fn min_len(&self) -> usize {
        let (l, r) = self.padding();
        l.max(r) + 1
    }
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            hop_size: 256,
            win_size: 1024,
            window: Window::Hann,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelConfig {
    pub n_mels: usize,
    pub f_min: f64,
    /// `None` means Nyquist.
    pub f_max: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            f_min: 0.0,
            f_max: None,
            log_floor: LOG_FLOOR,
        }
    }
}

impl MelConfig {
    pub fn with_n_mels(n_mels: usize) -> Self {
        Self {
            n_mels,
            ..Self::default()
        }
    }

    pub fn f_max_for(&self, sample_rate: u32) -> f64 {
        self.f_max.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = self.f_max_for(sample_rate);
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.f_min >= 0.0 && self.f_min < f_max) {
            return Err(Error::Config(format!(
                "mel range needs 0 <= f_min ({}) < f_max ({f_max})",
                self.f_min
            )));
        }
        if f_max > nyquist {
            return Err(Error::Config(format!(
                "mel f_max {f_max} exceeds Nyquist {nyquist}"
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    // Slaney scale: linear below 1 kHz, logarithmic above.
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        m * F_SP
    }
}

/// Slaney-normalized triangular Mel filterbank, `n_mels` rows by
/// `n_fft / 2 + 1` columns, row-major.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, mel: &MelConfig) -> Result<Vec<Vec<f64>>> {
    mel.validate(sample_rate)?;
    let n_bins = n_fft / 2 + 1;
    let f_max = mel.f_max_for(sample_rate);
    let (m_lo, m_hi) = (hz_to_mel(mel.f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..mel.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (mel.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;

    let mut rows = Vec::with_capacity(mel.n_mels);
    for i in 0..mel.n_mels {
        let (lo, mid, hi) = (edges[i], edges[i + 1], edges[i + 2]);
        let enorm = 2.0 / (hi - lo);
        let row: Vec<f64> = (0..n_bins)
            .map(|k| {
                let f = bin_hz(k);
                let rise = (f - lo) / (mid - lo);
                let fall = (hi - f) / (hi - mid);
                rise.min(fall).max(0.0) * enorm
            })
            .collect();
        if !row.iter().any(|&w| w > 0.0) {
            return Err(Error::Config(format!(
                "mel filter {i} of {} covers no FFT bin at n_fft={n_fft}",
                mel.n_mels
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Largest filter count `<= cap` whose filterbank has no empty row.
pub fn largest_valid_n_mels(sample_rate: u32, n_fft: usize, cap: usize) -> usize {
    (1..=cap)
        .rev()
        .find(|&n| mel_filterbank(sample_rate, n_fft, &MelConfig::with_n_mels(n)).is_ok())
        .unwrap_or(1)
}

/// Reflect-pads the last dimension of a `(batch, len)` tensor.
pub fn reflect_pad(x: &Tensor, left: usize, right: usize) -> Result<Tensor> {
    let len = x.dim(D::Minus1)?;
    if left >= len || right >= len {
        return Err(Error::Length(format!(
            "reflect padding ({left}, {right}) needs a signal longer than {len} samples"
        )));
    }
    if left == 0 && right == 0 {
        return Ok(x.clone());
    }
    let idx: Vec<u32> = (0..left)
        .map(|i| (left - i) as u32)
        .chain((0..len).map(|i| i as u32))
        .chain((0..right).map(|i| (len - 2 - i) as u32))
        .collect();
    let idx = Tensor::from_vec(idx, left + len + right, x.device())?;
    Ok(x.index_select(&idx, D::Minus1)?)
}

/// Differentiable STFT as a strided convolution with a windowed DFT basis.
#[derive(Debug, Clone)]
pub struct Stft {
    cfg: StftConfig,
    basis: Tensor,
    fft: FftMagnitude,
}

impl Stft {
    pub fn new(cfg: StftConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let k = cfg.n_bins();
        let win = cfg.window.coefficients(cfg.win_size);
        let offset = (n - cfg.win_size) / 2;
        let mut w = vec![0f64; n];
        w[offset..offset + cfg.win_size].copy_from_slice(&win);
        let mut basis = vec![0f64; 2 * k * n];
        for bin in 0..k {
            for t in 0..n {
                // Reduce the phase index mod n to keep the argument small.
                let phase = 2.0 * PI * ((bin * t) % n) as f64 / n as f64;
                basis[bin * n + t] = w[t] * phase.cos();
                basis[(k + bin) * n + t] = -w[t] * phase.sin();
            }
        }
        let basis = Tensor::from_vec(basis, (2 * k, 1, n), device)?.to_dtype(dtype)?;
        let fft = FftMagnitude::new(n, cfg.hop_size, w, MAGNITUDE_EPS);
        Ok(Self { cfg, basis, fft })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// `(batch, len)` → real and imaginary parts, each `(batch, bins, frames)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let padded = self.pad(x)?.unsqueeze(1)?;
        let out = padded.conv1d(&self.basis, 0, self.cfg.hop_size, 1, 1)?;
        let k = self.cfg.n_bins();
        Ok((out.narrow(1, 0, k)?, out.narrow(1, k, k)?))
    }

    /// Smoothed magnitude `sqrt(re² + im² + eps)`, `(batch, bins, frames)`.
    pub fn magnitude(&self, x: &Tensor) -> Result<Tensor> {
        let padded = self.pad(x)?.contiguous()?;
        Ok(padded.apply_op1(self.fft.clone())?)
    }

    fn pad(&self, x: &Tensor) -> Result<Tensor> {
        let len = x.dim(D::Minus1)?;
        if len < self.cfg.min_len() {
            return Err(Error::Length(format!(
                "stft with n_fft={} hop={} needs at least {} samples, got {len}",
                self.cfg.n_fft,
                self.cfg.hop_size,
                self.cfg.min_len()
            )));
        }
        let (l, r) = self.cfg.padding();
        reflect_pad(x, l, r)
    }
}

/// Differentiable log-Mel spectrogram.
#[derive(Debug, Clone)]
pub struct MelTransform {
    stft: Stft,
    filterbank: Tensor,
    log_floor: f64,
    n_mels: usize,
}

impl MelTransform {
    pub fn new(
        sample_rate: u32,
        stft: StftConfig,
        mel: &MelConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let rows = mel_filterbank(sample_rate, stft.n_fft, mel)?;
        let n_bins = stft.n_bins();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let filterbank = Tensor::from_vec(flat, (mel.n_mels, n_bins), device)?.to_dtype(dtype)?;
        Ok(Self {
            stft: Stft::new(stft, dtype, device)?,
            filterbank,
            log_floor: mel.log_floor,
            n_mels: mel.n_mels,
        })
    }

    pub fn stft_config(&self) -> &StftConfig {
        self.stft.config()
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// `(batch, len)` → `(batch, n_mels, frames)` of `ln(max(fb·|X|, floor))`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mag = self.stft.magnitude(x)?;
        let mel = self.filterbank.broadcast_matmul(&mag)?;
        Ok(mel.maximum(self.log_floor)?.log()?)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CqtConfig {
    pub f_min: f64,
    pub octaves: usize,
    pub bins_per_octave: usize,
    pub hop_size: usize,
    /// Hop multipliers, one spectrogram per entry.
    pub scales: Vec<usize>,
}

impl Default for CqtConfig {
    fn default() -> Self {
        Self {
            f_min: 64.0,
            octaves: 6,
            bins_per_octave: 12,
            hop_size: 256,
            scales: vec![1, 2, 4],
        }
    }
}

impl CqtConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.bins_per_octave == 0 || self.octaves == 0 {
            return Err(Error::Config(
                "cqt needs at least one octave and one bin per octave".into(),
            ));
        }
        if self.hop_size == 0 || self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config("cqt hop and scales must be positive".into()));
        }
        if !(self.f_min > 0.0) {
            return Err(Error::Config("cqt f_min must be positive".into()));
        }
        let top = self.f_min * 2f64.powi(self.octaves as i32);
        let nyquist = sample_rate as f64 / 2.0;
        if top > nyquist {
            return Err(Error::Config(format!(
                "cqt range reaches {top} Hz, above Nyquist {nyquist}"
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.octaves * self.bins_per_octave
    }

    pub fn center_frequency(&self, bin: usize) -> f64 {
        self.f_min * 2f64.powf(bin as f64 / self.bins_per_octave as f64)
    }

    pub fn quality_factor(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }
}

/// Complex CQT kernel bank: for every bin a Hann-windowed complex exponential
/// of `ceil(Q·sr/f_k)` taps, normalized by its length and centered in a
/// common support of `support` taps.
#[derive(Debug, Clone)]
pub struct CqtKernelBank {
    pub n_bins: usize,
    pub support: usize,
    /// `n_bins` rows of `support` taps each.
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl CqtKernelBank {
    pub fn new(cfg: &CqtConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let q = cfg.quality_factor();
        let sr = sample_rate as f64;
        let lengths: Vec<usize> = (0..cfg.n_bins())
            .map(|k| (q * sr / cfg.center_frequency(k)).ceil() as usize)
            .collect();
        let support = lengths.iter().copied().max().unwrap_or(1) | 1;
        let mut re = Vec::with_capacity(lengths.len());
        let mut im = Vec::with_capacity(lengths.len());
        for (k, &n_k) in lengths.iter().enumerate() {
            let f_k = cfg.center_frequency(k);
            let offset = (support - n_k) / 2;
            let mut row_re = vec![0f64; support];
            let mut row_im = vec![0f64; support];
            for n in 0..n_k {
                let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / n_k as f64).cos();
                let phase = 2.0 * PI * f_k * (n as f64 - n_k as f64 / 2.0) / sr;
                row_re[offset + n] = w * phase.cos() / n_k as f64;
                row_im[offset + n] = -w * phase.sin() / n_k as f64;
            }
            re.push(row_re);
            im.push(row_im);
        }
        Ok(Self {
            n_bins: lengths.len(),
            support,
            re,
            im,
        })
    }
}

/// Differentiable log-magnitude CQT at one hop size.
#[derive(Debug, Clone)]
pub struct CqtTransform {
    weights: Tensor,
    n_bins: usize,
    support: usize,
    hop: usize,
}

impl CqtTransform {
    pub fn new(
        cfg: &CqtConfig,
        sample_rate: u32,
        scale: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let bank = CqtKernelBank::new(cfg, sample_rate)?;
        let flat: Vec<f64> = bank
            .re
            .iter()
            .chain(bank.im.iter())
            .flat_map(|row| row.iter().copied())
            .collect();
        let weights =
            Tensor::from_vec(flat, (2 * bank.n_bins, 1, bank.support), device)?.to_dtype(dtype)?;
        Ok(Self {
            weights,
            n_bins: bank.n_bins,
            support: bank.support,
            hop: cfg.hop_size * scale,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn frame_count(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// `(batch, len)` → `(batch, bins, frames)` log-magnitudes. The signal is
    /// zero-padded by half the kernel support on both sides, so frame `j` is
    /// centered on sample `j·hop`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let half = self.support / 2;
        let padded = x.pad_with_zeros(D::Minus1, half, half)?.unsqueeze(1)?;
        let out = padded.conv1d(&self.weights, 0, self.hop, 1, 1)?;
        let re = out.narrow(1, 0, self.n_bins)?;
        let im = out.narrow(1, self.n_bins, self.n_bins)?;
        let mag = (re.sqr()? + im.sqr()?)?.affine(1.0, MAGNITUDE_EPS)?.sqrt()?;
        Ok(mag.maximum(LOG_FLOOR)?.log()?)
    }
}

/// Row-major `(rows, cols)` real matrix, the host-side spectrogram layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Grid {
    fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        Ok(Self {
            rows,
            cols,
            values: t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub config: StftConfig,
    pub re: Grid,
    pub im: Grid,
}

impl ComplexSpectrogram {
    pub fn bins(&self) -> usize {
        self.re.rows
    }

    pub fn frames(&self) -> usize {
        self.re.cols
    }

    /// Exact magnitude, `bins × frames`.
    pub fn magnitude(&self) -> Grid {
        let values = self
            .re
            .values
            .iter()
            .zip(&self.im.values)
            .map(|(r, i)| r.hypot(*i))
            .collect();
        Grid {
            rows: self.re.rows,
            cols: self.re.cols,
            values,
        }
    }
}

/// Log-Mel spectrogram, `n_mels × frames`, the generator's conditioning.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub frames: usize,
    pub hop_size: usize,
    pub values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, frames: usize, hop_size: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_mels * frames {
            return Err(Error::Shape(format!(
                "{} mel values for a {n_mels}x{frames} spectrogram",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("mel spectrogram has non-finite values".into()));
        }
        Ok(Self {
            n_mels,
            frames,
            hop_size,
            values,
        })
    }

    /// `(1, n_mels, frames)`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.values, (1, self.n_mels, self.frames), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor, hop_size: usize) -> Result<Self> {
        let t = match t.rank() {
            3 => t.squeeze(0)?,
            _ => t.clone(),
        };
        let (n_mels, frames) = t.dims2()?;
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        Self::new(n_mels, frames, hop_size, values)
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.frames + frame]
    }

    /// Number of waveform samples this conditioning describes.
    pub fn sample_len(&self) -> usize {
        self.frames * self.hop_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CqtSpectrogram {
    pub hop_size: usize,
    /// Log-magnitudes, `bins × frames`.
    pub values: Grid,
}

impl CqtSpectrogram {
    pub fn bins(&self) -> usize {
        self.values.rows
    }

    pub fn frames(&self) -> usize {
        self.values.cols
    }
}

pub fn stft(audio: &AudioBuffer, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let stft = Stft::new(*cfg, HOST_DTYPE, &Device::Cpu)?;
    let x = audio.to_tensor(HOST_DTYPE, &Device::Cpu)?;
    let (re, im) = stft.forward(&x)?;
    Ok(ComplexSpectrogram {
        config: *cfg,
        re: Grid::from_tensor(&re.squeeze(0)?)?,
        im: Grid::from_tensor(&im.squeeze(0)?)?,
    })
}

pub fn mel_spectrogram(
    audio: &AudioBuffer,
    cfg: &StftConfig,
    mel: &MelConfig,
) -> Result<MelSpectrogram> {
    let transform = MelTransform::new(audio.sample_rate(), *cfg, mel, HOST_DTYPE, &Device::Cpu)?;
    mel_spectrogram_with(&transform, audio)
}

/// Same as [`mel_spectrogram`] with a prebuilt transform.
pub fn mel_spectrogram_with(transform: &MelTransform, audio: &AudioBuffer) -> Result<MelSpectrogram> {
    let x = audio.to_tensor(HOST_DTYPE, &Device::Cpu)?;
    let m = transform.forward(&x)?;
    MelSpectrogram::from_tensor(&m, transform.stft_config().hop_size)
}

/// One log-magnitude CQT per configured scale.
pub fn cqt(audio: &AudioBuffer, cfg: &CqtConfig) -> Result<Vec<CqtSpectrogram>> {
    let x = audio.to_tensor(HOST_DTYPE, &Device::Cpu)?;
    cfg.scales
        .iter()
        .map(|&scale| {
            let t = CqtTransform::new(cfg, audio.sample_rate(), scale, HOST_DTYPE, &Device::Cpu)?;
            Ok(CqtSpectrogram {
                hop_size: t.hop(),
                values: Grid::from_tensor(&t.forward(&x)?.squeeze(0)?)?,
            })
        })
        .collect()
}

/// Folds a waveform into `period` rows: sample `i` lands at
/// `(i % period, i / period)`. The tail is zero-padded to a multiple of
/// `period`.
pub fn reshape_periods(samples: &[f32], period: usize) -> Result<Vec<Vec<f32>>> {
    if period == 0 {
        return Err(Error::InvalidInput("period must be at least 1".into()));
    }
    let cols = samples.len().div_ceil(period);
    let mut grid = vec![vec![0f32; cols]; period];
    for (i, &s) in samples.iter().enumerate() {
        grid[i % period][i / period] = s;
    }
    Ok(grid)
}

/// Inverse of [`reshape_periods`]; returns the padded sequence.
pub fn unfold_periods(grid: &[Vec<f32>]) -> Vec<f32> {
    let period = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    (0..period * cols)
        .map(|i| grid[i % period][i / period])
        .collect()
}

/// Tensor fold used by the period branches: `(n, c, len)` with `len` a
/// multiple of `period` → `(n·period, c, len/period)`, one row per phase.
pub fn fold_periods(x: &Tensor, period: usize) -> Result<Tensor> {
    let (n, c, len) = x.dims3()?;
    if len % period != 0 {
        return Err(Error::Shape(format!(
            "length {len} is not a multiple of period {period}"
        )));
    }
    let cols = len / period;
    Ok(x.reshape((n, c, cols, period))?
        .permute((0, 3, 1, 2))?
        .reshape((n * period, c, cols))?)
}

/// Inverse of [`fold_periods`].
pub fn unfold_period_tensor(x: &Tensor, period: usize) -> Result<Tensor> {
    let (np, c, cols) = x.dims3()?;
    let n = np / period;
    Ok(x.reshape((n, period, c, cols))?
        .permute((0, 2, 3, 1))?
        .reshape((n, c, cols * period))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    /// Direct DFT of every frame with the same padding rule.
    fn dft_frames(x: &[f64], cfg: &StftConfig) -> Vec<Vec<(f64, f64)>> {
        let (l, r) = cfg.padding();
        let n = x.len();
        let mut padded = Vec::with_capacity(n + l + r);
        padded.extend((0..l).map(|i| x[l - i]));
        padded.extend_from_slice(x);
        padded.extend((0..r).map(|i| x[n - 2 - i]));
        let win = cfg.window.coefficients(cfg.win_size);
        let off = (cfg.n_fft - cfg.win_size) / 2;
        let frames = (padded.len() - cfg.n_fft) / cfg.hop_size + 1;
        (0..frames)
            .map(|f| {
                (0..cfg.n_bins())
                    .map(|k| {
                        let mut acc = (0.0, 0.0);
                        for t in 0..cfg.win_size {
                            let s = padded[f * cfg.hop_size + off + t] * win[t];
                            let ph = -2.0 * PI * (k * (t + off)) as f64 / cfg.n_fft as f64;
                            acc.0 += s * ph.cos();
                            acc.1 += s * ph.sin();
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_audio_has_zero_magnitude() {
        let a = AudioBuffer::zeros(2048, 22050).unwrap();
        let s = stft(&a, &StftConfig::default()).unwrap();
        assert!(s.magnitude().values.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(matches!(
            AudioBuffer::new(vec![0.0, f32::NAN], 16000),
            Err(Error::InvalidInput(_))
        ));
        assert!(AudioBuffer::new(vec![], 16000).is_err());
        assert!(AudioBuffer::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn stft_config_invariants() {
        assert!(StftConfig::new(1024, 256, 1024).is_ok());
        assert!(StftConfig::new(1024, 0, 1024).is_err());
        assert!(StftConfig::new(1024, 512, 256).is_err());
        assert!(StftConfig::new(512, 128, 1024).is_err());
    }

    #[test]
    fn sine_on_bin_center_peaks_at_that_bin() {
        let n_fft = 64;
        let k = 5;
        let cfg = StftConfig::new(n_fft, n_fft, n_fft)
            .unwrap()
            .with_window(Window::Rectangular);
        let x: Vec<f32> = (0..n_fft * 8)
            .map(|i| (2.0 * PI * (k * i) as f64 / n_fft as f64).sin() as f32)
            .collect();
        let audio = AudioBuffer::new(x.clone(), 8000).unwrap();
        let mag = stft(&audio, &cfg).unwrap().magnitude();
        let oracle = dft_frames(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), &cfg);
        // Interior frames only; no overlap means the edge frames are identical.
        for f in 1..mag.cols - 1 {
            let col: Vec<f64> = (0..mag.rows).map(|b| mag.get(b, f)).collect();
            let peak = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(peak, k, "frame {f}");
            let oracle_peak = oracle[f]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1 .0.hypot(a.1 .1).total_cmp(&b.1 .0.hypot(b.1 .1)))
                .unwrap()
                .0;
            assert_eq!(oracle_peak, k);
        }
    }

    #[test]
    fn stft_energy_matches_direct_dft() {
        let x = noise(64, 7);
        let cfg = StftConfig::new(16, 4, 16).unwrap();
        let s = stft(&AudioBuffer::new(x.clone(), 8000).unwrap(), &cfg).unwrap();
        let ours: f64 = s.magnitude().values.iter().map(|m| m * m).sum();
        let oracle = dft_frames(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), &cfg);
        assert_eq!(oracle.len(), s.frames());
        let expected: f64 = oracle.iter().flatten().map(|(r, i)| r * r + i * i).sum();
        assert!(((ours - expected) / expected).abs() < 1e-6, "{ours} vs {expected}");
    }

    #[test]
    fn stft_is_linear_in_magnitude() {
        let x = noise(1024, 3);
        let cfg = StftConfig::new(256, 64, 256).unwrap();
        let a = stft(&AudioBuffer::new(x.clone(), 8000).unwrap(), &cfg).unwrap().magnitude();
        let scaled: Vec<f32> = x.iter().map(|v| v * 2.5).collect();
        let b = stft(&AudioBuffer::new(scaled, 8000).unwrap(), &cfg).unwrap().magnitude();
        let err: f64 = a.values.iter().zip(&b.values).map(|(ma, mb)| (2.5 * ma - mb).powi(2)).sum();
        let norm: f64 = b.values.iter().map(|v| v * v).sum();
        assert!((err / norm).sqrt() < 1e-6);
    }

    #[test]
    fn frame_count_formula_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let win = rng.random_range(4usize..256);
            let hop = rng.random_range(1..=win);
            let n_fft = win + rng.random_range(0usize..64);
            let cfg = StftConfig::new(n_fft, hop, win).unwrap();
            let len = cfg.min_len() + rng.random_range(0usize..2000);
            let x = Tensor::from_vec(noise(len, 1).iter().map(|&v| v as f64).collect(), (1, len), &Device::Cpu)
                .unwrap();
            let (re, _) = Stft::new(cfg, DType::F64, &Device::Cpu).unwrap().forward(&x).unwrap();
            let (l, r) = cfg.padding();
            let expected = (len + l + r - n_fft) / hop + 1;
            assert_eq!(re.dim(2).unwrap(), expected);
            assert_eq!(cfg.frame_count(len), expected);
        }
    }

    #[test]
    fn frames_times_hop_equals_length() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frame_count(32768), 128);
        assert_eq!(cfg.frame_count(8192) * cfg.hop_size, 8192);
    }

    #[test]
    fn mel_of_zero_audio_sits_at_the_floor() {
        let a = AudioBuffer::zeros(4096, 22050).unwrap();
        let m = mel_spectrogram(&a, &StftConfig::default(), &MelConfig::default()).unwrap();
        let floor = (LOG_FLOOR as f32).ln();
        assert!(m.values.iter().all(|&v| (v - floor).abs() < 1e-6));
    }

    #[test]
    fn mel_shape_for_standard_vocoder_settings() {
        let len = 22050;
        let a = AudioBuffer::new(noise(len, 5), 22050).unwrap();
        let cfg = StftConfig::default();
        let m = mel_spectrogram(&a, &cfg, &MelConfig::default()).unwrap();
        assert_eq!(m.n_mels, 80);
        assert_eq!(m.frames, cfg.frame_count(len));
        assert_eq!(m.frames, len / 256);
        let again = mel_spectrogram(&a, &cfg, &MelConfig::default()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn mel_rejects_f_max_above_nyquist() {
        let a = AudioBuffer::zeros(4096, 16000).unwrap();
        let mel = MelConfig {
            f_max: Some(9000.0),
            ..MelConfig::default()
        };
        assert!(matches!(
            mel_spectrogram(&a, &StftConfig::default(), &mel),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mel_filterbank_covers_interior_bins() {
        for (sr, n_fft, n_mels) in [(22050, 1024, 80), (24000, 1024, 100), (16000, 512, 40)] {
            let fb = mel_filterbank(sr, n_fft, &MelConfig::with_n_mels(n_mels)).unwrap();
            assert!(fb.iter().flatten().all(|&w| w >= 0.0));
            for k in 1..n_fft / 2 {
                assert!(fb.iter().any(|row| row[k] > 0.0), "bin {k} uncovered");
            }
        }
    }

    #[test]
    fn too_many_mels_for_a_tiny_fft_is_a_config_error() {
        assert!(mel_filterbank(22050, 32, &MelConfig::with_n_mels(80)).is_err());
        let n = largest_valid_n_mels(22050, 32, 80);
        assert!(n >= 1 && n < 17);
        assert!(mel_filterbank(22050, 32, &MelConfig::with_n_mels(n)).is_ok());
    }

    #[test]
    fn mel_gradient_matches_finite_differences() {
        let len = 512;
        let x: Vec<f64> = noise(len, 9).iter().map(|&v| v as f64).collect();
        let cfg = StftConfig::new(128, 32, 128).unwrap();
        let mel = MelTransform::new(8000, cfg, &MelConfig::with_n_mels(20), DType::F64, &Device::Cpu)
            .unwrap();
        let w = Tensor::from_vec(noise(20 * cfg.frame_count(len), 2), (1, 20, cfg.frame_count(len)), &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let loss = |v: &[f64]| -> f64 {
            let t = Tensor::from_slice(v, (1, len), &Device::Cpu).unwrap();
            (mel.forward(&t).unwrap() * &w).unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let var = candle_core::Var::from_slice(&x, (1, len), &Device::Cpu).unwrap();
        let out = (mel.forward(var.as_tensor()).unwrap() * &w).unwrap().sum_all().unwrap();
        let grads = out.backward().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in [0, 1, 17, 100, 255, 256, 400, 510, 511] {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "sample {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn reshape_periods_definitional_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(
            reshape_periods(&x, 2).unwrap(),
            vec![vec![1.0, 3.0, 5.0], vec![2.0, 4.0, 6.0]]
        );
        assert_eq!(reshape_periods(&x, 1).unwrap(), vec![x.to_vec()]);
        let odd = [1.0, 2.0, 3.0, 4.0, 5.0];
        let grid = reshape_periods(&odd, 2).unwrap();
        assert_eq!(grid[1][2], 0.0);
        assert_eq!(&unfold_periods(&grid)[..5], &odd);
        assert!(reshape_periods(&x, 0).is_err());
    }

    #[test]
    fn tensor_fold_agrees_with_host_fold() {
        let x = noise(30, 4);
        let t = Tensor::from_slice(&x, (1, 1, 30), &Device::Cpu).unwrap();
        for p in [1, 2, 3, 5] {
            let folded = fold_periods(&t, p).unwrap();
            let host = reshape_periods(&x, p).unwrap();
            let rows: Vec<Vec<f32>> = folded.squeeze(1).unwrap().to_vec2().unwrap();
            assert_eq!(rows, host);
            let back = unfold_period_tensor(&folded, p).unwrap();
            assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x);
        }
    }

    /// Direct inner products with the kernel bank around one frame center.
    fn cqt_oracle(x: &[f64], bank: &CqtKernelBank, center: usize) -> Vec<f64> {
        let half = bank.support / 2;
        (0..bank.n_bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..bank.support {
                    let idx = center as isize + n as isize - half as isize;
                    if idx >= 0 && (idx as usize) < x.len() {
                        re += x[idx as usize] * bank.re[k][n];
                        im += x[idx as usize] * bank.im[k][n];
                    }
                }
                re.hypot(im)
            })
            .collect()
    }

    #[test]
    fn cqt_peaks_at_the_tone_bin() {
        let sr = 16000;
        let cfg = CqtConfig {
            f_min: 100.0,
            octaves: 4,
            bins_per_octave: 12,
            hop_size: 256,
            scales: vec![1],
        };
        let tone = cfg.f_min * 2.0;
        let len = 8192;
        let x: Vec<f64> = (0..len)
            .map(|i| (2.0 * PI * tone * i as f64 / sr as f64).sin())
            .collect();
        let audio = AudioBuffer::new(x.iter().map(|&v| v as f32).collect(), sr).unwrap();
        let spec = &cqt(&audio, &cfg).unwrap()[0];
        let target = (0..cfg.n_bins())
            .min_by(|&a, &b| {
                (cfg.center_frequency(a) - tone)
                    .abs()
                    .total_cmp(&(cfg.center_frequency(b) - tone).abs())
            })
            .unwrap();
        assert_eq!(target, 12);
        let bank = CqtKernelBank::new(&cfg, sr).unwrap();
        let frame = spec.frames() / 2;
        let stored: Vec<f64> = audio.samples().iter().map(|&v| v as f64).collect();
        let oracle = cqt_oracle(&stored, &bank, frame * cfg.hop_size);
        let oracle_peak = (0..oracle.len()).max_by(|&a, &b| oracle[a].total_cmp(&oracle[b])).unwrap();
        assert_eq!(oracle_peak, target);
        let col: Vec<f64> = (0..spec.bins()).map(|b| spec.values.get(b, frame)).collect();
        let peak = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(peak, target);
        for (k, o) in oracle.iter().enumerate() {
            let ours = spec.values.get(k, frame).exp();
            let expected = (o * o + MAGNITUDE_EPS).sqrt().max(LOG_FLOOR);
            assert!((ours - expected).abs() < 1e-9 * expected.max(1.0), "bin {k}: {ours} vs {expected}");
        }
    }

    #[test]
    fn cqt_zero_audio_and_scale_shapes() {
        let cfg = CqtConfig {
            scales: vec![1, 2],
            ..CqtConfig::default()
        };
        let a = AudioBuffer::zeros(4096, 22050).unwrap();
        let specs = cqt(&a, &cfg).unwrap();
        assert_eq!(specs.len(), 2);
        let floor = LOG_FLOOR.ln();
        for s in &specs {
            assert_eq!(s.bins(), cfg.n_bins());
            assert!(s.values.values.iter().all(|&v| (v - floor).abs() < 1e-9));
        }
        assert_ne!(specs[0].frames(), specs[1].frames());
    }

    #[test]
    fn cqt_rejects_range_above_nyquist() {
        let cfg = CqtConfig {
            f_min: 1000.0,
            octaves: 5,
            ..CqtConfig::default()
        };
        assert!(matches!(cfg.validate(22050), Err(Error::Config(_))));
    }
}
