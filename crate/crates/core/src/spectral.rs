//! FFT-backed STFT magnitude as a candle custom op.
//!
//! Forward and backward both run one FFT per frame, which is far cheaper than
//! the dense DFT basis for the large windows of the multi-resolution losses.
//! The input is an already padded `(batch, len)` signal; frame `t` starts at
//! sample `t * hop`.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub(crate) struct FftMagnitude {
    n_fft: usize,
    hop: usize,
    window: Arc<Vec<f64>>,
    eps: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftMagnitude {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftMagnitude")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .finish()
    }
}

impl FftMagnitude {
    /// `window` has `n_fft` taps (already centered and zero-filled).
    pub(crate) fn new(n_fft: usize, hop: usize, window: Vec<f64>, eps: f64) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: Arc::new(window),
            eps,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn frames(&self, len: usize) -> usize {
        if len < self.n_fft {
            0
        } else {
            (len - self.n_fft) / self.hop + 1
        }
    }

    /// Spectrum of every frame, `(batch, frames, bins)` flattened.
    fn spectra(&self, x: &[f64], batch: usize, len: usize) -> Vec<Complex64> {
        let (n, k, frames) = (self.n_fft, self.bins(), self.frames(len));
        let mut out = Vec::with_capacity(batch * frames * k);
        let mut buf = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); self.forward.get_inplace_scratch_len()];
        for b in 0..batch {
            let row = &x[b * len..(b + 1) * len];
            for t in 0..frames {
                let start = t * self.hop;
                for (j, c) in buf.iter_mut().enumerate() {
                    *c = Complex64::new(self.window[j] * row[start + j], 0.0);
                }
                self.forward.process_with_scratch(&mut buf, &mut scratch);
                out.extend_from_slice(&buf[..k]);
            }
        }
        out
    }

    /// Gradient of `sum(grad · |X|)` with respect to the padded input.
    pub(crate) fn backward_host(&self, x: &[f64], grad: &[f64], batch: usize, len: usize) -> Vec<f64> {
        let (n, k, frames) = (self.n_fft, self.bins(), self.frames(len));
        let spectra = self.spectra(x, batch, len);
        let mut dx = vec![0f64; batch * len];
        let mut buf = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); self.inverse.get_inplace_scratch_len()];
        for b in 0..batch {
            for t in 0..frames {
                let spec = &spectra[(b * frames + t) * k..(b * frames + t + 1) * k];
                buf.fill(Complex64::default());
                for (bin, z) in spec.iter().enumerate() {
                    let mag = (z.norm_sqr() + self.eps).sqrt();
                    let g = grad[(b * k + bin) * frames + t];
                    buf[bin] = z * (g / mag);
                }
                // d|X_k|/dx_j = w_j Re(X_k e^{+i 2π kj/n}) / |X_k|
                self.inverse.process_with_scratch(&mut buf, &mut scratch);
                let start = b * len + t * self.hop;
                for (j, c) in buf.iter().enumerate() {
                    dx[start + j] += self.window[j] * c.re;
                }
            }
        }
        dx
    }

    fn forward_host(&self, x: &[f64], batch: usize, len: usize) -> Vec<f64> {
        let (k, frames) = (self.bins(), self.frames(len));
        let spectra = self.spectra(x, batch, len);
        let mut out = vec![0f64; batch * k * frames];
        for b in 0..batch {
            for t in 0..frames {
                for bin in 0..k {
                    let z = spectra[(b * frames + t) * k + bin];
                    out[(b * k + bin) * frames + t] = (z.norm_sqr() + self.eps).sqrt();
                }
            }
        }
        out
    }
}

fn host_values(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fft magnitude needs a contiguous input".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&s| s as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => return Err(candle_core::Error::Msg("fft magnitude supports f32 and f64".into())),
    })
}

fn to_storage(values: Vec<f64>, dtype: DType) -> CpuStorage {
    match dtype {
        DType::F32 => CpuStorage::F32(values.into_iter().map(|v| v as f32).collect()),
        _ => CpuStorage::F64(values),
    }
}

impl CustomOp1 for FftMagnitude {
    fn name(&self) -> &'static str {
        "fft-magnitude"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, len) = layout.shape().dims2()?;
        let x = host_values(storage, layout)?;
        let out = self.forward_host(&x, batch, len);
        let dtype = match storage {
            CpuStorage::F32(_) => DType::F32,
            _ => DType::F64,
        };
        Ok((
            to_storage(out, dtype),
            Shape::from((batch, self.bins(), self.frames(len))),
        ))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (batch, len) = arg.dims2()?;
        let x: Vec<f64> = arg.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let g: Vec<f64> = grad_res.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let dx = self.backward_host(&x, &g, batch, len);
        let dx = Tensor::from_vec(dx, (batch, len), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(dx))
    }
}
