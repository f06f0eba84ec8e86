use candle_core::{Tensor, D};

use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    stride: usize,
    dilation: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::dilated(store, name, c_in, c_out, kernel, stride, padding, 1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn dilated(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), (c_out, c_in, kernel), bound)?,
            bias: store.uniform(&format!("{name}.bias"), c_out, bound)?,
            padding,
            stride,
            dilation,
        })
    }

    /// `(n, c_in, len)` → `(n, c_out, len')`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Padding is applied outside the convolution: candle's transposed
        // convolution in the backward pass underflows on short inputs when
        // it handles the padding itself.
        let x = if self.padding > 0 {
            x.pad_with_zeros(D::Minus1, self.padding, self.padding)?
        } else {
            x.clone()
        };
        let (c_out, c_in, k) = self.weight.dims3()?;
        let y = if k % self.stride == 0 {
            self.unfolded(&x, c_out, c_in, k)?
        } else {
            x.conv1d(&self.weight, 0, self.stride, self.dilation, 1)?
        };
        Ok(y.broadcast_add(&self.bias.unsqueeze(0)?.unsqueeze(D::Minus1)?)?)
    }

    /// Convolution as one matmul over explicitly gathered taps. Its backward
    /// pass is made of matmuls and slices, which avoids candle's slow
    /// transposed convolution for dilated and strided kernels.
    fn unfolded(&self, x: &Tensor, c_out: usize, c_in: usize, k: usize) -> Result<Tensor> {
        let (n, _, len) = x.dims3()?;
        let span = self.dilation * (k - 1) + 1;
        if len < span {
            return Err(crate::error::Error::Shape(format!("conv input of {len} samples shorter than kernel span {span}")));
        }
        let l_out = (len - span) / self.stride + 1;
        // One extra block so every strided tap can be viewed as whole blocks.
        let x = if self.stride > 1 {
            x.pad_with_zeros(2, 0, self.stride)?
        } else {
            x.clone()
        };
        let taps = (0..k)
            .map(|j| {
                let start = j * self.dilation;
                if self.stride == 1 {
                    Ok(x.narrow(2, start, l_out)?)
                } else {
                    // Strided taps: view the needed range as (l_out, stride) blocks and keep column 0.
                    let s = self.stride;
                    let avail = (len + s - start) / s;
                    let blocks = x.narrow(2, start, avail * s)?.reshape((n, c_in, avail, s))?;
                    Ok(blocks.narrow(2, 0, l_out)?.narrow(3, 0, 1)?.squeeze(3)?)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        // (n, k * c_in, l_out), tap-major to match the reordered weight.
        let cols = Tensor::cat(&taps, 1)?;
        let w = self.weight.permute((0, 2, 1))?.contiguous()?.reshape((c_out, k * c_in))?;
        let w = w.unsqueeze(0)?.broadcast_as((n, c_out, k * c_in))?.contiguous()?;
        Ok(w.matmul(&cols.contiguous()?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), (c_out, c_in, kernel, kernel), bound)?,
            bias: store.uniform(&format!("{name}.bias"), c_out, bound)?,
            padding,
            dilation,
        })
    }

    /// `(n, c_in, h, w)` → `(n, c_out, h', w')`, stride 1.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, 1, self.dilation, 1)?;
        let b = self.bias.reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), (d_out, d_in), bound)?,
            bias: store.uniform(&format!("{name}.bias"), d_out, bound)?,
        })
    }

    /// `(n, d_in)` → `(n, d_out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Logistic function through `tanh`, which stays finite for large inputs.
pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Nearest-neighbour upsampling of the last axis by an integer factor.
pub fn repeat_last(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let mut dims = x.dims().to_vec();
    let len = dims.pop().unwrap_or(1);
    let mut expanded = dims.clone();
    expanded.extend([len, factor]);
    let y = x.unsqueeze(D::Minus1)?.broadcast_as(expanded)?;
    dims.push(len * factor);
    Ok(y.contiguous()?.reshape(dims)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    /// Direct evaluation of `y[o, i] = b[o] + Σ w[o, c, j] · x[c, i·s + j·d]`
    /// on the zero-padded input.
    fn reference(x: &Tensor, conv: &Conv1d) -> Vec<f64> {
        let (n, c_in, len) = x.dims3().unwrap();
        let (c_out, _, k) = conv.weight.dims3().unwrap();
        let (p, s, d) = (conv.padding, conv.stride, conv.dilation);
        let xs: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let w: Vec<f64> = conv.weight.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = conv.bias.to_vec1().unwrap();
        let padded = len + 2 * p;
        let l_out = (padded - d * (k - 1) - 1) / s + 1;
        let at = |b_: usize, c: usize, i: usize| -> f64 {
            if i < p || i >= p + len {
                0.0
            } else {
                xs[(b_ * c_in + c) * len + i - p]
            }
        };
        let mut out = Vec::new();
        for b_ in 0..n {
            for o in 0..c_out {
                for i in 0..l_out {
                    let mut acc = b[o];
                    for c in 0..c_in {
                        for j in 0..k {
                            acc += w[(o * c_in + c) * k + j] * at(b_, c, i * s + j * d);
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn convolution_matches_direct_evaluation() {
        let mut store = ParamStore::new(DType::F64, &Device::Cpu, 0);
        let x = store.uniform("x", (2, 3, 37), 1.0).unwrap();
        // (kernel, stride, padding, dilation): im2col and fallback paths.
        for (i, &(k, s, p, d)) in [(3, 1, 1, 1), (3, 1, 4, 4), (7, 1, 3, 1), (4, 2, 1, 1), (5, 3, 2, 1), (1, 1, 0, 1), (3, 1, 0, 8)]
            .iter()
            .enumerate()
        {
            let conv = Conv1d::dilated(&mut store, &format!("c{i}"), 3, 4, k, s, p, d).unwrap();
            let got: Vec<f64> = conv.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let want = reference(&x, &conv);
            assert_eq!(got.len(), want.len(), "config {:?}", (k, s, p, d));
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "config {:?}: {g} vs {w}", (k, s, p, d));
            }
        }
    }
}
