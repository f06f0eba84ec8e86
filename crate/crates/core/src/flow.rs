//! Conditional flow matching: the probability path, the regression objective,
//! the ODE samplers and the fixed-step generator.

use std::cell::Cell;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{AudioBuffer, MelSpectrogram};

/// A velocity field `G(x_t, c, t)` over batches: `x_t` is `(n, len)`,
/// `cond` is `(n, mels, frames)` and `t` is `(n,)`.
pub trait VectorField {
    fn velocity(&self, x_t: &Tensor, cond: &Tensor, t: &Tensor) -> Result<Tensor>;
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn velocity(&self, x_t: &Tensor, cond: &Tensor, t: &Tensor) -> Result<Tensor> {
        (**self).velocity(x_t, cond, t)
    }
}

/// Wraps a field and counts network evaluations.
pub struct CountingField<F> {
    inner: F,
    calls: Cell<usize>,
}

impl<F: VectorField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<F: VectorField> VectorField for CountingField<F> {
    fn velocity(&self, x_t: &Tensor, cond: &Tensor, t: &Tensor) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.velocity(x_t, cond, t)
    }
}

/// Optimal-transport CFM path
/// `x_t = (1 - (1 - σ_min)·t)·x0 + t·x1`, target velocity `x1 - (1 - σ_min)·x0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityPath {
    pub sigma_min: f64,
}

impl Default for ProbabilityPath {
    fn default() -> Self {
        Self { sigma_min: 1e-4 }
    }
}

impl ProbabilityPath {
    pub fn new(sigma_min: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < 1.0) {
            return Err(Error::Config(format!("sigma_min {sigma_min} outside (0, 1)")));
        }
        Ok(Self { sigma_min })
    }

    /// Noise coefficient, written as `(1 - t) + σ·t` so both endpoints are
    /// exact in floating point.
    fn noise_coef(&self, t: f64) -> f64 {
        (1.0 - t) + self.sigma_min * t
    }

    /// Batched interpolant: `x0`, `x1` are `(n, len)`, `t` is `(n,)`.
    pub fn interpolate(&self, x0: &Tensor, x1: &Tensor, t: &Tensor) -> Result<(Tensor, Tensor)> {
        if x0.dims() != x1.dims() {
            return Err(Error::Shape(format!(
                "noise {:?} and data {:?} differ in shape",
                x0.dims(),
                x1.dims()
            )));
        }
        let t = t.unsqueeze(1)?;
        let a = (t.affine(-1.0, 1.0)? + t.affine(self.sigma_min, 0.0)?)?;
        let x_t = (x0.broadcast_mul(&a)? + x1.broadcast_mul(&t)?)?;
        let u = (x1 - x0.affine(1.0 - self.sigma_min, 0.0)?)?;
        Ok((x_t, u))
    }

    pub fn sample_interpolant(
        &self,
        x0: &AudioBuffer,
        x1: &AudioBuffer,
        t: f64,
    ) -> Result<(AudioBuffer, AudioBuffer)> {
        if x0.len() != x1.len() {
            return Err(Error::Shape(format!(
                "noise has {} samples, data has {}",
                x0.len(),
                x1.len()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("t = {t} outside [0, 1]")));
        }
        let a = self.noise_coef(t);
        let (x_t, u): (Vec<f32>, Vec<f32>) = x0
            .samples()
            .iter()
            .zip(x1.samples())
            .map(|(&n, &d)| {
                let (n, d) = (n as f64, d as f64);
                ((a * n + t * d) as f32, (d - (1.0 - self.sigma_min) * n) as f32)
            })
            .unzip();
        Ok((
            AudioBuffer::new(x_t, x1.sample_rate())?,
            AudioBuffer::new(u, x1.sample_rate())?,
        ))
    }
}

/// Noise and time draws for one CFM batch.
#[derive(Debug, Clone)]
pub struct CfmDraw {
    pub x0: Tensor,
    pub t: Tensor,
}

impl CfmDraw {
    /// `t ~ U[0, 1]` per item, `x0 ~ N(0, 1)` per sample.
    pub fn sample<R: Rng>(n: usize, len: usize, rng: &mut R, dtype: DType, device: &Device) -> Result<Self> {
        let t: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let x0 = standard_normal(n, len, rng, dtype, device)?;
        Ok(Self {
            x0,
            t: Tensor::from_vec(t, n, device)?.to_dtype(dtype)?,
        })
    }
}

/// `(n, len)` tensor of independent standard normal draws.
pub fn standard_normal<R: Rng>(n: usize, len: usize, rng: &mut R, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..n * len).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, (n, len), device)?.to_dtype(dtype)?)
}

/// Flow-matching regression loss for a fixed draw.
pub fn cfm_loss_with<F: VectorField>(
    field: &F,
    path: &ProbabilityPath,
    x1: &Tensor,
    cond: &Tensor,
    draw: &CfmDraw,
) -> Result<Tensor> {
    let (x_t, u) = path.interpolate(&draw.x0, x1, &draw.t)?;
    let v = field.velocity(&x_t, cond, &draw.t)?;
    Ok((v - u)?.sqr()?.mean_all()?)
}

/// Flow-matching regression loss with fresh `t` and noise from `rng`.
pub fn cfm_loss<F: VectorField, R: Rng>(
    field: &F,
    path: &ProbabilityPath,
    x1: &Tensor,
    cond: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let (n, len) = x1.dims2()?;
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let draw = CfmDraw::sample(n, len, rng, x1.dtype(), x1.device())?;
    cfm_loss_with(field, path, x1, cond, &draw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Midpoint,
}

impl Solver {
    pub fn evals_per_step(self) -> usize {
        match self {
            Solver::Euler => 1,
            Solver::Midpoint => 2,
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Solver::Euler),
            "midpoint" => Ok(Solver::Midpoint),
            other => Err(Error::Config(format!("unknown solver {other:?}"))),
        }
    }
}

/// Integration knots in `[0, 1)`; the terminal time 1.0 is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    knots: Vec<f64>,
    solver: Solver,
}

impl TimeGrid {
    pub fn new(knots: Vec<f64>, solver: Solver) -> Result<Self> {
        if knots.first() != Some(&0.0) {
            return Err(Error::Config("time grid must start at 0".into()));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("time grid must be strictly increasing".into()));
        }
        if knots.iter().any(|&k| !(k < 1.0)) {
            return Err(Error::Config("time grid knots must be below 1".into()));
        }
        Ok(Self { knots, solver })
    }

    /// `steps` equal intervals over `[0, 1]`.
    pub fn uniform(steps: usize, solver: Solver) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("need at least one step".into()));
        }
        Self::new((0..steps).map(|i| i as f64 / steps as f64).collect(), solver)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn solver(&self) -> Solver {
        self.solver
    }

    pub fn steps(&self) -> usize {
        self.knots.len()
    }

    /// Network evaluations one integration costs.
    pub fn nfe(&self) -> usize {
        self.steps() * self.solver.evals_per_step()
    }

    /// `(t, Δt)` per step.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.knots.iter().enumerate().map(|(i, &t)| {
            let next = self.knots.get(i + 1).copied().unwrap_or(1.0);
            (t, next - t)
        })
    }
}

fn time_tensor(t: f64, like: &Tensor) -> Result<Tensor> {
    let n = like.dim(0)?;
    Ok(Tensor::full(t, n, like.device())?.to_dtype(like.dtype())?)
}

fn integrate<F: VectorField>(
    field: &F,
    x0: &Tensor,
    cond: &Tensor,
    grid: &TimeGrid,
    keep_graph: bool,
) -> Result<Tensor> {
    let mut x = x0.clone();
    for (t, dt) in grid.intervals() {
        let v = match grid.solver {
            Solver::Euler => field.velocity(&x, cond, &time_tensor(t, &x)?)?,
            Solver::Midpoint => {
                let v0 = field.velocity(&x, cond, &time_tensor(t, &x)?)?;
                let x_mid = (&x + v0.affine(dt / 2.0, 0.0)?)?;
                field.velocity(&x_mid, cond, &time_tensor(t + dt / 2.0, &x)?)?
            }
        };
        x = (x + v.affine(dt, 0.0)?)?;
        if !keep_graph {
            x = x.detach();
        }
    }
    Ok(x)
}

/// Integrates the field from `x0` (t = 0) to t = 1. Inference only: the
/// result carries no autograd graph.
pub fn ode_sample<F: VectorField>(field: &F, x0: &Tensor, cond: &Tensor, grid: &TimeGrid) -> Result<Tensor> {
    integrate(field, x0, cond, grid, false)
}

/// Host-side wrapper of [`ode_sample`] for a single item.
pub fn ode_sample_audio<F: VectorField>(
    field: &F,
    x0: &AudioBuffer,
    c: &MelSpectrogram,
    grid: &TimeGrid,
    dtype: DType,
    device: &Device,
) -> Result<AudioBuffer> {
    if c.sample_len() != x0.len() {
        return Err(Error::Shape(format!(
            "{} conditioning frames describe {} samples, noise has {}",
            c.frames,
            c.sample_len(),
            x0.len()
        )));
    }
    let x = ode_sample(field, &x0.to_tensor(dtype, device)?, &c.to_tensor(dtype, device)?, grid)?;
    AudioBuffer::from_tensor(&x, x0.sample_rate())
}

/// Grid of the fixed-step generator: Euler at `[0, 0.5]` or
/// `[0, 0.25, 0.5, 0.75]`.
pub fn fixed_step_grid(n_steps: usize) -> Result<TimeGrid> {
    match n_steps {
        2 | 4 => TimeGrid::uniform(n_steps, Solver::Euler),
        other => Err(Error::Config(format!(
            "fixed-step generator supports 2 or 4 steps, got {other}"
        ))),
    }
}

/// Few-step Euler generator. Unlike [`ode_sample`], the autograd graph is
/// kept through every step so losses on the output reach the parameters.
pub fn fixed_step_generate<F: VectorField>(
    field: &F,
    x0: &Tensor,
    cond: &Tensor,
    n_steps: usize,
) -> Result<Tensor> {
    integrate(field, x0, cond, &fixed_step_grid(n_steps)?, true)
}
