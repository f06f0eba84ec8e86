use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A named parameter array copied out of a store, independent of dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct HostArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl HostArray {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

/// Learnable parameters keyed by hierarchical dotted names.
///
/// Iteration order is the lexical order of names, which fixes the layout of
/// checkpoints and optimizer state.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter drawn from `U(-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: impl Into<Shape>, bound: f64) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let shape: Shape = shape.into();
        let data: Vec<f64> = (0..shape.elem_count())
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Exact number of learnable scalars.
    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s: f64 = v.as_tensor().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn to_host(&self) -> Result<BTreeMap<String, HostArray>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), HostArray::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites every parameter in place; the name sets and shapes must
    /// match exactly.
    pub fn load_host(&self, arrays: &BTreeMap<String, HostArray>) -> Result<()> {
        if arrays.len() != self.vars.len() || arrays.keys().zip(self.vars.keys()).any(|(a, b)| a != b) {
            let missing: Vec<_> = self.vars.keys().filter(|k| !arrays.contains_key(*k)).collect();
            let extra: Vec<_> = arrays.keys().filter(|k| !self.vars.contains_key(*k)).collect();
            return Err(Error::Checkpoint(format!(
                "parameter sets differ (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for (name, var) in &self.vars {
            let arr = &arrays[name];
            if arr.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, checkpoint holds {:?}",
                    var.dims(),
                    arr.shape
                )));
            }
            var.set(&arr.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }
}
