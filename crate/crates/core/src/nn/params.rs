use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Embeddings and transformer blocks.
    Backbone,
    /// Distribution heads, predictors and mask embeddings.
    Head,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named trainable parameters, ordered by name.
///
/// Initialization draws from an explicit seeded RNG so that two stores built
/// with the same seed are bitwise identical.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
}

pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub(crate) fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        group: ParamGroup,
        decay: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        contract!(
            !self.params.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.params.insert(name.to_string(), Param { var, group, decay });
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }

    /// Overwrites a parameter's values in place, keeping its identity.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| crate::Error::Contract(format!("unknown parameter `{name}`")))?;
        contract!(
            p.var.shape() == value.shape(),
            "shape mismatch assigning `{name}`: {:?} vs {:?}",
            p.var.shape(),
            value.shape()
        );
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Flat copy of one parameter as f64.
    pub fn values_f64(&self, name: &str) -> Result<Vec<f64>> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| crate::Error::Contract(format!("unknown parameter `{name}`")))?;
        Ok(p.var
            .as_tensor()
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1()?)
    }

    /// Sets a single scalar inside a parameter (used by finite differences).
    pub fn set_scalar(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| crate::Error::Contract(format!("unknown parameter `{name}`")))?;
        let shape = p.var.shape().clone();
        let mut flat = self.values_f64(name)?;
        contract!(index < flat.len(), "index {index} out of range for `{name}`");
        flat[index] = value;
        let t = Tensor::from_vec(flat, shape, &self.device)?.to_dtype(self.dtype)?;
        p.var.set(&t)?;
        Ok(())
    }
}
