//! Named trainable parameters, initialized from a seeded host RNG.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use signmotion_core::arrayfile::ArrayFile;

use crate::error::{Error, Result};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter with the given initial values.
    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidConfig(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, shape, values)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![value; n])
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn to_arrays(&self) -> Result<ArrayFile> {
        let mut file = ArrayFile::new();
        for (name, var) in &self.vars {
            let t = var.as_tensor().to_dtype(DType::F64)?;
            let values = t.flatten_all()?.to_vec1::<f64>()?;
            let array = ArrayD::from_shape_vec(IxDyn(t.dims()), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            file.insert(name, array);
        }
        Ok(file)
    }

    /// Overwrites every parameter from `file`; names and shapes must match.
    pub fn load_arrays(&mut self, file: &ArrayFile) -> Result<()> {
        if file.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                file.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let array = file
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if array.shape() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    array.shape(),
                    var.dims()
                )));
            }
            let values: Vec<f64> = array.iter().copied().collect();
            let t = Tensor::from_vec(values, var.dims(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}
