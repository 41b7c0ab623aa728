//! Small building blocks shared by the denoiser variants.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.relu()?,
            Activation::Silu => x.silu()?,
            Activation::Tanh => x.tanh()?,
        })
    }
}

/// Affine map over the last axis. The weight is stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[input, output], bound)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[output], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / input;
        let y = x.reshape((rows, input))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().expect("rank >= 1") = self.output_dim();
        Ok(y.reshape(out)?)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    scale: Tensor,
    shift: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            scale: store.constant(&format!("{name}.scale"), &[width], 1.0)?,
            shift: store.constant(&format!("{name}.shift"), &[width], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

/// Sinusoidal features of a scalar position per row: `[sin(p w_k), cos(p w_k)]`.
pub fn sinusoidal(positions: &[f64], width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = width / 2;
    let mut values = Vec::with_capacity(positions.len() * width);
    for &p in positions {
        let mut row = vec![0.0; width];
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            row[k] = (p * freq).sin();
            row[half + k] = (p * freq).cos();
        }
        values.extend(row);
    }
    Ok(Tensor::from_vec(values, (positions.len(), width), device)?.to_dtype(dtype)?)
}
