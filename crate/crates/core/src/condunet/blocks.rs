//! Layers and parameter bookkeeping for the UNet.
//!
//! Weight initialization draws from a caller-seeded RNG, so model
//! construction is deterministic; candle's thread-local generators are
//! never used.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nnops;

/// Named trainable variables in creation order.
pub struct ParamStore {
    pub dtype: DType,
    pub device: Device,
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { dtype, device, vars: Vec::new() }
    }

    /// Uniform(-bound, bound) init, the fan-in convention used by conv and
    /// linear layers below.
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.push((name.to_string(), var.clone()));
        Ok(var)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![value; n], shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn vars(&self) -> impl Iterator<Item = &(String, Var)> {
        self.vars.iter()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.as_tensor().elem_count()).sum()
    }
}

pub struct Conv2d {
    weight: Var,
    bias: Var,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound, rng)?;
        let bias = store.uniform(&format!("{name}.bias"), &[c_out], bound, rng)?;
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    /// Convolution with weights and bias fixed at zero, used for the output
    /// layer so the untrained network predicts zero noise.
    pub fn zeros(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], 0.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nnops::conv2d(x, &self.weight, Some(&self.bias), self.padding)
    }
}

pub struct Linear {
    weight: Var, // (out, in)
    bias: Var,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[d_out, d_in], bound, rng)?;
        let bias = store.uniform(&format!("{name}.bias"), &[d_out], bound, rng)?;
        Ok(Self { weight, bias })
    }

    /// `x` is (..., d_in).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn zero_out(&self) -> Result<()> {
        self.weight.set(&self.weight.as_tensor().zeros_like()?)?;
        self.bias.set(&self.bias.as_tensor().zeros_like()?)?;
        Ok(())
    }
}

pub struct GroupNorm {
    weight: Var,
    bias: Var,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[channels], 1.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[channels], 0.0)?;
        Ok(Self { weight, bias, groups })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nnops::group_norm(x, &self.weight, &self.bias, self.groups, 1e-5)
    }
}

/// Layer norm over the last dimension, for attention token streams.
pub struct LayerNorm {
    weight: Var,
    bias: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[dim], 1.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[dim], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// conv 3x3 -> group norm -> GELU -> conv 3x3 -> group norm, optionally
/// wrapped in a GELU residual.
pub struct DoubleConv {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    residual: bool,
}

impl DoubleConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
        residual: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        debug_assert!(!residual || c_in == c_out);
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, rng)?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_out, groups)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, groups)?,
            residual,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?;
        let h = self.norm2.forward(&self.conv2.forward(&nnops::gelu(&h)?)?)?;
        if self.residual {
            nnops::gelu(&(x + h)?)
        } else {
            Ok(h)
        }
    }
}

/// Pre-norm multi-head self-attention over the flattened spatial grid,
/// followed by a two-layer feed-forward, both with residuals.
pub struct SelfAttention {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        debug_assert_eq!(channels % heads, 0);
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), channels, 3 * channels, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), channels, channels, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), channels, channels, rng)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;

        let normed = self.norm1.forward(&tokens)?;
        let qkv = self.qkv.forward(&normed)?;
        let q = qkv.narrow(D::Minus1, 0, c)?;
        let k = qkv.narrow(D::Minus1, c, c)?;
        let v = qkv.narrow(D::Minus1, 2 * c, c)?;
        let hd = c / self.heads;
        let split = |t: &Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, h * w, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let (q, k, v) = (split(&q)?, split(&k)?, split(&v)?);
        let scale = 1.0 / (hd as f64).sqrt();
        let att = (q.matmul(&k.transpose(D::Minus1, D::Minus2)?)? * scale)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let out = att.matmul(&v)?; // (b, heads, hw, hd)
        let out = out.transpose(1, 2)?.reshape((b, h * w, c))?;
        let tokens = (tokens + self.proj.forward(&out)?)?;

        let ff = self.ff2.forward(&nnops::gelu(&self.ff1.forward(&self.norm2.forward(&tokens)?)?)?)?;
        let tokens = (tokens + ff)?;

        Ok(tokens.transpose(1, 2)?.reshape((b, c, h, w))?)
    }
}

/// Project the conditioning vector to a channel bias and broadcast-add it.
pub struct CondProj {
    proj: Linear,
}

impl CondProj {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cond_dim: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self { proj: Linear::new(store, &format!("{name}.cond"), cond_dim, channels, rng)? })
    }

    /// `x` is (B, C, H, W); `cond` is (B, cond_dim).
    pub fn add_to(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let bias = self.proj.forward(cond)?.reshape((b, c, 1, 1))?;
        Ok(x.broadcast_add(&bias)?)
    }

    pub fn zero_out(&self) -> Result<()> {
        self.proj.zero_out()
    }
}
