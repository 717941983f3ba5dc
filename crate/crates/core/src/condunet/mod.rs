//! The conditional noise-prediction network.
//!
//! A UNet over 32x32 grayscale images with three downsampling and three
//! upsampling blocks, skip connections, and self-attention interlaced at
//! the lowest resolutions. Each down/up block consists of a pooling or
//! nearest-upsampling step followed by two double-conv layers
//! (conv / group norm / GELU); the conditioning vector — concatenated
//! positional encodings of the timestep and the bump's x/y position — is
//! linearly projected to the block's channel width and broadcast-added
//! between them.
//!
//! Any named block output can be tapped and flattened per sample as the
//! network's internal representation.

mod blocks;
mod checkpoint;
mod encoding;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use encoding::{build_condition, condition_batch, encode_position, ConditioningVector};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use blocks::{CondProj, Conv2d, DoubleConv, ParamStore, SelfAttention};

/// Valid activation-tap names, in network order.
pub const TAP_POINTS: [&str; 7] = ["stem", "down1", "down2", "down3", "up1", "up2", "up3"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Channel width at full resolution; the encoder widens to 2x and 4x.
    pub base_channels: usize,
    /// Length `k` of each positional encoding; the conditioning vector is 3k.
    pub encoding_dim: usize,
    /// Self-attention toggle per resolution depth (32, 16, 8, 4).
    pub attention: Vec<bool>,
    /// Block output recorded as the internal representation.
    pub tap_point: String,
    /// Group count for group normalization.
    pub groups: usize,
    /// Attention heads.
    pub heads: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            encoding_dim: 32,
            attention: vec![false, false, true, true],
            tap_point: "up1".to_string(),
            groups: 8,
            heads: 4,
        }
    }
}

impl NetworkConfig {
    /// Reduced width for CPU-scale runs.
    pub fn desk() -> Self {
        Self { base_channels: 16, encoding_dim: 16, ..Self::default() }
    }

    pub fn cond_dim(&self) -> usize {
        3 * self.encoding_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return Err(Error::InvalidConfig(format!(
                "base_channels must be >= 8, got {}",
                self.base_channels
            )));
        }
        if self.encoding_dim < 2 || self.encoding_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "encoding_dim must be even and >= 2, got {}",
                self.encoding_dim
            )));
        }
        if self.attention.len() != 4 {
            return Err(Error::InvalidConfig(format!(
                "attention needs one flag per resolution depth (4), got {}",
                self.attention.len()
            )));
        }
        if self.base_channels % self.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "groups ({}) must divide base_channels ({})",
                self.groups, self.base_channels
            )));
        }
        if self.base_channels % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads ({}) must divide base_channels ({})",
                self.heads, self.base_channels
            )));
        }
        if !TAP_POINTS.contains(&self.tap_point.as_str()) {
            return Err(Error::UnknownTap(self.tap_point.clone()));
        }
        Ok(())
    }
}

/// A captured feature map, flattened to one row per sample.
#[derive(Debug, Clone)]
pub struct ActivationTap {
    pub layer_name: String,
    /// (batch, channels * height * width)
    pub captured: Tensor,
}

struct DownBlock {
    dc1: DoubleConv,
    cond: CondProj,
    dc2: DoubleConv,
    attn: Option<SelfAttention>,
}

struct UpBlock {
    dc1: DoubleConv,
    cond: CondProj,
    dc2: DoubleConv,
    attn: Option<SelfAttention>,
}

pub struct UNet {
    config: NetworkConfig,
    store: ParamStore,
    stem: DoubleConv,
    downs: Vec<DownBlock>,
    ups: Vec<UpBlock>,
    out: Conv2d,
}

impl UNet {
    pub fn new(config: &NetworkConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype, device.clone());
        let b = config.base_channels;
        let (g, heads, cd) = (config.groups, config.heads, config.cond_dim());

        let stem = DoubleConv::new(&mut store, "stem", 1, b, g, false, &mut rng)?;

        // Encoder: widths (b, 2b, 4b, 4b) at depths (0, 1, 2, 3).
        let down_io = [(b, 2 * b), (2 * b, 4 * b), (4 * b, 4 * b)];
        let mut downs = Vec::new();
        for (i, &(c_in, c_out)) in down_io.iter().enumerate() {
            let name = format!("down{}", i + 1);
            let attn = if config.attention[i + 1] {
                Some(SelfAttention::new(&mut store, &format!("{name}.attn"), c_out, heads, &mut rng)?)
            } else {
                None
            };
            downs.push(DownBlock {
                dc1: DoubleConv::new(&mut store, &format!("{name}.dc1"), c_in, c_in, g, true, &mut rng)?,
                cond: CondProj::new(&mut store, &name, cd, c_in, &mut rng)?,
                dc2: DoubleConv::new(&mut store, &format!("{name}.dc2"), c_in, c_out, g, false, &mut rng)?,
                attn,
            });
        }

        // Decoder: each block consumes the upsampled stream concatenated
        // with the skip from the mirrored encoder depth.
        // up1: cat(4b, 4b) -> 2b @8, up2: cat(2b, 2b) -> b @16,
        // up3: cat(b, b) -> b @32.
        let up_io = [(8 * b, 2 * b, 2usize), (4 * b, b, 1), (2 * b, b, 0)];
        let mut ups = Vec::new();
        for (i, &(c_cat, c_out, depth)) in up_io.iter().enumerate() {
            let name = format!("up{}", i + 1);
            let attn = if config.attention[depth] {
                Some(SelfAttention::new(&mut store, &format!("{name}.attn"), c_out, heads, &mut rng)?)
            } else {
                None
            };
            ups.push(UpBlock {
                dc1: DoubleConv::new(&mut store, &format!("{name}.dc1"), c_cat, c_cat, g, true, &mut rng)?,
                cond: CondProj::new(&mut store, &name, cd, c_cat, &mut rng)?,
                dc2: DoubleConv::new(&mut store, &format!("{name}.dc2"), c_cat, c_out, g, false, &mut rng)?,
                attn,
            });
        }

        let out = Conv2d::zeros(&mut store, "out", b, 1, 1)?;

        Ok(Self { config: config.clone(), store, stem, downs, ups, out })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Look up one trainable variable by name.
    pub fn var(&self, name: &str) -> Option<&candle_core::Var> {
        self.store.get(name)
    }

    pub fn all_vars(&self) -> Vec<candle_core::Var> {
        self.store.all_vars()
    }

    pub fn named_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.store.vars().cloned().collect()
    }

    /// Zero the conditioning projection of one block (`down1`..`up3`),
    /// severing conditioning at that site.
    pub fn zero_condition_projection(&self, block: &str) -> Result<()> {
        let idx = |name: &str| -> Option<usize> { name[4..].parse::<usize>().ok().map(|i| i - 1) };
        match block {
            b if b.starts_with("down") => {
                let i = idx(b).ok_or_else(|| Error::UnknownTap(b.to_string()))?;
                self.downs[i].cond.zero_out()
            }
            b if b.starts_with("up") => {
                let i = b[2..]
                    .parse::<usize>()
                    .ok()
                    .map(|i| i - 1)
                    .ok_or_else(|| Error::UnknownTap(b.to_string()))?;
                self.ups[i].cond.zero_out()
            }
            other => Err(Error::UnknownTap(other.to_string())),
        }
    }

    /// Predict the noise content of `x_t` (B, 1, H, W) under `cond` (B, 3k).
    pub fn forward(&self, x_t: &Tensor, cond: &Tensor) -> Result<Tensor> {
        Ok(self.forward_instrumented(x_t, cond, None, None)?.0)
    }

    /// Forward pass that also captures the named tap output, flattened per
    /// sample.
    pub fn forward_with_tap(&self, x_t: &Tensor, cond: &Tensor, tap: &str) -> Result<(Tensor, ActivationTap)> {
        if !TAP_POINTS.contains(&tap) {
            return Err(Error::UnknownTap(tap.to_string()));
        }
        let (out, captured) = self.forward_instrumented(x_t, cond, Some(tap), None)?;
        let captured = captured.expect("tap name validated above");
        let (b, c, h, w) = captured.dims4()?;
        Ok((out, ActivationTap { layer_name: tap.to_string(), captured: captured.reshape((b, c * h * w))? }))
    }

    pub(crate) fn forward_instrumented(
        &self,
        x_t: &Tensor,
        cond: &Tensor,
        tap: Option<&str>,
        corrupt_skip: Option<(usize, &Tensor)>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let (bx, cx, _, _) = x_t.dims4().map_err(|_| {
            Error::ShapeMismatch(format!("expected (B, 1, H, W) input, got {:?}", x_t.dims()))
        })?;
        let (bc, dc) = cond.dims2().map_err(|_| {
            Error::ShapeMismatch(format!("expected (B, 3k) condition, got {:?}", cond.dims()))
        })?;
        if cx != 1 || bx != bc || dc != self.config.cond_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} vs condition {:?} (cond_dim {})",
                x_t.dims(),
                cond.dims(),
                self.config.cond_dim()
            )));
        }

        let mut captured = None;
        let mut capture = |name: &str, t: &Tensor| {
            if tap == Some(name) {
                captured = Some(t.clone());
            }
        };

        let s0 = self.stem.forward(x_t)?;
        capture("stem", &s0);

        let mut skips = vec![s0];
        for (i, block) in self.downs.iter().enumerate() {
            let x = skips.last().expect("stem pushed above");
            let h = x.max_pool2d(2)?;
            let h = block.dc1.forward(&h)?;
            let h = block.cond.add_to(&h, cond)?;
            let h = block.dc2.forward(&h)?;
            let h = match &block.attn {
                Some(attn) => attn.forward(&h)?,
                None => h,
            };
            capture(&format!("down{}", i + 1), &h);
            skips.push(h);
        }

        let mut x = skips.pop().expect("three down blocks pushed");
        for (i, block) in self.ups.iter().enumerate() {
            let skip = skips.pop().expect("one skip per up block");
            let skip = match corrupt_skip {
                Some((idx, noise)) if idx == i => (skip + noise)?,
                _ => skip,
            };
            let (_, _, h, w) = skip.dims4()?;
            let up = x.upsample_nearest2d(h, w)?;
            let h = Tensor::cat(&[&skip, &up], 1)?;
            let h = block.dc1.forward(&h)?;
            let h = block.cond.add_to(&h, cond)?;
            let h = block.dc2.forward(&h)?;
            x = match &block.attn {
                Some(attn) => attn.forward(&h)?,
                None => h,
            };
            capture(&format!("up{}", i + 1), &x);
        }

        let out = self.out.forward(&x)?;
        Ok((out, captured))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bumpdata::BumpLabel;
    use candle_core::{DType, Device, Tensor};

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            base_channels: 8,
            encoding_dim: 4,
            attention: vec![false, false, true, true],
            tap_point: "up1".into(),
            groups: 8,
            heads: 4,
        }
    }

    fn randn(shape: &[usize], seed: u64, dev: &Device) -> Tensor {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32).collect();
        Tensor::from_vec(data, shape, dev).unwrap()
    }

    fn cond_batch(model: &UNet, n: usize, dev: &Device) -> Tensor {
        let labels: Vec<BumpLabel> =
            (0..n).map(|i| BumpLabel::symmetric(4.0 + i as f64, 9.0, 1.0)).collect();
        condition_batch(&vec![3; n], &labels, model.config().encoding_dim, model.dtype(), dev).unwrap()
    }

    #[test]
    fn output_shape_matches_input_shape() {
        let dev = Device::Cpu;
        let model = UNet::new(&tiny_config(), 0, DType::F32, &dev).unwrap();
        let x = randn(&[4, 1, 32, 32], 1, &dev);
        let cond = cond_batch(&model, 4, &dev);
        let y = model.forward(&x, &cond).unwrap();
        assert_eq!(y.dims(), x.dims());
    }

    #[test]
    fn zero_initialized_output_layer_predicts_zero() {
        let dev = Device::Cpu;
        let model = UNet::new(&tiny_config(), 0, DType::F32, &dev).unwrap();
        let x = randn(&[2, 1, 16, 16], 2, &dev);
        let cond = cond_batch(&model, 2, &dev);
        let y = model.forward(&x, &cond).unwrap();
        let max = y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(max, 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dev = Device::Cpu;
        let model = UNet::new(&tiny_config(), 0, DType::F32, &dev).unwrap();
        let x = randn(&[2, 1, 16, 16], 3, &dev);
        let cond = cond_batch(&model, 3, &dev);
        assert!(model.forward(&x, &cond).is_err());
        let bad_x = randn(&[2, 2, 16, 16], 3, &dev);
        let cond2 = cond_batch(&model, 2, &dev);
        assert!(model.forward(&bad_x, &cond2).is_err());
    }

    /// Unblind the zero-initialized output conv so internal differences
    /// become visible in the network output.
    fn randomize_out(model: &UNet, dev: &Device) {
        let w = model.var("out.weight").unwrap();
        w.set(&randn(&w.as_tensor().dims().to_vec(), 99, dev)).unwrap();
    }

    #[test]
    fn conditioning_reaches_every_block() {
        let dev = Device::Cpu;
        let x = randn(&[2, 1, 32, 32], 5, &dev);
        for block in ["down1", "down2", "down3", "up1", "up2", "up3"] {
            let model = UNet::new(&tiny_config(), 7, DType::F32, &dev).unwrap();
            randomize_out(&model, &dev);
            let cond = cond_batch(&model, 2, &dev);
            let before = model.forward(&x, &cond).unwrap();
            model.zero_condition_projection(block).unwrap();
            let after = model.forward(&x, &cond).unwrap();
            let gap = (before - after).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(gap > 0.0, "zeroing {block} conditioning changed nothing");
        }
    }

    #[test]
    fn different_conditions_change_the_output() {
        let dev = Device::Cpu;
        let model = UNet::new(&tiny_config(), 11, DType::F32, &dev).unwrap();
        randomize_out(&model, &dev);
        let x = randn(&[1, 1, 32, 32], 6, &dev);
        let k = model.config().encoding_dim;
        let c1 = condition_batch(&[3], &[BumpLabel::symmetric(4.0, 9.0, 1.0)], k, model.dtype(), &dev).unwrap();
        let c2 = condition_batch(&[3], &[BumpLabel::symmetric(28.0, 20.0, 1.0)], k, model.dtype(), &dev).unwrap();
        let y1 = model.forward(&x, &c1).unwrap();
        let y2 = model.forward(&x, &c2).unwrap();
        let gap = (y1 - y2).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(gap > 0.0);
    }

    #[test]
    fn corrupting_a_skip_changes_the_decoder() {
        let dev = Device::Cpu;
        let model = UNet::new(&tiny_config(), 13, DType::F32, &dev).unwrap();
        randomize_out(&model, &dev);
        let x = randn(&[1, 1, 32, 32], 8, &dev);
        let cond = cond_batch(&model, 1, &dev);
        let clean = model.forward_instrumented(&x, &cond, None, None).unwrap().0;
        // Skip shapes mirror the encoder: up1 gets down2's 4b@8, up2 gets
        // down1's 2b@16, up3 gets the stem's b@32.
        let b = model.config().base_channels;
        for (i, (c, hw)) in [(4 * b, 8), (2 * b, 16), (b, 32)].iter().enumerate() {
            let noise = randn(&[1, *c, *hw, *hw], 20 + i as u64, &dev);
            let corrupted =
                model.forward_instrumented(&x, &cond, None, Some((i, &noise))).unwrap().0;
            let gap =
                (&clean - corrupted).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(gap > 0.0, "skip {i} had no effect");
        }
    }

    #[test]
    fn tap_capture_is_deterministic_and_sized() {
        let dev = Device::Cpu;
        let model = UNet::new(&tiny_config(), 17, DType::F32, &dev).unwrap();
        let x = randn(&[3, 1, 32, 32], 9, &dev);
        let cond = cond_batch(&model, 3, &dev);
        let (_, tap1) = model.forward_with_tap(&x, &cond, "up1").unwrap();
        let (_, tap2) = model.forward_with_tap(&x, &cond, "up1").unwrap();
        // up1 output: 2b channels at 8x8.
        let b = model.config().base_channels;
        assert_eq!(tap1.captured.dims(), &[3, 2 * b * 8 * 8]);
        let v1 = tap1.captured.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let v2 = tap2.captured.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v1, v2);

        let (_, stem) = model.forward_with_tap(&x, &cond, "stem").unwrap();
        assert_eq!(stem.captured.dims(), &[3, b * 32 * 32]);
    }

    #[test]
    fn unknown_tap_is_rejected() {
        let dev = Device::Cpu;
        let model = UNet::new(&tiny_config(), 19, DType::F32, &dev).unwrap();
        let x = randn(&[1, 1, 32, 32], 10, &dev);
        let cond = cond_batch(&model, 1, &dev);
        assert!(matches!(
            model.forward_with_tap(&x, &cond, "bottleneck9"),
            Err(Error::UnknownTap(_))
        ));
    }

    #[test]
    fn parameter_count_is_a_function_of_config_only() {
        let dev = Device::Cpu;
        let a = UNet::new(&tiny_config(), 0, DType::F32, &dev).unwrap();
        let b = UNet::new(&tiny_config(), 12345, DType::F32, &dev).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        let wider = NetworkConfig { base_channels: 16, ..tiny_config() };
        let c = UNet::new(&wider, 0, DType::F32, &dev).unwrap();
        assert!(c.parameter_count() > a.parameter_count());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let dev = Device::Cpu;
        for cfg in [
            NetworkConfig { base_channels: 4, ..tiny_config() },
            NetworkConfig { encoding_dim: 5, ..tiny_config() },
            NetworkConfig { attention: vec![true; 2], ..tiny_config() },
            NetworkConfig { tap_point: "nowhere".into(), ..tiny_config() },
            NetworkConfig { base_channels: 12, groups: 8, ..tiny_config() },
        ] {
            assert!(UNet::new(&cfg, 0, DType::F32, &dev).is_err(), "{cfg:?}");
        }
    }
}
