//! Time-conditioned 3D U-Net operating on wavelet coefficient stacks.
//!
//! The network is implemented directly on `ndarray` with explicit backward
//! passes. It is generic over the scalar type so gradient checks can run in
//! double precision while training and sampling use `f32`.

mod blocks;
mod layers;
mod params;
mod unet;

use std::fmt;
use std::str::FromStr;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use params::{Layout, ParamSpec, Slot};

use crate::wavelet::{WaveletCoefficients, SUBBANDS};
use crate::{Error, Result};
use unet::UNet;

/// Scalar types the network can run in.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    Additive,
    Concatenation,
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipMode::Additive => "additive",
            SkipMode::Concatenation => "concatenation",
        })
    }
}

impl FromStr for SkipMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "additive" | "addition" | "add" => Ok(SkipMode::Additive),
            "concatenation" | "concat" => Ok(SkipMode::Concatenation),
            _ => Err(Error::Config(format!("unknown skip mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub skip_mode: SkipMode,
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth_levels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    /// Defaults to `4 * base_channels` when unset.
    pub time_embedding_dim: Option<usize>,
    pub attention_levels: Vec<usize>,
    pub norm_groups: usize,
    /// Chain length the embedding is normalized against.
    pub num_timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            skip_mode: SkipMode::Concatenation,
            in_channels: 4 * SUBBANDS,
            out_channels: SUBBANDS,
            depth_levels: 4,
            channel_multipliers: vec![1, 2, 4, 8],
            num_res_blocks: 2,
            time_embedding_dim: None,
            attention_levels: Vec::new(),
            norm_groups: 32,
            num_timesteps: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn embedding_dim(&self) -> usize {
        self.time_embedding_dim.unwrap_or(4 * self.base_channels)
    }

    /// Spatial sizes fed to the network must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth_levels.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.in_channels < SUBBANDS || self.in_channels % SUBBANDS != 0 {
            return bad(format!(
                "in_channels must be 8 x (1 + number of condition volumes), got {}",
                self.in_channels
            ));
        }
        if self.out_channels != SUBBANDS {
            return bad(format!("out_channels must be 8, got {}", self.out_channels));
        }
        if self.depth_levels == 0 {
            return bad("depth_levels must be at least 1".into());
        }
        if self.channel_multipliers.len() != self.depth_levels {
            return bad(format!(
                "channel_multipliers has {} entries but depth_levels is {}",
                self.channel_multipliers.len(),
                self.depth_levels
            ));
        }
        if self.channel_multipliers.contains(&0) {
            return bad("channel multipliers must be positive".into());
        }
        if self.num_res_blocks == 0 {
            return bad("num_res_blocks must be at least 1".into());
        }
        if self.embedding_dim() == 0 {
            return bad("time_embedding_dim must be positive".into());
        }
        if self.num_timesteps == 0 {
            return bad("num_timesteps must be positive".into());
        }
        if self.norm_groups == 0 {
            return bad("norm_groups must be positive".into());
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.depth_levels) {
            return bad(format!("attention level {l} is outside 0..{}", self.depth_levels));
        }
        Ok(())
    }
}

/// Anything that predicts clean coefficients from a noisy stack.
pub trait Denoise {
    fn predict_x0(&self, x_t: &WaveletCoefficients, t: usize) -> Result<WaveletCoefficients>;

    fn spatial_multiple(&self) -> usize {
        1
    }

    /// Chain length the model was built for, if it has one.
    fn timesteps(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser<T: Real = f32> {
    config: DenoiserConfig,
    layout: Layout,
    net: UNet,
    params: Vec<T>,
}

impl<T: Real> Denoiser<T> {
    /// Builds a freshly initialized network. Equal seeds give equal weights.
    pub fn build(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let (layout, net) = Self::topology(&config)?;
        let params = layout.initialize(seed);
        Ok(Self {
            config,
            layout,
            net,
            params,
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<T>) -> Result<Self> {
        let (layout, net) = Self::topology(&config)?;
        if params.len() != layout.total() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this configuration, found {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            net,
            params,
        })
    }

    fn topology(config: &DenoiserConfig) -> Result<(Layout, UNet)> {
        config.validate()?;
        let mut layout = Layout::default();
        let net = UNet::build(config, &mut layout)?;
        Ok((layout, net))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// SHA-256 over the weights rounded to little-endian f32.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config.clone(),
            layout: self.layout.clone(),
            net: self.net.clone(),
            params: self.params.iter().map(|p| U::of(p.to_f64().unwrap())).collect(),
        }
    }

    fn check_input(&self, x: &Array4<T>, t: usize) -> Result<()> {
        let (c, d, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.spatial_multiple();
        if [d, h, w].iter().any(|&n| n == 0 || n % m != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {d}x{h}x{w} must be positive multiples of {m} (2^(depth_levels-1))"
            )));
        }
        if t == 0 || t > self.config.num_timesteps {
            return Err(Error::Timestep {
                t,
                max: self.config.num_timesteps,
            });
        }
        Ok(())
    }

    fn embed_time(&self, t: usize) -> f64 {
        1000.0 * t as f64 / self.config.num_timesteps as f64
    }

    pub fn forward(&self, x: &Array4<T>, t: usize) -> Result<Array4<T>> {
        self.check_input(x, t)?;
        Ok(self.net.forward(&self.params, x, self.embed_time(t), false).0)
    }

    /// Mean squared error against `target`; gradients are added into `grads`.
    pub fn loss_and_grad(&self, x: &Array4<T>, t: usize, target: &Array4<T>, grads: &mut [T]) -> Result<f64> {
        self.check_input(x, t)?;
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient buffer has {} entries, network has {}",
                grads.len(),
                self.params.len()
            )));
        }
        let (y, tape) = self.net.forward(&self.params, x, self.embed_time(t), true);
        if y.dim() != target.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} and target {:?} differ",
                y.dim(),
                target.dim()
            )));
        }
        let n = T::of(y.len() as f64);
        let diff = &y - target;
        let loss = diff.iter().map(|&v| v * v).sum::<T>() / n;
        let dy = diff * (T::of(2.0) / n);
        self.net.backward(&self.params, grads, tape.expect("tape kept"), &dy);
        Ok(loss.to_f64().unwrap())
    }

    /// Loss without gradients.
    pub fn loss(&self, x: &Array4<T>, t: usize, target: &Array4<T>) -> Result<f64> {
        let y = self.forward(x, t)?;
        let n = y.len() as f64;
        Ok((&y - target).iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>() / n)
    }
}

impl Denoise for Denoiser<f32> {
    fn predict_x0(&self, x_t: &WaveletCoefficients, t: usize) -> Result<WaveletCoefficients> {
        WaveletCoefficients::new(self.forward(&x_t.data, t)?)
    }

    fn spatial_multiple(&self) -> usize {
        self.config.spatial_multiple()
    }

    fn timesteps(&self) -> Option<usize> {
        Some(self.config.num_timesteps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny(c: usize, skip: SkipMode) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: c,
            skip_mode: skip,
            depth_levels: 2,
            channel_multipliers: vec![1, 2],
            num_res_blocks: 1,
            norm_groups: 4,
            ..Default::default()
        }
    }

    fn random_input<T: Real>(c: usize, n: usize, seed: u64) -> Array4<T> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((c, n, n, n), |_| T::of(rng.random::<f64>() * 2.0 - 1.0))
    }

    #[test]
    fn output_shape_matches_input() {
        let m = Denoiser::<f32>::build(tiny(8, SkipMode::Concatenation), 0).unwrap();
        let y = m.forward(&random_input(32, 8, 1), 10).unwrap();
        assert_eq!(y.dim(), (8, 8, 8, 8));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn default_network_handles_sixteen_cubed() {
        let cfg = DenoiserConfig {
            base_channels: 8,
            norm_groups: 8,
            num_res_blocks: 1,
            ..Default::default()
        };
        let m = Denoiser::<f32>::build(cfg, 0).unwrap();
        let y = m.forward(&random_input(32, 16, 1), 500).unwrap();
        assert_eq!(y.dim(), (8, 16, 16, 16));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let m = Denoiser::<f32>::build(DenoiserConfig { base_channels: 8, ..Default::default() }, 0).unwrap();
        let err = m.forward(&random_input(32, 12, 1), 1).unwrap_err().to_string();
        assert!(err.contains("multiples of 8"), "{err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = tiny(8, SkipMode::Additive);
        for cfg in [
            DenoiserConfig { base_channels: 0, ..base.clone() },
            DenoiserConfig { in_channels: 30, ..base.clone() },
            DenoiserConfig { out_channels: 4, ..base.clone() },
            DenoiserConfig { channel_multipliers: vec![1, 2, 4], ..base.clone() },
            DenoiserConfig { attention_levels: vec![2], ..base.clone() },
            DenoiserConfig { num_res_blocks: 0, ..base.clone() },
        ] {
            assert!(matches!(Denoiser::<f32>::build(cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn parameter_count_grows_with_width() {
        let count = |c| Denoiser::<f32>::build(DenoiserConfig { base_channels: c, ..Default::default() }, 0)
            .unwrap()
            .parameter_count();
        assert!(count(96) > count(64));
        assert!(count(128) > count(96));
    }

    #[test]
    fn concatenation_costs_more_than_addition() {
        let a = Denoiser::<f32>::build(tiny(8, SkipMode::Additive), 0).unwrap();
        let c = Denoiser::<f32>::build(tiny(8, SkipMode::Concatenation), 0).unwrap();
        assert!(c.parameter_count() > a.parameter_count());
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = Denoiser::<f32>::build(tiny(8, SkipMode::Concatenation), 5).unwrap();
        let b = Denoiser::<f32>::build(tiny(8, SkipMode::Concatenation), 5).unwrap();
        let c = Denoiser::<f32>::build(tiny(8, SkipMode::Concatenation), 6).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn inference_is_deterministic() {
        let m = Denoiser::<f32>::build(tiny(8, SkipMode::Additive), 1).unwrap();
        let x = random_input(32, 8, 2);
        assert_eq!(m.forward(&x, 7).unwrap(), m.forward(&x, 7).unwrap());
    }

    #[test]
    fn timestep_reaches_output() {
        let m = Denoiser::<f32>::build(tiny(8, SkipMode::Concatenation), 1).unwrap();
        let x = random_input(32, 8, 2);
        let diff = (m.forward(&x, 1).unwrap() - m.forward(&x, 1000).unwrap())
            .mapv(f32::abs)
            .fold(0.0f32, |a, &b| a.max(b));
        assert!(diff > 0.0);
    }

    #[test]
    fn condition_channels_are_consumed() {
        let m = Denoiser::<f32>::build(tiny(8, SkipMode::Concatenation), 1).unwrap();
        let x = random_input::<f32>(32, 8, 2);
        let mut perm = x.clone();
        // rotate the three condition volumes
        for i in 0..3 {
            let src = 8 + 8 * ((i + 1) % 3);
            for c in 0..8 {
                perm.index_axis_mut(ndarray::Axis(0), 8 + 8 * i + c)
                    .assign(&x.index_axis(ndarray::Axis(0), src + c));
            }
        }
        assert_ne!(m.forward(&x, 50).unwrap(), m.forward(&perm, 50).unwrap());
    }

    #[test]
    fn gradients_match_central_differences() {
        for skip in [SkipMode::Concatenation, SkipMode::Additive] {
            let m = Denoiser::<f64>::build(tiny(4, skip), 3).unwrap();
            let x = random_input::<f64>(32, 8, 4);
            let target = random_input::<f64>(8, 8, 5);
            let mut g = vec![0.0; m.parameter_count()];
            m.loss_and_grad(&x, 123, &target, &mut g).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            let mut probe = m.clone();
            for _ in 0..20 {
                let i = rng.random_range(0..g.len());
                let h = 1e-5;
                let orig = probe.params[i];
                probe.params[i] = orig + h;
                let up = probe.loss(&x, 123, &target).unwrap();
                probe.params[i] = orig - h;
                let dn = probe.loss(&x, 123, &target).unwrap();
                probe.params[i] = orig;
                let num = (up - dn) / (2.0 * h);
                let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
                assert!(rel < 1e-3 || (num - g[i]).abs() < 1e-9, "{:?} {num} vs {}", m.layout.locate(i), g[i]);
            }
        }
    }

    #[test]
    fn attention_gradients_match_central_differences() {
        let cfg = DenoiserConfig { attention_levels: vec![0, 1], ..tiny(4, SkipMode::Concatenation) };
        let m = Denoiser::<f64>::build(cfg, 3).unwrap();
        let x = random_input::<f64>(32, 4, 4);
        let target = random_input::<f64>(8, 4, 5);
        let mut g = vec![0.0; m.parameter_count()];
        m.loss_and_grad(&x, 40, &target, &mut g).unwrap();
        let mut probe = m.clone();
        let attn_idx: Vec<usize> = m
            .layout
            .specs()
            .iter()
            .filter(|s| s.name.contains("attn"))
            .flat_map(|s| s.slot.range().step_by(97))
            .collect();
        assert!(!attn_idx.is_empty());
        for &i in &attn_idx {
            let h = 1e-5;
            let orig = probe.params[i];
            probe.params[i] = orig + h;
            let up = probe.loss(&x, 40, &target).unwrap();
            probe.params[i] = orig - h;
            let dn = probe.loss(&x, 40, &target).unwrap();
            probe.params[i] = orig;
            let num = (up - dn) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-6 * (1.0 + num.abs()), "{:?} {num} vs {}", m.layout.locate(i), g[i]);
        }
    }

    #[test]
    fn cast_preserves_predictions() {
        let m = Denoiser::<f64>::build(tiny(4, SkipMode::Additive), 3).unwrap();
        let x = random_input::<f64>(32, 8, 4);
        let y64 = m.forward(&x, 9).unwrap();
        let y32 = m.cast::<f32>().forward(&x.mapv(|v| v as f32), 9).unwrap();
        let err = (y64.mapv(|v| v as f32) - y32).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
        assert!(err < 1e-4, "{err}");
    }
}
