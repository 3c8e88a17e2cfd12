//! Parameter layout and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DistillVariant, NetworkConfig};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Shape4, Tensor4};

/// Kernel extent of the learned upsampling layers.
pub const DECONV_KERNEL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Weight `(out, in, k, k)`.
    Conv,
    /// Weight `(in, out, k, k)`, stride 2.
    Deconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Gaussian with variance `2 / fan_in`.
    Kaiming,
    Zero,
}

/// One learnable layer: weight plus bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub init: Init,
}

impl LayerSpec {
    fn conv(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv,
            in_channels,
            out_channels,
            kernel,
            init: Init::Kaiming,
        }
    }

    fn deconv(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::Deconv,
            ..Self::conv(name, in_channels, out_channels, DECONV_KERNEL)
        }
    }

    fn zeroed(mut self) -> Self {
        self.init = Init::Zero;
        self
    }

    pub fn weight_shape(&self) -> Shape4 {
        let k = self.kernel;
        match self.kind {
            LayerKind::Conv => Shape4::new(self.out_channels, self.in_channels, k, k),
            LayerKind::Deconv => Shape4::new(self.in_channels, self.out_channels, k, k),
        }
    }

    pub fn bias_shape(&self) -> Shape4 {
        Shape4::new(self.out_channels, 1, 1, 1)
    }

    pub fn scalar_count(&self) -> usize {
        self.weight_shape().numel() + self.out_channels
    }

    fn fan_in(&self) -> usize {
        let taps = self.in_channels * self.kernel * self.kernel;
        match self.kind {
            LayerKind::Conv => taps,
            // each output pixel of a stride-2 transposed conv sees a quarter of the taps
            LayerKind::Deconv => (taps / 4).max(1),
        }
    }
}

/// Every layer of the network described by `cfg`, in construction order.
pub fn layer_specs(cfg: &NetworkConfig) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut prev = 3;
    for (i, &c) in cfg.encoder_stages.iter().enumerate() {
        layers.push(LayerSpec::conv(format!("frontend.stage{}", i + 1), prev, c, 3));
        prev = c;
    }
    for i in 0..cfg.dilation_rates.len() {
        layers.push(LayerSpec::conv(format!("frontend.dilated{}", i + 1), prev, prev, 3));
    }
    let last = prev;
    for (i, &c) in cfg.encoder_stages[..cfg.encoder_stages.len() - 1].iter().enumerate() {
        let r = crate::config::reduced_width(c, last);
        layers.push(LayerSpec::conv(format!("frontend.reduce{}", i + 1), c, r, 1));
    }
    let agg = cfg.aggregated_width();
    for task in cfg.heads() {
        let width = task.head_width(cfg.head_width);
        layers.push(LayerSpec::deconv(format!("heads.{task}.deconv"), agg, width));
        layers.push(LayerSpec::conv(
            format!("heads.{task}.score"),
            width,
            task.channels(cfg.num_classes),
            3,
        ));
    }
    let cf = cfg.distill_width;
    let inputs = cfg.inputs();
    let finals = cfg.finals();
    if cfg.distill_variant.uses_predictions() {
        for &task in &inputs {
            layers.push(LayerSpec::conv(
                format!("transform.{task}"),
                task.channels(cfg.num_classes),
                cf,
                3,
            ));
        }
    }
    match cfg.distill_variant {
        DistillVariant::None => {
            for k in &finals {
                layers.push(LayerSpec::conv(format!("bridge.{k}"), agg, cf, 1));
            }
        }
        DistillVariant::A => {}
        DistillVariant::B => {
            for k in &finals {
                for &t in inputs.iter().filter(|&&t| t != k.task()) {
                    layers.push(LayerSpec::conv(format!("distill.message.{t}_to_{k}"), cf, cf, 3).zeroed());
                }
            }
        }
        DistillVariant::C | DistillVariant::MatchedCapacity => {
            for k in &finals {
                layers.push(LayerSpec::conv(format!("distill.attention.{k}"), cf, cf, 3));
            }
            for &t in &inputs {
                layers.push(LayerSpec::conv(format!("distill.message.{t}"), cf, cf, 3).zeroed());
            }
        }
    }
    let fused = cfg.fused_width();
    for k in &finals {
        layers.push(LayerSpec::deconv(format!("decoder.{k}.deconv1"), fused, fused / 2));
        layers.push(LayerSpec::deconv(format!("decoder.{k}.deconv2"), fused / 2, fused / 4));
        layers.push(LayerSpec::conv(
            format!("decoder.{k}.score"),
            fused / 4,
            k.task().channels(cfg.num_classes),
            3,
        ));
    }
    Ok(layers)
}

/// Allocates and initializes all parameters; deterministic in `seed`.
pub fn build_params(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for layer in layer_specs(cfg)? {
        let weight = match layer.init {
            Init::Kaiming => {
                let std = (2.0 / layer.fan_in() as f64).sqrt();
                Tensor4::randn(layer.weight_shape(), std, &mut rng)
            }
            Init::Zero => Tensor4::zeros(layer.weight_shape()),
        };
        store.insert(format!("{}.weight", layer.name), weight);
        let mut bias = Tensor4::zeros(layer.bias_shape());
        if layer.name == "heads.normal.score" {
            // Start at the camera-facing normal rather than the origin, where
            // normalisation is singular.
            bias.data_mut()[2] = 1.0;
        }
        store.insert(format!("{}.bias", layer.name), bias);
    }
    Ok(store)
}

/// Encoder and aggregation parameters only.
pub fn build_frontend(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    let all = build_params(cfg, seed)?;
    let mut out = ParamStore::new();
    for (name, t) in all.iter().filter(|(n, _)| n.starts_with("frontend.")) {
        out.insert(name.clone(), t.clone());
    }
    Ok(out)
}
