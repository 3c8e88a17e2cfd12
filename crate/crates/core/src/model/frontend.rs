//! Strided encoder with a dilated last stage and multi-scale aggregation.

use crate::autograd::{Tape, Var};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::Bound;

/// Total downsampling of the front-end.
pub const OUTPUT_STRIDE: usize = 8;

/// Aggregated front-end features at 1/8 input resolution.
#[derive(Clone, Debug)]
pub struct AggregatedFeatures {
    pub tensor: Var,
    /// 1-based stage ids whose maps were concatenated, in channel order.
    pub source_scales: Vec<usize>,
}

pub(crate) fn conv_layer(tape: &mut Tape, p: &Bound, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let (w, b) = p.layer(name)?;
    tape.conv2d(x, w, b, spec)
}

/// Runs the encoder; returns one map per configured stage. The first three
/// stages halve the resolution, dilated convolutions extend the last one.
pub fn encoder_stages(tape: &mut Tape, p: &Bound, cfg: &NetworkConfig, image: Var) -> Result<Vec<Var>> {
    let s = tape.shape(image);
    if s.h % OUTPUT_STRIDE != 0 || s.w % OUTPUT_STRIDE != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::Usage(format!(
            "input {}x{} must be a positive multiple of {OUTPUT_STRIDE} in both dimensions",
            s.h, s.w
        )));
    }
    if s.c != 3 {
        return Err(Error::Usage(format!("input must have 3 channels, got {}", s.c)));
    }
    let mut maps = Vec::with_capacity(cfg.encoder_stages.len());
    let mut x = image;
    for i in 0..cfg.encoder_stages.len() {
        let stride = if i < 3 { 2 } else { 1 };
        let y = conv_layer(tape, p, &format!("frontend.stage{}", i + 1), x, ConvSpec::new(stride, 1, 1))?;
        x = tape.silu(y);
        maps.push(x);
    }
    for (j, &d) in cfg.dilation_rates.iter().enumerate() {
        let y = conv_layer(tape, p, &format!("frontend.dilated{}", j + 1), x, ConvSpec::same(3, d))?;
        x = tape.silu(y);
    }
    if let Some(last) = maps.last_mut() {
        *last = x;
    }
    Ok(maps)
}

/// Reduces every shallower map with a 1x1 convolution, resamples it to the
/// last map's resolution and concatenates everything along channels.
pub fn aggregate_scales(tape: &mut Tape, p: &Bound, stage_maps: &[Var]) -> Result<AggregatedFeatures> {
    let (&last, shallow) = stage_maps
        .split_last()
        .ok_or_else(|| Error::Usage("aggregate_scales needs at least one stage map".into()))?;
    let target = tape.shape(last);
    let mut parts = Vec::with_capacity(stage_maps.len());
    for (i, &m) in shallow.iter().enumerate() {
        let reduced = conv_layer(tape, p, &format!("frontend.reduce{}", i + 1), m, ConvSpec::default())?;
        parts.push(tape.bilinear_resize(reduced, target.h, target.w)?);
    }
    parts.push(last);
    Ok(AggregatedFeatures {
        tensor: tape.concat_channels(&parts)?,
        source_scales: (1..=stage_maps.len()).collect(),
    })
}

/// Encoder followed by aggregation.
pub fn frontend_forward(tape: &mut Tape, p: &Bound, cfg: &NetworkConfig, image: Var) -> Result<AggregatedFeatures> {
    let maps = encoder_stages(tape, p, cfg, image)?;
    aggregate_scales(tape, p, &maps)
}
