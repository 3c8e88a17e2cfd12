//! The prediction-and-distillation network.

pub mod decoder;
pub mod distill;
pub mod frontend;
pub mod heads;
pub mod init;

pub use decoder::{decode, FinalPredictions};
pub use distill::{
    attention_map, distill, distill_a, distill_b, distill_c, distill_c_with_messages, distill_matched_capacity,
    message_maps, FusedFeatures,
};
pub use frontend::{aggregate_scales, encoder_stages, frontend_forward, AggregatedFeatures, OUTPUT_STRIDE};
pub use heads::{heads_forward, predictions_to_features, DistillationFeatures, IntermediatePredictions};
pub use init::{build_frontend, build_params, layer_specs, LayerKind, LayerSpec};

use crate::autograd::{Tape, Var};
use crate::config::{DistillVariant, NetworkConfig, Task};
use crate::error::Result;
use crate::kernels::ConvSpec;
use crate::params::Bound;

/// Which parts of the network a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Front-end and the intermediate parsing head only.
    ParsingPretrain,
    /// Everything.
    Full,
}

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub aggregated: AggregatedFeatures,
    pub intermediate: IntermediatePredictions,
    pub features: Option<DistillationFeatures>,
    pub fused: Option<FusedFeatures>,
    pub finals: FinalPredictions,
}

/// Forward pass from an image batch `(n, 3, h, w)`.
pub fn forward(tape: &mut Tape, p: &Bound, cfg: &NetworkConfig, image: Var, stage: Stage) -> Result<Outputs> {
    let s = tape.shape(image);
    let (qh, qw) = (s.h / 4, s.w / 4);
    let aggregated = frontend_forward(tape, p, cfg, image)?;
    if stage == Stage::ParsingPretrain {
        let mut intermediate = IntermediatePredictions::default();
        let parsing = heads::head_forward(tape, p, Task::Parsing, &aggregated, qh, qw)?;
        intermediate.set(Task::Parsing, parsing);
        return Ok(Outputs {
            aggregated,
            intermediate,
            features: None,
            fused: None,
            finals: FinalPredictions::default(),
        });
    }
    let intermediate = heads_forward(tape, p, cfg, &aggregated, qh, qw)?;
    let (features, fused) = if cfg.distill_variant == DistillVariant::None {
        let mut maps = Vec::new();
        for k in cfg.finals() {
            let projected = frontend::conv_layer(tape, p, &format!("bridge.{k}"), aggregated.tensor, ConvSpec::default())?;
            maps.push((k, tape.bilinear_resize(projected, qh, qw)?));
        }
        (None, FusedFeatures::PerTask(maps))
    } else {
        let features = predictions_to_features(tape, p, cfg, &intermediate)?;
        let fused = distill(tape, p, cfg, &features)?.expect("variant uses predictions");
        (Some(features), fused)
    };
    let mut finals = FinalPredictions::default();
    for k in cfg.finals() {
        let input = fused.for_task(k).expect("fused map per final task");
        finals.set(k, decode(tape, p, cfg, input, k)?);
    }
    Ok(Outputs {
        aggregated,
        intermediate,
        features,
        fused: Some(fused),
        finals,
    })
}

/// Parameter names optimised during the parsing-only first phase.
pub fn in_pretrain_phase(name: &str) -> bool {
    name.starts_with("frontend.") || name.starts_with("heads.parsing.")
}

/// Convenience for the forward pass on constant parameters.
pub fn forward_frozen(tape: &mut Tape, params: &crate::params::ParamStore, cfg: &NetworkConfig, image: Var) -> Result<(Outputs, Bound)> {
    let bound = params.bind(tape, |_| false);
    let out = forward(tape, &bound, cfg, image, Stage::Full)?;
    Ok((out, bound))
}
