//! Task decoders: two channel-halving 2x upsamplings and a score convolution.

use crate::autograd::{Tape, Var};
use crate::config::{FinalTask, NetworkConfig};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::Bound;

use super::frontend::conv_layer;
use super::heads::UPSAMPLE;

/// Full-resolution outputs of the final decoders.
#[derive(Clone, Debug, Default)]
pub struct FinalPredictions {
    pub depth: Option<Var>,
    pub parsing: Option<Var>,
}

impl FinalPredictions {
    pub fn get(&self, k: FinalTask) -> Option<Var> {
        match k {
            FinalTask::Depth => self.depth,
            FinalTask::Parsing => self.parsing,
        }
    }

    pub fn set(&mut self, k: FinalTask, v: Var) {
        match k {
            FinalTask::Depth => self.depth = Some(v),
            FinalTask::Parsing => self.parsing = Some(v),
        }
    }
}

/// Decodes `fused` (1/4 input resolution) into task `k`'s full-resolution score map.
pub fn decode(tape: &mut Tape, p: &Bound, cfg: &NetworkConfig, fused: Var, k: FinalTask) -> Result<Var> {
    let c = tape.shape(fused).c;
    if c < 4 {
        return Err(Error::Config(format!(
            "decoder input has {c} channels; halving twice needs at least 4"
        )));
    }
    let mut x = fused;
    for stage in ["deconv1", "deconv2"] {
        let (w, b) = p.layer(&format!("decoder.{k}.{stage}"))?;
        let y = tape.conv_transpose2d(x, w, b, UPSAMPLE)?;
        x = tape.silu(y);
    }
    let score = conv_layer(tape, p, &format!("decoder.{k}.score"), x, ConvSpec::same(3, 1))?;
    debug_assert_eq!(tape.shape(score).c, k.task().channels(cfg.num_classes));
    Ok(score)
}
