//! Multi-modal distillation: fusing per-task features for each final task.
//!
//! * `A` concatenates every feature map and shares the result.
//! * `B` adds convolved messages from every other task:
//!   `F_out[k] = F[k] + Σ_{t≠k} W[t,k] ⊗ F[t]`.
//! * `C` gates those messages with an attention map computed from the
//!   receiving task: `G[k] = σ(W_g[k] ⊗ F[k])`,
//!   `F_out[k] = F[k] + Σ_{t≠k} G[k] ⊙ (W[t] ⊗ F[t])`. The message kernels
//!   `W[t]` are shared between final tasks.

use crate::autograd::{Tape, Var};
use crate::config::{DistillVariant, FinalTask, NetworkConfig, Task};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::Bound;

use super::frontend::conv_layer;
use super::heads::DistillationFeatures;

const MESSAGE: ConvSpec = ConvSpec::same(3, 1);

/// Decoder inputs after distillation.
#[derive(Clone, Debug)]
pub enum FusedFeatures {
    /// One map consumed by every decoder.
    Shared(Var),
    /// One map per final task.
    PerTask(Vec<(FinalTask, Var)>),
}

impl FusedFeatures {
    pub fn for_task(&self, k: FinalTask) -> Option<Var> {
        match self {
            FusedFeatures::Shared(v) => Some(*v),
            FusedFeatures::PerTask(maps) => maps.iter().find(|(t, _)| *t == k).map(|(_, v)| *v),
        }
    }
}

fn receiving(features: &DistillationFeatures, k: FinalTask) -> Result<Var> {
    features
        .get(k.task())
        .ok_or_else(|| Error::Config(format!("distillation features lack final task {k}")))
}

/// Naive fusion: channel concatenation in feature order.
pub fn distill_a(tape: &mut Tape, features: &DistillationFeatures) -> Result<Var> {
    let parts: Vec<Var> = features.maps.iter().map(|(_, v)| *v).collect();
    tape.concat_channels(&parts)
}

/// Residual message passing into final task `k`.
pub fn distill_b(tape: &mut Tape, p: &Bound, features: &DistillationFeatures, k: FinalTask) -> Result<Var> {
    let own = receiving(features, k)?;
    let mut terms = vec![own];
    for &(t, f) in features.maps.iter().filter(|(t, _)| *t != k.task()) {
        terms.push(conv_layer(tape, p, &format!("distill.message.{t}_to_{k}"), f, MESSAGE)?);
    }
    tape.add(&terms)
}

/// `σ(W_g[k] ⊗ F[k])`.
pub fn attention_map(tape: &mut Tape, p: &Bound, f_k: Var, k: FinalTask) -> Result<Var> {
    let logits = conv_layer(tape, p, &format!("distill.attention.{k}"), f_k, MESSAGE)?;
    Ok(tape.sigmoid(logits))
}

/// `W[t] ⊗ F[t]` for every source task, computed once and shared by both
/// final tasks.
pub fn message_maps(tape: &mut Tape, p: &Bound, features: &DistillationFeatures) -> Result<Vec<(Task, Var)>> {
    features
        .maps
        .iter()
        .map(|&(t, f)| Ok((t, conv_layer(tape, p, &format!("distill.message.{t}"), f, MESSAGE)?)))
        .collect()
}

/// Attention-gated message passing into final task `k`.
pub fn distill_c(tape: &mut Tape, p: &Bound, features: &DistillationFeatures, k: FinalTask) -> Result<Var> {
    let messages = message_maps(tape, p, features)?;
    distill_c_with_messages(tape, p, features, k, &messages)
}

/// [`distill_c`] with precomputed [`message_maps`].
pub fn distill_c_with_messages(
    tape: &mut Tape,
    p: &Bound,
    features: &DistillationFeatures,
    k: FinalTask,
    messages: &[(Task, Var)],
) -> Result<Var> {
    let own = receiving(features, k)?;
    let incoming: Vec<Var> = messages
        .iter()
        .filter(|(t, _)| *t != k.task())
        .map(|(_, m)| *m)
        .collect();
    if incoming.is_empty() {
        return Ok(own);
    }
    let gate = attention_map(tape, p, own, k)?;
    let mut terms = vec![own];
    for m in incoming {
        terms.push(tape.mul(gate, m)?);
    }
    tape.add(&terms)
}

/// Capacity-matched control: the layers of `C`, but each message convolution
/// reads the receiving task's own features so nothing crosses between tasks.
pub fn distill_matched_capacity(
    tape: &mut Tape,
    p: &Bound,
    features: &DistillationFeatures,
    k: FinalTask,
) -> Result<Var> {
    let own = receiving(features, k)?;
    let sources: Vec<Task> = features.maps.iter().map(|(t, _)| *t).filter(|&t| t != k.task()).collect();
    if sources.is_empty() {
        return Ok(own);
    }
    let gate = attention_map(tape, p, own, k)?;
    let mut terms = vec![own];
    for t in sources {
        let m = conv_layer(tape, p, &format!("distill.message.{t}"), own, MESSAGE)?;
        terms.push(tape.mul(gate, m)?);
    }
    tape.add(&terms)
}

/// Runs the configured variant for every final task. Returns `None` for
/// [`DistillVariant::None`].
pub fn distill(
    tape: &mut Tape,
    p: &Bound,
    cfg: &NetworkConfig,
    features: &DistillationFeatures,
) -> Result<Option<FusedFeatures>> {
    let finals = cfg.finals();
    let fused = match cfg.distill_variant {
        DistillVariant::None => return Ok(None),
        DistillVariant::A => FusedFeatures::Shared(distill_a(tape, features)?),
        DistillVariant::B => FusedFeatures::PerTask(
            finals
                .iter()
                .map(|&k| Ok((k, distill_b(tape, p, features, k)?)))
                .collect::<Result<_>>()?,
        ),
        DistillVariant::C => {
            let messages = message_maps(tape, p, features)?;
            FusedFeatures::PerTask(
                finals
                    .iter()
                    .map(|&k| Ok((k, distill_c_with_messages(tape, p, features, k, &messages)?)))
                    .collect::<Result<_>>()?,
            )
        }
        DistillVariant::MatchedCapacity => FusedFeatures::PerTask(
            finals
                .iter()
                .map(|&k| Ok((k, distill_matched_capacity(tape, p, features, k)?)))
                .collect::<Result<_>>()?,
        ),
    };
    Ok(Some(fused))
}
