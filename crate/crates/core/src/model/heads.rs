//! Intermediate task heads and the prediction-to-feature transform.

use crate::autograd::{Tape, Var};
use crate::config::{NetworkConfig, Task};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::params::Bound;

use super::frontend::{conv_layer, AggregatedFeatures};

/// Stride-2 transposed convolution that exactly doubles the resolution.
pub(crate) const UPSAMPLE: ConvSpec = ConvSpec::new(2, 1, 1);

/// Intermediate score maps at 1/4 input resolution, one slot per [`Task`].
#[derive(Clone, Debug, Default)]
pub struct IntermediatePredictions {
    maps: [Option<Var>; 4],
}

fn slot(task: Task) -> usize {
    Task::ALL.iter().position(|&t| t == task).expect("known task")
}

impl IntermediatePredictions {
    pub fn get(&self, task: Task) -> Option<Var> {
        self.maps[slot(task)]
    }

    pub fn set(&mut self, task: Task, v: Var) {
        self.maps[slot(task)] = Some(v);
    }

    pub fn depth(&self) -> Option<Var> {
        self.get(Task::Depth)
    }

    pub fn parsing(&self) -> Option<Var> {
        self.get(Task::Parsing)
    }

    pub fn normal(&self) -> Option<Var> {
        self.get(Task::Normal)
    }

    pub fn contour(&self) -> Option<Var> {
        self.get(Task::Contour)
    }

    pub fn tasks(&self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|&t| self.get(t).is_some()).collect()
    }
}

/// Per-task distillation inputs, all of one shape.
#[derive(Clone, Debug, Default)]
pub struct DistillationFeatures {
    pub maps: Vec<(Task, Var)>,
}

impl DistillationFeatures {
    pub fn get(&self, task: Task) -> Option<Var> {
        self.maps.iter().find(|(t, _)| *t == task).map(|(_, v)| *v)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// One head: upsample the aggregated features, score, and resample to `out_h x out_w`.
pub fn head_forward(
    tape: &mut Tape,
    p: &Bound,
    task: Task,
    features: &AggregatedFeatures,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let (w, b) = p.layer(&format!("heads.{task}.deconv"))?;
    let up = tape.conv_transpose2d(features.tensor, w, b, UPSAMPLE)?;
    let up = tape.silu(up);
    let score = conv_layer(tape, p, &format!("heads.{task}.score"), up, ConvSpec::same(3, 1))?;
    tape.bilinear_resize(score, out_h, out_w)
}

/// Every configured head; `out_h x out_w` is a quarter of the input resolution.
pub fn heads_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &NetworkConfig,
    features: &AggregatedFeatures,
    out_h: usize,
    out_w: usize,
) -> Result<IntermediatePredictions> {
    let mut preds = IntermediatePredictions::default();
    for task in cfg.heads() {
        preds.set(task, head_forward(tape, p, task, features, out_h, out_w)?);
    }
    Ok(preds)
}

/// Widens each active prediction to `distill_width` channels with a 3x3
/// convolution and nonlinearity.
pub fn predictions_to_features(
    tape: &mut Tape,
    p: &Bound,
    cfg: &NetworkConfig,
    preds: &IntermediatePredictions,
) -> Result<DistillationFeatures> {
    let inputs = cfg.inputs();
    if inputs.is_empty() && cfg.distill_variant.uses_predictions() {
        return Err(Error::Config(format!(
            "distill_variant {} with no active inputs",
            cfg.distill_variant.name()
        )));
    }
    let mut maps = Vec::with_capacity(inputs.len());
    for task in inputs {
        let pred = preds
            .get(task)
            .ok_or_else(|| Error::Config(format!("no intermediate prediction for active input {task}")))?;
        let f = conv_layer(tape, p, &format!("transform.{task}"), pred, ConvSpec::same(3, 1))?;
        maps.push((task, tape.silu(f)));
    }
    Ok(DistillationFeatures { maps })
}
