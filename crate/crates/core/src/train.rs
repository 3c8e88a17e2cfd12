//! Two-phase training and batched inference.

use std::fmt::Write as _;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::{FinalTask, NetworkConfig, TrainConfig};
use crate::data::{augment, LabelMap, Sample, NYUD_RATIOS, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::loss::{build_objective, stack_images, LossKind, LossReport, Targets};
use crate::metrics::{ConfusionMatrix, DepthAccumulator, DepthMetrics, ParsingMetrics, RelDenominator};
use crate::model::{build_params, forward, in_pretrain_phase, Stage};
use crate::optim::Sgd;
use crate::params::ParamStore;
use crate::tensor::{Shape4, Tensor4};

/// One line of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub iteration: u64,
    pub phase: u8,
    pub report: LossReport,
    pub learning_rate: f64,
}

pub const CURVE_HEADER: &str = "iteration\tphase\tL1_intermediate_depth\tL2_intermediate_parsing\tL3_normal\tL4_contour\tL5_final_depth\tL6_final_parsing\tL_all\tlr";

impl CurveRow {
    /// Tab-separated; inactive loss terms print as `-`.
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{}", self.iteration, self.phase);
        for kind in LossKind::ALL {
            let i = kind.index();
            if self.report.active[i] {
                let _ = write!(s, "\t{:.9e}", self.report.values[i]);
            } else {
                s.push_str("\t-");
            }
        }
        let _ = write!(s, "\t{:.9e}\t{:e}", self.report.total, self.learning_rate);
        s
    }
}

/// Header plus one line per row.
pub fn format_curve(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// Everything needed to resume or checkpoint a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: Sgd,
    pub iteration: u64,
    pub phase: u8,
    pub curve: Vec<CurveRow>,
}

/// Where an epoch ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochMark {
    pub phase: u8,
    pub epoch: usize,
}

/// A run that stopped early; `last_good` is the state at the end of the
/// last completed epoch, if any.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Box<TrainState>>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        Self { error, last_good: None }
    }
}

/// One forward/backward/update on `batch`. Returns the loss report of the
/// forward pass, taken before the update.
pub fn train_step(
    params: &mut ParamStore,
    optimizer: &mut Sgd,
    net: &NetworkConfig,
    batch: &[&Sample],
    stage: Stage,
    max_pos_weight: f64,
    clip_grad_norm: Option<f64>,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let image = tape.constant(stack_images(batch)?);
    let targets = Targets::from_samples(batch)?;
    let bound = match stage {
        Stage::ParsingPretrain => params.bind(&mut tape, in_pretrain_phase),
        Stage::Full => params.bind(&mut tape, |_| true),
    };
    let out = forward(&mut tape, &bound, net, image, stage)?;
    let objective = build_objective(&mut tape, &out, &targets, net, stage, max_pos_weight)?;
    let report = objective.report(&tape);
    for kind in LossKind::ALL {
        let i = kind.index();
        if report.active[i] && !report.values[i].is_finite() {
            return Err(Error::Divergence(format!("{} is {}", kind.name(), report.values[i])));
        }
    }
    if !report.total.is_finite() {
        return Err(Error::Divergence(format!("L_all is {}", report.total)));
    }
    let mut grads = tape.backward(objective.total)?;
    let mut grads = bound.collect_grads(&tape, &mut grads);
    if let Some(max) = clip_grad_norm {
        let norm = grads.values().map(|g| g.dot(g)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("gradient norm is {norm}")));
        }
        if norm > max {
            let scale = max / norm;
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
    optimizer.step(params, &grads);
    Ok(report)
}

/// Phase 1 fits the front-end and intermediate parsing head to the parsing
/// loss; phase 2 fits every parameter to the joint objective with a fresh
/// optimiser. `on_epoch` runs after every completed epoch.
pub fn two_phase_train(
    net: &NetworkConfig,
    training: &TrainConfig,
    train: &[Sample],
    seed: u64,
    mut on_epoch: impl FnMut(&TrainState, EpochMark) -> Result<()>,
) -> std::result::Result<TrainState, TrainFailure> {
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()).into());
    }
    net.validate()?;
    training.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TrainState {
        params: build_params(net, seed)?,
        optimizer: Sgd::new(training.phase1_lr, training.momentum, training.weight_decay),
        iteration: 0,
        phase: 1,
        curve: Vec::new(),
    };
    let mut last_good: Option<Box<TrainState>> = None;
    let phases = [
        (1u8, Stage::ParsingPretrain, training.phase1_epochs, training.phase1_lr),
        (2u8, Stage::Full, training.phase2_epochs, training.phase2_lr),
    ];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for (phase, stage, epochs, lr) in phases {
        state.phase = phase;
        state.optimizer = Sgd::new(lr, training.momentum, training.weight_decay);
        let steps_per_epoch = train.len().div_ceil(training.batch_size);
        let total_steps = (epochs * steps_per_epoch) as f64;
        let mut step = 0usize;
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(training.batch_size) {
                let lr = match training.poly_power {
                    Some(power) => lr * (1.0 - step as f64 / total_steps).powf(power),
                    None => lr,
                };
                state.optimizer.learning_rate = lr;
                step += 1;
                let augmented: Vec<Sample>;
                let batch: Vec<&Sample> = if training.augment {
                    augmented = chunk
                        .iter()
                        .map(|&i| augment(&train[i], &mut rng, &NYUD_RATIOS))
                        .collect::<Result<_>>()?;
                    augmented.iter().collect()
                } else {
                    chunk.iter().map(|&i| &train[i]).collect()
                };
                let report = match train_step(
                    &mut state.params,
                    &mut state.optimizer,
                    net,
                    &batch,
                    stage,
                    training.max_pos_weight,
                    training.clip_grad_norm,
                ) {
                    Ok(r) => r,
                    Err(error) => return Err(TrainFailure { error, last_good }),
                };
                state.iteration += 1;
                state.curve.push(CurveRow {
                    iteration: state.iteration,
                    phase,
                    report,
                    learning_rate: lr,
                });
            }
            debug!(
                "phase {phase} epoch {epoch}: L_all {:.5}",
                state.curve.last().map_or(f64::NAN, |r| r.report.total)
            );
            on_epoch(&state, EpochMark { phase, epoch }).map_err(|error| TrainFailure {
                error,
                last_good: last_good.clone(),
            })?;
            last_good = Some(Box::new(state.clone()));
        }
    }
    Ok(state)
}

/// Final predictions for one image batch: depth maps and argmax labels.
/// Only the image enters the network.
pub fn predict(params: &ParamStore, net: &NetworkConfig, images: &Tensor4) -> Result<(Option<Tensor4>, Option<LabelMap>)> {
    let mut tape = Tape::new();
    let image = tape.constant(images.clone());
    let bound = params.bind(&mut tape, |_| false);
    let out = forward(&mut tape, &bound, net, image, Stage::Full)?;
    let depth = out.finals.get(FinalTask::Depth).map(|v| tape.value(v).clone());
    let labels = out.finals.get(FinalTask::Parsing).map(|v| argmax_labels(tape.value(v)));
    Ok((depth, labels))
}

/// Per-pixel argmax over channels; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor4) -> LabelMap {
    let s = logits.shape();
    let mut data = Vec::with_capacity(s.n * s.plane());
    for n in 0..s.n {
        for i in 0..s.plane() {
            let mut best = 0;
            for c in 1..s.c {
                if logits.plane(n, c)[i] > logits.plane(n, best)[i] {
                    best = c;
                }
            }
            data.push(best as u8);
        }
    }
    LabelMap::from_vec(s.n, s.h, s.w, data).expect("label count")
}

/// Metrics and optional predictions over a dataset.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub depth: Option<DepthMetrics>,
    pub parsing: Option<ParsingMetrics>,
    /// Per-sample predictions, kept only when requested.
    pub predictions: Vec<(Option<Tensor4>, Option<LabelMap>)>,
}

/// Runs inference over `samples` and accumulates metrics against their ground truth.
pub fn evaluate(
    params: &ParamStore,
    net: &NetworkConfig,
    samples: &[Sample],
    denominator: RelDenominator,
    keep_predictions: bool,
) -> Result<Evaluation> {
    let mut depth_acc = DepthAccumulator::new(denominator);
    let mut cm = ConfusionMatrix::new(net.num_classes);
    let mut predictions = Vec::new();
    let has_depth = net.final_tasks.contains(&FinalTask::Depth);
    let has_parsing = net.final_tasks.contains(&FinalTask::Parsing);
    for chunk in samples.chunks(4) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = stack_images(&refs)?;
        let (depth, labels) = predict(params, net, &images)?;
        for (j, s) in chunk.iter().enumerate() {
            let d = depth.as_ref().map(|d| sample_slice(d, j));
            let l = labels.as_ref().map(|l| label_slice(l, j));
            if let Some(d) = &d {
                depth_acc.add(d, &s.depth, &s.valid_mask)?;
            }
            if let Some(l) = &l {
                cm.add(l, &s.labels, IGNORE_LABEL)?;
            }
            if keep_predictions {
                predictions.push((d, l));
            }
        }
    }
    Ok(Evaluation {
        depth: if has_depth { depth_acc.finish() } else { None },
        parsing: if has_parsing { cm.finish() } else { None },
        predictions,
    })
}

fn sample_slice(t: &Tensor4, n: usize) -> Tensor4 {
    let s = t.shape();
    let len = s.c * s.plane();
    Tensor4::from_vec(Shape4::new(1, s.c, s.h, s.w), t.data()[n * len..(n + 1) * len].to_vec()).expect("slice")
}

fn label_slice(l: &LabelMap, n: usize) -> LabelMap {
    let len = l.h * l.w;
    LabelMap::from_vec(1, l.h, l.w, l.data[n * len..(n + 1) * len].to_vec()).expect("slice")
}
