//! The six-term joint objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::config::{FinalTask, LossWeights, NetworkConfig, Task};
use crate::data::{contours_from_semantics, LabelMap, Sample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::kernels::bilinear_taps;
use crate::model::{Outputs, Stage};
use crate::tensor::{Shape4, Tensor4};

/// The loss terms in objective order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossKind {
    IntermediateDepth,
    IntermediateParsing,
    Normal,
    Contour,
    FinalDepth,
    FinalParsing,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::IntermediateDepth,
        LossKind::IntermediateParsing,
        LossKind::Normal,
        LossKind::Contour,
        LossKind::FinalDepth,
        LossKind::FinalParsing,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::IntermediateDepth => "L1_intermediate_depth",
            LossKind::IntermediateParsing => "L2_intermediate_parsing",
            LossKind::Normal => "L3_normal",
            LossKind::Contour => "L4_contour",
            LossKind::FinalDepth => "L5_final_depth",
            LossKind::FinalParsing => "L6_final_parsing",
        }
    }
}

/// Values, weights and total of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub values: [f64; 6],
    pub weights: [f64; 6],
    /// Terms that entered the objective; inactive terms read 0.
    pub active: [bool; 6],
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, kind: LossKind) -> f64 {
        self.values[kind.index()]
    }
}

/// `Σ wᵢ·Lᵢ` over active terms; a non-finite active term is an error naming it.
pub fn combine_losses(values: &[f64; 6], active: &[bool; 6], weights: &LossWeights) -> Result<f64> {
    let w = weights.as_array();
    let mut total = 0.0;
    for kind in LossKind::ALL {
        let i = kind.index();
        if !active[i] {
            continue;
        }
        if !values[i].is_finite() {
            return Err(Error::Divergence(format!("{} is {}", kind.name(), values[i])));
        }
        total += w[i] * values[i];
    }
    Ok(total)
}

/// Masked mean squared depth error.
pub fn loss_depth(tape: &mut Tape, pred: Var, target: &Tensor4, mask: &Tensor4) -> Result<Var> {
    tape.masked_squared_error(pred, target, mask)
}

/// Masked squared error between the unit-normalized prediction and the target normal.
pub fn loss_normal(tape: &mut Tape, pred: Var, target: &Tensor4, mask: &Tensor4) -> Result<Var> {
    tape.normal_error(pred, target, mask)
}

/// Mean softmax cross-entropy over non-ignored pixels.
pub fn loss_parsing(tape: &mut Tape, logits: Var, labels: &LabelMap, ignore: u8) -> Result<Var> {
    tape.softmax_cross_entropy(logits, &labels.data, ignore)
}

/// Mean weighted sigmoid cross-entropy over pixels where `mask` is set.
pub fn loss_contour(tape: &mut Tape, logit: Var, target: &Tensor4, mask: &Tensor4, pos_weight: f64) -> Result<Var> {
    tape.sigmoid_cross_entropy(logit, target, mask, pos_weight)
}

/// `negatives / positives` over the masked pixels, clamped to `[1, max]`.
pub fn contour_pos_weight(target: &Tensor4, mask: &Tensor4, max: f64) -> f64 {
    let (mut pos, mut neg) = (0.0f64, 0.0f64);
    for (&t, &m) in target.data().iter().zip(mask.data()) {
        if m != 0.0 {
            if t > 0.5 {
                pos += 1.0;
            } else {
                neg += 1.0;
            }
        }
    }
    if pos == 0.0 {
        return 1.0;
    }
    (neg / pos).clamp(1.0, max.max(1.0))
}

/// Ground truth at one resolution, batched.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub depth: Tensor4,
    pub depth_mask: Tensor4,
    pub labels: LabelMap,
    pub normal: Tensor4,
    pub normal_mask: Tensor4,
    pub contour: Tensor4,
    pub contour_mask: Tensor4,
}

/// Targets for the full-resolution decoders and the quarter-resolution heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub full: TargetMaps,
    pub quarter: TargetMaps,
}

fn stack(tensors: &[&Tensor4]) -> Tensor4 {
    let s = tensors[0].shape();
    let mut data = Vec::with_capacity(s.numel() * tensors.len());
    for t in tensors {
        data.extend_from_slice(t.data());
    }
    Tensor4::from_vec(Shape4::new(tensors.len() * s.n, s.c, s.h, s.w), data).expect("equal shapes")
}

/// Stacks the images of `samples` into one batch.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor4> {
    check_sizes(samples)?;
    Ok(stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>()))
}

fn check_sizes(samples: &[&Sample]) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    if samples
        .iter()
        .any(|s| s.image.shape() != first.image.shape() || s.num_classes != first.num_classes)
    {
        return Err(Error::Config("batch mixes sample sizes or class counts".into()));
    }
    Ok(())
}

fn ignore_mask(labels: &LabelMap) -> Tensor4 {
    let data = labels
        .data
        .iter()
        .map(|&l| if l == IGNORE_LABEL { 0.0 } else { 1.0 })
        .collect();
    Tensor4::from_vec(Shape4::new(labels.n, 1, labels.h, labels.w), data).expect("label count")
}

/// Nearest-neighbour sampling on the corner-aligned grid.
fn nearest(t: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let s = t.shape();
    let ty = bilinear_taps(s.h, h);
    let tx = bilinear_taps(s.w, w);
    let pick = |(lo, hi, f): (usize, usize, f64)| if f < 0.5 { lo } else { hi };
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for (y, &sy) in ty.iter().enumerate() {
                for (x, &sx) in tx.iter().enumerate() {
                    out.set(n, c, y, x, t.at(n, c, pick(sy), pick(sx)));
                }
            }
        }
    }
    out
}

fn nearest_labels(l: &LabelMap, h: usize, w: usize) -> LabelMap {
    let ty = bilinear_taps(l.h, h);
    let tx = bilinear_taps(l.w, w);
    let pick = |(lo, hi, f): (usize, usize, f64)| if f < 0.5 { lo } else { hi };
    let mut data = Vec::with_capacity(l.n * h * w);
    for n in 0..l.n {
        for &sy in &ty {
            for &sx in &tx {
                data.push(l.at(n, pick(sy), pick(sx)));
            }
        }
    }
    LabelMap::from_vec(l.n, h, w, data).expect("label count")
}

impl Targets {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        check_sizes(samples)?;
        let labels = LabelMap::stack(&samples.iter().map(|s| &s.labels).collect::<Vec<_>>())?;
        let full = TargetMaps {
            depth: stack(&samples.iter().map(|s| &s.depth).collect::<Vec<_>>()),
            depth_mask: stack(&samples.iter().map(|s| &s.valid_mask).collect::<Vec<_>>()),
            normal: stack(&samples.iter().map(|s| &s.normal).collect::<Vec<_>>()),
            normal_mask: stack(&samples.iter().map(|s| &s.normal_mask).collect::<Vec<_>>()),
            contour: stack(&samples.iter().map(|s| &s.contour).collect::<Vec<_>>()),
            contour_mask: ignore_mask(&labels),
            labels,
        };
        let (h, w) = (full.depth.shape().h / 4, full.depth.shape().w / 4);
        let q_labels = nearest_labels(&full.labels, h, w);
        let quarter = TargetMaps {
            depth: nearest(&full.depth, h, w),
            depth_mask: nearest(&full.depth_mask, h, w),
            normal: nearest(&full.normal, h, w),
            normal_mask: nearest(&full.normal_mask, h, w),
            contour: contours_from_semantics(&q_labels),
            contour_mask: ignore_mask(&q_labels),
            labels: q_labels,
        };
        Ok(Self { full, quarter })
    }
}

/// Objective node plus the per-term nodes that fed it.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub terms: [Option<Var>; 6],
    pub weights: [f64; 6],
}

impl Objective {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let mut values = [0.0; 6];
        let mut active = [false; 6];
        for (i, t) in self.terms.iter().enumerate() {
            if let Some(v) = t {
                values[i] = tape.value(*v).item();
                active[i] = true;
            }
        }
        LossReport {
            values,
            weights: self.weights,
            active,
            total: tape.value(self.total).item(),
        }
    }
}

/// Builds the objective for `stage`. The parsing pre-training stage uses
/// the intermediate parsing loss alone (weight 1); the full stage uses the
/// intermediate terms when deep supervision is on and a final term per
/// configured final task.
pub fn build_objective(
    tape: &mut Tape,
    out: &Outputs,
    targets: &Targets,
    cfg: &NetworkConfig,
    stage: Stage,
    max_pos_weight: f64,
) -> Result<Objective> {
    let mut terms: [Option<Var>; 6] = [None; 6];
    let q = &targets.quarter;
    let f = &targets.full;
    let missing = |what: &str| Error::Config(format!("forward pass produced no {what} prediction"));
    if stage == Stage::ParsingPretrain {
        let z = out.intermediate.parsing().ok_or_else(|| missing("intermediate parsing"))?;
        let l = loss_parsing(tape, z, &q.labels, IGNORE_LABEL)?;
        terms[LossKind::IntermediateParsing.index()] = Some(l);
        let mut weights = [0.0; 6];
        weights[LossKind::IntermediateParsing.index()] = 1.0;
        let total = tape.weighted_sum(&[(l, 1.0)])?;
        return Ok(Objective { total, terms, weights });
    }
    if cfg.deep_supervision {
        for task in Task::ALL {
            let Some(pred) = out.intermediate.get(task) else { continue };
            let (kind, l) = match task {
                Task::Depth => (LossKind::IntermediateDepth, loss_depth(tape, pred, &q.depth, &q.depth_mask)?),
                Task::Parsing => (
                    LossKind::IntermediateParsing,
                    loss_parsing(tape, pred, &q.labels, IGNORE_LABEL)?,
                ),
                Task::Normal => (LossKind::Normal, loss_normal(tape, pred, &q.normal, &q.normal_mask)?),
                Task::Contour => {
                    let pw = contour_pos_weight(&q.contour, &q.contour_mask, max_pos_weight);
                    (LossKind::Contour, loss_contour(tape, pred, &q.contour, &q.contour_mask, pw)?)
                }
            };
            terms[kind.index()] = Some(l);
        }
    }
    for k in cfg.finals() {
        let pred = out.finals.get(k).ok_or_else(|| missing(k.name()))?;
        let (kind, l) = match k {
            FinalTask::Depth => (LossKind::FinalDepth, loss_depth(tape, pred, &f.depth, &f.depth_mask)?),
            FinalTask::Parsing => (LossKind::FinalParsing, loss_parsing(tape, pred, &f.labels, IGNORE_LABEL)?),
        };
        terms[kind.index()] = Some(l);
    }
    let weights = cfg.loss_weights.as_array();
    let weighted: Vec<(Var, f64)> = terms
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|v| (v, weights[i])))
        .collect();
    let total = tape.weighted_sum(&weighted)?;
    Ok(Objective { total, terms, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_weights_sum() {
        let v = [1.0; 6];
        let total = combine_losses(&v, &[true; 6], &LossWeights::default()).unwrap();
        assert!((total - 5.6).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_named() {
        let mut v = [1.0; 6];
        v[3] = f64::NAN;
        let err = combine_losses(&v, &[true; 6], &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("L4_contour"), "{err}");
        let mut active = [true; 6];
        active[3] = false;
        assert!(combine_losses(&v, &active, &LossWeights::default()).is_ok());
    }

    #[test]
    fn single_term_objective() {
        let mut v = [0.0; 6];
        v[4] = 2.5;
        let mut active = [false; 6];
        active[4] = true;
        assert_eq!(combine_losses(&v, &active, &LossWeights::default()).unwrap(), 2.5);
    }

    #[test]
    fn pos_weight_clamped() {
        let s = Shape4::new(1, 1, 1, 4);
        let mask = Tensor4::full(s, 1.0);
        let t = Tensor4::from_vec(s, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(contour_pos_weight(&t, &mask, 20.0), 3.0);
        assert_eq!(contour_pos_weight(&t, &mask, 2.0), 2.0);
        assert_eq!(contour_pos_weight(&Tensor4::zeros(s), &mask, 20.0), 1.0);
        let balanced = Tensor4::from_vec(s, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(contour_pos_weight(&balanced, &mask, 20.0), 1.0);
    }
}
