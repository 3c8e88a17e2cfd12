use padnet::data::IGNORE_LABEL;
use padnet::loss::{loss_contour, loss_depth, loss_normal, loss_parsing, LossKind};
use padnet::{LabelMap, Shape4, Tape, Tensor4, Var};
use rand::Rng;

use super::{rng, uniform};

pub const SHAPE: Shape4 = Shape4 {
    n: 2,
    c: 1,
    h: 3,
    w: 4,
};
const CLASSES: usize = 4;

/// One loss family with a fixed random target.
pub struct Case {
    /// Channels of the prediction.
    pub channels: usize,
    /// A prediction the loss must score as (numerically) zero.
    pub perfect: Tensor4,
    /// Pixels excluded from the loss, as plane indices across the batch.
    pub masked: Vec<usize>,
    pub eval: Box<dyn Fn(&mut Tape, Var) -> Var>,
}

pub fn case(kind: LossKind, seed: u64) -> Case {
    let mut r = rng(seed);
    let plane = SHAPE.h * SHAPE.w;
    let total = SHAPE.n * plane;
    let masked: Vec<usize> = (0..total).filter(|i| i % 5 == 2).collect();
    let mut mask = Tensor4::full(SHAPE, 1.0);
    for &i in &masked {
        mask.data_mut()[i] = 0.0;
    }
    match kind {
        LossKind::IntermediateDepth | LossKind::FinalDepth => {
            let target = Tensor4::uniform(SHAPE, 0.5, 5.0, &mut r);
            Case {
                channels: 1,
                perfect: target.clone(),
                masked,
                eval: Box::new(move |t, v| loss_depth(t, v, &target, &mask).unwrap()),
            }
        }
        LossKind::Normal => {
            let raw = uniform(SHAPE.with_channels(3), &mut r);
            let mut target = raw.clone();
            for n in 0..SHAPE.n {
                for i in 0..plane {
                    let v: Vec<f64> = (0..3).map(|c| raw.plane(n, c)[i]).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for c in 0..3 {
                        target.plane_mut(n, c)[i] = v[c] / norm;
                    }
                }
            }
            // Any positive rescaling of the target is a perfect prediction.
            let perfect = target.map(|v| 3.7 * v);
            Case {
                channels: 3,
                perfect,
                masked,
                eval: Box::new(move |t, v| loss_normal(t, v, &target, &mask).unwrap()),
            }
        }
        LossKind::Contour => {
            let target = Tensor4::from_vec(SHAPE, (0..total).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect()).unwrap();
            let perfect = target.map(|y| if y > 0.5 { 40.0 } else { -40.0 });
            Case {
                channels: 1,
                perfect,
                masked,
                eval: Box::new(move |t, v| loss_contour(t, v, &target, &mask, 20.0).unwrap()),
            }
        }
        LossKind::IntermediateParsing | LossKind::FinalParsing => {
            let mut data: Vec<u8> = (0..total).map(|_| r.random_range(0..CLASSES as u8)).collect();
            for &i in &masked {
                data[i] = IGNORE_LABEL;
            }
            let labels = LabelMap::from_vec(SHAPE.n, SHAPE.h, SHAPE.w, data).unwrap();
            let mut perfect = Tensor4::full(SHAPE.with_channels(CLASSES), -40.0);
            for n in 0..SHAPE.n {
                for i in 0..plane {
                    let y = labels.data[n * plane + i];
                    if y != IGNORE_LABEL {
                        perfect.plane_mut(n, y as usize)[i] = 40.0;
                    }
                }
            }
            Case {
                channels: CLASSES,
                perfect,
                masked,
                eval: Box::new(move |t, v| loss_parsing(t, v, &labels, IGNORE_LABEL).unwrap()),
            }
        }
    }
}

pub fn value_and_grad(c: &Case, pred: &Tensor4) -> (f64, Tensor4) {
    let mut tape = Tape::new();
    let v = tape.param(pred.clone());
    let l = (c.eval)(&mut tape, v);
    let value = tape.value(l).item();
    let grad = tape.backward(l).unwrap().get(v).unwrap().clone();
    (value, grad)
}
