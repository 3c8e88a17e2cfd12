//! Naive reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod distill;
pub mod losses;

use padnet::autograd::{Tape, Var};
use padnet::{ConvSpec, LabelMap, Result, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::uniform(shape, -1.0, 1.0, rng)
}

/// Direct seven-loop cross-correlation, weight `(out, in, kh, kw)`.
pub fn naive_conv(x: &Tensor4, w: &Tensor4, spec: ConvSpec) -> Tensor4 {
    let xs = x.shape();
    let ws = w.shape();
    let oh = spec.conv_out(xs.h, ws.h).unwrap();
    let ow = spec.conv_out(xs.w, ws.w).unwrap();
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(o, i, ky, kx) * x.at(n, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Depth metrics by explicit per-pixel loops:
/// `(rel, rms, log10, delta1, delta2, delta3)`, `None` without valid pixels.
pub fn naive_depth(pred: &[f64], gt: &[f64], mask: &[f64], rel_by_pred: bool) -> Option<[f64; 6]> {
    let mut n = 0.0;
    let mut out = [0.0; 6];
    for i in 0..pred.len() {
        if mask[i] == 0.0 || gt[i] <= 0.0 {
            continue;
        }
        let p = if pred[i] < 1e-3 { 1e-3 } else { pred[i] };
        let g = gt[i];
        n += 1.0;
        out[0] += (p - g).abs() / if rel_by_pred { p } else { g };
        out[1] += (p - g).powi(2);
        out[2] += (p.log10() - g.log10()).abs();
        let ratio = if p > g { p / g } else { g / p };
        for (k, t) in [1.25f64, 1.5625, 1.953125].iter().enumerate() {
            if ratio < *t {
                out[3 + k] += 1.0;
            }
        }
    }
    if n == 0.0 {
        return None;
    }
    for v in &mut out {
        *v /= n;
    }
    out[1] = out[1].sqrt();
    Some(out)
}

/// `(mean IoU, mean accuracy, pixel accuracy)` by counting pixels per class
/// directly, without a confusion matrix.
pub fn naive_parsing(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> Option<(f64, f64, f64)> {
    let kept: Vec<(u8, u8)> = pred.iter().zip(gt).filter(|(_, &g)| g != ignore).map(|(&p, &g)| (p, g)).collect();
    if kept.is_empty() {
        return None;
    }
    let (mut iou_sum, mut iou_n, mut acc_sum, mut acc_n) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..classes as u8 {
        let inter = kept.iter().filter(|&&(p, g)| p == c && g == c).count() as f64;
        let union = kept.iter().filter(|&&(p, g)| p == c || g == c).count() as f64;
        let in_gt = kept.iter().filter(|&&(_, g)| g == c).count() as f64;
        if union > 0.0 {
            iou_sum += inter / union;
            iou_n += 1.0;
        }
        if in_gt > 0.0 {
            acc_sum += inter / in_gt;
            acc_n += 1.0;
        }
    }
    let correct = kept.iter().filter(|(p, g)| p == g).count() as f64;
    Some((iou_sum / iou_n, acc_sum / acc_n, correct / kept.len() as f64))
}

pub fn row(values: &[f64]) -> Tensor4 {
    Tensor4::from_vec(Shape4::new(1, 1, 1, values.len()), values.to_vec()).unwrap()
}

pub fn labels(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
    LabelMap::from_vec(1, h, w, data).unwrap()
}

/// Largest relative discrepancy between the tape gradient of `f` at `x`
/// and a central difference with step `h`, scaled by the larger gradient norm.
pub fn fd_error(x: &Tensor4, h: f64, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v).unwrap();
    let grads = tape.backward(out).unwrap();
    let analytic = grads.get(v).unwrap().clone();
    let eval = |t: Tensor4| {
        let mut tape = Tape::new();
        let v = tape.param(t);
        let out = f(&mut tape, v).unwrap();
        tape.value(out).item()
    };
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = analytic.data()[i];
        diff = diff.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
    }
    diff / scale.max(1e-12)
}

/// Random projection to a scalar, so every output element gets a distinct
/// weight in the gradient check.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = uniform(tape.shape(y), &mut rng(seed));
    let c = tape.constant(r);
    let prod = tape.mul(y, c)?;
    Ok(tape.sum_all(prod))
}

pub fn random_labels(n: usize, classes: u8, ignore_every: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n)
        .map(|i| match ignore_every {
            Some(k) if i % k == 0 => 255,
            _ => rng.random_range(0..classes),
        })
        .collect()
}
