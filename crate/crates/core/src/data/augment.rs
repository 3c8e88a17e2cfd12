//! Scale / flip / crop augmentation.
//!
//! Depth is divided by the scale ratio so that an enlarged view reads as a
//! nearer scene. Derived maps are recomputed after the geometric transform.

use rand::Rng;

use super::{LabelMap, Sample, IGNORE_LABEL};
use crate::error::Result;
use crate::kernels::{bilinear_resize, bilinear_taps};
use crate::tensor::{Shape4, Tensor4};

/// Indoor scale set.
pub const NYUD_RATIOS: [f64; 3] = [1.0, 1.2, 1.5];
/// Outdoor scale set.
pub const CITYSCAPES_RATIOS: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.75];

/// A fully specified augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub ratio: f64,
    pub flip: bool,
    /// Offset of the canvas-sized window inside the rescaled image. For
    /// ratios below 1 it is the placement of the rescaled image inside the
    /// padded canvas instead.
    pub offset_y: usize,
    pub offset_x: usize,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            ratio: 1.0,
            flip: false,
            offset_y: 0,
            offset_x: 0,
        }
    }
}

/// Draws a ratio from `ratios`, a fair coin for the flip and a uniform crop.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R, ratios: &[f64]) -> Result<Sample> {
    let ratio = if ratios.is_empty() {
        1.0
    } else {
        ratios[rng.random_range(0..ratios.len())]
    };
    let flip = rng.random_bool(0.5);
    let (h, w) = (sample.height(), sample.width());
    let (sh, sw) = scaled_size(h, w, ratio);
    let slack_y = sh.abs_diff(h);
    let slack_x = sw.abs_diff(w);
    let params = AugmentParams {
        ratio,
        flip,
        offset_y: rng.random_range(0..=slack_y),
        offset_x: rng.random_range(0..=slack_x),
    };
    augment_with(sample, params)
}

fn scaled_size(h: usize, w: usize, ratio: f64) -> (usize, usize) {
    (
        ((h as f64 * ratio).round() as usize).max(1),
        ((w as f64 * ratio).round() as usize).max(1),
    )
}

/// Applies `params` to `sample`; the output keeps the input canvas size.
pub fn augment_with(sample: &Sample, params: AugmentParams) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let (sh, sw) = scaled_size(h, w, params.ratio);

    let image = bilinear_resize(&sample.image, sh, sw)?;
    let valid = bilinear_resize(&sample.valid_mask, sh, sw)?;
    let mut depth = bilinear_resize(&sample.depth, sh, sw)?;
    for (d, v) in depth.data_mut().iter_mut().zip(valid.data()) {
        // a resampled depth is trusted only when every tap it mixes was valid
        *d = if (v - 1.0).abs() < 1e-9 { *d / params.ratio } else { 0.0 };
    }
    let labels = resize_nearest(&sample.labels, sh, sw);

    let (mut image, mut depth, mut labels) = (
        place(&image, h, w, params, 0.0),
        place(&depth, h, w, params, 0.0),
        place_labels(&labels, h, w, params),
    );
    if params.flip {
        image = flip_horizontal(&image);
        depth = flip_horizontal(&depth);
        labels = flip_labels(&labels);
    }
    Sample::from_parts(image.round_to_f32(), depth.round_to_f32(), labels, sample.num_classes)
}

/// Nearest-neighbour resize on the same corner-aligned grid as the bilinear one.
fn resize_nearest(labels: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let ty = bilinear_taps(labels.h, out_h);
    let tx = bilinear_taps(labels.w, out_w);
    let pick = |(lo, hi, f): (usize, usize, f64)| if f < 0.5 { lo } else { hi };
    let mut out = LabelMap::new(out_h, out_w, 0);
    out.n = labels.n;
    out.data = vec![0; labels.n * out_h * out_w];
    for n in 0..labels.n {
        for (y, &sy) in ty.iter().enumerate() {
            for (x, &sx) in tx.iter().enumerate() {
                out.set(n, y, x, labels.at(n, pick(sy), pick(sx)));
            }
        }
    }
    out
}

/// Maps canvas coordinate to scaled-image coordinate, `None` outside it.
fn source(canvas: usize, offset: usize, scaled: usize, full: usize) -> Option<usize> {
    if scaled >= full {
        Some(canvas + offset)
    } else {
        canvas.checked_sub(offset).filter(|&s| s < scaled)
    }
}

fn place(t: &Tensor4, h: usize, w: usize, p: AugmentParams, fill: f64) -> Tensor4 {
    let s = t.shape();
    let mut out = Tensor4::full(Shape4::new(s.n, s.c, h, w), fill);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                let Some(sy) = source(y, p.offset_y, s.h, h) else { continue };
                for x in 0..w {
                    if let Some(sx) = source(x, p.offset_x, s.w, w) {
                        out.set(n, c, y, x, t.at(n, c, sy, sx));
                    }
                }
            }
        }
    }
    out
}

fn place_labels(l: &LabelMap, h: usize, w: usize, p: AugmentParams) -> LabelMap {
    let mut out = LabelMap::new(h, w, IGNORE_LABEL);
    out.n = l.n;
    out.data = vec![IGNORE_LABEL; l.n * h * w];
    for n in 0..l.n {
        for y in 0..h {
            let Some(sy) = source(y, p.offset_y, l.h, h) else { continue };
            for x in 0..w {
                if let Some(sx) = source(x, p.offset_x, l.w, w) {
                    out.set(n, y, x, l.at(n, sy, sx));
                }
            }
        }
    }
    out
}

/// Mirrors every plane left-to-right.
pub fn flip_horizontal(t: &Tensor4) -> Tensor4 {
    let s = t.shape();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    dst[y * s.w + x] = src[y * s.w + (s.w - 1 - x)];
                }
            }
        }
    }
    out
}

pub fn flip_labels(l: &LabelMap) -> LabelMap {
    let mut out = l.clone();
    for n in 0..l.n {
        for y in 0..l.h {
            for x in 0..l.w {
                out.set(n, y, x, l.at(n, y, l.w - 1 - x));
            }
        }
    }
    out
}
