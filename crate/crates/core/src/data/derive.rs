//! Auxiliary targets derived from depth and semantic labels.

use super::{LabelMap, IGNORE_LABEL};
use crate::tensor::{Shape4, Tensor4};

/// Surface normals of the depth map read as a height field `z(x, y)` with
/// unit pixel spacing: `n ∝ (-∂z/∂x, -∂z/∂y, 1)`. Central differences in the
/// interior, one-sided at borders. A normal is valid only when its pixel and
/// every pixel of its difference stencil carry valid depth; invalid normals
/// are zero.
///
/// Returns `(normals n x 3 x h x w, mask n x 1 x h x w)`.
pub fn normals_from_depth(depth: &Tensor4, valid: &Tensor4) -> (Tensor4, Tensor4) {
    let s = depth.shape();
    debug_assert_eq!(s.c, 1);
    let mut normals = Tensor4::zeros(s.with_channels(3));
    let mut mask = Tensor4::zeros(s);
    let stencil = |i: usize, len: usize| -> (usize, usize) {
        if len == 1 {
            (i, i)
        } else if i == 0 {
            (0, 1)
        } else if i == len - 1 {
            (len - 2, len - 1)
        } else {
            (i - 1, i + 1)
        }
    };
    for n in 0..s.n {
        let z = depth.plane(n, 0);
        let ok = valid.plane(n, 0);
        for y in 0..s.h {
            let (y0, y1) = stencil(y, s.h);
            for x in 0..s.w {
                let (x0, x1) = stencil(x, s.w);
                let idx = |yy: usize, xx: usize| yy * s.w + xx;
                let usable = [idx(y, x), idx(y, x0), idx(y, x1), idx(y0, x), idx(y1, x)]
                    .iter()
                    .all(|&i| ok[i] != 0.0);
                if !usable {
                    continue;
                }
                let dzdx = if x1 > x0 { (z[idx(y, x1)] - z[idx(y, x0)]) / (x1 - x0) as f64 } else { 0.0 };
                let dzdy = if y1 > y0 { (z[idx(y1, x)] - z[idx(y0, x)]) / (y1 - y0) as f64 } else { 0.0 };
                let norm = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
                normals.set(n, 0, y, x, -dzdx / norm);
                normals.set(n, 1, y, x, -dzdy / norm);
                normals.set(n, 2, y, x, 1.0 / norm);
                mask.set(n, 0, y, x, 1.0);
            }
        }
    }
    (normals, mask)
}

/// Binary boundary map: a pixel is on a contour when it and one of its
/// 4-neighbours carry different non-ignore labels. Boundaries are therefore
/// two pixels thick, one on each side.
pub fn contours_from_semantics(labels: &LabelMap) -> Tensor4 {
    let mut out = Tensor4::zeros(Shape4::new(labels.n, 1, labels.h, labels.w));
    for n in 0..labels.n {
        for y in 0..labels.h {
            for x in 0..labels.w {
                let here = labels.at(n, y, x);
                if here == IGNORE_LABEL {
                    continue;
                }
                let mut neighbours = [None; 4];
                if y > 0 {
                    neighbours[0] = Some(labels.at(n, y - 1, x));
                }
                if y + 1 < labels.h {
                    neighbours[1] = Some(labels.at(n, y + 1, x));
                }
                if x > 0 {
                    neighbours[2] = Some(labels.at(n, y, x - 1));
                }
                if x + 1 < labels.w {
                    neighbours[3] = Some(labels.at(n, y, x + 1));
                }
                let edge = neighbours
                    .iter()
                    .flatten()
                    .any(|&l| l != IGNORE_LABEL && l != here);
                if edge {
                    out.set(n, 0, y, x, 1.0);
                }
            }
        }
    }
    out
}
