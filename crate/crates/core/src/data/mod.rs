//! Synthetic scenes, derived auxiliary targets, augmentation and the dataset file.

pub mod augment;
pub mod derive;
pub mod io;
pub mod synth;

pub use augment::{augment, augment_with, flip_horizontal, AugmentParams, CITYSCAPES_RATIOS, NYUD_RATIOS};
pub use derive::{contours_from_semantics, normals_from_depth};
pub use io::{read_dataset, read_dataset_file, write_dataset, write_dataset_file};
pub use synth::{generate_dataset, generate_scene, SceneConfig};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Row-major integer label maps, `n x h x w`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, fill: u8) -> Self {
        Self {
            n: 1,
            h,
            w,
            data: vec![fill; h * w],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::Config(format!(
                "label map {n}x{h}x{w} needs {} labels, got {}",
                n * h * w,
                data.len()
            )));
        }
        Ok(Self { n, h, w, data })
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    /// Concatenates maps of equal spatial size along the batch axis.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Usage("cannot stack zero label maps".into()))?;
        let mut data = Vec::with_capacity(maps.len() * first.h * first.w);
        let mut n = 0;
        for m in maps {
            if m.h != first.h || m.w != first.w {
                return Err(Error::Config("label maps differ in size".into()));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        Ok(Self {
            n,
            h: first.h,
            w: first.w,
            data,
        })
    }

    pub fn check_range(&self, num_classes: usize) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != IGNORE_LABEL && v as usize >= num_classes {
                let plane = self.h * self.w;
                return Err(Error::Data(format!(
                    "label {v} at (sample {}, row {}, col {}) is outside [0, {num_classes})",
                    i / plane,
                    (i % plane) / self.w,
                    i % self.w
                )));
            }
        }
        Ok(())
    }
}

/// One training example with its derived targets. All spatial maps share
/// the image's height and width; tensors have batch size 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1x3xHxW`, values in `[0, 1]`.
    pub image: Tensor4,
    /// `1x1xHxW` metres; 0 marks invalid depth.
    pub depth: Tensor4,
    pub labels: LabelMap,
    pub num_classes: usize,
    /// `1x3xHxW`, unit length where `normal_mask` is set.
    pub normal: Tensor4,
    pub normal_mask: Tensor4,
    /// `1x1xHxW` in `{0, 1}`.
    pub contour: Tensor4,
    /// `1x1xHxW`, `depth > 0`.
    pub valid_mask: Tensor4,
}

impl Sample {
    /// Builds a sample from its primary channels and derives everything else.
    pub fn from_parts(image: Tensor4, depth: Tensor4, labels: LabelMap, num_classes: usize) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::Config(format!("sample image must be 1x3xHxW, got {s}")));
        }
        if depth.shape() != Shape4::new(1, 1, s.h, s.w) || labels.h != s.h || labels.w != s.w || labels.n != 1 {
            return Err(Error::Config("sample depth/labels do not match the image size".into()));
        }
        labels.check_range(num_classes)?;
        let valid_mask = depth.map(|d| if d > 0.0 { 1.0 } else { 0.0 });
        let (normal, normal_mask) = normals_from_depth(&depth, &valid_mask);
        let contour = contours_from_semantics(&labels);
        Ok(Self {
            image,
            depth,
            labels,
            num_classes,
            normal,
            normal_mask,
            contour,
            valid_mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }
}
