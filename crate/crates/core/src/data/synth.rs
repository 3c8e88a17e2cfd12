//! Procedural scenes: a sloped ground plane plus occluding rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelMap, Sample};
use crate::error::{config_err, Result};
use crate::tensor::{Shape4, Tensor4};

/// Parameters of the scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Class 0 is the ground plane; objects draw from `1..num_classes`.
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Nearest depth an object may take, metres.
    pub depth_near: f64,
    /// Ground-plane depth at the top row, metres.
    pub plane_near: f64,
    /// Ground-plane depth at the bottom row, metres.
    pub depth_far: f64,
    /// Largest horizontal depth gradient of a sloped object, metres per pixel.
    pub camera_constant: f64,
    /// Fraction of depth pixels dropped to 0 (invalid).
    pub dropout: f64,
    /// Standard deviation of the additive image noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 5,
            min_objects: 1,
            max_objects: 4,
            depth_near: 1.0,
            plane_near: 4.0,
            depth_far: 8.0,
            camera_constant: 0.02,
            dropout: 0.02,
            noise: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(config_err(format!(
                "scene canvas {}x{} must be a positive multiple of 8",
                self.height, self.width
            )));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(config_err("scene.num_classes must lie in [2, 255]"));
        }
        if self.min_objects > self.max_objects {
            return Err(config_err("scene.min_objects exceeds scene.max_objects"));
        }
        if !(0.0 < self.depth_near && self.depth_near < self.plane_near && self.plane_near <= self.depth_far) {
            return Err(config_err(
                "scene depths must satisfy 0 < depth_near < plane_near <= depth_far",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err("scene.dropout must lie in [0, 1)"));
        }
        if !(self.noise >= 0.0 && self.camera_constant >= 0.0) {
            return Err(config_err("scene.noise and scene.camera_constant must be non-negative"));
        }
        Ok(())
    }

    /// Ground-plane depth of image row `y`; grows linearly with the row index.
    pub fn plane_depth(&self, y: usize) -> f64 {
        if self.height <= 1 {
            return self.plane_near;
        }
        self.plane_near + (self.depth_far - self.plane_near) * y as f64 / (self.height - 1) as f64
    }
}

/// Base colour of a class, spread around the hue circle.
fn palette(class: usize, num_classes: usize) -> [f64; 3] {
    let hue = class as f64 / num_classes as f64;
    let channel = |shift: f64| 0.5 + 0.4 * (std::f64::consts::TAU * (hue + shift)).cos();
    [channel(0.0), channel(1.0 / 3.0), channel(2.0 / 3.0)]
}

#[derive(Debug)]
struct Object {
    top: usize,
    left: usize,
    bottom: usize,
    right: usize,
    class: u8,
    base: f64,
    slope: f64,
}

impl Object {
    fn depth_at(&self, x: usize) -> f64 {
        self.base + self.slope * (x - self.left) as f64
    }
}

/// Deterministic scene for `seed`. Every value is exactly representable in
/// `f32` so the sample survives the dataset file unchanged.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let oh = rng.random_range((h / 8).max(1)..=(h / 2).max(1));
        let ow = rng.random_range((w / 8).max(1)..=(w / 2).max(1));
        let top = rng.random_range(0..=h - oh);
        let left = rng.random_range(0..=w - ow);
        let class = rng.random_range(1..cfg.num_classes) as u8;
        // the plane is nearest at the object's top row; keep a margin below it
        let ceiling = cfg.plane_depth(top) - 0.25;
        let slope = if rng.random_bool(0.5) {
            rng.random_range(-cfg.camera_constant..=cfg.camera_constant)
        } else {
            0.0
        };
        let span = slope.abs() * (ow - 1) as f64;
        let hi = (ceiling - span).max(cfg.depth_near + 1e-3);
        let near = rng.random_range(cfg.depth_near..=hi);
        let base = if slope < 0.0 { near + span } else { near };
        objects.push(Object {
            top,
            left,
            bottom: top + oh,
            right: left + ow,
            class,
            base,
            slope,
        });
    }

    let mut depth = Tensor4::zeros(Shape4::new(1, 1, h, w));
    let mut labels = LabelMap::new(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let mut d = cfg.plane_depth(y);
            let mut class = 0u8;
            for o in &objects {
                if (o.top..o.bottom).contains(&y) && (o.left..o.right).contains(&x) {
                    let od = o.depth_at(x);
                    if od < d {
                        d = od;
                        class = o.class;
                    }
                }
            }
            depth.set(0, 0, y, x, d as f32 as f64);
            labels.set(0, y, x, class);
        }
    }

    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| config_err(e.to_string()))?;
    let mut image = Tensor4::zeros(Shape4::new(1, 3, h, w));
    let range = cfg.depth_far - cfg.depth_near;
    for y in 0..h {
        for x in 0..w {
            let d = depth.at(0, 0, y, x);
            let shade = 1.0 - 0.6 * (d - cfg.depth_near) / range;
            let base = palette(labels.at(0, y, x) as usize, cfg.num_classes);
            for (c, b) in base.iter().enumerate() {
                let v = (b * shade + noise.sample(&mut rng)).clamp(0.0, 1.0);
                image.set(0, c, y, x, v as f32 as f64);
            }
        }
    }
    if cfg.dropout > 0.0 {
        for v in depth.data_mut() {
            if rng.random_bool(cfg.dropout) {
                *v = 0.0;
            }
        }
    }
    Sample::from_parts(image, depth, labels, cfg.num_classes)
}

/// `count` scenes with seeds `seed, seed + 1, ...`.
pub fn generate_dataset(seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<Sample>> {
    (0..count as u64).map(|i| generate_scene(seed.wrapping_add(i), cfg)).collect()
}
